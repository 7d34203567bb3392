//! Empirical-Bayes temporal Gaussian-process regression, with noisy-input
//! (NIGP) handling of age uncertainty and derived rate curves.
//!
//! Hyperparameters are point-estimated by maximizing the marginal likelihood;
//! prediction is the standard Gaussian conditional, always excluding
//! white-noise components so the returned field is the latent, noise-free
//! process.

use nalgebra::{DMatrix, DVector};

use crate::data::Dataset;
use crate::engines::{maximize_with_budget, BoundedParam};
use crate::error::{Error, Result};
use crate::kernels::{Kernel, MaternNu, Point};
use crate::linalg::{jittered_cholesky, mvn_logpdf_centered, symmetrize};
use crate::trend::{fit_linear, FitMethod};

/// Parametric mean subtracted before GP regression and added back on
/// prediction.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MeanFn {
    Zero,
    /// Dataset mean.
    Constant,
    /// Ordinary least-squares line.
    Linear,
}

/// A GP model family: a mean choice plus a kernel-valued function of the
/// hyperparameter vector, with box bounds for the optimizer.
pub struct GpModelSpec {
    pub mean: MeanFn,
    pub bounds: Vec<BoundedParam>,
    builder: Box<dyn Fn(&[f64]) -> Kernel + Send + Sync>,
}

impl GpModelSpec {
    pub fn new(
        mean: MeanFn,
        bounds: Vec<BoundedParam>,
        builder: impl Fn(&[f64]) -> Kernel + Send + Sync + 'static,
    ) -> Self {
        GpModelSpec { mean, bounds, builder: Box::new(builder) }
    }

    /// Instantiate the kernel at `theta`, checking dimension and parameter
    /// validity.
    pub fn kernel(&self, theta: &[f64]) -> Result<Kernel> {
        if theta.len() != self.bounds.len() {
            return Err(Error::Argument(format!(
                "expected {} hyperparameters, got {}",
                self.bounds.len(),
                theta.len()
            )));
        }
        let k = (self.builder)(theta);
        k.validate()?;
        Ok(k)
    }

    /// Default two-scale temporal model: zero mean after subtracting the
    /// dataset mean, low- plus medium-frequency Matérn(3/2) components and a
    /// white-noise floor. θ = [amp_low, len_low, amp_med, len_med, amp_white]
    /// with amplitudes in meters and length scales in years.
    pub fn default_et() -> Self {
        let bounds = vec![
            BoundedParam::log("amp_low", 1e-3, 100.0),
            BoundedParam::log("len_low", 1e3, 3e4),
            BoundedParam::log("amp_med", 1e-3, 100.0),
            BoundedParam::log("len_med", 50.0, 1e3),
            BoundedParam::log("amp_white", 1e-4, 1.0),
        ];
        GpModelSpec::new(MeanFn::Constant, bounds, |t| {
            Kernel::Sum(vec![
                Kernel::Matern { s2: t[0] * t[0], l: t[1], nu: MaternNu::ThreeHalves },
                Kernel::Matern { s2: t[2] * t[2], l: t[3], nu: MaternNu::ThreeHalves },
                Kernel::WhiteNoise { s2: t[4] * t[4] },
            ])
        })
    }
}

impl std::fmt::Debug for GpModelSpec {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("GpModelSpec")
            .field("mean", &self.mean)
            .field("bounds", &self.bounds)
            .finish()
    }
}

/// What a posterior field's values measure.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FieldKind {
    /// RSL, meters.
    Level,
    /// Rate of RSL change, m/yr.
    Rate,
    /// One additive component of a decomposed field.
    Component,
}

/// Joint Gaussian posterior over a prediction grid.
#[derive(Debug, Clone)]
pub struct PosteriorField {
    pub grid: Vec<Point>,
    pub mean: DVector<f64>,
    pub covariance: DMatrix<f64>,
    pub kind: FieldKind,
}

impl PosteriorField {
    pub fn new(
        grid: Vec<Point>,
        mean: DVector<f64>,
        covariance: DMatrix<f64>,
        kind: FieldKind,
    ) -> Result<Self> {
        let n = grid.len();
        if mean.len() != n || covariance.nrows() != n || covariance.ncols() != n {
            return Err(Error::Argument("field dimensions disagree".into()));
        }
        // times must strictly increase within each site
        for (i, p) in grid.iter().enumerate() {
            if let Some(prev) = grid[..i].iter().rev().find(|q| q.location == p.location) {
                if p.time <= prev.time {
                    return Err(Error::Validation(
                        "prediction grid times must strictly increase per site".into(),
                    ));
                }
            }
        }
        Ok(PosteriorField { grid, mean, covariance, kind })
    }

    /// Pointwise posterior standard deviations.
    pub fn sd(&self) -> Vec<f64> {
        self.covariance.diagonal().iter().map(|v| v.max(0.0).sqrt()).collect()
    }

    pub fn times(&self) -> Vec<f64> {
        self.grid.iter().map(|p| p.time).collect()
    }
}

fn mean_coefficients(d: &Dataset, mean: MeanFn) -> Result<(f64, f64)> {
    match mean {
        MeanFn::Zero => Ok((0.0, 0.0)),
        MeanFn::Constant => {
            let rsl = d.rsl();
            Ok((rsl.iter().sum::<f64>() / rsl.len() as f64, 0.0))
        }
        MeanFn::Linear => {
            let fit = fit_linear(d, FitMethod::Ols, None)?;
            Ok((fit.intercept, fit.slope))
        }
    }
}

fn data_points(d: &Dataset) -> Vec<Point> {
    d.observations.iter().map(|o| Point::temporal(o.age_mean)).collect()
}

fn adjusted_obs(d: &Dataset, coef: (f64, f64)) -> DVector<f64> {
    DVector::from_iterator(
        d.len(),
        d.observations.iter().map(|o| o.rsl_mean - coef.0 - coef.1 * o.age_mean),
    )
}

fn lml_inflated(
    kernel: &Kernel,
    coef: (f64, f64),
    d: &Dataset,
    inflation: &[f64],
) -> Result<f64> {
    let pts = data_points(d);
    let mut gram = kernel.gram(&pts)?;
    for (i, o) in d.observations.iter().enumerate() {
        gram[(i, i)] += o.rsl_sd * o.rsl_sd + inflation[i];
    }
    let chol = jittered_cholesky(&gram)?;
    Ok(mvn_logpdf_centered(&chol, &adjusted_obs(d, coef)))
}

/// Log marginal likelihood of the observations under `spec` at `theta`:
/// −½ỹᵀ(K+Σ)⁻¹ỹ − ½log|K+Σ| − (n/2)log 2π with Σ = diag(rsl_sd²).
pub fn log_marginal_likelihood(spec: &GpModelSpec, theta: &[f64], d: &Dataset) -> Result<f64> {
    let kernel = spec.kernel(theta)?;
    let coef = mean_coefficients(d, spec.mean)?;
    lml_inflated(&kernel, coef, d, &vec![0.0; d.len()])
}

/// A GP with point-estimated hyperparameters, ready for prediction.
pub struct FittedGp {
    pub theta: Vec<f64>,
    /// Log marginal likelihood at `theta` (with inflation, for NIGP fits).
    pub lml: f64,
    pub mean: MeanFn,
    mean_coef: (f64, f64),
    kernel: Kernel,
    points: Vec<Point>,
    y_adj: DVector<f64>,
    /// Per-datum observation variance, rsl_sd² plus any NIGP inflation.
    noise_var: Vec<f64>,
    /// NIGP variance added on top of rsl_sd², zero for plain fits.
    pub inflation: Vec<f64>,
    /// NIGP refit iterations performed (0 for plain fits).
    pub iterations: usize,
}

impl std::fmt::Debug for FittedGp {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("FittedGp")
            .field("theta", &self.theta)
            .field("lml", &self.lml)
            .field("iterations", &self.iterations)
            .finish()
    }
}

fn require_single_site(d: &Dataset) -> Result<()> {
    if d.site_ids().len() != 1 {
        return Err(Error::Validation(
            "temporal GP fits take a single-site dataset; split by site first".into(),
        ));
    }
    Ok(())
}

fn fit_with_inflation(
    d: &Dataset,
    spec: &GpModelSpec,
    restarts: usize,
    seed: u64,
    inflation: &[f64],
    iterations: usize,
) -> Result<FittedGp> {
    let coef = mean_coefficients(d, spec.mean)?;
    let objective = |theta: &[f64]| -> f64 {
        match spec.kernel(theta) {
            Ok(k) => lml_inflated(&k, coef, d, inflation).unwrap_or(f64::NEG_INFINITY),
            Err(_) => f64::NEG_INFINITY,
        }
    };
    let (theta, lml) = maximize_with_budget(&objective, &spec.bounds, restarts, seed, 250)?;
    let kernel = spec.kernel(&theta)?;
    let noise_var: Vec<f64> = d
        .observations
        .iter()
        .zip(inflation)
        .map(|(o, &v)| o.rsl_sd * o.rsl_sd + v)
        .collect();
    Ok(FittedGp {
        theta,
        lml,
        mean: spec.mean,
        mean_coef: coef,
        kernel,
        points: data_points(d),
        y_adj: adjusted_obs(d, coef),
        noise_var,
        inflation: inflation.to_vec(),
        iterations,
    })
}

/// Maximum-marginal-likelihood fit of a temporal GP to a single-site dataset.
pub fn fit_et_gp(d: &Dataset, spec: &GpModelSpec, restarts: usize, seed: u64) -> Result<FittedGp> {
    require_single_site(d)?;
    fit_with_inflation(d, spec, restarts, seed, &vec![0.0; d.len()], 0)
}

/// Noisy-input GP fit: age uncertainty is recast as extra observation noise
/// rsl_sd² + age_sd²·E[(∂f/∂t)²] from a first-order expansion around the
/// posterior mean, iterating fit and inflation to a fixed point. The slope
/// second moment (squared posterior-mean gradient plus gradient variance)
/// is used rather than the squared mean gradient alone: a fit that has
/// interpolated noise has a vanishing mean gradient at the wiggle extrema
/// exactly where the slope is least certain, and squaring the mean alone
/// locks those points into near-zero inflation.
pub fn fit_nigp(
    d: &Dataset,
    spec: &GpModelSpec,
    restarts: usize,
    seed: u64,
    max_iters: usize,
) -> Result<FittedGp> {
    require_single_site(d)?;
    let mut inflation = vec![0.0; d.len()];
    let mut fit = fit_with_inflation(d, spec, restarts, seed, &inflation, 0)?;
    if d.observations.iter().all(|o| o.age_sd == 0.0) {
        return Ok(fit);
    }
    for iter in 1..=max_iters.max(1) {
        let m2 = fit.slope_second_moment_at_data()?;
        let new: Vec<f64> = d
            .observations
            .iter()
            .zip(&m2)
            .map(|(o, g2)| o.age_sd * o.age_sd * g2)
            .collect();
        let rel = new
            .iter()
            .zip(&inflation)
            .map(|(a, b)| (a - b).abs() / a.abs().max(b.abs()).max(1e-12))
            .fold(0.0, f64::max);
        inflation = new;
        fit = fit_with_inflation(d, spec, restarts, seed, &inflation, iter)?;
        if rel < 1e-3 {
            break;
        }
    }
    Ok(fit)
}

impl FittedGp {
    fn data_cholesky(&self) -> Result<nalgebra::Cholesky<f64, nalgebra::Dyn>> {
        let mut gram = self.kernel.gram(&self.points)?;
        for (i, v) in self.noise_var.iter().enumerate() {
            gram[(i, i)] += v;
        }
        jittered_cholesky(&gram)
    }

    fn prior_mean_at(&self, t: f64) -> f64 {
        self.mean_coef.0 + self.mean_coef.1 * t
    }

    /// Posterior of the latent (noise-free) process on a strictly increasing
    /// time grid.
    pub fn predict(&self, grid: &[f64]) -> Result<PosteriorField> {
        let grid_pts: Vec<Point> = grid.iter().map(|&t| Point::temporal(t)).collect();
        let chol = self.data_cholesky()?;
        let alpha = chol.solve(&self.y_adj);

        let prior_mean =
            DVector::from_iterator(grid.len(), grid.iter().map(|&t| self.prior_mean_at(t)));
        let (mean, mut cov) = match self.kernel.strip_white() {
            None => (prior_mean, DMatrix::zeros(grid.len(), grid.len())),
            Some(latent) => {
                let k_gd = latent.cross(&grid_pts, &self.points)?;
                let k_gg = latent.cross(&grid_pts, &grid_pts)?;
                let w = chol.solve(&k_gd.transpose());
                (prior_mean + &k_gd * alpha, k_gg - k_gd * w)
            }
        };
        symmetrize(&mut cov);
        PosteriorField::new(grid_pts, mean, cov, FieldKind::Level)
    }

    /// Slope of the posterior mean at each observation age.
    pub fn gradient_at_data(&self) -> Result<Vec<f64>> {
        let chol = self.data_cholesky()?;
        let alpha = chol.solve(&self.y_adj);
        let span = self
            .points
            .iter()
            .map(|p| p.time)
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), t| (lo.min(t), hi.max(t)));
        let fd_step = ((span.1 - span.0) / self.points.len() as f64 / 10.0).max(1e-6);
        let mut grad = Vec::with_capacity(self.points.len());
        for p in &self.points {
            let mut g = self.mean_coef.1;
            for (j, q) in self.points.iter().enumerate() {
                g += self.kernel.eval_dtime(p, q, fd_step)? * alpha[j];
            }
            grad.push(g);
        }
        Ok(grad)
    }

    /// Posterior second moment of the latent slope at each datum: the
    /// squared posterior-mean gradient plus the posterior variance of the
    /// gradient (zero when the kernel is pure white noise).
    pub fn slope_second_moment_at_data(&self) -> Result<Vec<f64>> {
        let grad = self.gradient_at_data()?;
        let latent = match self.kernel.strip_white() {
            Some(k) => k,
            None => return Ok(grad.iter().map(|g| g * g).collect()),
        };
        let chol = self.data_cholesky()?;
        let span = self
            .points
            .iter()
            .map(|p| p.time)
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), t| (lo.min(t), hi.max(t)));
        let fd_step = ((span.1 - span.0) / self.points.len() as f64 / 10.0).max(1e-6);
        let mut out = Vec::with_capacity(self.points.len());
        for (i, p) in self.points.iter().enumerate() {
            let kp = DVector::from_iterator(
                self.points.len(),
                self.points
                    .iter()
                    .map(|q| latent.eval_dtime(p, q, fd_step))
                    .collect::<Result<Vec<f64>>>()?,
            );
            // ∂²k/∂s∂t on the diagonal, by differencing the analytic
            // first derivative in the second argument
            let shift = |dt: f64| Point { time: p.time + dt, ..*p };
            let d2 = (latent.eval_dtime(p, &shift(fd_step), fd_step)?
                - latent.eval_dtime(p, &shift(-fd_step), fd_step)?)
                / (2.0 * fd_step);
            let var = (d2 - kp.dot(&chol.solve(&kp))).max(0.0);
            out.push(grad[i] * grad[i] + var);
        }
        Ok(out)
    }
}

/// Average-rate transform of a level field on a uniform grid: centered
/// difference over `window` on interior points, one-sided over the full
/// window at the edges.
pub fn rate_transform(field: &PosteriorField, window: f64) -> Result<PosteriorField> {
    if field.kind != FieldKind::Level {
        return Err(Error::Argument("rate transform expects a level field".into()));
    }
    let op = rate_op(&field.times(), window)?;
    let mean = &op * &field.mean;
    let mut cov = &op * &field.covariance * op.transpose();
    symmetrize(&mut cov);
    PosteriorField::new(field.grid.clone(), mean, cov, FieldKind::Rate)
}

/// The differencing matrix behind [`rate_transform`], mapping levels on a
/// uniform time grid to average rates over `window`.
pub(crate) fn rate_op(t: &[f64], window: f64) -> Result<DMatrix<f64>> {
    let n = t.len();
    if n < 2 {
        return Err(Error::Argument("rate transform needs at least two grid points".into()));
    }
    let h = t[1] - t[0];
    for w in t.windows(2) {
        if ((w[1] - w[0]) - h).abs() > 1e-6 * h {
            return Err(Error::Argument("rate transform needs a uniform time grid".into()));
        }
    }
    if window < h {
        return Err(Error::Argument("window must be at least the grid spacing".into()));
    }
    let steps = window / h;
    let k = steps.round() as usize;
    if (steps - k as f64).abs() > 1e-6 || k % 2 != 0 {
        return Err(Error::Argument(
            "window must be an even multiple of the grid spacing".into(),
        ));
    }
    if k >= n {
        return Err(Error::Argument("window exceeds the grid extent".into()));
    }

    let mut op = DMatrix::zeros(n, n);
    let half = k / 2;
    for i in 0..n {
        if i >= half && i + half < n {
            op[(i, i + half)] = 1.0 / window;
            op[(i, i - half)] = -1.0 / window;
        } else if i + k < n {
            op[(i, i + k)] = 1.0 / window;
            op[(i, i)] = -1.0 / window;
        } else {
            op[(i, i)] = 1.0 / window;
            op[(i, i - k)] = -1.0 / window;
        }
    }
    Ok(op)
}
