//! Empirical spatio-temporal GP: a multi-scale additive decomposition
//! f(x,t) = g(t) + r(x,t) + m(x,t) + l(x,t) + w of the RSL field into a
//! common temporal signal, regional and local space-time terms, a
//! site-scale linear trend, and white noise. Hyperparameters are set by
//! maximizing the marginal likelihood over the full multi-site dataset.

use nalgebra::{DMatrix, DVector};

use crate::data::Dataset;
use crate::engines::{maximize_with_budget, BoundedParam};
use crate::error::{Error, Result};
use crate::gp::{rate_op, FieldKind, PosteriorField};
use crate::kernels::{Kernel, MaternNu, Point};
use crate::linalg::{jittered_cholesky, mvn_logpdf_centered, symmetrize};

/// Names of the additive latent components, in model order.
pub const COMPONENT_NAMES: [&str; 4] = ["common", "regional", "local", "site"];

/// Hyperparameter bounds and structural settings of the spatio-temporal GP.
///
/// The eleven parameters, in order: common amplitude (m) and time scale (yr);
/// regional amplitude, time scale, spatial scale (deg); local amplitude, time
/// scale, spatial scale; site-trend slope scale (m/yr) and spatial scale;
/// white-noise amplitude (m).
#[derive(Debug, Clone)]
pub struct StGpSpec {
    pub bounds: Vec<BoundedParam>,
    /// Reference time for the site-scale linear trend; defaults to the mean
    /// observation age.
    pub t0: Option<f64>,
    /// Hard cap on the number of observations accepted by `fit_est_gp`.
    pub n_cap: usize,
}

impl Default for StGpSpec {
    fn default() -> Self {
        StGpSpec {
            bounds: vec![
                BoundedParam::log("amp_common", 1e-3, 100.0),
                BoundedParam::log("time_common", 500.0, 2e4),
                BoundedParam::log("amp_regional", 1e-3, 100.0),
                BoundedParam::log("time_regional", 500.0, 2e4),
                BoundedParam::log("space_regional", 2.0, 15.0),
                BoundedParam::log("amp_local", 1e-3, 100.0),
                BoundedParam::log("time_local", 500.0, 2e4),
                BoundedParam::log("space_local", 0.05, 0.5),
                BoundedParam::log("slope_site", 1e-6, 1e-2),
                BoundedParam::log("space_site", 0.05, 0.5),
                BoundedParam::log("amp_white", 1e-4, 1.0),
            ],
            t0: None,
            n_cap: 2000,
        }
    }
}

impl StGpSpec {
    pub fn validate(&self) -> Result<()> {
        if self.bounds.len() != 11 {
            return Err(Error::Config("spatio-temporal spec needs 11 bounded parameters".into()));
        }
        for b in &self.bounds {
            b.validate()?;
        }
        // scale separation: the regional spatial range must sit strictly
        // above everything the local and site terms can reach
        let regional_lower = self.bounds[4].lower;
        for idx in [7usize, 9] {
            if self.bounds[idx].upper >= regional_lower {
                return Err(Error::Config(format!(
                    "spatial bounds overlap: {} upper {} must stay below regional lower {}",
                    self.bounds[idx].name, self.bounds[idx].upper, regional_lower
                )));
            }
        }
        Ok(())
    }

    /// The four latent component kernels at `theta` (amplitudes enter
    /// squared), excluding white noise.
    pub fn components(&self, theta: &[f64], t0: f64) -> Result<Vec<(String, Kernel)>> {
        if theta.len() != 11 {
            return Err(Error::Argument(format!(
                "expected 11 hyperparameters, got {}",
                theta.len()
            )));
        }
        let m32 = |s2: f64, l: f64| Kernel::Matern { s2, l, nu: MaternNu::ThreeHalves };
        let sep = |temporal: Kernel, spatial: Kernel| Kernel::SeparableSpaceTime {
            temporal: Box::new(temporal),
            spatial: Box::new(spatial),
        };
        let common = m32(theta[0] * theta[0], theta[1]);
        let regional = sep(m32(theta[2] * theta[2], theta[3]), m32(1.0, theta[4]));
        let local = sep(m32(theta[5] * theta[5], theta[6]), m32(1.0, theta[7]));
        let site = sep(
            Kernel::DotProduct { s2_slope: theta[8] * theta[8], t0 },
            m32(1.0, theta[9]),
        );
        let out = vec![
            ("common".to_string(), common),
            ("regional".to_string(), regional),
            ("local".to_string(), local),
            ("site".to_string(), site),
        ];
        for (_, k) in &out {
            k.validate()?;
        }
        Ok(out)
    }

    /// The full covariance (components plus white noise) at `theta`.
    pub fn kernel(&self, theta: &[f64], t0: f64) -> Result<Kernel> {
        let mut parts: Vec<Kernel> =
            self.components(theta, t0)?.into_iter().map(|(_, k)| k).collect();
        parts.push(Kernel::WhiteNoise { s2: theta[10] * theta[10] });
        let k = Kernel::Sum(parts);
        k.validate()?;
        Ok(k)
    }
}

/// A fitted spatio-temporal GP, ready for field prediction and component
/// separation.
pub struct FittedStGp {
    pub theta: Vec<f64>,
    pub lml: f64,
    pub t0: f64,
    mean_const: f64,
    kernel: Kernel,
    components: Vec<(String, Kernel)>,
    points: Vec<Point>,
    y_adj: DVector<f64>,
    noise_var: Vec<f64>,
    /// NIGP variance added on top of rsl_sd², zero when ages are exact.
    pub inflation: Vec<f64>,
    /// NIGP refit iterations performed.
    pub iterations: usize,
}

impl std::fmt::Debug for FittedStGp {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("FittedStGp")
            .field("theta", &self.theta)
            .field("lml", &self.lml)
            .field("iterations", &self.iterations)
            .finish()
    }
}

fn data_points(d: &Dataset) -> Vec<Point> {
    d.observations
        .iter()
        .map(|o| Point::spatial(o.age_mean, o.latitude, o.longitude))
        .collect()
}

fn lml_inflated(
    kernel: &Kernel,
    mean_const: f64,
    d: &Dataset,
    pts: &[Point],
    inflation: &[f64],
) -> Result<f64> {
    let mut gram = kernel.gram(pts)?;
    for (i, o) in d.observations.iter().enumerate() {
        gram[(i, i)] += o.rsl_sd * o.rsl_sd + inflation[i];
    }
    let chol = jittered_cholesky(&gram)?;
    let resid = DVector::from_iterator(d.len(), d.rsl().iter().map(|&y| y - mean_const));
    Ok(mvn_logpdf_centered(&chol, &resid))
}

fn fit_with_inflation(
    d: &Dataset,
    spec: &StGpSpec,
    t0: f64,
    restarts: usize,
    seed: u64,
    inflation: &[f64],
    iterations: usize,
) -> Result<FittedStGp> {
    let pts = data_points(d);
    let rsl = d.rsl();
    let mean_const = rsl.iter().sum::<f64>() / rsl.len() as f64;
    let objective = |theta: &[f64]| -> f64 {
        match spec.kernel(theta, t0) {
            Ok(k) => lml_inflated(&k, mean_const, d, &pts, inflation).unwrap_or(f64::NEG_INFINITY),
            Err(_) => f64::NEG_INFINITY,
        }
    };
    let (theta, lml) = maximize_with_budget(&objective, &spec.bounds, restarts, seed, 250)?;
    let kernel = spec.kernel(&theta, t0)?;
    let components = spec.components(&theta, t0)?;
    Ok(FittedStGp {
        theta,
        lml,
        t0,
        mean_const,
        kernel,
        components,
        points: pts,
        y_adj: DVector::from_iterator(d.len(), rsl.iter().map(|&y| y - mean_const)),
        noise_var: d
            .observations
            .iter()
            .zip(inflation)
            .map(|(o, &v)| o.rsl_sd * o.rsl_sd + v)
            .collect(),
        inflation: inflation.to_vec(),
        iterations,
    })
}

/// Empirical-Bayes fit of the spatio-temporal GP to a multi-site dataset.
/// Age uncertainty is handled by iterating NIGP noise inflation to a fixed
/// point, exactly as in the temporal model.
pub fn fit_est_gp(d: &Dataset, spec: &StGpSpec, restarts: usize, seed: u64) -> Result<FittedStGp> {
    spec.validate()?;
    if d.site_ids().len() < 2 {
        return Err(Error::Validation(
            "the spatio-temporal GP needs at least two sites".into(),
        ));
    }
    if d.len() > spec.n_cap {
        return Err(Error::Validation(format!(
            "dataset has {} observations, above the {} cap: dense GP fitting \
             scales as O(n³) in both time and the factorized memory",
            d.len(),
            spec.n_cap
        )));
    }
    let ages = d.ages();
    let t0 = spec.t0.unwrap_or(ages.iter().sum::<f64>() / ages.len() as f64);

    let mut inflation = vec![0.0; d.len()];
    let mut fit = fit_with_inflation(d, spec, t0, restarts, seed, &inflation, 0)?;
    if d.observations.iter().all(|o| o.age_sd == 0.0) {
        return Ok(fit);
    }
    for iter in 1..=10 {
        let grad = fit.gradient_at_data()?;
        let new: Vec<f64> = d
            .observations
            .iter()
            .zip(&grad)
            .map(|(o, g)| o.age_sd * o.age_sd * g * g)
            .collect();
        let rel = new
            .iter()
            .zip(&inflation)
            .map(|(a, b)| (a - b).abs() / a.abs().max(b.abs()).max(1e-12))
            .fold(0.0, f64::max);
        inflation = new;
        fit = fit_with_inflation(d, spec, t0, restarts, seed, &inflation, iter)?;
        if rel < 1e-3 {
            break;
        }
    }
    Ok(fit)
}

impl FittedStGp {
    fn data_cholesky(&self) -> Result<nalgebra::Cholesky<f64, nalgebra::Dyn>> {
        let mut gram = self.kernel.gram(&self.points)?;
        for (i, v) in self.noise_var.iter().enumerate() {
            gram[(i, i)] += v;
        }
        jittered_cholesky(&gram)
    }

    /// Time-slope of the posterior mean at each observation point.
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
            let mut g = 0.0;
            for (j, q) in self.points.iter().enumerate() {
                g += self.kernel.eval_dtime(p, q, fd_step)? * alpha[j];
            }
            grad.push(g);
        }
        Ok(grad)
    }

    /// White-noise variance at the fitted hyperparameters.
    pub fn white_variance(&self) -> f64 {
        self.theta[10] * self.theta[10]
    }
}

/// Posterior of the latent (noise-free) field g+r+m+l on a space-time grid.
/// Works at locations with no data: information flows through the spatial
/// kernels.
pub fn predict_field(model: &FittedStGp, grid: &[Point]) -> Result<PosteriorField> {
    let chol = model.data_cholesky()?;
    let alpha = chol.solve(&model.y_adj);
    let latent = model
        .kernel
        .strip_white()
        .ok_or_else(|| Error::Config("model kernel has no latent part".into()))?;
    let k_gd = latent.cross(grid, &model.points)?;
    let k_gg = latent.cross(grid, grid)?;
    let w = chol.solve(&k_gd.transpose());
    let mean = DVector::from_element(grid.len(), model.mean_const) + &k_gd * alpha;
    let mut cov = k_gg - k_gd * w;
    symmetrize(&mut cov);
    PosteriorField::new(grid.to_vec(), mean, cov, FieldKind::Level)
}

/// Separate the posterior field into its additive components by conditioning
/// each term with its own cross-covariance. Component means sum to the total
/// posterior mean; the constant data mean is carried by the common term.
pub fn decompose(model: &FittedStGp, grid: &[Point]) -> Result<Vec<(String, PosteriorField)>> {
    let chol = model.data_cholesky()?;
    let alpha = chol.solve(&model.y_adj);
    let mut out = Vec::with_capacity(model.components.len());
    for (name, kernel) in &model.components {
        let k_gd = kernel.cross(grid, &model.points)?;
        let k_gg = kernel.cross(grid, grid)?;
        let w = chol.solve(&k_gd.transpose());
        let mut mean = &k_gd * &alpha;
        if name == "common" {
            mean.add_scalar_mut(model.mean_const);
        }
        let mut cov = k_gg - k_gd * w;
        symmetrize(&mut cov);
        out.push((
            name.clone(),
            PosteriorField::new(grid.to_vec(), mean, cov, FieldKind::Component)?,
        ));
    }
    Ok(out)
}

/// Average-rate transform of a level field, applied per grid location with
/// full covariance propagation across locations.
pub fn rate_field(field: &PosteriorField, window: f64) -> Result<PosteriorField> {
    if field.kind != FieldKind::Level {
        return Err(Error::Argument("rate transform expects a level field".into()));
    }
    // group grid indices by location, preserving encounter order
    let mut groups: Vec<(Option<(f64, f64)>, Vec<usize>)> = Vec::new();
    for (i, p) in field.grid.iter().enumerate() {
        match groups.iter_mut().find(|(loc, _)| *loc == p.location) {
            Some((_, idx)) => idx.push(i),
            None => groups.push((p.location, vec![i])),
        }
    }
    let n = field.grid.len();
    let mut op = DMatrix::zeros(n, n);
    for (_, idx) in &groups {
        let times: Vec<f64> = idx.iter().map(|&i| field.grid[i].time).collect();
        let block = rate_op(&times, window)?;
        for (a, &i) in idx.iter().enumerate() {
            for (b, &j) in idx.iter().enumerate() {
                op[(i, j)] = block[(a, b)];
            }
        }
    }
    let mean = &op * &field.mean;
    let mut cov = &op * &field.covariance * op.transpose();
    symmetrize(&mut cov);
    PosteriorField::new(field.grid.clone(), mean, cov, FieldKind::Rate)
}
