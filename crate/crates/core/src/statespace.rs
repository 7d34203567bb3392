//! Linear-Gaussian state-space machinery for tide-gauge-era reconstruction:
//! a Kalman filter with missing observations, a three-pass smoother
//! (forward filter + backward information filter + combination), likelihood-
//! weighted multi-model averaging, and GMSL integration of melt-rate states.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::kernels::Fingerprint;

/// Per-step observation vector; `None` marks a missing entry whose H row and
/// R row/column are deleted at that step.
pub type StepObs = Vec<Option<f64>>;

/// A time-invariant linear-Gaussian state-space model
/// x_{k+1} = Φ x_k + B u_k + w,  z_k = H x_k + v,
/// with w ~ N(0, Q), v ~ N(0, R). The state is laid out as
/// [local RSLs at sites; melt/global rates].
#[derive(Debug, Clone)]
pub struct StateSpaceModel {
    pub phi: DMatrix<f64>,
    pub b: DMatrix<f64>,
    /// Control inputs per step (GIA rates and dynamic-sea-level increments);
    /// empty means zero controls throughout.
    pub controls: Vec<DVector<f64>>,
    pub q: DMatrix<f64>,
    pub h: DMatrix<f64>,
    pub r: DMatrix<f64>,
    pub x0: DVector<f64>,
    pub p0: DMatrix<f64>,
}

fn check_sym_psd(m: &DMatrix<f64>, name: &str) -> Result<()> {
    if m.nrows() != m.ncols() {
        return Err(Error::Config(format!("{name} must be square")));
    }
    let n = m.nrows();
    for i in 0..n {
        for j in 0..n {
            if (m[(i, j)] - m[(j, i)]).abs() > 1e-10 * (1.0 + m[(i, i)].abs() + m[(j, j)].abs()) {
                return Err(Error::Config(format!("{name} must be symmetric")));
            }
        }
    }
    let min_eig = m
        .clone()
        .symmetric_eigen()
        .eigenvalues
        .iter()
        .cloned()
        .fold(f64::INFINITY, f64::min);
    let scale = m.diagonal().iter().map(|v| v.abs()).fold(0.0, f64::max).max(1.0);
    if min_eig < -1e-9 * scale {
        return Err(Error::Config(format!("{name} must be positive semidefinite")));
    }
    Ok(())
}

impl StateSpaceModel {
    pub fn dim(&self) -> usize {
        self.phi.nrows()
    }

    pub fn obs_dim(&self) -> usize {
        self.h.nrows()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.dim();
        if self.phi.ncols() != n {
            return Err(Error::Config("transition matrix must be square".into()));
        }
        if self.b.nrows() != n {
            return Err(Error::Config("control mapping rows must match the state dimension".into()));
        }
        for (k, u) in self.controls.iter().enumerate() {
            if u.len() != self.b.ncols() {
                return Err(Error::Config(format!(
                    "control input at step {k} has length {} but B has {} columns",
                    u.len(),
                    self.b.ncols()
                )));
            }
        }
        if self.h.ncols() != n || self.x0.len() != n {
            return Err(Error::Config("observation matrix and x0 must match the state dimension".into()));
        }
        if self.r.nrows() != self.h.nrows() {
            return Err(Error::Config("R must match the observation dimension".into()));
        }
        check_sym_psd(&self.q, "Q")?;
        check_sym_psd(&self.r, "R")?;
        check_sym_psd(&self.p0, "P0")?;
        if self.p0.nrows() != n {
            return Err(Error::Config("P0 must match the state dimension".into()));
        }
        Ok(())
    }

    fn control(&self, k: usize) -> DVector<f64> {
        self.controls
            .get(k)
            .map(|u| &self.b * u)
            .unwrap_or_else(|| DVector::zeros(self.dim()))
    }

    /// Observation matrix, noise covariance, and data vector at step `k`
    /// with missing entries row-deleted; `None` when nothing is observed.
    fn measurement(&self, obs_k: &StepObs) -> Result<Option<(DMatrix<f64>, DMatrix<f64>, DVector<f64>)>> {
        if obs_k.len() != self.obs_dim() {
            return Err(Error::Argument(format!(
                "observation vector has length {}, expected {}",
                obs_k.len(),
                self.obs_dim()
            )));
        }
        let present: Vec<usize> =
            obs_k.iter().enumerate().filter_map(|(i, v)| v.map(|_| i)).collect();
        if present.is_empty() {
            return Ok(None);
        }
        let h = DMatrix::from_fn(present.len(), self.dim(), |i, j| self.h[(present[i], j)]);
        let r = DMatrix::from_fn(present.len(), present.len(), |i, j| {
            self.r[(present[i], present[j])]
        });
        let z = DVector::from_iterator(present.len(), present.iter().map(|&i| obs_k[i].unwrap()));
        Ok(Some((h, r, z)))
    }
}

/// Forward-pass output: one-step predictions, filtered posteriors, and the
/// accumulated Gaussian innovation log-likelihood.
#[derive(Debug, Clone)]
pub struct FilterResult {
    pub predicted_means: Vec<DVector<f64>>,
    pub predicted_covs: Vec<DMatrix<f64>>,
    pub means: Vec<DVector<f64>>,
    pub covs: Vec<DMatrix<f64>>,
    pub loglik: f64,
}

/// Smoothed posterior per step, with multi-model weights when applicable.
#[derive(Debug, Clone)]
pub struct SmootherResult {
    pub means: Vec<DVector<f64>>,
    pub covs: Vec<DMatrix<f64>>,
    /// Normalized per-model likelihood weights; `[1.0]` for one model.
    pub weights: Vec<f64>,
    pub loglik: f64,
}

fn sym(mut m: DMatrix<f64>) -> DMatrix<f64> {
    crate::linalg::symmetrize(&mut m);
    m
}

/// Forward Kalman filter. Steps with no observations perform the time
/// update only.
pub fn kalman_filter(m: &StateSpaceModel, obs: &[StepObs]) -> Result<FilterResult> {
    m.validate()?;
    let n = m.dim();
    let mut x = m.x0.clone();
    let mut p = m.p0.clone();
    let mut out = FilterResult {
        predicted_means: Vec::with_capacity(obs.len()),
        predicted_covs: Vec::with_capacity(obs.len()),
        means: Vec::with_capacity(obs.len()),
        covs: Vec::with_capacity(obs.len()),
        loglik: 0.0,
    };
    for (k, obs_k) in obs.iter().enumerate() {
        // time update
        x = &m.phi * x + m.control(k);
        p = sym(&m.phi * &p * m.phi.transpose() + &m.q);
        out.predicted_means.push(x.clone());
        out.predicted_covs.push(p.clone());

        // measurement update
        if let Some((h, r, z)) = m.measurement(obs_k)? {
            let innov = &z - &h * &x;
            let s = sym(&h * &p * h.transpose() + &r);
            let chol = nalgebra::Cholesky::new(s.clone()).ok_or_else(|| {
                Error::Numeric(format!("innovation covariance singular at step {k}"))
            })?;
            let gain = (&p * h.transpose()) * chol.inverse();
            x += &gain * &innov;
            let ikh = DMatrix::identity(n, n) - &gain * &h;
            p = sym(ikh * &p);
            let half_logdet: f64 = chol.l().diagonal().iter().map(|d| d.ln()).sum();
            out.loglik += -0.5 * innov.dot(&chol.solve(&innov))
                - half_logdet
                - 0.5 * z.len() as f64 * (2.0 * std::f64::consts::PI).ln();
        }
        out.means.push(x.clone());
        out.covs.push(p.clone());
    }
    Ok(out)
}

/// Longest run of fully unobserved steps ending at or before `k`, for the
/// instability error message.
fn gap_range(obs: &[StepObs], k: usize) -> (usize, usize) {
    let missing = |s: &StepObs| s.iter().all(|v| v.is_none());
    let mut hi = k;
    while hi > 0 && !missing(&obs[hi]) {
        hi -= 1;
    }
    let mut lo = hi;
    while lo > 0 && missing(&obs[lo - 1]) {
        lo -= 1;
    }
    (lo, hi)
}

/// Three-pass fixed-interval smoother: forward filter, backward information
/// filter over the time-reversed dynamics, and information-weighted
/// combination of the two passes.
pub fn kalman_smooth(m: &StateSpaceModel, obs: &[StepObs]) -> Result<SmootherResult> {
    let fwd = kalman_filter(m, obs)?;
    let n = m.dim();
    let n_steps = obs.len();
    let eye = DMatrix::<f64>::identity(n, n);

    // backward pass: (omega, vec) carry the information about x_k from
    // observations strictly after step k
    let mut omega_future: Vec<DMatrix<f64>> = vec![DMatrix::zeros(n, n); n_steps];
    let mut vec_future: Vec<DVector<f64>> = vec![DVector::zeros(n); n_steps];
    let mut s_info = DMatrix::<f64>::zeros(n, n);
    let mut s_vec = DVector::<f64>::zeros(n);
    for k in (0..n_steps).rev() {
        // include the observation at step k+1's information already folded in
        if k + 1 < n_steps {
            // propagate info about x_{k+1} (from obs ≥ k+1) back through the
            // dynamics x_{k+1} = Φ x_k + B u_k + w
            let gate = (&eye + &s_info * &m.q).try_inverse().ok_or_else(|| {
                let (lo, hi) = gap_range(obs, k + 1);
                Error::Numeric(format!(
                    "backward smoothing pass unstable across steps {lo}..{hi}"
                ))
            })?;
            let s_tilde = sym(&gate * &s_info);
            let shift = &s_vec - &s_info * m.control(k + 1);
            omega_future[k] = sym(m.phi.transpose() * &s_tilde * &m.phi);
            vec_future[k] = m.phi.transpose() * (&gate * shift);
            if omega_future[k].iter().any(|v| !v.is_finite())
                || vec_future[k].iter().any(|v| !v.is_finite())
            {
                let (lo, hi) = gap_range(obs, k + 1);
                return Err(Error::Numeric(format!(
                    "backward smoothing pass unstable across steps {lo}..{hi}"
                )));
            }
        }
        // fold in the observation at step k for the next (earlier) iteration
        s_info = omega_future[k].clone();
        s_vec = vec_future[k].clone();
        if let Some((h, r, z)) = m.measurement(&obs[k])? {
            let rinv = nalgebra::Cholesky::new(r.clone())
                .ok_or_else(|| Error::Numeric(format!("singular R at step {k}")))?
                .inverse();
            s_info += h.transpose() * &rinv * &h;
            s_vec += h.transpose() * (&rinv * z);
            s_info = sym(s_info);
        }
    }

    // combination: P_s = (I + P_f Ω)⁻¹ P_f,  x_s = (I + P_f Ω)⁻¹ (x_f + P_f t)
    let mut means = Vec::with_capacity(n_steps);
    let mut covs = Vec::with_capacity(n_steps);
    for k in 0..n_steps {
        let pf = &fwd.covs[k];
        let gate = (&eye + pf * &omega_future[k]).try_inverse().ok_or_else(|| {
            let (lo, hi) = gap_range(obs, k);
            Error::Numeric(format!("backward smoothing pass unstable across steps {lo}..{hi}"))
        })?;
        let mean = &gate * (&fwd.means[k] + pf * &vec_future[k]);
        let cov = sym(&gate * pf);
        if mean.iter().any(|v| !v.is_finite()) || cov.iter().any(|v| !v.is_finite()) {
            let (lo, hi) = gap_range(obs, k);
            return Err(Error::Numeric(format!(
                "backward smoothing pass unstable across steps {lo}..{hi}"
            )));
        }
        means.push(mean);
        covs.push(cov);
    }
    Ok(SmootherResult { means, covs, weights: vec![1.0], loglik: fwd.loglik })
}

/// Likelihood-weighted combination of smoothers over a model bank sharing one
/// observation stream. Weights are the normalized marginal likelihoods; the
/// combined covariance adds the between-model spread.
pub fn multi_model_smooth(models: &[StateSpaceModel], obs: &[StepObs]) -> Result<SmootherResult> {
    if models.is_empty() {
        return Err(Error::Argument("need at least one model".into()));
    }
    let dim = models[0].dim();
    for m in models {
        if m.dim() != dim || m.obs_dim() != models[0].obs_dim() {
            return Err(Error::Config("all models must share state and observation dimensions".into()));
        }
    }
    let results: Vec<SmootherResult> =
        models.iter().map(|m| kalman_smooth(m, obs)).collect::<Result<_>>()?;
    let max_ll = results.iter().map(|r| r.loglik).fold(f64::NEG_INFINITY, f64::max);
    if !max_ll.is_finite() {
        return Err(Error::Divergence(
            "every model assigned zero likelihood to the observations".into(),
        ));
    }
    let raw: Vec<f64> = results.iter().map(|r| (r.loglik - max_ll).exp()).collect();
    let total: f64 = raw.iter().sum();
    let weights: Vec<f64> = raw.iter().map(|w| w / total).collect();

    let n_steps = obs.len();
    let mut means = Vec::with_capacity(n_steps);
    let mut covs = Vec::with_capacity(n_steps);
    for k in 0..n_steps {
        let mut mean = DVector::zeros(dim);
        for (r, &w) in results.iter().zip(&weights) {
            mean += w * &r.means[k];
        }
        let mut cov = DMatrix::zeros(dim, dim);
        for (r, &w) in results.iter().zip(&weights) {
            let dmean = &r.means[k] - &mean;
            cov += w * (&r.covs[k] + &dmean * dmean.transpose());
        }
        means.push(mean);
        covs.push(sym(cov));
    }
    let loglik = max_ll + total.ln() - (models.len() as f64).ln();
    Ok(SmootherResult { means, covs, weights, loglik })
}

/// Where the melt-rate block sits in the state vector and the step length.
#[derive(Debug, Clone)]
pub struct StateLayout {
    /// Index of the first melt-rate state.
    pub first_melt: usize,
    /// Number of melt-rate states summed into GMSL.
    pub n_melt: usize,
    /// Step length in years.
    pub dt: f64,
}

/// GMSL time series with pointwise 1σ uncertainty.
#[derive(Debug, Clone)]
pub struct GmslSeries {
    pub mean: Vec<f64>,
    pub sd: Vec<f64>,
}

/// GMSL as the running integral of the summed melt rates. The state is
/// augmented with an exact integrator before smoothing so the cumulative
/// variance carries the full cross-time covariance; local (site) states never
/// enter the sum.
pub fn gmsl_from_state(
    m: &StateSpaceModel,
    obs: &[StepObs],
    layout: &StateLayout,
) -> Result<GmslSeries> {
    m.validate()?;
    let n = m.dim();
    if layout.first_melt + layout.n_melt > n {
        return Err(Error::Config("melt block exceeds the state dimension".into()));
    }
    let na = n + 1;
    let mut phi = DMatrix::zeros(na, na);
    phi.view_mut((0, 0), (n, n)).copy_from(&m.phi);
    phi[(n, n)] = 1.0;
    for j in 0..layout.n_melt {
        phi[(n, layout.first_melt + j)] = layout.dt;
    }
    let mut b = DMatrix::zeros(na, m.b.ncols());
    b.view_mut((0, 0), (n, m.b.ncols())).copy_from(&m.b);
    let mut q = DMatrix::zeros(na, na);
    q.view_mut((0, 0), (n, n)).copy_from(&m.q);
    let mut h = DMatrix::zeros(m.h.nrows(), na);
    h.view_mut((0, 0), (m.h.nrows(), n)).copy_from(&m.h);
    let mut x0 = DVector::zeros(na);
    x0.rows_mut(0, n).copy_from(&m.x0);
    let mut p0 = DMatrix::zeros(na, na);
    p0.view_mut((0, 0), (n, n)).copy_from(&m.p0);

    let aug = StateSpaceModel {
        phi,
        b,
        controls: m.controls.clone(),
        q,
        h,
        r: m.r.clone(),
        x0,
        p0,
    };
    let smoothed = kalman_smooth(&aug, obs)?;
    Ok(GmslSeries {
        mean: smoothed.means.iter().map(|x| x[n]).collect(),
        sd: smoothed.covs.iter().map(|p| p[(n, n)].max(0.0).sqrt()).collect(),
    })
}

/// Build the fingerprint-structured sea-level model: local RSLs integrate
/// the fingerprint-weighted melt rates plus per-site controls (GIA rate ×
/// dt added to any supplied dynamic-sea-level increments), melt rates follow
/// a random walk, and each site is observed directly.
#[allow(clippy::too_many_arguments)]
pub fn sea_level_model(
    sites: &[(f64, f64)],
    fingerprints: &[Fingerprint],
    gia_rates: &[f64],
    dsl_increments: &[DVector<f64>],
    dt: f64,
    q_melt: f64,
    q_local: f64,
    r_obs: f64,
    x0: DVector<f64>,
    p0: DMatrix<f64>,
) -> Result<StateSpaceModel> {
    let ns = sites.len();
    let nm = fingerprints.len();
    if gia_rates.len() != ns {
        return Err(Error::Config("one GIA rate per site is required".into()));
    }
    let n = ns + nm;
    let mut phi = DMatrix::identity(n, n);
    for (j, fp) in fingerprints.iter().enumerate() {
        // normalize so a unit melt rate contributes a unit mean RSL rate
        let mean_w = sites.iter().map(|&s| fp.weight_at(s)).sum::<Result<f64>>()? / ns as f64;
        if mean_w == 0.0 {
            return Err(Error::Config(format!("fingerprint {j} has zero mean weight")));
        }
        for (i, &s) in sites.iter().enumerate() {
            phi[(i, ns + j)] = fp.weight_at(s)? / mean_w * dt;
        }
    }
    let mut b = DMatrix::zeros(n, ns);
    for i in 0..ns {
        b[(i, i)] = 1.0;
    }
    let controls: Vec<DVector<f64>> = dsl_increments
        .iter()
        .map(|d| {
            if d.len() != ns {
                return Err(Error::Config("DSL increments must have one entry per site".into()));
            }
            Ok(DVector::from_fn(ns, |i, _| gia_rates[i] * dt + d[i]))
        })
        .collect::<Result<_>>()?;
    let mut q = DMatrix::zeros(n, n);
    for i in 0..ns {
        q[(i, i)] = q_local;
    }
    for j in 0..nm {
        q[(ns + j, ns + j)] = q_melt;
    }
    let mut h = DMatrix::zeros(ns, n);
    for i in 0..ns {
        h[(i, i)] = 1.0;
    }
    let model = StateSpaceModel { phi, b, controls, q, h, r: DMatrix::identity(ns, ns) * r_obs, x0, p0 };
    model.validate()?;
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engines::substream;
    use crate::kernels::{Kernel, Point};
    use crate::linalg::jittered_cholesky;
    use rand::Rng;
    use rand_distr::StandardNormal;

    fn scalar_model(phi: f64, q: f64, r: f64, x0: f64, p0: f64) -> StateSpaceModel {
        StateSpaceModel {
            phi: DMatrix::from_element(1, 1, phi),
            b: DMatrix::zeros(1, 0),
            controls: vec![],
            q: DMatrix::from_element(1, 1, q),
            h: DMatrix::identity(1, 1),
            r: DMatrix::from_element(1, 1, r),
            x0: DVector::from_element(1, x0),
            p0: DMatrix::from_element(1, 1, p0),
        }
    }

    /// Joint-Gaussian batch solve of a linear-Gaussian model: build the
    /// prior over all stacked states, condition on the observed entries.
    fn batch_smooth(m: &StateSpaceModel, obs: &[StepObs]) -> (Vec<DVector<f64>>, Vec<DMatrix<f64>>) {
        let n = m.dim();
        let n_steps = obs.len();
        let big = n * n_steps;

        // prior means by recursion
        let mut mu = DVector::zeros(big);
        let mut x = m.x0.clone();
        for k in 0..n_steps {
            x = &m.phi * x + m.control(k);
            mu.rows_mut(k * n, n).copy_from(&x);
        }
        // prior covariance: C_{kk} recursively, C_{jk} = Φ^{j−k} C_{kk}
        let mut cov = DMatrix::zeros(big, big);
        let mut ckk = m.p0.clone();
        for k in 0..n_steps {
            ckk = &m.phi * ckk * m.phi.transpose() + &m.q;
            cov.view_mut((k * n, k * n), (n, n)).copy_from(&ckk);
            let mut cross = ckk.clone();
            for j in (k + 1)..n_steps {
                cross = &m.phi * cross;
                cov.view_mut((j * n, k * n), (n, n)).copy_from(&cross);
                cov.view_mut((k * n, j * n), (n, n)).copy_from(&cross.transpose());
            }
        }

        // stacked observation operator over present entries
        let mut rows: Vec<(usize, usize, f64)> = Vec::new(); // (step, obs row, value)
        for (k, ob) in obs.iter().enumerate() {
            for (i, v) in ob.iter().enumerate() {
                if let Some(z) = v {
                    rows.push((k, i, *z));
                }
            }
        }
        if rows.is_empty() {
            let means = (0..n_steps).map(|k| mu.rows(k * n, n).into_owned()).collect();
            let covs = (0..n_steps)
                .map(|k| cov.view((k * n, k * n), (n, n)).into_owned())
                .collect();
            return (means, covs);
        }
        let p = rows.len();
        let mut hh = DMatrix::zeros(p, big);
        let mut rr = DMatrix::zeros(p, p);
        let mut z = DVector::zeros(p);
        for (a, &(k, i, v)) in rows.iter().enumerate() {
            for j in 0..n {
                hh[(a, k * n + j)] = m.h[(i, j)];
            }
            z[a] = v;
            for (bidx, &(k2, i2, _)) in rows.iter().enumerate() {
                if k2 == k {
                    rr[(a, bidx)] = m.r[(i, i2)];
                }
            }
        }
        let s = &hh * &cov * hh.transpose() + rr;
        let sinv = s.try_inverse().unwrap();
        let gain = &cov * hh.transpose() * sinv;
        let post_mean = &mu + &gain * (&z - &hh * &mu);
        let post_cov = &cov - &gain * &hh * &cov;
        let means = (0..n_steps).map(|k| post_mean.rows(k * n, n).into_owned()).collect();
        let covs = (0..n_steps)
            .map(|k| post_cov.view((k * n, k * n), (n, n)).into_owned())
            .collect();
        (means, covs)
    }

    #[test]
    fn scalar_precision_weighted_average() {
        let m = scalar_model(1.0, 0.0, 1.0, 0.0, 1.0);
        let res = kalman_filter(&m, &[vec![Some(1.0)]]).unwrap();
        assert!((res.means[0][0] - 0.5).abs() < 1e-12);
        assert!((res.covs[0][(0, 0)] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn unobserved_steps_follow_pure_prediction() {
        let m = scalar_model(0.9, 0.3, 1.0, 2.0, 0.5);
        let obs: Vec<StepObs> = vec![vec![None]; 6];
        let res = kalman_filter(&m, &obs).unwrap();
        let (mut x, mut p) = (2.0, 0.5);
        for k in 0..6 {
            x *= 0.9;
            p = 0.81 * p + 0.3;
            assert!((res.means[k][0] - x).abs() < 1e-14);
            assert!((res.covs[k][(0, 0)] - p).abs() < 1e-14);
        }
    }

    #[test]
    fn filter_matches_batch_oracle_on_three_steps() {
        let m = scalar_model(0.8, 0.2, 0.5, 1.0, 1.0);
        let obs: Vec<StepObs> = vec![vec![Some(1.2)], vec![None], vec![Some(-0.4)]];
        let res = kalman_filter(&m, &obs).unwrap();
        // the batch posterior at the final step equals the filtered one
        let (bm, bc) = batch_smooth(&m, &obs);
        let last = obs.len() - 1;
        assert!((res.means[last][0] - bm[last][0]).abs() < 1e-10);
        assert!((res.covs[last][(0, 0)] - bc[last][(0, 0)]).abs() < 1e-10);
    }

    #[test]
    fn smoothed_random_walk_equals_brownian_gp() {
        let q = 0.4;
        let r = 0.25;
        let n_steps = 50;
        let m = scalar_model(1.0, q, r, 0.0, 0.0);
        let mut rng = substream(21, 0);
        let obs: Vec<StepObs> =
            (0..n_steps).map(|_| vec![Some(rng.sample::<f64, _>(StandardNormal))]).collect();
        let sm = kalman_smooth(&m, &obs).unwrap();

        // batch GP with the Brownian kernel at times 1..=n_steps
        let kernel = Kernel::Brownian { q, t0: 0.0 };
        let pts: Vec<Point> = (1..=n_steps).map(|k| Point::temporal(k as f64)).collect();
        let mut gram = kernel.gram(&pts).unwrap();
        for i in 0..n_steps {
            gram[(i, i)] += r;
        }
        let chol = jittered_cholesky(&gram).unwrap();
        let y = DVector::from_iterator(n_steps, obs.iter().map(|o| o[0].unwrap()));
        let alpha = chol.solve(&y);
        let klat = kernel.gram(&pts).unwrap();
        let post_mean = &klat * alpha;
        let post_cov = &klat - &klat * chol.solve(&klat.clone());
        for k in 0..n_steps {
            assert!((sm.means[k][0] - post_mean[k]).abs() < 1e-6, "mean at step {k}");
            assert!((sm.covs[k][(0, 0)] - post_cov[(k, k)]).abs() < 1e-6, "var at step {k}");
        }
    }

    #[test]
    fn final_datum_pins_deterministic_trajectory() {
        let m = scalar_model(1.0, 0.0, 0.01, 0.0, 4.0);
        let mut obs: Vec<StepObs> = vec![vec![None]; 10];
        obs[9] = vec![Some(1.5)];
        let sm = kalman_smooth(&m, &obs).unwrap();
        // Q=0, Φ=1: the state never moves, so every smoothed mean equals the
        // posterior given the single datum
        let expect = 4.0 / 4.01 * 1.5;
        for k in 0..10 {
            assert!((sm.means[k][0] - expect).abs() < 1e-10, "step {k}: {}", sm.means[k][0]);
        }
    }

    #[test]
    fn gap_variance_below_prediction_only() {
        let m = scalar_model(1.0, 0.1, 0.2, 0.0, 1.0);
        let mut obs: Vec<StepObs> = (0..21).map(|_| vec![Some(0.3)]).collect();
        for k in 8..13 {
            obs[k] = vec![None];
        }
        let fwd = kalman_filter(&m, &obs).unwrap();
        let sm = kalman_smooth(&m, &obs).unwrap();
        // in the gap the filtered variance is prediction-only
        for k in 9..13 {
            assert!(sm.covs[k][(0, 0)] < fwd.covs[k][(0, 0)]);
        }
        // and matches the batch oracle
        let (bm, bc) = batch_smooth(&m, &obs);
        for k in 0..21 {
            assert!((sm.means[k][0] - bm[k][0]).abs() < 1e-8);
            assert!((sm.covs[k][(0, 0)] - bc[k][(0, 0)]).abs() < 1e-8);
        }
    }

    fn random_model(rng: &mut impl Rng, n: usize, p: usize) -> StateSpaceModel {
        let mut phi = DMatrix::from_fn(n, n, |_, _| rng.sample::<f64, _>(StandardNormal));
        // scale to spectral radius ≈ 0.9 for stability
        let norm = phi.norm();
        phi *= 0.9 / norm * (n as f64).sqrt() * 0.5;
        let a = DMatrix::from_fn(n, n, |_, _| rng.sample::<f64, _>(StandardNormal));
        let q = &a * a.transpose() * 0.1 + DMatrix::identity(n, n) * 0.01;
        let h = DMatrix::from_fn(p, n, |_, _| rng.sample::<f64, _>(StandardNormal));
        let r = DMatrix::identity(p, p) * rng.gen_range(0.05..0.5);
        let x0 = DVector::from_fn(n, |_, _| rng.sample::<f64, _>(StandardNormal));
        let c = DMatrix::from_fn(n, n, |_, _| rng.sample::<f64, _>(StandardNormal));
        let p0 = &c * c.transpose() * 0.2 + DMatrix::identity(n, n) * 0.05;
        StateSpaceModel {
            phi,
            b: DMatrix::zeros(n, 0),
            controls: vec![],
            q: sym(q),
            h,
            r,
            x0,
            p0: sym(p0),
        }
    }

    #[test]
    fn smoother_matches_batch_oracle_on_random_models() {
        for case in 0..20 {
            let mut rng = substream(8100, case);
            let n = rng.gen_range(1..=6);
            let p = rng.gen_range(1..=n);
            let m = random_model(&mut rng, n, p);
            let n_steps = rng.gen_range(5..=50);
            let obs: Vec<StepObs> = (0..n_steps)
                .map(|_| {
                    (0..p)
                        .map(|_| {
                            if rng.gen_bool(0.8) {
                                Some(rng.sample::<f64, _>(StandardNormal))
                            } else {
                                None
                            }
                        })
                        .collect()
                })
                .collect();
            let sm = kalman_smooth(&m, &obs).unwrap();
            let (bm, bc) = batch_smooth(&m, &obs);
            for k in 0..n_steps {
                assert!((&sm.means[k] - &bm[k]).abs().max() < 1e-8, "case {case} step {k}");
                assert!((&sm.covs[k] - &bc[k]).abs().max() < 1e-8, "case {case} step {k}");
            }
        }
    }

    #[test]
    fn smoothing_never_inflates_variance() {
        for case in 0..10 {
            let mut rng = substream(8200, case);
            let n = rng.gen_range(1..=4);
            let m = random_model(&mut rng, n, n);
            let obs: Vec<StepObs> = (0..30)
                .map(|_| (0..n).map(|_| Some(rng.sample::<f64, _>(StandardNormal))).collect())
                .collect();
            let fwd = kalman_filter(&m, &obs).unwrap();
            let sm = kalman_smooth(&m, &obs).unwrap();
            for k in 0..30 {
                let diff = &fwd.covs[k] - &sm.covs[k];
                let min_eig = diff
                    .symmetric_eigen()
                    .eigenvalues
                    .iter()
                    .cloned()
                    .fold(f64::INFINITY, f64::min);
                assert!(min_eig > -1e-10, "case {case} step {k}: min eig {min_eig}");
            }
        }
    }

    #[test]
    fn explosive_gap_raises_instability_error() {
        let m = scalar_model(2.0, 0.0, 0.01, 1.0, 0.0);
        let mut obs: Vec<StepObs> = vec![vec![None]; 2500];
        obs[0] = vec![Some(1.0)];
        obs[2499] = vec![Some(0.0)];
        let err = kalman_smooth(&m, &obs).unwrap_err().to_string();
        assert!(err.contains("unstable"), "{err}");
        assert!(err.contains(".."), "{err}");
    }

    #[test]
    fn identical_models_split_weight_evenly() {
        let m = scalar_model(0.95, 0.1, 0.3, 0.0, 1.0);
        let mut rng = substream(30, 0);
        let obs: Vec<StepObs> =
            (0..40).map(|_| vec![Some(rng.sample::<f64, _>(StandardNormal))]).collect();
        let single = kalman_smooth(&m, &obs).unwrap();
        let multi = multi_model_smooth(&[m.clone(), m.clone()], &obs).unwrap();
        assert!((multi.weights[0] - 0.5).abs() < 1e-12);
        assert!((multi.weights[1] - 0.5).abs() < 1e-12);
        for k in 0..40 {
            assert!((&multi.means[k] - &single.means[k]).abs().max() < 1e-10);
            assert!((&multi.covs[k] - &single.covs[k]).abs().max() < 1e-10);
        }
        // single-model reduction
        let one = multi_model_smooth(&[m], &obs).unwrap();
        assert_eq!(one.weights, vec![1.0]);
        for k in 0..40 {
            assert!((&one.means[k] - &single.means[k]).abs().max() < 1e-12);
        }
    }

    #[test]
    fn true_model_outweighs_decoy() {
        let q_true: f64 = 0.05;
        let r: f64 = 0.1;
        let n_steps = 200;
        let mut hits = 0;
        for rep in 0..50 {
            let mut rng = substream(8400, rep);
            let mut x = 0.0;
            let obs: Vec<StepObs> = (0..n_steps)
                .map(|_| {
                    x += q_true.sqrt() * rng.sample::<f64, _>(StandardNormal);
                    vec![Some(x + r.sqrt() * rng.sample::<f64, _>(StandardNormal))]
                })
                .collect();
            let good = scalar_model(1.0, q_true, r, 0.0, 1.0);
            let decoy = scalar_model(1.0, 10.0 * q_true, r, 0.0, 1.0);
            let res = multi_model_smooth(&[good, decoy], &obs).unwrap();
            if res.weights[0] >= 0.9 {
                hits += 1;
            }
        }
        assert!(hits >= 45, "true model dominated in only {hits}/50 replications");
    }

    #[test]
    fn combined_covariance_dominates_best_single_model() {
        let m1 = scalar_model(1.0, 0.05, 0.1, 0.0, 1.0);
        let m2 = scalar_model(1.0, 0.2, 0.1, 0.0, 1.0);
        let mut rng = substream(31, 0);
        let mut x = 0.0;
        let obs: Vec<StepObs> = (0..60)
            .map(|_| {
                x += 0.05f64.sqrt() * rng.sample::<f64, _>(StandardNormal);
                vec![Some(x + 0.1f64.sqrt() * rng.sample::<f64, _>(StandardNormal))]
            })
            .collect();
        let multi = multi_model_smooth(&[m1.clone(), m2], &obs).unwrap();
        let best = kalman_smooth(&m1, &obs).unwrap();
        if multi.weights[0] < 0.999 {
            for k in 0..60 {
                assert!(multi.covs[k][(0, 0)] >= best.covs[k][(0, 0)] - 1e-12);
            }
        }
    }

    fn two_site_melt_model(q_melt: f64, r: f64, melt0: &[f64]) -> StateSpaceModel {
        let sites = [(40.0, -70.0), (-30.0, 150.0)];
        let fps = vec![
            Fingerprint::new(vec![((40.0, -70.0), 1.2), ((-30.0, 150.0), 0.8)]),
            Fingerprint::new(vec![((40.0, -70.0), 0.6), ((-30.0, 150.0), 1.4)]),
        ];
        let mut x0 = DVector::zeros(4);
        x0[2] = melt0[0];
        x0[3] = melt0[1];
        sea_level_model(
            &sites,
            &fps,
            &[0.0, 0.0],
            &[],
            1.0,
            q_melt,
            0.0,
            r,
            x0,
            DMatrix::zeros(4, 4),
        )
        .unwrap()
    }

    #[test]
    fn zero_melt_gives_zero_gmsl() {
        let m = two_site_melt_model(0.0, 0.01, &[0.0, 0.0]);
        let obs: Vec<StepObs> = vec![vec![None, None]; 20];
        let layout = StateLayout { first_melt: 2, n_melt: 2, dt: 1.0 };
        let g = gmsl_from_state(&m, &obs, &layout).unwrap();
        for k in 0..20 {
            assert!(g.mean[k].abs() < 1e-12);
            assert!(g.sd[k].abs() < 1e-12);
        }
    }

    #[test]
    fn constant_melt_integrates_exactly() {
        // total melt rate 3 mm/yr split across two sources, 100 annual steps
        let m = two_site_melt_model(0.0, 0.01, &[0.002, 0.001]);
        let obs: Vec<StepObs> = vec![vec![None, None]; 100];
        let layout = StateLayout { first_melt: 2, n_melt: 2, dt: 1.0 };
        let g = gmsl_from_state(&m, &obs, &layout).unwrap();
        assert!((g.mean[99] - 0.3).abs() < 1e-10, "{}", g.mean[99]);
    }

    #[test]
    fn gmsl_tracks_direct_integration_oracle() {
        let q_melt = 1e-8;
        let r = 1e-4;
        let layout = StateLayout { first_melt: 2, n_melt: 2, dt: 1.0 };
        let mut covered = 0usize;
        let mut total = 0usize;
        let reps = 40;
        for rep in 0..reps {
            let mut rng = substream(8600, rep);
            // simulate: melt rates random-walk, sites integrate fingerprints
            let model = two_site_melt_model(q_melt, r, &[0.002, 0.001]);
            let mut x = model.x0.clone();
            let mut truth_gmsl = Vec::new();
            let mut obs: Vec<StepObs> = Vec::new();
            for _ in 0..150 {
                // the integrator state advances on the pre-transition melt
                truth_gmsl.push(truth_gmsl.last().copied().unwrap_or(0.0) + x[2] + x[3]);
                x = &model.phi * &x;
                for j in 2..4 {
                    x[j] += q_melt.sqrt() * rng.sample::<f64, _>(StandardNormal);
                }
                obs.push(vec![
                    Some(x[0] + r.sqrt() * rng.sample::<f64, _>(StandardNormal)),
                    Some(x[1] + r.sqrt() * rng.sample::<f64, _>(StandardNormal)),
                ]);
            }
            let g = gmsl_from_state(&model, &obs, &layout).unwrap();
            // pointwise 2σ coverage of the direct-integration truth,
            // aggregated over steps and replications (a calibrated Gaussian
            // gives 95.45%)
            for k in 0..150 {
                if (g.mean[k] - truth_gmsl[k]).abs() <= 2.0 * g.sd[k] + 1e-9 {
                    covered += 1;
                }
                total += 1;
            }
        }
        let frac = covered as f64 / total as f64;
        assert!(frac >= 0.94, "GMSL 2σ coverage of the oracle was only {frac:.3}");
    }

    #[test]
    fn dimension_mismatches_rejected() {
        let mut m = scalar_model(1.0, 0.1, 0.1, 0.0, 1.0);
        m.h = DMatrix::zeros(1, 2);
        assert!(m.validate().is_err());
        let m2 = scalar_model(1.0, -0.1, 0.1, 0.0, 1.0);
        assert!(m2.validate().is_err());
        let m3 = scalar_model(1.0, 0.1, 0.1, 0.0, 1.0);
        assert!(kalman_filter(&m3, &[vec![Some(0.0), Some(1.0)]]).is_err());
    }
}
