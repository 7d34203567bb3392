//! Parametric time-series models: temporally linear regression and Bayesian
//! errors-in-variables change-point regression.

use nalgebra::{DMatrix, DVector};

use crate::data::Dataset;
use crate::engines::{sample_with_init, BoundedParam, SampleChain};
use crate::error::{Error, Result};

/// Estimation method for the temporally linear model.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FitMethod {
    Ols,
    Wls,
    Gls,
}

/// Fitted temporally linear model y = m·t + β.
#[derive(Debug, Clone)]
pub struct LinearFit {
    /// Rate of RSL change, m/yr.
    pub slope: f64,
    /// Intercept, meters.
    pub intercept: f64,
    pub slope_se: f64,
    pub intercept_se: f64,
    pub rmse: f64,
    pub method: FitMethod,
}

/// Fit the linear model by ordinary, weighted, or generalized least squares.
///
/// WLS weights by 1/rsl_sd²; GLS uses `error_cov` (defaults to diag(rsl_sd²))
/// and so also absorbs residual autocorrelation when a full covariance is
/// supplied.
pub fn fit_linear(
    d: &Dataset,
    method: FitMethod,
    error_cov: Option<&DMatrix<f64>>,
) -> Result<LinearFit> {
    let ages = d.ages();
    let rsl = d.rsl();
    let n = d.len();
    let span = ages.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
        - ages.iter().cloned().fold(f64::INFINITY, f64::min);
    if n < 2 || span <= 0.0 {
        return Err(Error::Numeric(
            "linear fit is rank deficient: need at least two distinct ages".into(),
        ));
    }

    let x = DMatrix::from_fn(n, 2, |i, j| if j == 0 { 1.0 } else { ages[i] });
    let y = DVector::from_vec(rsl.clone());

    let (coef, cov) = match method {
        FitMethod::Ols => {
            let xtx = x.transpose() * &x;
            let gram_inv = xtx
                .try_inverse()
                .ok_or_else(|| Error::Numeric("linear fit is rank deficient".into()))?;
            let coef = &gram_inv * x.transpose() * &y;
            let resid = &y - &x * &coef;
            let dof = (n as f64 - 2.0).max(1.0);
            let sigma2 = resid.norm_squared() / dof;
            (coef, gram_inv * sigma2)
        }
        FitMethod::Wls | FitMethod::Gls => {
            let default_cov;
            let c = match (method, error_cov) {
                (FitMethod::Gls, Some(c)) => {
                    if c.nrows() != n || c.ncols() != n {
                        return Err(Error::Argument(format!(
                            "error covariance must be {n}x{n}, got {}x{}",
                            c.nrows(),
                            c.ncols()
                        )));
                    }
                    c
                }
                _ => {
                    if d.observations.iter().any(|o| o.rsl_sd <= 0.0) {
                        return Err(Error::Validation(
                            "weighted fits need strictly positive rsl_sd".into(),
                        ));
                    }
                    default_cov = DMatrix::from_diagonal(&DVector::from_iterator(
                        n,
                        d.observations.iter().map(|o| o.rsl_sd * o.rsl_sd),
                    ));
                    &default_cov
                }
            };
            let chol = c
                .clone()
                .cholesky()
                .ok_or_else(|| Error::Numeric("error covariance is not positive definite".into()))?;
            let ci_x = chol.solve(&x);
            let ci_y = chol.solve(&y);
            let a = x.transpose() * ci_x;
            let b = x.transpose() * ci_y;
            let a_inv = a
                .try_inverse()
                .ok_or_else(|| Error::Numeric("linear fit is rank deficient".into()))?;
            let coef = &a_inv * b;
            (coef, a_inv)
        }
    };

    let resid = &y - &x * &coef;
    Ok(LinearFit {
        slope: coef[1],
        intercept: coef[0],
        slope_se: cov[(1, 1)].max(0.0).sqrt(),
        intercept_se: cov[(0, 0)].max(0.0).sqrt(),
        rmse: (resid.norm_squared() / n as f64).sqrt(),
        method,
    })
}

/// Priors for the change-point model. Change points are uniform (with an
/// ordering constraint) on [cp_lower, cp_upper], which must lie inside the
/// observed age span.
#[derive(Debug, Clone)]
pub struct ChangePointPriors {
    pub cp_lower: f64,
    pub cp_upper: f64,
    /// Normal(0, rate_sd²) prior on every segment rate, m/yr.
    pub rate_sd: f64,
    /// Normal prior on the level at the first change point, meters.
    pub level_mean: f64,
    pub level_sd: f64,
    /// Half-normal scale of the extra residual standard deviation, meters.
    pub sigma_extra_scale: f64,
}

impl ChangePointPriors {
    pub fn defaults(d: &Dataset) -> Self {
        let ages = d.ages();
        let rsl = d.rsl();
        let lo = ages.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = ages.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mean = rsl.iter().sum::<f64>() / rsl.len() as f64;
        let sd = (rsl.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>()
            / rsl.len() as f64)
            .sqrt();
        ChangePointPriors {
            cp_lower: lo,
            cp_upper: hi,
            rate_sd: 0.05,
            level_mean: mean,
            level_sd: (2.0 * sd).max(0.1),
            sigma_extra_scale: 1.0,
        }
    }
}

/// Chain-length settings shared by the fully Bayesian fits.
#[derive(Debug, Clone, Copy)]
pub struct McmcSettings {
    pub n_draws: usize,
    pub n_burn: usize,
    pub n_chains: usize,
    pub seed: u64,
}

impl Default for McmcSettings {
    fn default() -> Self {
        McmcSettings { n_draws: 2000, n_burn: 2000, n_chains: 2, seed: 0 }
    }
}

/// Posterior of the piecewise-linear change-point model. All matrices hold
/// one retained draw per row.
#[derive(Debug, Clone)]
pub struct ChangePointFit {
    pub n_cp: usize,
    /// Change points γ, years CE; strictly increasing within each row.
    pub change_points: DMatrix<f64>,
    /// Segment rates β, m/yr; n_cp+1 columns (first segment is pre-γ₁).
    pub segment_rates: DMatrix<f64>,
    /// Levels α at the change points, by continuity from the first.
    pub levels: DMatrix<f64>,
    /// Posterior draws of the true observation ages (EIV).
    pub latent_ages: DMatrix<f64>,
    /// Extra residual scale draws, meters.
    pub sigma_extra: DVector<f64>,
    pub dic: f64,
    /// Set when more than half of the draws leave some segment with no data.
    pub empty_segment_warning: bool,
    pub chain: SampleChain,
}

/// Evaluate the piecewise-linear mean at `t`. `alpha1` is the level at the
/// first change point; segment j (0-based) lies left of `cps[j]` and has
/// rate `rates[j]`, so consecutive levels obey
/// α_k = α_{k−1} + β_k·(γ_k − γ_{k−1}).
pub fn piecewise_eval(cps: &[f64], rates: &[f64], alpha1: f64, t: f64) -> f64 {
    debug_assert_eq!(rates.len(), cps.len() + 1);
    if t < cps[0] {
        return alpha1 + rates[0] * (t - cps[0]);
    }
    let mut level = alpha1;
    for j in 1..cps.len() {
        if t < cps[j] {
            return level + rates[j] * (t - cps[j - 1]);
        }
        level += rates[j] * (cps[j] - cps[j - 1]);
    }
    level + rates[cps.len()] * (t - cps[cps.len() - 1])
}

fn data_log_likelihood(
    d: &Dataset,
    cps: &[f64],
    rates: &[f64],
    alpha1: f64,
    sigma_extra: f64,
    ages: &[f64],
) -> f64 {
    let mut ll = 0.0;
    for (obs, &t) in d.observations.iter().zip(ages) {
        let var = obs.rsl_sd * obs.rsl_sd + sigma_extra * sigma_extra;
        if var <= 0.0 {
            return f64::NEG_INFINITY;
        }
        let r = obs.rsl_mean - piecewise_eval(cps, rates, alpha1, t);
        ll -= 0.5 * ((2.0 * std::f64::consts::PI * var).ln() + r * r / var);
    }
    ll
}

/// Fit the errors-in-variables change-point model with `n_cp` change points
/// by MCMC. Latent true ages are sampled for every observation with
/// age_sd > 0; observations with age_sd = 0 keep their stated age.
pub fn fit_changepoint(
    d: &Dataset,
    n_cp: usize,
    priors: &ChangePointPriors,
    mcmc: &McmcSettings,
) -> Result<ChangePointFit> {
    if n_cp == 0 {
        return Err(Error::Argument("need at least one change point".into()));
    }
    let n = d.len();
    if n < 2 * (n_cp + 1) {
        return Err(Error::Validation(format!(
            "{n} observations cannot support {n_cp} change points (need {})",
            2 * (n_cp + 1)
        )));
    }
    let ages = d.ages();
    let age_lo = ages.iter().cloned().fold(f64::INFINITY, f64::min);
    let age_hi = ages.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if priors.cp_lower >= priors.cp_upper
        || priors.cp_lower < age_lo
        || priors.cp_upper > age_hi
    {
        return Err(Error::Validation(
            "change-point prior support must lie inside the observed age span".into(),
        ));
    }

    let m = n_cp;
    let free_age: Vec<usize> = (0..n).filter(|&i| d.observations[i].age_sd > 0.0).collect();

    let mut params: Vec<BoundedParam> = Vec::new();
    for k in 0..m {
        params.push(BoundedParam::new(
            format!("gamma{}", k + 1),
            priors.cp_lower,
            priors.cp_upper,
        ));
    }
    for j in 0..=m {
        params.push(BoundedParam::new(
            format!("beta{}", j + 1),
            -8.0 * priors.rate_sd,
            8.0 * priors.rate_sd,
        ));
    }
    params.push(BoundedParam::new(
        "alpha1",
        priors.level_mean - 8.0 * priors.level_sd,
        priors.level_mean + 8.0 * priors.level_sd,
    ));
    params.push(BoundedParam::new(
        "sigma_extra",
        0.0,
        8.0 * priors.sigma_extra_scale,
    ));
    for &i in &free_age {
        let o = &d.observations[i];
        params.push(BoundedParam::new(
            format!("age{i}"),
            o.age_mean - 8.0 * o.age_sd,
            o.age_mean + 8.0 * o.age_sd,
        ));
    }
    let i_alpha = 2 * m + 1;
    let i_sigma = 2 * m + 2;
    let i_ages = 2 * m + 3;

    let fill_ages = |x: &[f64], out: &mut Vec<f64>| {
        out.clear();
        out.extend_from_slice(&ages);
        for (pos, &i) in free_age.iter().enumerate() {
            out[i] = x[i_ages + pos];
        }
    };

    let priors_ = priors;
    let log_post = |x: &[f64]| -> f64 {
        let cps = &x[0..m];
        if cps.windows(2).any(|w| w[1] <= w[0]) {
            return f64::NEG_INFINITY;
        }
        let rates = &x[m..=2 * m];
        let alpha1 = x[i_alpha];
        let sigma_extra = x[i_sigma];

        let mut true_ages = Vec::new();
        fill_ages(x, &mut true_ages);

        let mut lp =
            data_log_likelihood(d, cps, rates, alpha1, sigma_extra, &true_ages);
        for &b in rates {
            lp -= 0.5 * (b / priors_.rate_sd).powi(2);
        }
        lp -= 0.5 * ((alpha1 - priors_.level_mean) / priors_.level_sd).powi(2);
        lp -= 0.5 * (sigma_extra / priors_.sigma_extra_scale).powi(2);
        for (pos, &i) in free_age.iter().enumerate() {
            let o = &d.observations[i];
            lp -= 0.5 * ((x[i_ages + pos] - o.age_mean) / o.age_sd).powi(2);
        }
        lp
    };

    // start chains from the OLS line with equally spaced change points; the
    // posterior is multimodal in the change points and a blind start often
    // strands a chain in a shallow mode
    let base = fit_linear(d, FitMethod::Ols, None)?;
    let mut init: Vec<f64> = Vec::with_capacity(params.len());
    let span = priors.cp_upper - priors.cp_lower;
    for k in 0..m {
        init.push(priors.cp_lower + span * (k + 1) as f64 / (m + 1) as f64);
    }
    for _ in 0..=m {
        init.push(base.slope);
    }
    init.push(base.slope * init[0] + base.intercept);
    init.push(base.rmse.max(1e-3));
    for &i in &free_age {
        init.push(d.observations[i].age_mean);
    }

    let chain = sample_with_init(
        &log_post,
        &params,
        mcmc.n_draws,
        mcmc.n_burn,
        mcmc.n_chains,
        mcmc.seed,
        Some(&init),
    )?;
    let total = chain.draws.nrows();

    let change_points = chain.draws.columns(0, m).into_owned();
    let segment_rates = chain.draws.columns(m, m + 1).into_owned();
    let alpha1 = chain.draws.column(i_alpha).into_owned();
    let sigma_extra: DVector<f64> = chain.draws.column(i_sigma).into_owned();

    let mut latent_ages = DMatrix::from_fn(total, n, |_, i| ages[i]);
    for (pos, &i) in free_age.iter().enumerate() {
        latent_ages.set_column(i, &chain.draws.column(i_ages + pos));
    }

    let mut levels = DMatrix::zeros(total, m);
    for r in 0..total {
        levels[(r, 0)] = alpha1[r];
        for k in 1..m {
            levels[(r, k)] = levels[(r, k - 1)]
                + segment_rates[(r, k)] * (change_points[(r, k)] - change_points[(r, k - 1)]);
        }
    }

    // deviance per retained draw, plus segment occupancy bookkeeping
    let mut dev = Vec::with_capacity(total);
    let mut empty_draws = 0usize;
    let mut seg_counts = vec![0usize; m + 1];
    for r in 0..total {
        let cps: Vec<f64> = change_points.row(r).iter().cloned().collect();
        let rates: Vec<f64> = segment_rates.row(r).iter().cloned().collect();
        let t: Vec<f64> = latent_ages.row(r).iter().cloned().collect();
        dev.push(-2.0 * data_log_likelihood(d, &cps, &rates, alpha1[r], sigma_extra[r], &t));
        seg_counts.iter_mut().for_each(|c| *c = 0);
        for &ti in &t {
            let seg = cps.iter().take_while(|&&g| ti >= g).count();
            seg_counts[seg] += 1;
        }
        if seg_counts.iter().any(|&c| c == 0) {
            empty_draws += 1;
        }
    }

    // DIC = mean deviance + p_D with p_D = var(deviance)/2 over the pooled
    // draws. The posterior-mean plugin form is meaningless when chains land
    // in different change-point modes; the variance form stays finite and
    // also charges models whose chains disagree.
    let mean_dev = dev.iter().sum::<f64>() / total as f64;
    let var_dev =
        dev.iter().map(|v| (v - mean_dev) * (v - mean_dev)).sum::<f64>() / total as f64;
    let dic = mean_dev + 0.5 * var_dev;

    Ok(ChangePointFit {
        n_cp,
        change_points,
        segment_rates,
        levels,
        latent_ages,
        sigma_extra,
        dic,
        empty_segment_warning: empty_draws * 2 > total,
        chain,
    })
}

/// Result of scanning change-point counts by DIC.
#[derive(Debug, Clone)]
pub struct ChangePointSelection {
    pub best_n_cp: usize,
    /// (n_cp, DIC) for every candidate count.
    pub dic_table: Vec<(usize, f64)>,
    /// True when the best model beats the runner-up by more than 10 DIC units.
    pub strong_preference: bool,
}

/// Fit n_cp = 1..=max_cp and pick the count minimizing DIC.
pub fn select_changepoints(
    d: &Dataset,
    max_cp: usize,
    priors: &ChangePointPriors,
    mcmc: &McmcSettings,
) -> Result<ChangePointSelection> {
    if max_cp == 0 {
        return Err(Error::Argument("max_cp must be at least 1".into()));
    }
    let mut dic_table = Vec::with_capacity(max_cp);
    for n_cp in 1..=max_cp {
        let settings = McmcSettings {
            seed: mcmc.seed.wrapping_add(1000 * n_cp as u64),
            ..*mcmc
        };
        let fit = fit_changepoint(d, n_cp, priors, &settings)?;
        dic_table.push((n_cp, fit.dic));
    }
    let min_dic = dic_table.iter().map(|&(_, v)| v).fold(f64::INFINITY, f64::min);
    // parsimony rule: a DIC difference under 2 units is not a substantial
    // preference, so take the smallest count within 2 of the minimum
    let best = dic_table.iter().find(|&&(_, v)| v <= min_dic + 2.0).unwrap().0;
    let best_dic = dic_table.iter().find(|&&(k, _)| k == best).unwrap().1;
    let runner_up = dic_table
        .iter()
        .filter(|(k, _)| *k != best)
        .map(|&(_, v)| v)
        .fold(f64::INFINITY, f64::min);
    Ok(ChangePointSelection {
        best_n_cp: best,
        dic_table,
        strong_preference: runner_up - best_dic > 10.0,
    })
}
