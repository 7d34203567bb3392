//! Acceptance suite: one test per release criterion, each printing a
//! pass/fail line (run with `--nocapture` to see them all).

use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

use rsl_core::data::{Dataset, ObsKind, Observation};
use rsl_core::engines::{substream, BoundedParam};
use rsl_core::gp::{fit_et_gp, fit_nigp, GpModelSpec, MeanFn};
use rsl_core::igp::{fit_eiv_igp, integrated_cov, integrated_cov_quad, IgpSpec};
use rsl_core::kernels::{Kernel, MaternNu, Point};
use rsl_core::linalg::jittered_cholesky;
use rsl_core::reductions::{eof_decompose, eof_regress, virtual_station_gmsl, GaugeSeries, Region};
use rsl_core::spacetime::{fit_est_gp, predict_field, StGpSpec};
use rsl_core::statespace::{kalman_smooth, multi_model_smooth, StateSpaceModel, StepObs};
use rsl_core::trend::{fit_changepoint, select_changepoints, ChangePointPriors, McmcSettings};
use rsl_core::validation::{coverage, generate, SyntheticTruth};

fn report(number: u32, name: &str, ok: bool, detail: &str) {
    println!(
        "acceptance {number:02} {name}: {} ({detail})",
        if ok { "pass" } else { "FAIL" }
    );
    assert!(ok, "acceptance criterion {number} ({name}) failed: {detail}");
}

fn obs_at(t: f64, y: f64, rsl_sd: f64, age_sd: f64) -> Observation {
    Observation {
        site_id: "s".into(),
        latitude: 40.0,
        longitude: -70.0,
        age_mean: t,
        age_sd,
        rsl_mean: y,
        rsl_sd,
        kind: ObsKind::CoreSample,
        core_id: None,
    }
}

// ---------------------------------------------------------------------------
// 1. GP prediction matches brute-force joint conditioning
// ---------------------------------------------------------------------------

#[test]
fn criterion_01_gp_exactness() {
    let started = Instant::now();
    let mut max_err: f64 = 0.0;
    for case in 0..100u64 {
        let mut rng = substream(101, case);
        let n = rng.gen_range(3..=25);
        let mut times: Vec<f64> = (0..n).map(|_| rng.gen::<f64>() * 3000.0).collect();
        times.sort_by(|a, b| a.partial_cmp(b).unwrap());
        times.dedup_by(|a, b| (*a - *b).abs() < 1e-6);
        let kernel = Kernel::Matern {
            s2: rng.gen_range(0.1..2.0),
            l: rng.gen_range(100.0..2000.0),
            nu: MaternNu::ThreeHalves,
        };
        let rsl_sd = rng.gen_range(0.01..0.2);
        let obs: Vec<Observation> = times
            .iter()
            .map(|&t| obs_at(t, rng.sample::<f64, _>(StandardNormal), rsl_sd, 0.0))
            .collect();
        let d = Dataset::new(obs, "oracle").unwrap();

        let k = kernel.clone();
        let spec = GpModelSpec::new(MeanFn::Zero, vec![], move |_| k.clone());
        let fit = fit_et_gp(&d, &spec, 0, 0).unwrap();
        let grid: Vec<f64> = (0..10).map(|i| -200.0 + 370.0 * i as f64).collect();
        let field = fit.predict(&grid).unwrap();

        // joint conditioning: [grid; data] under the latent kernel, with
        // observation noise on the data block
        let pts: Vec<Point> = d.ages().iter().map(|&t| Point::temporal(t)).collect();
        let grid_pts: Vec<Point> = grid.iter().map(|&t| Point::temporal(t)).collect();
        let kdd = {
            let mut k = kernel.gram(&pts).unwrap();
            for i in 0..d.len() {
                k[(i, i)] += rsl_sd * rsl_sd;
            }
            k
        };
        let kgd = kernel.cross(&grid_pts, &pts).unwrap();
        let kgg = kernel.gram(&grid_pts).unwrap();
        let kdd_inv = kdd.try_inverse().unwrap();
        let y = DVector::from_vec(d.rsl());
        let mean = &kgd * &kdd_inv * y;
        let cov = &kgg - &kgd * &kdd_inv * kgd.transpose();

        max_err = max_err.max((&field.mean - &mean).abs().max());
        max_err = max_err.max((&field.covariance - &cov).abs().max());
    }
    let elapsed = started.elapsed();
    let ok = max_err < 1e-8 && elapsed < Duration::from_secs(10);
    report(
        1,
        "gp-exactness",
        ok,
        &format!("max abs error {max_err:.3e} over 100 problems in {elapsed:.2?}"),
    );
}

// ---------------------------------------------------------------------------
// 2. Kalman smoothing equals batch GP / batch joint conditioning
// ---------------------------------------------------------------------------

/// Joint-Gaussian batch solve: stack all states, condition on every
/// observed entry at once.
fn batch_smooth(m: &StateSpaceModel, obs: &[StepObs]) -> (Vec<DVector<f64>>, Vec<DMatrix<f64>>) {
    let n = m.dim();
    let n_steps = obs.len();
    let big = n * n_steps;
    let mut mu = DVector::zeros(big);
    let mut x = m.x0.clone();
    for k in 0..n_steps {
        x = &m.phi * x;
        mu.rows_mut(k * n, n).copy_from(&x);
    }
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
    let mut rows: Vec<(usize, usize, f64)> = Vec::new();
    for (k, ob) in obs.iter().enumerate() {
        for (i, v) in ob.iter().enumerate() {
            if let Some(z) = v {
                rows.push((k, i, *z));
            }
        }
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
        for (b, &(k2, i2, _)) in rows.iter().enumerate() {
            if k2 == k {
                rr[(a, b)] = m.r[(i, i2)];
            }
        }
    }
    let s = &hh * &cov * hh.transpose() + rr;
    let sinv = s.try_inverse().unwrap();
    let gain = &cov * hh.transpose() * sinv;
    let post_mean = &mu + &gain * (&z - &hh * &mu);
    let post_cov = &cov - &gain * &hh * &cov;
    (
        (0..n_steps).map(|k| post_mean.rows(k * n, n).into_owned()).collect(),
        (0..n_steps).map(|k| post_cov.view((k * n, k * n), (n, n)).into_owned()).collect(),
    )
}

#[test]
fn criterion_02_smoother_equals_batch_gp() {
    let started = Instant::now();

    // scalar random walk vs the Brownian-kernel GP
    let (q, r, n_steps) = (0.4, 0.25, 50);
    let m = StateSpaceModel {
        phi: DMatrix::identity(1, 1),
        b: DMatrix::zeros(1, 0),
        controls: vec![],
        q: DMatrix::from_element(1, 1, q),
        h: DMatrix::identity(1, 1),
        r: DMatrix::from_element(1, 1, r),
        x0: DVector::zeros(1),
        p0: DMatrix::zeros(1, 1),
    };
    let mut rng = substream(202, 0);
    let obs: Vec<StepObs> =
        (0..n_steps).map(|_| vec![Some(rng.sample::<f64, _>(StandardNormal))]).collect();
    let sm = kalman_smooth(&m, &obs).unwrap();

    let kernel = Kernel::Brownian { q, t0: 0.0 };
    let pts: Vec<Point> = (1..=n_steps).map(|k| Point::temporal(k as f64)).collect();
    let mut gram = kernel.gram(&pts).unwrap();
    for i in 0..n_steps {
        gram[(i, i)] += r;
    }
    let chol = jittered_cholesky(&gram).unwrap();
    let y = DVector::from_iterator(n_steps, obs.iter().map(|o| o[0].unwrap()));
    let klat = kernel.gram(&pts).unwrap();
    let mean = &klat * chol.solve(&y);
    let cov = &klat - &klat * chol.solve(&klat.clone());
    let mut err1: f64 = 0.0;
    for k in 0..n_steps {
        err1 = err1.max((sm.means[k][0] - mean[k]).abs());
        err1 = err1.max((sm.covs[k][(0, 0)] - cov[(k, k)]).abs());
    }

    // 3-state model vs the dense batch solve
    let mut rng = substream(202, 1);
    let phi = DMatrix::from_row_slice(3, 3, &[0.9, 0.1, 0.0, 0.0, 0.8, 0.2, 0.05, 0.0, 0.7]);
    let m3 = StateSpaceModel {
        phi,
        b: DMatrix::zeros(3, 0),
        controls: vec![],
        q: DMatrix::identity(3, 3) * 0.05,
        h: DMatrix::from_row_slice(2, 3, &[1.0, 0.0, 0.0, 0.0, 1.0, 1.0]),
        r: DMatrix::identity(2, 2) * 0.1,
        x0: DVector::from_vec(vec![0.5, -0.2, 0.1]),
        p0: DMatrix::identity(3, 3) * 0.3,
    };
    let obs3: Vec<StepObs> = (0..40)
        .map(|_| {
            (0..2)
                .map(|_| {
                    if rng.gen_bool(0.85) {
                        Some(rng.sample::<f64, _>(StandardNormal))
                    } else {
                        None
                    }
                })
                .collect()
        })
        .collect();
    let sm3 = kalman_smooth(&m3, &obs3).unwrap();
    let (bm, bc) = batch_smooth(&m3, &obs3);
    let mut err2: f64 = 0.0;
    for k in 0..obs3.len() {
        err2 = err2.max((&sm3.means[k] - &bm[k]).abs().max());
        err2 = err2.max((&sm3.covs[k] - &bc[k]).abs().max());
    }

    let elapsed = started.elapsed();
    let ok = err1 < 1e-6 && err2 < 1e-8 && elapsed < Duration::from_secs(5);
    report(
        2,
        "smoother-equals-gp",
        ok,
        &format!("brownian error {err1:.3e}, 3-state error {err2:.3e}, {elapsed:.2?}"),
    );
}

// ---------------------------------------------------------------------------
// 3. Integrated GP internal consistency
// ---------------------------------------------------------------------------

#[test]
fn criterion_03_igp_consistency() {
    // quadrature vs the erf closed form on random squared-exponential kernels
    let mut quad_err: f64 = 0.0;
    let mut rng = substream(303, 0);
    for _ in 0..25 {
        let k = Kernel::SquaredExponential {
            s2: rng.gen_range(0.1..2.0),
            l: rng.gen_range(50.0..2000.0),
        };
        let s = rng.gen_range(0.0..3000.0);
        let t = rng.gen_range(0.0..3000.0);
        let exact = integrated_cov(&k, s, t, -100.0).unwrap();
        let quad = integrated_cov_quad(&k, s, t, -100.0).unwrap();
        quad_err = quad_err.max((exact - quad).abs() / exact.abs().max(1.0));
    }

    // finite differences of the posterior mean level track the posterior
    // mean rate on smooth truths (constant rate and a gentle curve)
    let mut fd_err: f64 = 0.0;
    for (case, truth) in [
        |t: f64| 0.001 * t,
        |t: f64| 0.0005 * t + 2.5e-7 * t * t,
    ]
    .iter()
    .enumerate()
    {
        let mut rng = substream(303, 10 + case as u64);
        let obs_vec: Vec<Observation> = (0..80)
            .map(|i| {
                let t = i as f64 * 25.0;
                let e: f64 = rng.sample(StandardNormal);
                obs_at(t, truth(t) + 0.01 * e, 0.01, 0.0)
            })
            .collect();
        let d = Dataset::new(obs_vec, "igp").unwrap();
        let grid: Vec<f64> = (0..21).map(|i| i as f64 * 100.0).collect();
        let mcmc = McmcSettings { n_draws: 1200, n_burn: 1200, n_chains: 2, seed: 3 };
        let fit = fit_eiv_igp(&d, &IgpSpec::default(), &mcmc, &grid).unwrap();
        let t = fit.level.times();
        let rate_scale =
            fit.rate.mean.iter().map(|v| v.abs()).fold(0.0f64, f64::max).max(1e-12);
        for i in 2..grid.len() - 2 {
            let fd = (fit.level.mean[i + 1] - fit.level.mean[i - 1]) / (t[i + 1] - t[i - 1]);
            fd_err = fd_err.max((fd - fit.rate.mean[i]).abs() / rate_scale);
        }
    }

    let ok = quad_err < 1e-8 && fd_err < 0.02;
    report(
        3,
        "igp-consistency",
        ok,
        &format!("quadrature error {quad_err:.3e}, interior FD error {:.2}%", fd_err * 100.0),
    );
}

// ---------------------------------------------------------------------------
// 4. Change-point recovery
// ---------------------------------------------------------------------------

fn kink_dataset(
    cps: &[f64],
    rates: &[f64],
    ts: &[f64],
    rsl_sd: f64,
    age_sd: f64,
    seed: u64,
) -> Dataset {
    let mut rng = substream(404, seed);
    let truth = |t: f64| rsl_core::trend::piecewise_eval(cps, rates, 0.0, t);
    let obs: Vec<Observation> = ts
        .iter()
        .map(|&t| {
            let e: f64 = rng.sample(StandardNormal);
            obs_at(t, truth(t) + rsl_sd * e, rsl_sd, age_sd)
        })
        .collect();
    Dataset::new(obs, "kink").unwrap()
}

#[test]
fn criterion_04_changepoint_recovery() {
    let started = Instant::now();

    // one planted kink: rate 1 -> 3 mm/yr at gamma = 1500, n = 120
    let ts: Vec<f64> = (0..120).map(|i| i as f64 * 3000.0 / 119.0).collect();
    let mut covered = 0;
    for rep in 0..100u64 {
        let d = kink_dataset(&[1500.0], &[0.001, 0.003], &ts, 0.05, 20.0, rep);
        let priors = ChangePointPriors::defaults(&d);
        let mcmc = McmcSettings { n_draws: 2000, n_burn: 2000, n_chains: 2, seed: rep };
        let fit = fit_changepoint(&d, 1, &priors, &mcmc).unwrap();
        let mut draws: Vec<f64> = fit.change_points.column(0).iter().cloned().collect();
        draws.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let lo = draws[(0.025 * draws.len() as f64) as usize];
        let hi = draws[(0.975 * draws.len() as f64) as usize];
        if (lo..=hi).contains(&1500.0) {
            covered += 1;
        }
    }

    // two planted kinks: DIC scan picks n_cp = 2
    let ts2: Vec<f64> = (0..45).map(|i| i as f64 * 100.0 / 44.0).collect();
    let mut selected = 0;
    for rep in 0..50u64 {
        let d = kink_dataset(&[30.0, 65.0], &[0.01, 0.06, -0.03], &ts2, 0.04, 0.0, 1000 + rep);
        let priors = ChangePointPriors::defaults(&d);
        let mcmc = McmcSettings { n_draws: 3000, n_burn: 3000, n_chains: 2, seed: rep };
        if select_changepoints(&d, 3, &priors, &mcmc).unwrap().best_n_cp == 2 {
            selected += 1;
        }
    }

    let elapsed = started.elapsed();
    let ok = covered >= 90 && selected >= 40 && elapsed < Duration::from_secs(600);
    report(
        4,
        "changepoint-recovery",
        ok,
        &format!(
            "gamma CI covered {covered}/100, true count selected {selected}/50, {elapsed:.2?}"
        ),
    );
}

// ---------------------------------------------------------------------------
// 5. Hyperparameter recovery by maximum marginal likelihood
// ---------------------------------------------------------------------------

fn matern_white_spec() -> GpModelSpec {
    GpModelSpec::new(
        MeanFn::Zero,
        vec![
            BoundedParam::log("amp", 1e-2, 10.0),
            BoundedParam::log("len", 10.0, 1e4),
            BoundedParam::log("white", 1e-3, 1.0),
        ],
        |t| {
            Kernel::Sum(vec![
                Kernel::Matern { s2: t[0] * t[0], l: t[1], nu: MaternNu::ThreeHalves },
                Kernel::WhiteNoise { s2: t[2] * t[2] },
            ])
        },
    )
}

fn sample_from_kernel(kernel: &Kernel, times: &[f64], noise_sd: f64, seed: u64) -> Dataset {
    let pts: Vec<Point> = times.iter().map(|&t| Point::temporal(t)).collect();
    let mut gram = kernel.gram(&pts).unwrap();
    for i in 0..gram.nrows() {
        gram[(i, i)] += 1e-10;
    }
    let chol = gram.cholesky().unwrap();
    let mut rng = substream(505, seed);
    let z = DVector::from_fn(times.len(), |_, _| rng.sample::<f64, _>(StandardNormal));
    let f = chol.l() * z;
    let obs: Vec<Observation> = times
        .iter()
        .zip(f.iter())
        .map(|(&t, &fi)| {
            let e: f64 = rng.sample(StandardNormal);
            obs_at(t, fi + noise_sd * e, noise_sd, 0.0)
        })
        .collect();
    Dataset::new(obs, "draw").unwrap()
}

#[test]
fn criterion_05_mle_recovery() {
    let spec = matern_white_spec();
    let truth = [1.0, 300.0, 0.1];
    let kernel = spec.kernel(&truth).unwrap();
    let times: Vec<f64> = (0..300).map(|i| i as f64 * 10.0).collect();
    let mut ok_reps = 0;
    for rep in 0..50 {
        let d = sample_from_kernel(&kernel, &times, 0.05, rep);
        let fit = fit_et_gp(&d, &spec, 0, rep).unwrap();
        if fit
            .theta
            .iter()
            .zip(&truth)
            .all(|(&est, &tr)| (est.ln() - tr.ln()).abs() <= 0.7)
        {
            ok_reps += 1;
        }
    }
    report(5, "mle-recovery", ok_reps >= 40, &format!("recovered in {ok_reps}/50 replications"));
}

// ---------------------------------------------------------------------------
// 6. Noisy-input GP calibration
// ---------------------------------------------------------------------------

#[test]
fn criterion_06_nigp_calibration() {
    // fitted inflation approaches s²σ_t² on a steep line
    let (s, age_sd, rsl_sd) = (0.02, 15.0, 0.02);
    let times: Vec<f64> = (0..200).map(|i| i as f64 * 10.0).collect();
    let mut rng = substream(606, 0);
    let obs_vec: Vec<Observation> = times
        .iter()
        .map(|&t| {
            let e: f64 = rng.sample(StandardNormal);
            obs_at(t, s * t + rsl_sd * e, rsl_sd, age_sd)
        })
        .collect();
    let d = Dataset::new(obs_vec, "line").unwrap();
    let spec = GpModelSpec::new(
        MeanFn::Constant,
        vec![
            BoundedParam::log("amp", 1e-2, 100.0),
            BoundedParam::log("len", 100.0, 1e5),
            BoundedParam::log("white", 1e-4, 1.0),
        ],
        |t| {
            Kernel::Sum(vec![
                Kernel::Matern { s2: t[0] * t[0], l: t[1], nu: MaternNu::ThreeHalves },
                Kernel::WhiteNoise { s2: t[2] * t[2] },
            ])
        },
    );
    let fit = fit_nigp(&d, &spec, 1, 3, 10).unwrap();
    let expect = s * s * age_sd * age_sd;
    let interior = &fit.inflation[20..180];
    let mean_infl = interior.iter().sum::<f64>() / interior.len() as f64;
    let infl_rel = (mean_infl - expect).abs() / expect;

    // predictive coverage of fresh replicate observations at the same
    // recorded ages: the naive fit (trusting only the stated vertical
    // errors) chases the age-noise scatter and its intervals miss new
    // draws; the noisy-input fit's inflated variance stays calibrated
    let noise_spec = || {
        GpModelSpec::new(
            MeanFn::Linear,
            vec![
                BoundedParam::log("amp", 1e-2, 100.0),
                BoundedParam::log("len", 500.0, 1e5),
            ],
            |t| Kernel::Matern { s2: t[0] * t[0], l: t[1], nu: MaternNu::ThreeHalves },
        )
    };
    let cover = |fit: &rsl_core::gp::FittedGp, d: &Dataset, fresh: &[f64]| -> f64 {
        let ages: Vec<f64> = d.ages();
        let field = fit.predict(&ages).unwrap();
        let sd = field.sd();
        let inside = fresh
            .iter()
            .enumerate()
            .filter(|(i, y)| {
                let s2 = sd[*i] * sd[*i] + rsl_sd * rsl_sd + fit.inflation[*i];
                (*y - field.mean[*i]).abs() <= 1.96 * s2.sqrt()
            })
            .count();
        inside as f64 / fresh.len() as f64
    };
    let (mut naive_cov, mut nigp_cov) = (0.0, 0.0);
    let reps = 20;
    for rep in 0..reps {
        let mut rng = substream(607, rep);
        let mut draw = |i: usize| {
            let t_true = i as f64 * 10.0 + age_sd * rng.sample::<f64, _>(StandardNormal);
            s * t_true + rsl_sd * rng.sample::<f64, _>(StandardNormal)
        };
        let obs_vec: Vec<Observation> =
            (0..120).map(|i| obs_at(i as f64 * 10.0, draw(i), rsl_sd, age_sd)).collect();
        let fresh: Vec<f64> = (0..120).map(&mut draw).collect();
        let d = Dataset::new(obs_vec, "noisy").unwrap();
        let naive = fit_et_gp(&d, &noise_spec(), 1, rep).unwrap();
        let nigp = fit_nigp(&d, &noise_spec(), 1, rep, 10).unwrap();
        naive_cov += cover(&naive, &d, &fresh) / reps as f64;
        nigp_cov += cover(&nigp, &d, &fresh) / reps as f64;
    }

    let ok = infl_rel < 0.25 && naive_cov < 0.90 && (0.92..=0.985).contains(&nigp_cov);
    report(
        6,
        "nigp-calibration",
        ok,
        &format!(
            "inflation off by {:.0}%, naive coverage {naive_cov:.3}, NIGP coverage {nigp_cov:.3}",
            infl_rel * 100.0
        ),
    );
}

// ---------------------------------------------------------------------------
// 7. In-sample coverage of the temporal and spatio-temporal GP fits
// ---------------------------------------------------------------------------

fn five_sites() -> Vec<(f64, f64)> {
    vec![(39.0, -74.0), (42.0, -71.0), (35.0, -77.0), (44.0, -68.0), (37.0, -76.0)]
}

fn st_truth_kernel() -> Kernel {
    Kernel::SeparableSpaceTime {
        temporal: Box::new(Kernel::Matern { s2: 0.09, l: 1500.0, nu: MaternNu::ThreeHalves }),
        spatial: Box::new(Kernel::Matern { s2: 1.0, l: 8.0, nu: MaternNu::ThreeHalves }),
    }
}

#[test]
fn criterion_07_in_sample_coverage() {
    // temporal fit
    let truth_kernel = matern_white_spec().kernel(&[0.6, 250.0, 0.0011]).unwrap();
    let times: Vec<f64> = (0..40).map(|i| i as f64 * 25.0).collect();
    let mut et_cov = 0.0;
    for rep in 0..100 {
        let d = sample_from_kernel(&truth_kernel, &times, 0.05, 700 + rep);
        let fit = fit_et_gp(&d, &matern_white_spec(), 0, rep).unwrap();
        let field = fit.predict(&times).unwrap();
        let white = fit.theta[2] * fit.theta[2];
        et_cov += coverage(&field, &d, 0.95, white).unwrap() / 100.0;
    }

    // spatio-temporal fit
    let mut est_cov = 0.0;
    for rep in 0..100 {
        let spec = SyntheticTruth {
            intercept: 0.0,
            rates: vec![0.0005],
            change_points: vec![],
            kernel: Some(st_truth_kernel()),
            sites: five_sites(),
            t_range: (0.0, 3000.0),
            seed: 7000 + rep,
        };
        let (d, _) = generate(&spec, 75, 0.02, 0.0, ObsKind::CoreSample).unwrap();
        let fit = fit_est_gp(&d, &StGpSpec::default(), 0, rep).unwrap();
        let grid: Vec<Point> = d
            .observations
            .iter()
            .map(|o| Point::spatial(o.age_mean, o.latitude, o.longitude))
            .collect();
        let field = predict_field(&fit, &grid).unwrap();
        est_cov += coverage(&field, &d, 0.95, fit.white_variance()).unwrap() / 100.0;
    }

    let ok = et_cov >= 0.93 && est_cov >= 0.93;
    report(
        7,
        "in-sample-coverage",
        ok,
        &format!("temporal {et_cov:.3}, spatio-temporal {est_cov:.3}"),
    );
}

// ---------------------------------------------------------------------------
// 8. Leave-site-out coverage
// ---------------------------------------------------------------------------

#[test]
fn criterion_08_leave_site_out() {
    let mut coverages = Vec::new();
    for rep in 0..50 {
        let spec = SyntheticTruth {
            intercept: 0.0,
            rates: vec![0.0005],
            change_points: vec![],
            kernel: Some(st_truth_kernel()),
            sites: five_sites(),
            t_range: (0.0, 3000.0),
            seed: 8000 + rep,
        };
        let (d, _) = generate(&spec, 100, 0.02, 0.0, ObsKind::CoreSample).unwrap();
        let score =
            rsl_core::validation::leave_site_out(&d, "site02", &StGpSpec::default(), 0, rep)
                .unwrap();
        coverages.push(score.coverage);
    }
    coverages.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let median = coverages[coverages.len() / 2];
    report(8, "leave-site-out", median >= 0.85, &format!("median held-out coverage {median:.3}"));
}

// ---------------------------------------------------------------------------
// 9. EOF exactness
// ---------------------------------------------------------------------------

#[test]
fn criterion_09_eof_exactness() {
    let (n_loc, n_time, k) = (12, 40, 3);
    let mut rng = substream(909, 0);
    let grid: Vec<(f64, f64)> = (0..n_loc).map(|i| (i as f64 * 5.0, -70.0)).collect();

    // exact rank-k field: means plus k separable terms
    let patterns = DMatrix::from_fn(n_loc, k, |_, _| rng.sample::<f64, _>(StandardNormal));
    let amps = DMatrix::from_fn(k, n_time, |_, _| rng.sample::<f64, _>(StandardNormal));
    let means = DVector::from_fn(n_loc, |_, _| rng.sample::<f64, _>(StandardNormal));
    let mut field = &patterns * &amps;
    for i in 0..n_loc {
        let row_mean = field.row(i).mean();
        for t in 0..n_time {
            field[(i, t)] += means[i] - row_mean;
        }
    }
    let basis = eof_decompose(&field, &grid, k).unwrap();
    let mut anomaly = field.clone();
    for i in 0..n_loc {
        for t in 0..n_time {
            anomaly[(i, t)] -= basis.time_means[i];
        }
    }
    let recon = &basis.patterns * (basis.patterns.transpose() * &anomaly);
    let recon_err = (&recon - &anomaly).abs().max();

    // noiseless regression recovers the planted uniform term and amplitudes
    let g_true: Vec<f64> = (0..n_time).map(|t| 0.1 * t as f64).collect();
    let a_true = DMatrix::from_fn(k, n_time, |_, _| rng.sample::<f64, _>(StandardNormal));
    let obs: Vec<Vec<Option<f64>>> = (0..n_time)
        .map(|t| {
            (0..n_loc)
                .map(|i| {
                    let mut v = g_true[t];
                    for j in 0..k {
                        v += basis.patterns[(i, j)] * a_true[(j, t)];
                    }
                    Some(v)
                })
                .collect()
        })
        .collect();
    let reg = eof_regress(&basis, &obs, None).unwrap();
    let mut reg_err: f64 = 0.0;
    for t in 0..n_time {
        reg_err = reg_err.max((reg.g[t] - g_true[t]).abs());
        for j in 0..k {
            reg_err = reg_err.max((reg.alphas[(j, t)] - a_true[(j, t)]).abs());
        }
    }

    let ok = recon_err <= 1e-10 && reg_err <= 1e-9;
    report(
        9,
        "eof-exactness",
        ok,
        &format!("reconstruction error {recon_err:.3e}, regression error {reg_err:.3e}"),
    );
}

// ---------------------------------------------------------------------------
// 10. Virtual-station averaging
// ---------------------------------------------------------------------------

#[test]
fn criterion_10_virtual_station() {
    // idempotence: duplicating a gauge never changes the result
    let n_time = 60;
    let mut rng = substream(1010, 0);
    let values: Vec<Option<f64>> =
        (0..n_time).map(|_| Some(rng.sample::<f64, _>(StandardNormal))).collect();
    let gauge = |id: &str| GaugeSeries {
        site_id: id.to_string(),
        location: (10.0, 20.0),
        values: values.clone(),
    };
    let region = |sites: Vec<&str>| Region {
        name: "r".into(),
        sites: sites.into_iter().map(String::from).collect(),
        weight: 1.0,
    };
    let single = virtual_station_gmsl(&[gauge("a")], &[region(vec!["a"])]).unwrap();
    let tripled = virtual_station_gmsl(
        &[gauge("a"), gauge("b"), gauge("c")],
        &[region(vec!["a", "b", "c"])],
    )
    .unwrap();
    let idempotent = single.gmsl == tripled.gmsl;

    // two regions at 1 and 3 mm/yr with equal weights average to 2.0 mm/yr
    let span = 100.0;
    let line = |rate: f64, id: &str, lat: f64| GaugeSeries {
        site_id: id.to_string(),
        location: (lat, 0.0),
        values: (0..=100).map(|t| Some(rate * t as f64)).collect(),
    };
    let regions = vec![
        Region { name: "a".into(), sites: vec!["ga".into()], weight: 0.5 },
        Region { name: "b".into(), sites: vec!["gb".into()], weight: 0.5 },
    ];
    let out =
        virtual_station_gmsl(&[line(0.001, "ga", 10.0), line(0.003, "gb", -10.0)], &regions)
            .unwrap();
    let global_rate = (out.gmsl[100] - out.gmsl[0]) / span;
    let rate_err = (global_rate - 0.002).abs();

    let ok = idempotent && rate_err < 1e-9;
    report(
        10,
        "virtual-station",
        ok,
        &format!("idempotent: {idempotent}, global rate error {rate_err:.2e} m/yr"),
    );
}

// ---------------------------------------------------------------------------
// 11. Scaling behavior
// ---------------------------------------------------------------------------

fn min_time<F: FnMut()>(reps: usize, mut f: F) -> f64 {
    let mut best = f64::INFINITY;
    for _ in 0..reps {
        let t = Instant::now();
        f();
        best = best.min(t.elapsed().as_secs_f64());
    }
    best
}

#[test]
fn criterion_11_scaling() {
    // GP fitting is cubic: doubling n multiplies fit time by about 8.
    // The kernel hyperparameters are pinned so every fit costs exactly one
    // marginal-likelihood evaluation; otherwise the ratio of two single
    // timings is dominated by optimizer iteration-count differences
    // between the datasets rather than by the n-scaling under test.
    let make = |n: usize| {
        let times: Vec<f64> = (0..n).map(|i| 3000.0 * i as f64 / n as f64).collect();
        let kernel = matern_white_spec().kernel(&[0.6, 400.0, 0.05]).unwrap();
        sample_from_kernel(&kernel, &times, 0.05, n as u64)
    };
    let pinned = || {
        GpModelSpec::new(MeanFn::Constant, vec![], |_| {
            Kernel::Sum(vec![
                Kernel::Matern { s2: 0.36, l: 400.0, nu: MaternNu::ThreeHalves },
                Kernel::WhiteNoise { s2: 0.0025 },
            ])
        })
    };
    let (d200, d400) = (make(200), make(400));
    let time_fit = |d: &Dataset, inner: usize| {
        min_time(8, || {
            for _ in 0..inner {
                fit_et_gp(d, &pinned(), 0, 0).unwrap();
            }
        }) / inner as f64
    };
    let gp_ratio = time_fit(&d400, 4) / time_fit(&d200, 16);

    // Kalman smoothing is linear: per-step time is flat in the step count
    let model = StateSpaceModel {
        phi: DMatrix::identity(4, 4),
        b: DMatrix::zeros(4, 0),
        controls: vec![],
        q: DMatrix::identity(4, 4) * 0.01,
        h: DMatrix::identity(4, 4),
        r: DMatrix::identity(4, 4) * 0.1,
        x0: DVector::zeros(4),
        p0: DMatrix::identity(4, 4),
    };
    let mut rng = substream(1111, 0);
    let obs: Vec<StepObs> = (0..2000)
        .map(|_| (0..4).map(|_| Some(rng.sample::<f64, _>(StandardNormal))).collect())
        .collect();
    let t1000 = min_time(5, || {
        kalman_smooth(&model, &obs[..1000]).unwrap();
    });
    let t2000 = min_time(5, || {
        kalman_smooth(&model, &obs).unwrap();
    });
    let ks_ratio = (t2000 / 2000.0) / (t1000 / 1000.0);

    let ok = (5.0..=12.0).contains(&gp_ratio) && (0.8..=1.25).contains(&ks_ratio);
    report(
        11,
        "scaling",
        ok,
        &format!("GP fit time ratio {gp_ratio:.2}, KS per-step ratio {ks_ratio:.3}"),
    );
}

// ---------------------------------------------------------------------------
// 12. Multi-model weighting
// ---------------------------------------------------------------------------

#[test]
fn criterion_12_multi_model_weighting() {
    let scalar = |q: f64| StateSpaceModel {
        phi: DMatrix::identity(1, 1),
        b: DMatrix::zeros(1, 0),
        controls: vec![],
        q: DMatrix::from_element(1, 1, q),
        h: DMatrix::identity(1, 1),
        r: DMatrix::from_element(1, 1, 0.1),
        x0: DVector::zeros(1),
        p0: DMatrix::identity(1, 1),
    };
    let q_true: f64 = 0.05;
    let mut hits = 0;
    for rep in 0..50 {
        let mut rng = substream(1212, rep);
        let mut x = 0.0;
        let obs: Vec<StepObs> = (0..200)
            .map(|_| {
                x += q_true.sqrt() * rng.sample::<f64, _>(StandardNormal);
                vec![Some(x + 0.1f64.sqrt() * rng.sample::<f64, _>(StandardNormal))]
            })
            .collect();
        let res = multi_model_smooth(&[scalar(q_true), scalar(10.0 * q_true)], &obs).unwrap();
        if res.weights[0] >= 0.9 {
            hits += 1;
        }
    }
    report(12, "multi-model-weighting", hits >= 45, &format!("true model won {hits}/50"));
}

// ---------------------------------------------------------------------------
// 13. CLI determinism
// ---------------------------------------------------------------------------

fn run_cli(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_rsl")).args(args).output().unwrap()
}

/// Run one subcommand twice with the same seed and compare every CSV output
/// byte for byte (the manifest carries wall times and is excluded).
fn deterministic(subcommand: &str, extra: &[&str], dir: &Path) -> bool {
    let (a, b) = (dir.join(format!("{subcommand}-a")), dir.join(format!("{subcommand}-b")));
    for out in [&a, &b] {
        let mut args = vec![subcommand];
        args.extend_from_slice(extra);
        args.extend_from_slice(&["--seed", "17", "--out", out.to_str().unwrap()]);
        let res = run_cli(&args);
        assert!(
            res.status.success(),
            "{subcommand} failed: {}",
            String::from_utf8_lossy(&res.stderr)
        );
    }
    let mut names: Vec<String> = std::fs::read_dir(&a)
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .filter(|n| n.ends_with(".csv"))
        .collect();
    names.sort();
    assert!(!names.is_empty(), "{subcommand} produced no CSV outputs");
    names.iter().all(|n| {
        std::fs::read(a.join(n)).unwrap() == std::fs::read(b.join(n)).unwrap()
    })
}

#[test]
fn criterion_13_cli_determinism() {
    let dir = tempfile::tempdir().unwrap();
    let base = dir.path();

    // single-site synthetic input for the temporal fits
    let cfg1 = base.join("one.cfg");
    std::fs::write(
        &cfg1,
        "rates = 0.001\nsites = 39:-74\nt_end = 2000\nn = 25\nrsl_sd = 0.03\nage_sd = 15\n\
         kernel = matern(s2=0.04, l=800, nu=1.5)\n",
    )
    .unwrap();
    let one = base.join("one");
    assert!(run_cli(&[
        "synth",
        "--config",
        cfg1.to_str().unwrap(),
        "--seed",
        "1",
        "--out",
        one.to_str().unwrap()
    ])
    .status
    .success());
    let one_csv = one.join("dataset.csv");
    let one_csv = one_csv.to_str().unwrap();

    // multi-site synthetic input for the spatio-temporal fits
    let cfg5 = base.join("five.cfg");
    std::fs::write(
        &cfg5,
        "rates = 0.0005\nsites = 39:-74;42:-71;35:-77\nt_end = 3000\nn = 45\nrsl_sd = 0.02\n\
         kernel = spacetime(matern(s2=0.09,l=1500,nu=1.5), matern(s2=1,l=8,nu=1.5))\n",
    )
    .unwrap();
    let five = base.join("five");
    assert!(run_cli(&[
        "synth",
        "--config",
        cfg5.to_str().unwrap(),
        "--seed",
        "2",
        "--out",
        five.to_str().unwrap()
    ])
    .status
    .success());
    let five_csv = five.join("dataset.csv");
    let five_csv = five_csv.to_str().unwrap();

    let mcmc_cfg = base.join("mcmc.cfg");
    std::fs::write(&mcmc_cfg, "draws = 300\nburn = 300\nchains = 1\n").unwrap();
    let mcmc_cfg = mcmc_cfg.to_str().unwrap();

    let checks: Vec<(&str, Vec<&str>)> = vec![
        ("synth", vec!["--config", cfg1.to_str().unwrap()]),
        ("fit-gp", vec!["--input", one_csv, "--grid", "0:2000:200"]),
        ("fit-nigp", vec!["--input", one_csv, "--grid", "0:2000:200"]),
        ("fit-changepoint", vec!["--input", one_csv, "--config", mcmc_cfg]),
        ("fit-igp", vec!["--input", one_csv, "--config", mcmc_cfg, "--grid", "0:2000:250"]),
        ("fit-stgp", vec!["--input", five_csv, "--grid", "0:3000:500"]),
        ("decompose", vec!["--input", five_csv, "--grid", "0:3000:750"]),
        ("cross-validate", vec!["--input", five_csv]),
    ];
    let mut failed = Vec::new();
    for (sub, extra) in &checks {
        if !deterministic(sub, extra, base) {
            failed.push(*sub);
        }
    }
    report(
        13,
        "cli-determinism",
        failed.is_empty(),
        &format!("{} stochastic subcommands byte-identical; failures: {failed:?}", checks.len()),
    );
}
