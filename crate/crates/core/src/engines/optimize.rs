//! Multi-start Nelder-Mead simplex maximization over bounded parameters.
//!
//! The simplex runs in transformed coordinates (log where the parameter is
//! positive) and candidate points are clamped into the bounds before the
//! objective is evaluated, so boundary optima are representable.

use rand::Rng;

use super::{substream, BoundedParam};
use crate::error::{Error, Result};

/// Maximize `objective` over the bounded parameter box with `restarts`
/// additional random starting points (restart 0 always starts from the box
/// midpoint). Returns the best parameter vector and its objective value.
pub fn maximize(
    objective: &dyn Fn(&[f64]) -> f64,
    params: &[BoundedParam],
    restarts: usize,
    seed: u64,
) -> Result<(Vec<f64>, f64)> {
    maximize_with_budget(objective, params, restarts, seed, 400)
}

/// As `maximize`, with an explicit per-start iteration budget.
pub fn maximize_with_budget(
    objective: &dyn Fn(&[f64]) -> f64,
    params: &[BoundedParam],
    restarts: usize,
    seed: u64,
    max_iters: usize,
) -> Result<(Vec<f64>, f64)> {
    for p in params {
        p.validate()?;
    }
    let free: Vec<usize> = params
        .iter()
        .enumerate()
        .filter(|(_, p)| !p.is_fixed())
        .map(|(i, _)| i)
        .collect();

    let fixed_values: Vec<f64> = params.iter().map(|p| p.lower).collect();
    if free.is_empty() {
        let v = objective(&fixed_values);
        return Ok((fixed_values, v));
    }

    let expand = |z: &[f64]| -> Vec<f64> {
        let mut x = fixed_values.clone();
        for (k, &i) in free.iter().enumerate() {
            x[i] = params[i].from_internal(z[k]);
        }
        x
    };
    let f = |z: &[f64]| -> f64 { objective(&expand(z)) };

    let mut best: Option<(Vec<f64>, f64)> = None;
    for r in 0..=restarts {
        let mut rng = substream(seed, r as u64);
        let start: Vec<f64> = free
            .iter()
            .map(|&i| {
                let (lo, hi) = params[i].internal_bounds();
                if r == 0 {
                    0.5 * (lo + hi)
                } else {
                    rng.gen_range(0.0..1.0) * (hi - lo) + lo
                }
            })
            .collect();
        if let Some((z, v)) = nelder_mead(&f, &start, &free, params, max_iters) {
            let x = expand(&z);
            // the polished optimum can never be worse than its start point
            debug_assert!(v >= f(&start) || !f(&start).is_finite());
            match &best {
                Some((_, bv)) if *bv >= v => {}
                _ => best = Some((x, v)),
            }
        }
    }
    best.ok_or_else(|| {
        Error::Optimization("objective was non-finite at every starting point".into())
    })
}

fn nelder_mead(
    f: &dyn Fn(&[f64]) -> f64,
    start: &[f64],
    free: &[usize],
    params: &[BoundedParam],
    max_iters: usize,
) -> Option<(Vec<f64>, f64)> {
    let d = start.len();
    let clamp = |z: &mut Vec<f64>| {
        for (k, &i) in free.iter().enumerate() {
            let (lo, hi) = params[i].internal_bounds();
            z[k] = z[k].clamp(lo, hi);
        }
    };

    // initial simplex: start plus one perturbed vertex per dimension
    let mut simplex: Vec<(Vec<f64>, f64)> = Vec::with_capacity(d + 1);
    let f0 = f(start);
    if !f0.is_finite() {
        return None;
    }
    simplex.push((start.to_vec(), f0));
    for k in 0..d {
        let (lo, hi) = params[free[k]].internal_bounds();
        let span = (hi - lo).max(1e-8);
        let mut v = start.to_vec();
        v[k] += 0.1 * span * if v[k] + 0.1 * span <= hi { 1.0 } else { -1.0 };
        clamp(&mut v);
        let fv = f(&v);
        simplex.push((v, if fv.is_finite() { fv } else { f64::NEG_INFINITY }));
    }

    let (alpha, gamma, rho, sigma) = (1.0, 2.0, 0.5, 0.5);
    for _ in 0..max_iters {
        // maximize: order descending by value
        simplex.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap_or(std::cmp::Ordering::Equal));
        let best_v = simplex[0].1;
        let worst_v = simplex[d].1;
        if best_v.is_finite() && worst_v.is_finite() && (best_v - worst_v).abs() < 1e-12 {
            break;
        }

        let centroid: Vec<f64> = (0..d)
            .map(|k| simplex[..d].iter().map(|(v, _)| v[k]).sum::<f64>() / d as f64)
            .collect();
        let worst = simplex[d].0.clone();

        let mut reflected: Vec<f64> = (0..d)
            .map(|k| centroid[k] + alpha * (centroid[k] - worst[k]))
            .collect();
        clamp(&mut reflected);
        let fr = finite_or_neg_inf(f(&reflected));

        if fr > simplex[0].1 {
            let mut expanded: Vec<f64> = (0..d)
                .map(|k| centroid[k] + gamma * (reflected[k] - centroid[k]))
                .collect();
            clamp(&mut expanded);
            let fe = finite_or_neg_inf(f(&expanded));
            simplex[d] = if fe > fr { (expanded, fe) } else { (reflected, fr) };
        } else if fr > simplex[d - 1].1 {
            simplex[d] = (reflected, fr);
        } else {
            let mut contracted: Vec<f64> = (0..d)
                .map(|k| centroid[k] + rho * (worst[k] - centroid[k]))
                .collect();
            clamp(&mut contracted);
            let fc = finite_or_neg_inf(f(&contracted));
            if fc > simplex[d].1 {
                simplex[d] = (contracted, fc);
            } else {
                // shrink toward the best vertex
                let best_pt = simplex[0].0.clone();
                for item in simplex.iter_mut().skip(1) {
                    let mut v: Vec<f64> = (0..d)
                        .map(|k| best_pt[k] + sigma * (item.0[k] - best_pt[k]))
                        .collect();
                    clamp(&mut v);
                    let fv = finite_or_neg_inf(f(&v));
                    *item = (v, fv);
                }
            }
        }
    }
    simplex.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap_or(std::cmp::Ordering::Equal));
    let (z, v) = simplex.swap_remove(0);
    if v.is_finite() {
        Some((z, v))
    } else {
        None
    }
}

fn finite_or_neg_inf(v: f64) -> f64 {
    if v.is_finite() {
        v
    } else {
        f64::NEG_INFINITY
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_interior_maximum() {
        let obj = |x: &[f64]| -(x[0] - 2.0) * (x[0] - 2.0);
        let params = vec![BoundedParam::new("x", 0.0, 10.0)];
        let (xh, _) = maximize(&obj, &params, 2, 1).unwrap();
        assert!((xh[0] - 2.0).abs() < 1e-6, "{}", xh[0]);
    }

    #[test]
    fn clamped_boundary_maximum() {
        let obj = |x: &[f64]| -(x[0] - 20.0) * (x[0] - 20.0);
        let params = vec![BoundedParam::new("x", 0.0, 10.0)];
        let (xh, _) = maximize(&obj, &params, 2, 1).unwrap();
        assert!((xh[0] - 10.0).abs() < 1e-6, "{}", xh[0]);
    }

    #[test]
    fn rosenbrock_with_restarts() {
        let obj = |x: &[f64]| {
            -((1.0 - x[0]).powi(2) + 100.0 * (x[1] - x[0] * x[0]).powi(2))
        };
        let params = vec![
            BoundedParam::new("x", -2.0, 2.0),
            BoundedParam::new("y", -2.0, 2.0),
        ];
        // oracle: dense grid search over the box finds the optimum at (1,1)
        let mut best = (f64::NEG_INFINITY, 0.0, 0.0);
        for i in 0..=200 {
            for j in 0..=200 {
                let x = -2.0 + 0.02 * i as f64;
                let y = -2.0 + 0.02 * j as f64;
                let v = obj(&[x, y]);
                if v > best.0 {
                    best = (v, x, y);
                }
            }
        }
        assert!((best.1 - 1.0).abs() < 1e-9 && (best.2 - 1.0).abs() < 1e-9);
        let (xh, _) = maximize_with_budget(&obj, &params, 8, 42, 2000).unwrap();
        assert!((xh[0] - 1.0).abs() < 1e-3 && (xh[1] - 1.0).abs() < 1e-3, "{xh:?}");
    }

    #[test]
    fn monotone_in_restarts() {
        // a multimodal objective; more restarts can only improve the best value
        let obj = |x: &[f64]| (3.0 * x[0]).sin() + 0.5 * (7.0 * x[0]).sin() - 0.01 * x[0] * x[0];
        let params = vec![BoundedParam::new("x", -10.0, 10.0)];
        let mut prev = f64::NEG_INFINITY;
        for k in 0..6 {
            let (_, v) = maximize(&obj, &params, k, 9).unwrap();
            assert!(v >= prev - 1e-12, "restarts {k}: {v} < {prev}");
            prev = v;
        }
    }

    #[test]
    fn collapsed_bounds_return_the_point() {
        let obj = |x: &[f64]| -(x[0] - 5.0).powi(2) - (x[1] - 1.0).powi(2);
        let params = vec![
            BoundedParam::new("fixed", 3.0, 3.0),
            BoundedParam::new("free", 0.0, 10.0),
        ];
        let (xh, _) = maximize(&obj, &params, 1, 0).unwrap();
        assert_eq!(xh[0], 3.0);
        assert!((xh[1] - 1.0).abs() < 1e-6);
    }

    #[test]
    fn all_nonfinite_starts_error() {
        let obj = |_: &[f64]| f64::NAN;
        let params = vec![BoundedParam::new("x", 0.0, 1.0)];
        assert!(maximize(&obj, &params, 3, 0).is_err());
    }

    #[test]
    fn log_transform_positive_parameter() {
        let obj = |x: &[f64]| -(x[0].ln() - 2.0).powi(2);
        let params = vec![BoundedParam::log("x", 1e-3, 1e3)];
        let (xh, _) = maximize(&obj, &params, 3, 5).unwrap();
        assert!((xh[0].ln() - 2.0).abs() < 1e-5);
    }
}
