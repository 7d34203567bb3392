//! Covariance functions and kernel algebra for the GP-based models.
//!
//! Primitives operate on time (years) and, through `SeparableSpaceTime`, on
//! great-circle angular distance in degrees. Conventions:
//!
//! * `SquaredExponential{s2, l}`: `s2 * exp(-(r/l)^2)`, so it coincides with
//!   `PoweredExponential{nu2=s2, rho=exp(-1/l^2), kappa=2}`.
//! * `Matern` is implemented at the half-integer orders 1/2, 3/2 and 5/2 via
//!   their closed forms; `Matern(1/2)` is the standard exponential kernel
//!   `s2*exp(-r/l)`.
//! * `Brownian{q, t0}`: `q * min(t-t0, t'-t0)`, zero before `t0`.

mod parse;

pub use parse::parse_kernel;

use nalgebra::DMatrix;

use crate::error::{Error, Result};

/// A space-time evaluation point: time in years CE, optional (lat, lon).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Point {
    pub time: f64,
    pub location: Option<(f64, f64)>,
}

impl Point {
    pub fn temporal(time: f64) -> Self {
        Point { time, location: None }
    }

    pub fn spatial(time: f64, lat: f64, lon: f64) -> Self {
        Point { time, location: Some((lat, lon)) }
    }
}

/// Great-circle angular distance between two (lat, lon) points, in degrees
/// of arc, computed from the chord length (numerically stable near 0 and 180).
pub fn angular_distance(a: (f64, f64), b: (f64, f64)) -> f64 {
    let (lat1, lon1) = (a.0.to_radians(), a.1.to_radians());
    let (lat2, lon2) = (b.0.to_radians(), b.1.to_radians());
    let dlat = (lat2 - lat1) / 2.0;
    let dlon = (lon2 - lon1) / 2.0;
    let h = dlat.sin().powi(2) + lat1.cos() * lat2.cos() * dlon.sin().powi(2);
    let h = h.clamp(0.0, 1.0);
    (2.0 * h.sqrt().asin()).to_degrees()
}

/// Half-integer Matern smoothness order.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MaternNu {
    Half,
    ThreeHalves,
    FiveHalves,
}

impl MaternNu {
    pub fn value(&self) -> f64 {
        match self {
            MaternNu::Half => 0.5,
            MaternNu::ThreeHalves => 1.5,
            MaternNu::FiveHalves => 2.5,
        }
    }
}

/// Spatial field of dimensionless weights, defined at the analysis sites.
/// Used by the melt kernel to apply a sea-level fingerprint.
#[derive(Debug, Clone, PartialEq)]
pub struct Fingerprint {
    weights: Vec<((f64, f64), f64)>,
}

impl Fingerprint {
    pub fn new(weights: Vec<((f64, f64), f64)>) -> Self {
        Fingerprint { weights }
    }

    /// Constant weight at every listed site.
    pub fn constant(w: f64, sites: &[(f64, f64)]) -> Self {
        Fingerprint {
            weights: sites.iter().map(|&s| (s, w)).collect(),
        }
    }

    pub fn weight_at(&self, loc: (f64, f64)) -> Result<f64> {
        self.weights
            .iter()
            .find(|((lat, lon), _)| (lat - loc.0).abs() < 1e-9 && (lon - loc.1).abs() < 1e-9)
            .map(|&(_, w)| w)
            .ok_or_else(|| {
                Error::Config(format!("fingerprint has no weight at ({}, {})", loc.0, loc.1))
            })
    }
}

/// Composable covariance-function expression.
#[derive(Debug, Clone, PartialEq)]
pub enum Kernel {
    WhiteNoise { s2: f64 },
    DotProduct { s2_slope: f64, t0: f64 },
    Brownian { q: f64, t0: f64 },
    SquaredExponential { s2: f64, l: f64 },
    PoweredExponential { nu2: f64, rho: f64, kappa: f64 },
    RationalQuadratic { c: f64, alpha: f64, tau: f64 },
    Matern { s2: f64, l: f64, nu: MaternNu },
    Sum(Vec<Kernel>),
    Product(Vec<Kernel>),
    SeparableSpaceTime { temporal: Box<Kernel>, spatial: Box<Kernel> },
    /// Rank-one spatial weighting `B(x) B(x')` from a fingerprint field.
    SiteWeight { fingerprint: Fingerprint },
}

impl Kernel {
    /// Validate parameter ranges of the whole expression.
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        match self {
            Kernel::WhiteNoise { s2 } => {
                if !(*s2 >= 0.0 && s2.is_finite()) {
                    return bad(format!("white noise variance {s2} must be >= 0"));
                }
            }
            Kernel::DotProduct { s2_slope, t0 } => {
                if !(*s2_slope >= 0.0 && s2_slope.is_finite()) || !t0.is_finite() {
                    return bad("dot-product kernel needs s2_slope >= 0 and finite t0".into());
                }
            }
            Kernel::Brownian { q, t0 } => {
                if !(*q >= 0.0 && q.is_finite()) || !t0.is_finite() {
                    return bad("brownian kernel needs q >= 0 and finite t0".into());
                }
            }
            Kernel::SquaredExponential { s2, l } => {
                if !(*s2 >= 0.0 && s2.is_finite()) || !(*l > 0.0 && l.is_finite()) {
                    return bad("squared-exponential kernel needs s2 >= 0 and l > 0".into());
                }
            }
            Kernel::PoweredExponential { nu2, rho, kappa } => {
                if !(*nu2 >= 0.0 && nu2.is_finite()) {
                    return bad(format!("powered-exponential amplitude {nu2} must be >= 0"));
                }
                if !(*rho > 0.0 && *rho < 1.0) {
                    return bad(format!("correlation parameter {rho} must be in (0,1)"));
                }
                if !(*kappa > 0.0 && *kappa <= 2.0) {
                    return bad(format!("smoothness parameter {kappa} must be in (0,2]"));
                }
            }
            Kernel::RationalQuadratic { c, alpha, tau } => {
                if !(*c >= 0.0 && c.is_finite()) || !(*alpha > 0.0) || !(*tau > 0.0) {
                    return bad("rational-quadratic kernel needs c >= 0, alpha > 0, tau > 0".into());
                }
            }
            Kernel::Matern { s2, l, .. } => {
                if !(*s2 >= 0.0 && s2.is_finite()) || !(*l > 0.0 && l.is_finite()) {
                    return bad("matern kernel needs s2 >= 0 and l > 0".into());
                }
            }
            Kernel::Sum(parts) | Kernel::Product(parts) => {
                if parts.is_empty() {
                    return bad("sum/product kernel needs at least one term".into());
                }
                for p in parts {
                    p.validate()?;
                }
            }
            Kernel::SeparableSpaceTime { temporal, spatial } => {
                temporal.validate()?;
                spatial.validate()?;
                if !spatial.is_stationary() {
                    return bad("spatial factor of a separable kernel must be stationary".into());
                }
            }
            Kernel::SiteWeight { .. } => {}
        }
        Ok(())
    }

    /// True when the kernel depends only on the distance between inputs.
    pub fn is_stationary(&self) -> bool {
        match self {
            Kernel::WhiteNoise { .. }
            | Kernel::SquaredExponential { .. }
            | Kernel::PoweredExponential { .. }
            | Kernel::RationalQuadratic { .. }
            | Kernel::Matern { .. } => true,
            Kernel::DotProduct { .. } | Kernel::Brownian { .. } | Kernel::SiteWeight { .. } => false,
            Kernel::Sum(parts) | Kernel::Product(parts) => parts.iter().all(|p| p.is_stationary()),
            Kernel::SeparableSpaceTime { .. } => false,
        }
    }

    /// Stationary covariance as a function of separation `r >= 0`.
    pub fn eval_dist(&self, r: f64) -> Result<f64> {
        match self {
            Kernel::WhiteNoise { s2 } => Ok(if r == 0.0 { *s2 } else { 0.0 }),
            Kernel::SquaredExponential { s2, l } => Ok(s2 * (-(r / l).powi(2)).exp()),
            Kernel::PoweredExponential { nu2, rho, kappa } => Ok(nu2 * rho.powf(r.powf(*kappa))),
            Kernel::RationalQuadratic { c, alpha, tau } => {
                Ok(c * (1.0 + r * r / (2.0 * alpha * tau * tau)).powf(-alpha))
            }
            Kernel::Matern { s2, l, nu } => Ok(matern_closed_form(r, *s2, *l, *nu)),
            Kernel::Sum(parts) => parts.iter().map(|p| p.eval_dist(r)).sum(),
            Kernel::Product(parts) => {
                let mut acc = 1.0;
                for p in parts {
                    acc *= p.eval_dist(r)?;
                }
                Ok(acc)
            }
            _ => Err(Error::Config(
                "eval_dist requires a stationary kernel".into(),
            )),
        }
    }

    /// Covariance between two space-time points.
    pub fn eval(&self, p: &Point, q: &Point) -> Result<f64> {
        match self {
            Kernel::WhiteNoise { s2 } => {
                let same = p.time == q.time && p.location == q.location;
                Ok(if same { *s2 } else { 0.0 })
            }
            Kernel::DotProduct { s2_slope, t0 } => Ok(s2_slope * (p.time - t0) * (q.time - t0)),
            Kernel::Brownian { q: qv, t0 } => {
                let a = (p.time - t0).max(0.0);
                let b = (q.time - t0).max(0.0);
                Ok(qv * a.min(b))
            }
            Kernel::SquaredExponential { .. }
            | Kernel::PoweredExponential { .. }
            | Kernel::RationalQuadratic { .. }
            | Kernel::Matern { .. } => self.eval_dist((p.time - q.time).abs()),
            Kernel::Sum(parts) => parts.iter().map(|k| k.eval(p, q)).sum(),
            Kernel::Product(parts) => {
                let mut acc = 1.0;
                for k in parts {
                    acc *= k.eval(p, q)?;
                }
                Ok(acc)
            }
            Kernel::SeparableSpaceTime { temporal, spatial } => {
                let (la, lb) = locations(p, q)?;
                let t = temporal.eval(&Point::temporal(p.time), &Point::temporal(q.time))?;
                let s = spatial.eval_dist(angular_distance(la, lb))?;
                Ok(t * s)
            }
            Kernel::SiteWeight { fingerprint } => {
                let (la, lb) = locations(p, q)?;
                Ok(fingerprint.weight_at(la)? * fingerprint.weight_at(lb)?)
            }
        }
    }

    /// Partial derivative of the covariance with respect to the time of the
    /// first argument. Analytic for the kernels that have simple closed forms;
    /// central differences otherwise.
    pub fn eval_dtime(&self, p: &Point, q: &Point, fd_step: f64) -> Result<f64> {
        match self {
            Kernel::WhiteNoise { .. } => Ok(0.0),
            Kernel::DotProduct { s2_slope, t0 } => Ok(s2_slope * (q.time - t0)),
            Kernel::SquaredExponential { s2, l } => {
                let dt = p.time - q.time;
                Ok(-2.0 * dt / (l * l) * s2 * (-(dt / l).powi(2)).exp())
            }
            Kernel::Matern { s2, l, nu } => {
                let dt = p.time - q.time;
                let r = dt.abs();
                let sign = if dt >= 0.0 { 1.0 } else { -1.0 };
                let dk_dr = match nu {
                    MaternNu::Half => -s2 / l * (-r / l).exp(),
                    MaternNu::ThreeHalves => {
                        let a = 3f64.sqrt() / l;
                        -s2 * a * a * r * (-a * r).exp()
                    }
                    MaternNu::FiveHalves => {
                        let a = 5f64.sqrt() / l;
                        -s2 * (a * a * r / 3.0) * (1.0 + a * r) * (-a * r).exp()
                    }
                };
                Ok(sign * dk_dr)
            }
            Kernel::Sum(parts) => parts.iter().map(|k| k.eval_dtime(p, q, fd_step)).sum(),
            Kernel::SeparableSpaceTime { temporal, spatial } => {
                let (la, lb) = locations(p, q)?;
                let dt = temporal.eval_dtime(&Point::temporal(p.time), &Point::temporal(q.time), fd_step)?;
                let s = spatial.eval_dist(angular_distance(la, lb))?;
                Ok(dt * s)
            }
            _ => {
                let mut hi = *p;
                hi.time += fd_step;
                let mut lo = *p;
                lo.time -= fd_step;
                Ok((self.eval(&hi, q)? - self.eval(&lo, q)?) / (2.0 * fd_step))
            }
        }
    }

    /// Gram matrix over a point set. Symmetric by construction.
    pub fn gram(&self, points: &[Point]) -> Result<DMatrix<f64>> {
        if points.is_empty() {
            return Err(Error::Argument("gram requires at least one point".into()));
        }
        self.validate()?;
        let n = points.len();
        let mut out = DMatrix::zeros(n, n);
        for i in 0..n {
            for j in i..n {
                let v = self.eval(&points[i], &points[j])?;
                if !v.is_finite() {
                    return Err(Error::Numeric(format!(
                        "non-finite covariance between points {i} and {j}"
                    )));
                }
                out[(i, j)] = v;
                out[(j, i)] = v;
            }
        }
        Ok(out)
    }

    /// Cross-covariance matrix between two point sets.
    pub fn cross(&self, rows: &[Point], cols: &[Point]) -> Result<DMatrix<f64>> {
        let mut out = DMatrix::zeros(rows.len(), cols.len());
        for (i, p) in rows.iter().enumerate() {
            for (j, q) in cols.iter().enumerate() {
                out[(i, j)] = self.eval(p, q)?;
            }
        }
        Ok(out)
    }

    /// The same kernel with all white-noise terms removed (used when
    /// predicting the latent, noise-free process). Returns `None` when the
    /// whole expression is white noise.
    pub fn strip_white(&self) -> Option<Kernel> {
        match self {
            Kernel::WhiteNoise { .. } => None,
            Kernel::Sum(parts) => {
                let kept: Vec<Kernel> = parts.iter().filter_map(|p| p.strip_white()).collect();
                if kept.is_empty() {
                    None
                } else {
                    Some(Kernel::Sum(kept))
                }
            }
            other => Some(other.clone()),
        }
    }
}

fn locations(p: &Point, q: &Point) -> Result<((f64, f64), (f64, f64))> {
    match (p.location, q.location) {
        (Some(a), Some(b)) => Ok((a, b)),
        _ => Err(Error::Config(
            "spatial kernel applied to points without locations".into(),
        )),
    }
}

fn matern_closed_form(r: f64, s2: f64, l: f64, nu: MaternNu) -> f64 {
    match nu {
        MaternNu::Half => s2 * (-r / l).exp(),
        MaternNu::ThreeHalves => {
            let a = 3f64.sqrt() * r / l;
            s2 * (1.0 + a) * (-a).exp()
        }
        MaternNu::FiveHalves => {
            let a = 5f64.sqrt() * r / l;
            s2 * (1.0 + a + 5.0 * r * r / (3.0 * l * l)) * (-a).exp()
        }
    }
}

/// Melt covariance: a linear-in-time term plus rational-quadratic variability,
/// weighted by the source's sea-level fingerprint at both sites:
/// `[m_a^2 (t-t0)(t'-t0) + c (1 + dt^2/(2 a tau^2))^(-a)] * B(x) B(x')`.
/// The linear-term origin `t0` is fixed at 0 CE.
pub fn melt_kernel(
    linear_sd: f64,
    rq_amplitude: f64,
    rq_roughness: f64,
    rq_timescale: f64,
    fingerprint: Fingerprint,
) -> Kernel {
    Kernel::Product(vec![
        Kernel::Sum(vec![
            Kernel::DotProduct { s2_slope: linear_sd * linear_sd, t0: 0.0 },
            Kernel::RationalQuadratic { c: rq_amplitude, alpha: rq_roughness, tau: rq_timescale },
        ]),
        Kernel::SiteWeight { fingerprint },
    ])
}

impl std::fmt::Display for Kernel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Kernel::WhiteNoise { s2 } => write!(f, "white(s2={s2})"),
            Kernel::DotProduct { s2_slope, t0 } => write!(f, "dot(s2={s2_slope},t0={t0})"),
            Kernel::Brownian { q, t0 } => write!(f, "brownian(q={q},t0={t0})"),
            Kernel::SquaredExponential { s2, l } => write!(f, "se(s2={s2},l={l})"),
            Kernel::PoweredExponential { nu2, rho, kappa } => {
                write!(f, "powexp(nu2={nu2},rho={rho},kappa={kappa})")
            }
            Kernel::RationalQuadratic { c, alpha, tau } => {
                write!(f, "rq(c={c},alpha={alpha},tau={tau})")
            }
            Kernel::Matern { s2, l, nu } => write!(f, "matern(s2={s2},l={l},nu={})", nu.value()),
            Kernel::Sum(parts) => {
                write!(f, "sum(")?;
                for (i, p) in parts.iter().enumerate() {
                    if i > 0 {
                        write!(f, ",")?;
                    }
                    write!(f, "{p}")?;
                }
                write!(f, ")")
            }
            Kernel::Product(parts) => {
                write!(f, "prod(")?;
                for (i, p) in parts.iter().enumerate() {
                    if i > 0 {
                        write!(f, ",")?;
                    }
                    write!(f, "{p}")?;
                }
                write!(f, ")")
            }
            Kernel::SeparableSpaceTime { temporal, spatial } => {
                write!(f, "spacetime({temporal},{spatial})")
            }
            Kernel::SiteWeight { .. } => write!(f, "siteweight(...)"),
        }
    }
}
