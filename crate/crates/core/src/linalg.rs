//! Shared dense linear-algebra helpers built on nalgebra.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::error::{Error, Result};

/// Relative jitter added to the diagonal before a Cholesky factorization.
pub const BASE_JITTER: f64 = 1e-8;

/// Number of times the jitter is doubled before giving up.
pub const MAX_JITTER_ESCALATIONS: usize = 4;

/// Cholesky factorization with jitter escalation.
///
/// The jitter starts at `BASE_JITTER` relative to the mean diagonal and is
/// doubled up to `MAX_JITTER_ESCALATIONS` times on failure.
pub fn jittered_cholesky(mat: &DMatrix<f64>) -> Result<Cholesky<f64, Dyn>> {
    let n = mat.nrows();
    if n == 0 || mat.ncols() != n {
        return Err(Error::Numeric("cholesky requires a non-empty square matrix".into()));
    }
    if mat.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("matrix contains non-finite entries".into()));
    }
    let mean_diag = mat.diagonal().iter().map(|v| v.abs()).sum::<f64>() / n as f64;
    let scale = if mean_diag > 0.0 { mean_diag } else { 1.0 };
    // first try the matrix untouched so well-conditioned inputs factor exactly
    let mut jitter = 0.0;
    for attempt in 0..=(MAX_JITTER_ESCALATIONS + 1) {
        let mut work = mat.clone();
        for i in 0..n {
            work[(i, i)] += jitter;
        }
        if let Some(chol) = Cholesky::new(work) {
            return Ok(chol);
        }
        if attempt == 0 {
            jitter = BASE_JITTER * scale;
        } else {
            jitter *= 2.0;
        }
    }
    Err(Error::Numeric(format!(
        "cholesky failed after jitter escalation to {jitter:.3e}"
    )))
}

/// Log-determinant of a matrix from its Cholesky factor.
pub fn cholesky_log_det(chol: &Cholesky<f64, Dyn>) -> f64 {
    chol.l().diagonal().iter().map(|d| d.ln()).sum::<f64>() * 2.0
}

/// Log-density of a zero-mean multivariate normal with covariance factored by `chol`.
pub fn mvn_logpdf_centered(chol: &Cholesky<f64, Dyn>, resid: &DVector<f64>) -> f64 {
    let n = resid.len() as f64;
    let alpha = chol.solve(resid);
    -0.5 * resid.dot(&alpha) - 0.5 * cholesky_log_det(chol) - 0.5 * n * (2.0 * std::f64::consts::PI).ln()
}

/// Symmetrize a matrix in place; cheap guard for accumulated round-off.
pub fn symmetrize(mat: &mut DMatrix<f64>) {
    let n = mat.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            let avg = 0.5 * (mat[(i, j)] + mat[(j, i)]);
            mat[(i, j)] = avg;
            mat[(j, i)] = avg;
        }
    }
}
