//! Small dense linear-algebra helpers shared by the factor and sigma-point
//! code.

use nalgebra::{Cholesky, DMatrix, Dyn};

use crate::error::{Error, Result};

/// Relative diagonal loadings tried, in order, when a Cholesky factorization
/// fails.
pub const JITTER_LADDER: [f64; 3] = [1e-10, 1e-8, 1e-6];

pub fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    let mut out = m.clone();
    symmetrize_mut(&mut out);
    out
}

pub fn symmetrize_mut(m: &mut DMatrix<f64>) {
    let n = m.nrows();
    for c in 0..n {
        for r in c + 1..n {
            let v = 0.5 * (m[(r, c)] + m[(c, r)]);
            m[(r, c)] = v;
            m[(c, r)] = v;
        }
    }
}

fn jitter_scale(m: &DMatrix<f64>) -> f64 {
    let n = m.nrows().max(1) as f64;
    let s = m.diagonal().iter().map(|d| d.abs()).sum::<f64>() / n;
    if s > 0.0 && s.is_finite() {
        s
    } else {
        1.0
    }
}

/// Cholesky factorization of a symmetric matrix, loading the diagonal with
/// `ε · mean|diag| · I` for each `ε` of [`JITTER_LADDER`] until it succeeds.
///
/// Returns the factor together with the loading that was added (zero when
/// the matrix factorized as given).
pub fn cholesky_jittered(m: &DMatrix<f64>) -> Result<(Cholesky<f64, Dyn>, f64)> {
    if m.iter().any(|v| !v.is_finite()) {
        return Err(Error::NotPositiveDefinite);
    }
    let sym = symmetrize(m);
    if let Some(c) = Cholesky::new(sym.clone()) {
        return Ok((c, 0.0));
    }
    let scale = jitter_scale(&sym);
    for eps in JITTER_LADDER {
        let load = eps * scale;
        let mut shifted = sym.clone();
        for i in 0..shifted.nrows() {
            shifted[(i, i)] += load;
        }
        if let Some(c) = Cholesky::new(shifted) {
            return Ok((c, load));
        }
    }
    Err(Error::NotPositiveDefinite)
}

/// Symmetric matrix with the jitter ladder applied if needed.
pub fn regularized(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let (_, load) = cholesky_jittered(m)?;
    let mut out = symmetrize(m);
    for i in 0..out.nrows() {
        out[(i, i)] += load;
    }
    Ok(out)
}

/// Inverse of a symmetric positive definite matrix (jitter ladder applied).
pub fn spd_inverse(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let (c, _) = cholesky_jittered(m)?;
    Ok(symmetrize(&c.inverse()))
}

pub fn log_det_cholesky(c: &Cholesky<f64, Dyn>) -> f64 {
    2.0 * c.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>()
}
