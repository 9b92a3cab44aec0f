//! Sigma-point parameterization of Gaussians and the unscented transform.
//!
//! Two point layouts are supported: the symmetric `2d`-point set
//! `μ ± √d ℓᵢ` with unit weights, and the standard `2d+1`-point set with a
//! centre point of weight `w₀` and the remaining mass spread evenly. `ℓᵢ` is
//! the i-th column of the lower Cholesky factor of the covariance.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{cholesky_jittered, regularized, symmetrize};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum SigmaScheme {
    /// `2d` equally weighted points.
    Symmetric,
    /// `2d + 1` points with centre weight `w0 ∈ (0, 1)`.
    Standard { w0: f64 },
}

impl Default for SigmaScheme {
    fn default() -> Self {
        SigmaScheme::Standard { w0: 1.0 / 3.0 }
    }
}

#[derive(Clone, Debug)]
pub struct SigmaPointSet {
    pub points: Vec<DVector<f64>>,
    pub weights: Vec<f64>,
    /// `None` for composite sets such as the product set of
    /// [`joint_sigma_points`].
    pub scheme: Option<SigmaScheme>,
}

impl SigmaPointSet {
    pub fn dim(&self) -> usize {
        self.points.first().map_or(0, |p| p.len())
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    fn total_weight(&self) -> f64 {
        self.weights.iter().sum()
    }

    /// Weighted mean with weights normalized to sum to one.
    pub fn mean(&self) -> DVector<f64> {
        weighted_mean(&self.points, &self.weights)
    }

    /// Weighted (population) covariance with normalized weights.
    pub fn covariance(&self) -> DMatrix<f64> {
        let mean = self.mean();
        weighted_cross_cov(&self.points, &mean, &self.points, &mean, &self.weights)
    }
}

fn weighted_mean(points: &[DVector<f64>], weights: &[f64]) -> DVector<f64> {
    let total: f64 = weights.iter().sum();
    let mut mean = DVector::zeros(points[0].len());
    for (p, w) in points.iter().zip(weights) {
        mean.axpy(*w / total, p, 1.0);
    }
    mean
}

fn weighted_cross_cov(
    a: &[DVector<f64>],
    mean_a: &DVector<f64>,
    b: &[DVector<f64>],
    mean_b: &DVector<f64>,
    weights: &[f64],
) -> DMatrix<f64> {
    let total: f64 = weights.iter().sum();
    let mut cov = DMatrix::zeros(mean_a.len(), mean_b.len());
    for ((pa, pb), w) in a.iter().zip(b).zip(weights) {
        let da = pa - mean_a;
        let db = pb - mean_b;
        cov.ger(*w / total, &da, &db, 1.0);
    }
    cov
}

/// Sigma points for `N(mean, cov)`.
pub fn sigma_points(mean: &DVector<f64>, cov: &DMatrix<f64>, scheme: SigmaScheme) -> Result<SigmaPointSet> {
    let d = mean.len();
    if cov.nrows() != d || cov.ncols() != d || d == 0 {
        return Err(Error::InvalidArgument(format!(
            "sigma points for mean of length {d} and {}x{} covariance",
            cov.nrows(),
            cov.ncols()
        )));
    }
    let (chol, _) = cholesky_jittered(cov)?;
    let l = chol.l();
    let (spread, centre_weight, side_weight) = match scheme {
        SigmaScheme::Symmetric => ((d as f64).sqrt(), None, 1.0),
        SigmaScheme::Standard { w0 } => {
            if !(w0 > 0.0 && w0 < 1.0) {
                return Err(Error::InvalidArgument(format!("w0 = {w0} outside (0, 1)")));
            }
            (
                (d as f64 / (1.0 - w0)).sqrt(),
                Some(w0),
                (1.0 - w0) / (2 * d) as f64,
            )
        }
    };
    let mut points = Vec::with_capacity(2 * d + 1);
    let mut weights = Vec::with_capacity(2 * d + 1);
    if let Some(w0) = centre_weight {
        points.push(mean.clone());
        weights.push(w0);
    }
    for i in 0..d {
        let step = l.column(i) * spread;
        points.push(mean + &step);
        points.push(mean - &step);
        weights.push(side_weight);
        weights.push(side_weight);
    }
    Ok(SigmaPointSet {
        points,
        weights,
        scheme: Some(scheme),
    })
}

/// Push a sigma-point set through `f` and return the Gaussian approximation
/// of the image. The output covariance is symmetrized and regularized.
pub fn unscented_transform<F>(set: &SigmaPointSet, f: F) -> Result<(DVector<f64>, DMatrix<f64>)>
where
    F: Fn(&DVector<f64>) -> Result<DVector<f64>>,
{
    let transformed = set
        .points
        .iter()
        .map(|p| f(p).map_err(|e| Error::TransformUndefined(Box::new(e))))
        .collect::<Result<Vec<_>>>()?;
    let mean = weighted_mean(&transformed, &set.weights);
    let cov = weighted_cross_cov(&transformed, &mean, &transformed, &mean, &set.weights);
    Ok((mean, regularized(&symmetrize(&cov))?))
}

/// Product sigma-point set over `(x, p, X)` with `x = f(p, X)`.
///
/// Every pair `(s_X, s_p)` yields the point `[f(s_p, s_X); s_p; s_X]` with
/// weight `w_X · w_p`. The product of independent sets reproduces each input
/// block's statistics and a zero cross-covariance between them.
pub fn joint_sigma_points<F>(set_x: &SigmaPointSet, set_p: &SigmaPointSet, f: F) -> Result<SigmaPointSet>
where
    F: Fn(&DVector<f64>, &DVector<f64>) -> Result<DVector<f64>>,
{
    let dx = set_x.dim();
    let dp = set_p.dim();
    let mut points = Vec::with_capacity(set_x.len() * set_p.len());
    let mut weights = Vec::with_capacity(set_x.len() * set_p.len());
    let (wx_total, wp_total) = (set_x.total_weight(), set_p.total_weight());
    for (sx, wx) in set_x.points.iter().zip(&set_x.weights) {
        for (sp, wp) in set_p.points.iter().zip(&set_p.weights) {
            let y = f(sp, sx).map_err(|e| Error::TransformUndefined(Box::new(e)))?;
            let dy = y.len();
            let mut pt = DVector::zeros(dy + dp + dx);
            pt.rows_mut(0, dy).copy_from(&y);
            pt.rows_mut(dy, dp).copy_from(sp);
            pt.rows_mut(dy + dp, dx).copy_from(sx);
            points.push(pt);
            weights.push((wx / wx_total) * (wp / wp_total));
        }
    }
    Ok(SigmaPointSet {
        points,
        weights,
        scheme: None,
    })
}

/// Statistical linear regression of the first `dy` coordinates of a joint
/// point set on the remaining ones: `y ≈ A z + b` with residual covariance
/// `Q`.
pub struct LinearFit {
    pub a: DMatrix<f64>,
    pub b: DVector<f64>,
    pub residual_cov: DMatrix<f64>,
    pub input_mean: DVector<f64>,
    pub input_cov: DMatrix<f64>,
}

pub fn regress_joint(set: &SigmaPointSet, dy: usize) -> Result<LinearFit> {
    let n = set.dim();
    let dz = n - dy;
    let mean = set.mean();
    let cov = set.covariance();
    let cyy = cov.view((0, 0), (dy, dy)).into_owned();
    let cyz = cov.view((0, dy), (dy, dz)).into_owned();
    let czz = symmetrize(&cov.view((dy, dy), (dz, dz)).into_owned());
    let (chol, _) = cholesky_jittered(&czz)?;
    // A = Cyz Czz⁻¹
    let a = chol.solve(&cyz.transpose()).transpose();
    let mz = mean.rows(dy, dz).into_owned();
    let b = mean.rows(0, dy) - &a * &mz;
    let q = symmetrize(&(cyy - &a * cyz.transpose()));
    Ok(LinearFit {
        a,
        b,
        residual_cov: regularized(&q)?,
        input_mean: mz,
        input_cov: czz,
    })
}
