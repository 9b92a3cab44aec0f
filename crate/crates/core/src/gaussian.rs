//! Gaussian factors over named variable scopes, stored in canonical
//! (information) form.
//!
//! A factor is `exp(-½ xᵀKx + hᵀx + g)` over the concatenation of its scope
//! variables. The scope is always kept sorted by [`VariableId`] so that two
//! factors over the same variables share one layout. Products and quotients
//! are additions and subtractions of `(K, h, g)`; moment form is computed on
//! demand.

use std::fmt;
use std::ops::Range;

use nalgebra::{Cholesky, DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linalg::{cholesky_jittered, log_det_cholesky, symmetrize, symmetrize_mut};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum VarKind {
    /// World coordinates of feature `i`.
    Feature(usize),
    /// Extrinsics of camera `j`.
    Pose(usize),
    /// Image coordinates of feature `feature` in camera `camera`.
    Projection { camera: usize, feature: usize },
}

/// A random variable together with its dimension.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct VariableId {
    pub kind: VarKind,
    pub dim: usize,
}

impl VariableId {
    pub fn feature(i: usize, dim: usize) -> Self {
        VariableId { kind: VarKind::Feature(i), dim }
    }

    pub fn pose(j: usize, dim: usize) -> Self {
        VariableId { kind: VarKind::Pose(j), dim }
    }

    pub fn projection(camera: usize, feature: usize, dim: usize) -> Self {
        VariableId {
            kind: VarKind::Projection { camera, feature },
            dim,
        }
    }
}

impl fmt::Display for VariableId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.kind {
            VarKind::Feature(i) => write!(f, "X{i}"),
            VarKind::Pose(j) => write!(f, "p{j}"),
            VarKind::Projection { camera, feature } => write!(f, "x{camera}_{feature}"),
        }
    }
}

/// Gaussian mean and covariance.
#[derive(Clone, Debug, PartialEq)]
pub struct Moments {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

impl Moments {
    pub fn new(mean: DVector<f64>, cov: DMatrix<f64>) -> Self {
        Moments { mean, cov }
    }

    pub fn isotropic(mean: DVector<f64>, var: f64) -> Self {
        let n = mean.len();
        Moments {
            mean,
            cov: DMatrix::identity(n, n) * var,
        }
    }

    pub fn diagonal(mean: DVector<f64>, variances: &[f64]) -> Self {
        Moments {
            mean,
            cov: DMatrix::from_diagonal(&DVector::from_column_slice(variances)),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GaussianFactor {
    scope: Vec<VariableId>,
    precision: DMatrix<f64>,
    info: DVector<f64>,
    log_norm: f64,
}

/// Merge two sorted scopes, rejecting a variable that appears with two
/// different dimensions.
fn union_scope(a: &[VariableId], b: &[VariableId]) -> Result<Vec<VariableId>> {
    let mut out = Vec::with_capacity(a.len() + b.len());
    let (mut i, mut j) = (0, 0);
    while i < a.len() || j < b.len() {
        let next = match (a.get(i), b.get(j)) {
            (Some(x), Some(y)) if x.kind == y.kind => {
                if x.dim != y.dim {
                    return Err(Error::ScopeDimMismatch {
                        var: *x,
                        left: x.dim,
                        right: y.dim,
                    });
                }
                i += 1;
                j += 1;
                *x
            }
            (Some(x), Some(y)) if x.kind < y.kind => {
                i += 1;
                *x
            }
            (Some(_), Some(y)) => {
                j += 1;
                *y
            }
            (Some(x), None) => {
                i += 1;
                *x
            }
            (None, Some(y)) => {
                j += 1;
                *y
            }
            (None, None) => unreachable!(),
        };
        out.push(next);
    }
    Ok(out)
}

fn scope_dim(scope: &[VariableId]) -> usize {
    scope.iter().map(|v| v.dim).sum()
}

/// Index of every entry of `sub` inside the layout of `sup`.
fn embedding(sub: &[VariableId], sup: &[VariableId]) -> Result<Vec<usize>> {
    let mut idx = Vec::with_capacity(scope_dim(sub));
    for v in sub {
        let mut off = 0;
        let mut found = false;
        for w in sup {
            if w.kind == v.kind {
                if w.dim != v.dim {
                    return Err(Error::ScopeDimMismatch {
                        var: *v,
                        left: v.dim,
                        right: w.dim,
                    });
                }
                idx.extend(off..off + v.dim);
                found = true;
                break;
            }
            off += w.dim;
        }
        if !found {
            return Err(Error::NotInScope(*v));
        }
    }
    Ok(idx)
}

fn select(m: &DMatrix<f64>, rows: &[usize], cols: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(rows.len(), cols.len(), |r, c| m[(rows[r], cols[c])])
}

fn select_vec(v: &DVector<f64>, rows: &[usize]) -> DVector<f64> {
    DVector::from_fn(rows.len(), |r, _| v[rows[r]])
}

impl GaussianFactor {
    /// The unit factor (`K = 0, h = 0, g = 0`) over `scope`.
    pub fn unit(scope: &[VariableId]) -> Self {
        let mut scope = scope.to_vec();
        scope.sort();
        scope.dedup();
        let n = scope_dim(&scope);
        GaussianFactor {
            scope,
            precision: DMatrix::zeros(n, n),
            info: DVector::zeros(n),
            log_norm: 0.0,
        }
    }

    /// Build a factor from canonical parameters laid out in the order of
    /// `scope`; the result is re-ordered into sorted scope order.
    pub fn from_canonical(
        scope: &[VariableId],
        precision: DMatrix<f64>,
        info: DVector<f64>,
        log_norm: f64,
    ) -> Result<Self> {
        let n = scope_dim(scope);
        if precision.nrows() != n || precision.ncols() != n || info.len() != n {
            return Err(Error::InvalidArgument(format!(
                "canonical parameters of size {}x{}/{} for scope of dimension {n}",
                precision.nrows(),
                precision.ncols(),
                info.len()
            )));
        }
        let mut sorted = scope.to_vec();
        sorted.sort();
        for w in sorted.windows(2) {
            if w[0].kind == w[1].kind {
                return Err(Error::InvalidArgument(format!("{} repeated in scope", w[0])));
            }
        }
        if sorted == scope {
            return Ok(GaussianFactor {
                scope: sorted,
                precision: symmetrize(&precision),
                info,
                log_norm,
            });
        }
        let perm = embedding(&sorted, scope)?;
        Ok(GaussianFactor {
            scope: sorted,
            precision: symmetrize(&select(&precision, &perm, &perm)),
            info: select_vec(&info, &perm),
            log_norm,
        })
    }

    /// `K = Σ⁻¹`, `h = Σ⁻¹μ`, with `g` normalizing the density.
    pub fn from_moments(scope: &[VariableId], mean: &DVector<f64>, cov: &DMatrix<f64>) -> Result<Self> {
        let n = scope_dim(scope);
        if mean.len() != n || cov.nrows() != n || cov.ncols() != n {
            return Err(Error::InvalidArgument(format!(
                "moments of size {}/{}x{} for scope of dimension {n}",
                mean.len(),
                cov.nrows(),
                cov.ncols()
            )));
        }
        let (chol, _) = cholesky_jittered(cov)?;
        let precision = symmetrize(&chol.inverse());
        let info = &precision * mean;
        let log_norm =
            -0.5 * mean.dot(&info) - 0.5 * (n as f64 * LN_2PI + log_det_cholesky(&chol));
        Self::from_canonical(scope, precision, info, log_norm)
    }

    /// Linear-Gaussian conditional `y | z ~ N(A z + b, Q)`, improper in `z`.
    pub fn linear_gaussian(
        output: VariableId,
        inputs: &[VariableId],
        a: &DMatrix<f64>,
        b: &DVector<f64>,
        noise_cov: &DMatrix<f64>,
    ) -> Result<Self> {
        let ny = output.dim;
        let nz = scope_dim(inputs);
        if a.nrows() != ny || a.ncols() != nz || b.len() != ny {
            return Err(Error::InvalidArgument("linear-Gaussian shape mismatch".into()));
        }
        let (chol, _) = cholesky_jittered(noise_cov)?;
        let q_inv = symmetrize(&chol.inverse());
        let q_inv_a = &q_inv * a;
        let q_inv_b = &q_inv * b;
        let n = nz + ny;
        let mut k = DMatrix::zeros(n, n);
        k.view_mut((0, 0), (nz, nz))
            .copy_from(&(a.transpose() * &q_inv_a));
        k.view_mut((0, nz), (nz, ny))
            .copy_from(&(-q_inv_a.transpose()));
        k.view_mut((nz, 0), (ny, nz)).copy_from(&(-&q_inv_a));
        k.view_mut((nz, nz), (ny, ny)).copy_from(&q_inv);
        let mut h = DVector::zeros(n);
        h.rows_mut(0, nz).copy_from(&(-(a.transpose() * &q_inv_b)));
        h.rows_mut(nz, ny).copy_from(&q_inv_b);
        let g = -0.5 * b.dot(&q_inv_b) - 0.5 * (ny as f64 * LN_2PI + log_det_cholesky(&chol));
        let mut scope = inputs.to_vec();
        scope.push(output);
        Self::from_canonical(&scope, k, h, g)
    }

    pub fn scope(&self) -> &[VariableId] {
        &self.scope
    }

    pub fn dim(&self) -> usize {
        self.info.len()
    }

    pub fn precision(&self) -> &DMatrix<f64> {
        &self.precision
    }

    pub fn info(&self) -> &DVector<f64> {
        &self.info
    }

    pub fn log_norm(&self) -> f64 {
        self.log_norm
    }

    pub fn contains(&self, var: &VariableId) -> bool {
        self.scope.iter().any(|v| v.kind == var.kind)
    }

    /// Row range of `var` inside the factor layout.
    pub fn block(&self, var: &VariableId) -> Option<Range<usize>> {
        let mut off = 0;
        for v in &self.scope {
            if v.kind == var.kind {
                return Some(off..off + v.dim);
            }
            off += v.dim;
        }
        None
    }

    /// Zero-pad to a superset scope (must be sorted).
    fn extended(&self, scope: &[VariableId]) -> Result<(DMatrix<f64>, DVector<f64>)> {
        let n = scope_dim(scope);
        let idx = embedding(&self.scope, scope)?;
        let mut k = DMatrix::zeros(n, n);
        let mut h = DVector::zeros(n);
        for (r, &ir) in idx.iter().enumerate() {
            h[ir] = self.info[r];
            for (c, &ic) in idx.iter().enumerate() {
                k[(ir, ic)] = self.precision[(r, c)];
            }
        }
        Ok((k, h))
    }

    /// In place `self · other^weight`; `other`'s scope must be contained in
    /// `self`'s.
    pub fn accumulate(&mut self, other: &GaussianFactor, weight: f64) -> Result<()> {
        if self.scope == other.scope {
            self.precision.zip_apply(&other.precision, |a, b| *a += weight * b);
            self.info.axpy(weight, &other.info, 1.0);
        } else {
            let idx = embedding(&other.scope, &self.scope)?;
            for (r, &ir) in idx.iter().enumerate() {
                self.info[ir] += weight * other.info[r];
                for (c, &ic) in idx.iter().enumerate() {
                    self.precision[(ir, ic)] += weight * other.precision[(r, c)];
                }
            }
        }
        symmetrize_mut(&mut self.precision);
        self.log_norm += weight * other.log_norm;
        Ok(())
    }

    fn combine(&self, other: &GaussianFactor, sign: f64) -> Result<GaussianFactor> {
        if other.scope.iter().all(|v| self.scope.contains(v)) {
            let mut out = self.clone();
            out.accumulate(other, sign)?;
            return Ok(out);
        }
        let scope = union_scope(&self.scope, &other.scope)?;
        let (ka, ha) = self.extended(&scope)?;
        let (kb, hb) = other.extended(&scope)?;
        Ok(GaussianFactor {
            scope,
            precision: {
                let mut k = ka + kb * sign;
                symmetrize_mut(&mut k);
                k
            },
            info: ha + hb * sign,
            log_norm: self.log_norm + sign * other.log_norm,
        })
    }

    /// Factor product on the union scope.
    pub fn multiply(&self, other: &GaussianFactor) -> Result<GaussianFactor> {
        self.combine(other, 1.0)
    }

    /// Factor quotient; `other`'s scope must be contained in `self`'s. The
    /// result may be improper.
    pub fn divide(&self, other: &GaussianFactor) -> Result<GaussianFactor> {
        for v in &other.scope {
            match self.scope.iter().find(|w| w.kind == v.kind) {
                None => return Err(Error::NotInScope(*v)),
                Some(w) if w.dim != v.dim => {
                    return Err(Error::ScopeDimMismatch {
                        var: *v,
                        left: w.dim,
                        right: v.dim,
                    })
                }
                _ => {}
            }
        }
        self.combine(other, -1.0)
    }

    /// Raise the factor to a power (scales all canonical parameters).
    pub fn powf(&self, s: f64) -> GaussianFactor {
        GaussianFactor {
            scope: self.scope.clone(),
            precision: &self.precision * s,
            info: &self.info * s,
            log_norm: self.log_norm * s,
        }
    }

    /// Integrate out every variable not in `keep`.
    pub fn marginalize(&self, keep: &[VariableId]) -> Result<GaussianFactor> {
        let mut keep = keep.to_vec();
        keep.sort();
        keep.dedup();
        let keep_idx = embedding(&keep, &self.scope)?;
        if keep_idx.len() == self.dim() {
            return Ok(self.clone());
        }
        let elim: Vec<VariableId> = self
            .scope
            .iter()
            .filter(|v| !keep.iter().any(|k| k.kind == v.kind))
            .copied()
            .collect();
        let elim_idx = embedding(&elim, &self.scope)?;

        let kyy = select(&self.precision, &keep_idx, &keep_idx);
        let kyz = select(&self.precision, &keep_idx, &elim_idx);
        let mut kzz = select(&self.precision, &elim_idx, &elim_idx);
        symmetrize_mut(&mut kzz);
        let hy = select_vec(&self.info, &keep_idx);
        let hz = select_vec(&self.info, &elim_idx);

        let chol = Cholesky::new(kzz).ok_or(Error::SingularEliminationBlock)?;
        let kzz_inv_kzy = chol.solve(&kyz.transpose());
        let kzz_inv_hz = chol.solve(&hz);
        let mut precision = kyy;
        precision.gemm(-1.0, &kyz, &kzz_inv_kzy, 1.0);
        symmetrize_mut(&mut precision);
        let info = hy - &kyz * &kzz_inv_hz;
        let nz = elim_idx.len() as f64;
        let log_norm =
            self.log_norm + 0.5 * (nz * LN_2PI - log_det_cholesky(&chol) + hz.dot(&kzz_inv_hz));
        if precision.iter().chain(info.iter()).any(|v| !v.is_finite()) {
            return Err(Error::SingularEliminationBlock);
        }
        Ok(GaussianFactor {
            scope: keep,
            precision,
            info,
            log_norm,
        })
    }

    /// Soft evidence: multiply in the likelihood `N(value, σ²I)` over `var`.
    pub fn observe(&self, var: &VariableId, value: &DVector<f64>, sigma: f64) -> Result<GaussianFactor> {
        if !self.contains(var) {
            return Err(Error::NotInScope(*var));
        }
        self.multiply(&Self::likelihood(var, value, sigma)?)
    }

    /// The isotropic Gaussian likelihood factor used by [`Self::observe`].
    pub fn likelihood(var: &VariableId, value: &DVector<f64>, sigma: f64) -> Result<GaussianFactor> {
        if !(sigma > 0.0) || value.len() != var.dim {
            return Err(Error::InvalidArgument(format!(
                "observation of {var}: σ = {sigma}, value length {}",
                value.len()
            )));
        }
        let d = var.dim;
        let lam = 1.0 / (sigma * sigma);
        Ok(GaussianFactor {
            scope: vec![*var],
            precision: DMatrix::identity(d, d) * lam,
            info: value * lam,
            log_norm: -0.5 * lam * value.norm_squared()
                - 0.5 * d as f64 * (LN_2PI + 2.0 * sigma.ln()),
        })
    }

    /// Mean and covariance; requires a positive definite precision.
    pub fn to_moments(&self) -> Result<Moments> {
        if self.dim() == 0 {
            return Ok(Moments::new(DVector::zeros(0), DMatrix::zeros(0, 0)));
        }
        let (chol, _) = cholesky_jittered(&self.precision)?;
        let mean = chol.solve(&self.info);
        let cov = symmetrize(&chol.inverse());
        if mean.iter().chain(cov.iter()).any(|v| !v.is_finite()) {
            return Err(Error::NotPositiveDefinite);
        }
        Ok(Moments::new(mean, cov))
    }

    /// Moments of the marginal over a single variable.
    pub fn marginal_moments(&self, var: &VariableId) -> Result<Moments> {
        self.marginalize(&[*var])?.to_moments()
    }

    pub fn is_proper(&self) -> bool {
        self.dim() == 0 || Cholesky::new(self.precision.clone()).is_some()
    }

    /// Unnormalized log density at `x` (laid out in scope order).
    pub fn log_density(&self, x: &DVector<f64>) -> f64 {
        -0.5 * x.dot(&(&self.precision * x)) + self.info.dot(x) + self.log_norm
    }

    /// Largest absolute difference between the moment parameters of the two
    /// factors, compared on their common scope.
    pub fn max_param_delta(&self, other: &GaussianFactor) -> Result<f64> {
        let (a, b) = if self.scope == other.scope {
            (self.to_moments()?, other.to_moments()?)
        } else {
            let common: Vec<VariableId> = self
                .scope
                .iter()
                .filter(|v| other.contains(v))
                .copied()
                .collect();
            (
                self.marginalize(&common)?.to_moments()?,
                other.marginalize(&common)?.to_moments()?,
            )
        };
        Ok(moments_delta(&a, &b))
    }
}

/// Largest absolute difference over means and covariance entries.
pub fn moments_delta(a: &Moments, b: &Moments) -> f64 {
    let dm = (&a.mean - &b.mean).abs().max();
    let dc = (&a.cov - &b.cov).abs().max();
    dm.max(dc)
}
