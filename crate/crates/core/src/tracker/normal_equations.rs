//! Two-state Gauss-Newton system, Schur-complement marginalization and the
//! first-order prior correction.
//!
//! Convention: `H δx = b` with `H = Σ JᵀWJ` and `b = −Σ JᵀWe`. A prior
//! `(H*, b*)` anchored at `x̄` contributes the cost
//! `δᵀH*δ − 2 b*ᵀδ` with `δ = x ⊟ x̄`, minimized at `δ = H*⁻¹b*`.

use nalgebra::{DMatrix, DVector, SMatrix, SVector};

use crate::error::{Error, Result};
use crate::imu::{Mat18, Vec18};
use crate::manifold::{State, STATE_DIM};

pub const JOINT_DIM: usize = 2 * STATE_DIM;
pub type Mat36 = SMatrix<f64, JOINT_DIM, JOINT_DIM>;
pub type Vec36 = SVector<f64, JOINT_DIM>;

/// Relative eigenvalue below which a direction counts as uninformed.
pub const PSEUDO_INVERSE_CUTOFF: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq)]
pub struct NormalEquations {
    pub h: Mat36,
    pub b: Vec36,
}

impl Default for NormalEquations {
    fn default() -> Self {
        NormalEquations {
            h: Mat36::zeros(),
            b: Vec36::zeros(),
        }
    }
}

impl NormalEquations {
    pub fn h00(&self) -> Mat18 {
        self.h.fixed_view::<STATE_DIM, STATE_DIM>(0, 0).into_owned()
    }

    pub fn h01(&self) -> Mat18 {
        self.h
            .fixed_view::<STATE_DIM, STATE_DIM>(0, STATE_DIM)
            .into_owned()
    }

    pub fn h11(&self) -> Mat18 {
        self.h
            .fixed_view::<STATE_DIM, STATE_DIM>(STATE_DIM, STATE_DIM)
            .into_owned()
    }

    pub fn b0(&self) -> Vec18 {
        self.b.fixed_rows::<STATE_DIM>(0).into_owned()
    }

    pub fn b1(&self) -> Vec18 {
        self.b.fixed_rows::<STATE_DIM>(STATE_DIM).into_owned()
    }

    /// Adds `JᵀWJ` / `−JᵀWe` for a residual touching both states.
    pub fn add_joint<const R: usize>(
        &mut self,
        error: &SVector<f64, R>,
        weight: &SMatrix<f64, R, R>,
        jac_x0: &SMatrix<f64, R, STATE_DIM>,
        jac_x1: &SMatrix<f64, R, STATE_DIM>,
    ) {
        let mut j = SMatrix::<f64, R, JOINT_DIM>::zeros();
        j.fixed_view_mut::<R, STATE_DIM>(0, 0).copy_from(jac_x0);
        j.fixed_view_mut::<R, STATE_DIM>(0, STATE_DIM)
            .copy_from(jac_x1);
        let jtw = j.transpose() * weight;
        self.h += jtw * j;
        self.b -= jtw * error;
    }

    /// Adds a prior on the previous state, corrected to the current `x0`.
    pub fn add_prior(&mut self, prior: &Prior, x0: &State) {
        let corrected = prior_correction(prior, x0);
        let mut h = self.h.fixed_view_mut::<STATE_DIM, STATE_DIM>(0, 0);
        h += corrected.h;
        let mut b = self.b.fixed_rows_mut::<STATE_DIM>(0);
        b += corrected.b;
    }

    /// Freezes the masked dimensions: zero coupling, unit diagonal, zero rhs.
    pub fn apply_mask(&mut self, active: &[bool; JOINT_DIM]) {
        for i in 0..JOINT_DIM {
            if !active[i] {
                self.h.row_mut(i).fill(0.0);
                self.h.column_mut(i).fill(0.0);
                self.h[(i, i)] = 1.0;
                self.b[i] = 0.0;
            }
        }
    }

    pub fn symmetrize(&mut self) {
        self.h = 0.5 * (self.h + self.h.transpose());
    }
}

/// Marginalization output: a quadratic prior on one state.
#[derive(Debug, Clone, PartialEq)]
pub struct Prior {
    pub h: Mat18,
    pub b: Vec18,
    pub linearization: State,
}

impl Prior {
    pub fn zero(linearization: State) -> Self {
        Prior {
            h: Mat18::zeros(),
            b: Vec18::zeros(),
            linearization,
        }
    }

    /// Cost `δᵀHδ − 2bᵀδ` at `x`, with `δ = x ⊟ x̄`.
    pub fn cost(&self, x: &State) -> f64 {
        let d = x.boxminus(&self.linearization);
        (d.transpose() * self.h * d)[0] - 2.0 * self.b.dot(&d)
    }
}

/// Re-anchors the prior at `new_linearization` to first order:
/// `H` unchanged, `b' = b + H Δx` with `Δx = x̄ ⊟ x_new`.
pub fn prior_correction(prior: &Prior, new_linearization: &State) -> Prior {
    let dx = prior.linearization.boxminus(new_linearization);
    if dx.norm() > 0.5 {
        log::warn!(
            "prior correction over a large step (|Δx| = {:.3}); linearization is stale",
            dx.norm()
        );
    }
    Prior {
        h: prior.h,
        b: prior.b + prior.h * dx,
        linearization: new_linearization.clone(),
    }
}

/// Inverse of a symmetric positive-definite matrix via Cholesky on the
/// diagonally scaled matrix.
pub fn spd_inverse(m: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    let n = m.nrows();
    let scale: Vec<f64> = (0..n)
        .map(|i| {
            let d = m[(i, i)];
            if d > 0.0 {
                1.0 / d.sqrt()
            } else {
                f64::NAN
            }
        })
        .collect();
    if scale.iter().any(|s| !s.is_finite()) {
        return None;
    }
    let scaled = DMatrix::from_fn(n, n, |i, j| m[(i, j)] * scale[i] * scale[j]);
    let inv = scaled.cholesky()?.inverse();
    Some(DMatrix::from_fn(n, n, |i, j| {
        inv[(i, j)] * scale[i] * scale[j]
    }))
}

/// Solves `(H + λ·diag(H)) x = b` on the diagonally scaled system.
pub fn solve_damped(h: &DMatrix<f64>, b: &DVector<f64>, lambda: f64) -> Option<DVector<f64>> {
    let n = h.nrows();
    let floor = 1e-12
        * (0..n)
            .map(|i| h[(i, i)].abs())
            .fold(0.0, f64::max)
            .max(1e-300);
    let scale: Vec<f64> = (0..n)
        .map(|i| 1.0 / h[(i, i)].abs().max(floor).sqrt())
        .collect();
    let mut a = DMatrix::from_fn(n, n, |i, j| h[(i, j)] * scale[i] * scale[j]);
    for i in 0..n {
        a[(i, i)] += lambda;
    }
    let rhs = DVector::from_fn(n, |i, _| b[i] * scale[i]);
    let x = a.cholesky()?.solve(&rhs);
    let out = DVector::from_fn(n, |i, _| x[i] * scale[i]);
    out.iter().all(|v| v.is_finite()).then_some(out)
}

/// Eliminates the first `n_marg` variables of `H x = b`:
/// `H* = H₁₁ − H₁₀H₀₀⁺H₀₁`, `b* = b₁ − H₁₀H₀₀⁺b₀`. Directions of the
/// eliminated block carrying no information are dropped (pseudo-inverse).
pub fn schur_complement(
    h: &DMatrix<f64>,
    b: &DVector<f64>,
    n_marg: usize,
) -> Result<(DMatrix<f64>, DVector<f64>)> {
    let n = h.nrows();
    let m = n - n_marg;
    let h00 = h.view((0, 0), (n_marg, n_marg)).into_owned();
    let h00_inv = spd_pseudo_inverse(&h00).ok_or(Error::SingularMarginal)?;
    let h10 = h.view((n_marg, 0), (m, n_marg));
    let h01 = h.view((0, n_marg), (n_marg, m));
    let h11 = h.view((n_marg, n_marg), (m, m));
    let k = h10 * &h00_inv;
    let hs = h11 - &k * h01;
    let bs = b.rows(n_marg, m) - &k * b.rows(0, n_marg);
    Ok((hs, bs))
}

/// Pseudo-inverse of a symmetric positive semi-definite matrix, computed on
/// the diagonally scaled matrix; eigenvalues below
/// [`PSEUDO_INVERSE_CUTOFF`] of the largest are treated as zero. `None`
/// when the matrix has no information at all or is not finite.
pub fn spd_pseudo_inverse(m: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    let n = m.nrows();
    if m.iter().any(|v| !v.is_finite()) {
        return None;
    }
    if let Some(inv) = spd_inverse(m) {
        // fast path; reject only when badly conditioned
        let scaled_ok =
            (0..n).all(|i| (inv[(i, i)] * m[(i, i)]).abs() < 1.0 / PSEUDO_INVERSE_CUTOFF);
        if scaled_ok {
            return Some(inv);
        }
    }
    let scale: Vec<f64> = (0..n)
        .map(|i| {
            if m[(i, i)] > 0.0 {
                1.0 / m[(i, i)].sqrt()
            } else {
                0.0
            }
        })
        .collect();
    let scaled = DMatrix::from_fn(n, n, |i, j| m[(i, j)] * scale[i] * scale[j]);
    let eig = scaled.symmetric_eigen();
    let max = eig.eigenvalues.max();
    if !(max > 0.0) {
        return None;
    }
    let inv_l = DVector::from_iterator(
        n,
        eig.eigenvalues.iter().map(|&l| {
            if l > PSEUDO_INVERSE_CUTOFF * max {
                1.0 / l
            } else {
                0.0
            }
        }),
    );
    let inv = &eig.eigenvectors * DMatrix::from_diagonal(&inv_l) * eig.eigenvectors.transpose();
    Some(DMatrix::from_fn(n, n, |i, j| {
        inv[(i, j)] * scale[i] * scale[j]
    }))
}

/// Clamps negative eigenvalues of a symmetric matrix to zero. Works in the
/// diagonally scaled space so that widely differing information scales do
/// not swamp the small ones.
pub fn project_psd(h: &DMatrix<f64>) -> DMatrix<f64> {
    let n = h.nrows();
    let sym = 0.5 * (h + h.transpose());
    let scale: Vec<f64> = (0..n)
        .map(|i| {
            let d = sym[(i, i)];
            if d > 0.0 {
                d.sqrt()
            } else {
                1.0
            }
        })
        .collect();
    let scaled = DMatrix::from_fn(n, n, |i, j| sym[(i, j)] / (scale[i] * scale[j]));
    let eig = scaled.clone().symmetric_eigen();
    if eig.eigenvalues.iter().all(|l| *l >= 0.0) {
        return sym;
    }
    let clamped = DVector::from_iterator(n, eig.eigenvalues.iter().map(|l| l.max(0.0)));
    let rebuilt =
        &eig.eigenvectors * DMatrix::from_diagonal(&clamped) * eig.eigenvectors.transpose();
    let out = DMatrix::from_fn(n, n, |i, j| rebuilt[(i, j)] * scale[i] * scale[j]);
    0.5 * (&out + out.transpose())
}

/// Marginalizes the previous state out of the two-state system. The prior
/// is anchored at `x1`, the state the system was built at.
pub fn marginalize(ne: &NormalEquations, x1: &State) -> Result<Prior> {
    let h = DMatrix::from_column_slice(JOINT_DIM, JOINT_DIM, ne.h.as_slice());
    let b = DVector::from_column_slice(ne.b.as_slice());
    let (hs, bs) = schur_complement(&h, &b, STATE_DIM)?;
    let hs = project_psd(&hs);
    Ok(Prior {
        h: Mat18::from_column_slice(hs.as_slice()),
        b: Vec18::from_column_slice(bs.as_slice()),
        linearization: x1.clone(),
    })
}
