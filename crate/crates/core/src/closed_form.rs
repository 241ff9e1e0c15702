//! Single-user optimum: with one user the best pattern is the conjugate
//! channel steered along the dominant eigenvector of the aperture Gram matrix.

use num_complex::Complex64;

use crate::em::{integrate_unchecked, QuadratureGrid};
use crate::error::{Error, Result};
use crate::linalg::top_eigenpair;
use crate::metrics::LinkBudget;
use crate::{Complex3, ComplexMat3};

/// `∫ G(s) G^H(s) ds`, Hermitian-symmetrized.
pub fn gram_matrix(g: &[ComplexMat3], grid: &QuadratureGrid) -> Result<ComplexMat3> {
    if g.len() != grid.len() {
        return Err(Error::LengthMismatch {
            expected: grid.len(),
            got: g.len(),
        });
    }
    let m = integrate_unchecked(g.iter().map(|gi| gi * gi.adjoint()), grid);
    Ok((m + m.adjoint()) * Complex64::from(0.5))
}

#[derive(Debug, Clone)]
pub struct SingleUserOptimum {
    pub pattern: Vec<Complex3>,
    pub combiner: Complex3,
    /// Dominant eigenvalue of the Gram matrix.
    pub lambda_max: f64,
    /// Optimal receive SNR `P_T λ_max / σ²`.
    pub gamma_opt: f64,
}

impl SingleUserOptimum {
    pub fn rate(&self) -> f64 {
        self.gamma_opt.ln_1p() / std::f64::consts::LN_2
    }
}

pub fn single_user_optimum(
    g: &[ComplexMat3],
    grid: &QuadratureGrid,
    budget: &LinkBudget,
) -> Result<SingleUserOptimum> {
    let m = gram_matrix(g, grid)?;
    let (lambda_max, psi) = top_eigenpair(&m);
    if !(lambda_max > 0.0) {
        return Err(Error::DegenerateChannel(
            "Gram matrix of the channel is zero".into(),
        ));
    }
    let raw: Vec<Complex3> = g.iter().map(|gi| gi.adjoint() * psi).collect();
    let norm2 = integrate_unchecked(raw.iter().map(|t| t.norm_squared()), grid);
    let scale = Complex64::from((budget.pt() / norm2).sqrt());
    Ok(SingleUserOptimum {
        pattern: raw.into_iter().map(|t| t * scale).collect(),
        combiner: psi,
        lambda_max,
        gamma_opt: budget.pt() / budget.sigma2() * lambda_max,
    })
}

/// SNR reached by truncated coefficients: `‖Σ_n Ω_n w_n‖² / σ²`.
pub fn truncated_snr(w: &[Complex3], omega: &[ComplexMat3], sigma2: f64) -> Result<f64> {
    if w.len() != omega.len() {
        return Err(Error::LengthMismatch {
            expected: omega.len(),
            got: w.len(),
        });
    }
    let field: Complex3 = omega.iter().zip(w).map(|(o, wn)| o * wn).sum();
    Ok(field.norm_squared() / sigma2)
}
