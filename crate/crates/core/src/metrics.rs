//! Figures of merit: transmit power, received fields, interference-plus-noise
//! covariances, achievable sum-rate, per-user MSE and the weighted-MSE
//! surrogate objective.

use std::f64::consts::LN_2;

use num_complex::Complex64;

use crate::em::{integrate, integrate_unchecked, QuadratureGrid};
use crate::error::{Error, Result};
use crate::linalg::solve_hpd3;
use crate::wavenumber::{energy_ratio_eta, ChannelSpectrum, TruncationOrder};
use crate::{Complex3, ComplexMat3, PatternSet};

/// Conversion from the (mA)² used in configuration files to A².
pub const MA2_TO_A2: f64 = 1e-6;

/// Power budget and receiver noise level.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct LinkBudget {
    /// Maximum transmit power, A².
    pt: f64,
    /// Noise power, V²/m².
    sigma2: f64,
}

impl LinkBudget {
    pub fn new(pt_a2: f64, sigma2: f64) -> Result<Self> {
        if !(pt_a2 > 0.0 && pt_a2.is_finite()) {
            return Err(Error::Config(format!("transmit power must be positive, got {pt_a2}")));
        }
        if !(sigma2 > 0.0 && sigma2.is_finite()) {
            return Err(Error::Config(format!("noise power must be positive, got {sigma2}")));
        }
        Ok(Self { pt: pt_a2, sigma2 })
    }

    /// Budget with the transmit power given in (mA)².
    pub fn from_ma2(pt_ma2: f64, sigma2: f64) -> Result<Self> {
        Self::new(pt_ma2 * MA2_TO_A2, sigma2)
    }

    pub fn pt(&self) -> f64 {
        self.pt
    }

    pub fn pt_ma2(&self) -> f64 {
        self.pt / MA2_TO_A2
    }

    pub fn sigma2(&self) -> f64 {
        self.sigma2
    }

    pub fn with_pt(&self, pt_a2: f64) -> Result<Self> {
        Self::new(pt_a2, self.sigma2)
    }
}

/// `β_{kj}`: field produced at user `k` by user `j`'s pattern, indexed `[k][j]`.
#[derive(Debug, Clone, PartialEq)]
pub struct CrossFields {
    beta: Vec<Vec<Complex3>>,
}

impl CrossFields {
    pub fn new(beta: Vec<Vec<Complex3>>) -> Result<Self> {
        let k = beta.len();
        if let Some(row) = beta.iter().find(|r| r.len() != k) {
            return Err(Error::LengthMismatch {
                expected: k,
                got: row.len(),
            });
        }
        Ok(Self { beta })
    }

    pub fn num_users(&self) -> usize {
        self.beta.len()
    }

    /// Desired field `α_k = β_{kk}`.
    pub fn desired(&self, k: usize) -> Complex3 {
        self.beta[k][k]
    }

    pub fn get(&self, k: usize, j: usize) -> Complex3 {
        self.beta[k][j]
    }

    pub fn row(&self, k: usize) -> &[Complex3] {
        &self.beta[k]
    }

    /// Same fields with every pattern scaled by `c`.
    pub fn scaled(&self, c: f64) -> CrossFields {
        let s = Complex64::from(c);
        CrossFields {
            beta: self
                .beta
                .iter()
                .map(|r| r.iter().map(|b| b * s).collect())
                .collect(),
        }
    }
}

/// Desired field and interference-plus-noise covariance of one user.
#[derive(Debug, Clone, PartialEq)]
pub struct UserFields {
    pub alpha: Complex3,
    pub j: ComplexMat3,
}

/// `Σ_k ∫ ‖θ_k(s)‖² ds`.
pub fn transmit_power(patterns: &PatternSet, grid: &QuadratureGrid) -> Result<f64> {
    let mut total = 0.0;
    for theta in patterns {
        let sq: Vec<f64> = theta.iter().map(|t| t.norm_squared()).collect();
        total += integrate(&sq, grid)?;
    }
    Ok(total)
}

/// `∫ G_k(s) θ_j(s) ds`.
pub fn field_at_user(
    g_k: &[ComplexMat3],
    theta_j: &[Complex3],
    grid: &QuadratureGrid,
) -> Result<Complex3> {
    for len in [g_k.len(), theta_j.len()] {
        if len != grid.len() {
            return Err(Error::LengthMismatch {
                expected: grid.len(),
                got: len,
            });
        }
    }
    Ok(integrate_unchecked(
        g_k.iter().zip(theta_j).map(|(g, t)| g * t),
        grid,
    ))
}

/// Every user's field from every pattern.
pub fn cross_fields(
    channels: &[Vec<ComplexMat3>],
    patterns: &PatternSet,
    grid: &QuadratureGrid,
) -> Result<CrossFields> {
    if channels.len() != patterns.len() {
        return Err(Error::LengthMismatch {
            expected: channels.len(),
            got: patterns.len(),
        });
    }
    let beta = channels
        .iter()
        .map(|g| {
            patterns
                .iter()
                .map(|theta| field_at_user(g, theta, grid))
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    CrossFields::new(beta)
}

/// `J_k = Σ_{j≠k} β_{kj} β_{kj}^H + σ² I₃`.
pub fn interference_matrix(fields: &CrossFields, k: usize, sigma2: f64) -> ComplexMat3 {
    let mut j_k = ComplexMat3::identity() * Complex64::from(sigma2);
    for (j, b) in fields.row(k).iter().enumerate() {
        if j != k {
            j_k += b * b.adjoint();
        }
    }
    j_k
}

pub fn user_fields(fields: &CrossFields, sigma2: f64) -> Vec<UserFields> {
    (0..fields.num_users())
        .map(|k| UserFields {
            alpha: fields.desired(k),
            j: interference_matrix(fields, k, sigma2),
        })
        .collect()
}

/// `log₂ det(I + α α^H J⁻¹)` through the rank-one identity `1 + α^H J⁻¹ α`.
pub fn user_rate(alpha: &Complex3, j: &ComplexMat3) -> Result<f64> {
    let x = solve_hpd3(j, alpha).ok_or_else(|| {
        Error::Domain("interference-plus-noise covariance is not positive definite".into())
    })?;
    let q = alpha.dotc(&x).re.max(0.0);
    Ok(q.ln_1p() / LN_2)
}

/// Sum-rate in bits/s/Hz from precomputed cross fields.
pub fn sum_rate_from_fields(fields: &CrossFields, sigma2: f64) -> Result<f64> {
    user_fields(fields, sigma2)
        .iter()
        .map(|u| user_rate(&u.alpha, &u.j))
        .sum()
}

/// Sum-rate with every user's interference removed: `Σ log₂(1 + ‖α_k‖²/σ²)`.
pub fn interference_free_rate(fields: &CrossFields, sigma2: f64) -> f64 {
    (0..fields.num_users())
        .map(|k| (fields.desired(k).norm_squared() / sigma2).ln_1p() / LN_2)
        .sum()
}

/// Achievable sum-rate of a pattern set, bits/s/Hz.
pub fn sum_rate(
    patterns: &PatternSet,
    channels: &[Vec<ComplexMat3>],
    grid: &QuadratureGrid,
    budget: &LinkBudget,
) -> Result<f64> {
    let fields = cross_fields(channels, patterns, grid)?;
    sum_rate_from_fields(&fields, budget.sigma2())
}

/// `E_k = |1 − ψ^H α_k|² + Σ_{j≠k} |ψ^H β_{kj}|² + σ²‖ψ‖²`.
pub fn mse_from_fields(fields: &CrossFields, psi: &Complex3, k: usize, sigma2: f64) -> f64 {
    let mut e = sigma2 * psi.norm_squared();
    for (j, b) in fields.row(k).iter().enumerate() {
        let p = psi.dotc(b);
        if j == k {
            e += (Complex64::from(1.0) - p).norm_sqr();
        } else {
            e += p.norm_sqr();
        }
    }
    e
}

/// MSE of user `k` decoding with combiner `psi` under patterns `patterns`.
pub fn mse(
    patterns: &PatternSet,
    psi: &Complex3,
    g_k: &[ComplexMat3],
    grid: &QuadratureGrid,
    sigma2: f64,
    k: usize,
) -> Result<f64> {
    if k >= patterns.len() {
        return Err(Error::Config(format!(
            "user index {k} out of range for {} patterns",
            patterns.len()
        )));
    }
    let mut e = sigma2 * psi.norm_squared();
    for (j, theta) in patterns.iter().enumerate() {
        let p = psi.dotc(&field_at_user(g_k, theta, grid)?);
        if j == k {
            e += (Complex64::from(1.0) - p).norm_sqr();
        } else {
            e += p.norm_sqr();
        }
    }
    Ok(e)
}

/// `Σ log₂ρ_k − (1/ln2) Σ ρ_k E_k + K/ln2`.
pub fn surrogate_rate(rho: &[f64], e: &[f64]) -> Result<f64> {
    if rho.len() != e.len() {
        return Err(Error::LengthMismatch {
            expected: rho.len(),
            got: e.len(),
        });
    }
    let mut acc = 0.0;
    for (&r, &ek) in rho.iter().zip(e) {
        if !(r > 0.0) {
            return Err(Error::Domain(format!("MSE weights must be positive, got {r}")));
        }
        acc += r.log2() - (r * ek - 1.0) / LN_2;
    }
    Ok(acc)
}

/// Worst-case single-user SNR loss caused by truncating the expansion at `order`:
/// `(P_T/σ²)·√(1−η)·(1+√η)·∫‖G‖_F² ds`.
pub fn snr_loss_bound(
    spectrum: &ChannelSpectrum,
    order: &TruncationOrder,
    g: &[ComplexMat3],
    grid: &QuadratureGrid,
    budget: &LinkBudget,
) -> Result<f64> {
    let eta = energy_ratio_eta(spectrum, order)?;
    let energy: Vec<f64> = g.iter().map(|m| m.norm_squared()).collect();
    let energy = integrate(&energy, grid)?;
    Ok(snr_loss_bound_from_eta(eta, energy, budget))
}

/// The same bound from a known energy ratio and channel energy.
pub fn snr_loss_bound_from_eta(eta: f64, channel_energy: f64, budget: &LinkBudget) -> f64 {
    let eta = eta.clamp(0.0, 1.0);
    budget.pt() / budget.sigma2() * (1.0 - eta).sqrt() * (1.0 + eta.sqrt()) * channel_energy
}
