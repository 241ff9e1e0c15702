//! Weighted-MMSE block coordinate descent for the downlink sum-rate.
//!
//! Each user's received field is a linear function of a stacked precoding
//! vector: the wavenumber coefficients of its pattern, or the excitations of
//! a patch array. The descent alternates three exact block maximizations of
//! the surrogate objective
//!
//! ```text
//! R' = Σ log₂ρ_k − (1/ln2) Σ ρ_k E_k + K/ln2
//! ```
//!
//! over the MSE weights `ρ`, the receive combiners `ψ` and the precoders `w`,
//! so `R'` never decreases. The precoder block carries the power constraint
//! through a Lagrange multiplier `ζ` found by bisection.
//!
//! The precoder solve `w_k = ρ_k (Σ_j ρ_j h_j h_j^H + ζI)⁻¹ h_k` involves a
//! `D x D` system with `D` up to a few thousand, but the matrix is rank `K`.
//! With `H = [√ρ_1 h_1, …, √ρ_K h_K]` and `H^H H = U Λ U^H`,
//!
//! ```text
//! W(ζ) = H U (Λ + ζ)⁻¹ U^H diag(√ρ),   ‖W(ζ)‖_F² = Σ_i λ_i ‖b_i‖² / (λ_i + ζ)²
//! ```
//!
//! where `b_i` is row `i` of `U^H diag(√ρ)`. One `K x K` eigendecomposition per
//! iteration therefore gives every `W(ζ)` and a scalar power curve for the
//! bisection.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::em::{Aperture, QuadratureGrid};
use crate::error::{Error, Result};
use crate::linalg::{hermitian_eigen, solve_hpd3};
use crate::metrics::{
    cross_fields, interference_free_rate, mse_from_fields, sum_rate_from_fields, surrogate_rate,
    transmit_power, CrossFields, LinkBudget,
};
use crate::wavenumber::{
    channel_spectrum_with, synthesize_pattern_with, BasisTable, ChannelSpectrum, CoeffSet,
    TruncationOrder,
};
use crate::{Combiners, Complex3, ComplexMat3, PatternSet};

/// Eigenvalues below this fraction of the largest are treated as zero.
const RANK_TOL: f64 = 1e-13;
const MAX_DOUBLINGS: usize = 200;
const MAX_BISECTIONS: usize = 100;

/// Whether the receivers see each other's signals.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum InterferenceModel {
    #[default]
    Full,
    /// Every interference-plus-noise covariance is replaced by `σ²I`, which
    /// relaxes the problem into an upper bound.
    Ignored,
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct SolverConfig {
    pub max_iters: usize,
    /// Stop once the relative change of the sum-rate drops below this.
    pub rel_tol: f64,
    /// Relative accuracy of the power constraint when it binds.
    pub zeta_tol: f64,
    pub seed: u64,
    pub order: TruncationOrder,
    /// Re-synthesize the patterns on the grid to evaluate every iterate.
    /// Otherwise iterates are scored in the wavenumber domain, which gives the
    /// same fields on the grid up to roundoff at a fraction of the cost.
    #[serde(default)]
    pub trace_on_grid: bool,
}

impl SolverConfig {
    pub fn new(order: TruncationOrder) -> Self {
        Self {
            max_iters: 500,
            rel_tol: 1e-5,
            zeta_tol: 1e-12,
            seed: 1,
            order,
            trace_on_grid: false,
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.max_iters == 0 {
            return Err(Error::Config("max_iters must be at least 1".into()));
        }
        for (name, v) in [("rel_tol", self.rel_tol), ("zeta_tol", self.zeta_tol)] {
            if !(v > 0.0 && v < 1.0) {
                return Err(Error::Config(format!("{name} must lie in (0, 1), got {v}")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct TraceEntry {
    pub iteration: usize,
    pub sum_rate: f64,
    pub surrogate: f64,
    pub power: f64,
}

/// Outcome of the descent on a generic linear channel.
#[derive(Debug, Clone)]
pub struct BcdOutcome {
    /// Stacked precoder per user.
    pub precoders: Vec<DVector<Complex64>>,
    /// MMSE combiners for the final precoders.
    pub combiners: Combiners,
    pub trace: Vec<TraceEntry>,
    pub iterations: usize,
    pub converged: bool,
    pub sum_rate: f64,
    /// Surrogate at the final precoders with MMSE combiners and `ρ = 1/E`.
    pub final_surrogate: f64,
}

#[derive(Debug, Clone)]
pub struct SolveResult {
    pub patterns: PatternSet,
    pub combiners: Combiners,
    pub coeffs: CoeffSet,
    pub trace: Vec<TraceEntry>,
    pub iterations: usize,
    pub converged: bool,
    pub sum_rate: f64,
    pub final_surrogate: f64,
    pub power: f64,
}

/// Per-user `3 x D` maps from a stacked precoder to the received field.
#[derive(Debug, Clone)]
pub struct LinearChannels {
    users: Vec<DMatrix<Complex64>>,
}

impl LinearChannels {
    pub fn new(users: Vec<DMatrix<Complex64>>) -> Result<Self> {
        let Some(first) = users.first() else {
            return Err(Error::Config("at least one user is required".into()));
        };
        let dim = first.ncols();
        for u in &users {
            if u.nrows() != 3 || u.ncols() != dim {
                return Err(Error::LengthMismatch {
                    expected: dim,
                    got: u.ncols(),
                });
            }
        }
        Ok(Self { users })
    }

    /// Channel `k` acting on stacked 3-blocks: `field = Σ_b blocks[k][b] · v_b`.
    pub fn from_blocks(blocks: &[Vec<ComplexMat3>]) -> Result<Self> {
        let users = blocks
            .iter()
            .map(|bk| {
                DMatrix::from_fn(3, 3 * bk.len(), |r, c| bk[c / 3][(r, c % 3)])
            })
            .collect();
        Self::new(users)
    }

    pub fn from_spectrum(spectrum: &ChannelSpectrum) -> Result<Self> {
        Self::from_blocks(&spectrum.users)
    }

    pub fn num_users(&self) -> usize {
        self.users.len()
    }

    pub fn dim(&self) -> usize {
        self.users[0].ncols()
    }

    pub fn user(&self, k: usize) -> &DMatrix<Complex64> {
        &self.users[k]
    }

    pub fn field(&self, k: usize, v: &DVector<Complex64>) -> Complex3 {
        let f = &self.users[k] * v;
        Complex3::new(f[0], f[1], f[2])
    }

    pub fn cross_fields(&self, precoders: &[DVector<Complex64>]) -> Result<CrossFields> {
        let beta = (0..self.num_users())
            .map(|k| precoders.iter().map(|v| self.field(k, v)).collect())
            .collect();
        CrossFields::new(beta)
    }

    /// `h_k = H_k^H ψ_k`.
    pub fn matched(&self, k: usize, psi: &Complex3) -> DVector<Complex64> {
        let p = DVector::from_column_slice(psi.as_slice());
        self.users[k].adjoint() * p
    }
}

pub fn total_power(precoders: &[DVector<Complex64>]) -> f64 {
    precoders.iter().map(|v| v.norm_squared()).sum()
}

/// `ρ_k = 1/E_k`.
pub fn update_rho(e: &[f64]) -> Result<Vec<f64>> {
    e.iter()
        .map(|&ek| {
            if ek > 0.0 && ek.is_finite() {
                Ok(1.0 / ek)
            } else {
                Err(Error::Domain(format!("MSE must be positive and finite, got {ek}")))
            }
        })
        .collect()
}

/// Per-user MSEs; the interference terms vanish under [`InterferenceModel::Ignored`].
pub fn user_mses(
    fields: &CrossFields,
    combiners: &[Complex3],
    sigma2: f64,
    model: InterferenceModel,
) -> Vec<f64> {
    combiners
        .iter()
        .enumerate()
        .map(|(k, psi)| match model {
            InterferenceModel::Full => mse_from_fields(fields, psi, k, sigma2),
            InterferenceModel::Ignored => {
                (Complex64::from(1.0) - psi.dotc(&fields.desired(k))).norm_sqr()
                    + sigma2 * psi.norm_squared()
            }
        })
        .collect()
}

/// MMSE combiners `ψ_k = A_k⁻¹ α_k`, `A_k = Σ_j β_{kj} β_{kj}^H + σ² I`.
pub fn update_psi(fields: &CrossFields, sigma2: f64, model: InterferenceModel) -> Combiners {
    (0..fields.num_users())
        .map(|k| {
            let alpha = fields.desired(k);
            let mut a = ComplexMat3::identity() * Complex64::from(sigma2);
            match model {
                InterferenceModel::Full => {
                    for b in fields.row(k) {
                        a += b * b.adjoint();
                    }
                }
                InterferenceModel::Ignored => a += alpha * alpha.adjoint(),
            }
            solve_hpd3(&a, &alpha).expect("σ²-loaded covariance is positive definite")
        })
        .collect()
}

/// MMSE combiners for patterns sampled on the grid.
pub fn combiners_for_patterns(
    channels: &[Vec<ComplexMat3>],
    patterns: &PatternSet,
    grid: &QuadratureGrid,
    sigma2: f64,
) -> Result<Combiners> {
    let fields = cross_fields(channels, patterns, grid)?;
    Ok(update_psi(&fields, sigma2, InterferenceModel::Full))
}

/// Precoders `W(ζ)` in factored form, see the module docs.
#[derive(Debug, Clone)]
pub struct WeightedSolve {
    model: InterferenceModel,
    /// `λ_i` of the kept modes.
    lambdas: Vec<f64>,
    /// `‖b_i‖²` of the kept modes.
    weights: Vec<f64>,
    // Full model: columns H u_i of the kept modes and the rows b_i.
    modes: Vec<DVector<Complex64>>,
    rows: Vec<Vec<Complex64>>,
    // Ignored model: ρ_k h_k per user (zero vectors for inactive users).
    scaled: Vec<DVector<Complex64>>,
    dim: usize,
}

impl WeightedSolve {
    pub fn new(h: &[DVector<Complex64>], rho: &[f64], model: InterferenceModel) -> Result<Self> {
        if h.len() != rho.len() {
            return Err(Error::LengthMismatch {
                expected: h.len(),
                got: rho.len(),
            });
        }
        let dim = h.first().map_or(0, |x| x.len());
        let mut out = Self {
            model,
            lambdas: Vec::new(),
            weights: Vec::new(),
            modes: Vec::new(),
            rows: Vec::new(),
            scaled: Vec::new(),
            dim,
        };
        match model {
            InterferenceModel::Full => {
                let k = h.len();
                let sq: Vec<f64> = rho.iter().map(|r| r.sqrt()).collect();
                let cols: Vec<DVector<Complex64>> =
                    h.iter().zip(&sq).map(|(x, s)| x * Complex64::from(*s)).collect();
                let gram = DMatrix::from_fn(k, k, |i, j| cols[i].dotc(&cols[j]));
                let eig = hermitian_eigen(&gram);
                let top = eig.values.first().copied().unwrap_or(0.0);
                for (i, &lam) in eig.values.iter().enumerate() {
                    if !(lam > RANK_TOL * top) {
                        continue;
                    }
                    let u = eig.vectors.column(i);
                    let mut mode = DVector::zeros(dim);
                    for (j, c) in cols.iter().enumerate() {
                        mode.axpy(u[j], c, Complex64::from(1.0));
                    }
                    let row: Vec<Complex64> =
                        (0..k).map(|j| u[j].conj() * sq[j]).collect();
                    out.weights.push(row.iter().map(|z| z.norm_sqr()).sum());
                    out.lambdas.push(lam);
                    out.modes.push(mode);
                    out.rows.push(row);
                }
            }
            InterferenceModel::Ignored => {
                for (x, &r) in h.iter().zip(rho) {
                    let lam = r * x.norm_squared();
                    out.lambdas.push(lam);
                    out.weights.push(if lam > 0.0 { r } else { 0.0 });
                    out.scaled.push(x * Complex64::from(r));
                }
            }
        }
        Ok(out)
    }

    /// `Σ_k ‖w_k(ζ)‖²`.
    pub fn power(&self, zeta: f64) -> f64 {
        self.lambdas
            .iter()
            .zip(&self.weights)
            .filter(|(l, _)| **l > 0.0)
            .map(|(l, w)| l * w / ((l + zeta) * (l + zeta)))
            .sum()
    }

    pub fn precoders(&self, zeta: f64) -> Vec<DVector<Complex64>> {
        match self.model {
            InterferenceModel::Full => {
                let k = self.rows.first().map_or(0, |r| r.len());
                let mut w = vec![DVector::zeros(self.dim); k];
                for ((mode, row), lam) in self.modes.iter().zip(&self.rows).zip(&self.lambdas) {
                    let inv = 1.0 / (lam + zeta);
                    for (wk, b) in w.iter_mut().zip(row) {
                        wk.axpy(b * inv, mode, Complex64::from(1.0));
                    }
                }
                w
            }
            InterferenceModel::Ignored => self
                .scaled
                .iter()
                .zip(&self.lambdas)
                .map(|(x, lam)| {
                    if *lam > 0.0 {
                        x / Complex64::from(lam + zeta)
                    } else {
                        DVector::zeros(self.dim)
                    }
                })
                .collect(),
        }
    }

    /// Smallest `ζ ≥ 0` meeting the power budget, to relative accuracy `tol`
    /// when the constraint binds. The returned multiplier is always feasible.
    pub fn find_zeta(&self, p_t: f64, tol: f64) -> f64 {
        if self.power(0.0) <= p_t {
            return 0.0;
        }
        let mut lo = 0.0;
        let mut hi = 1.0;
        for _ in 0..MAX_DOUBLINGS {
            if self.power(hi) <= p_t {
                break;
            }
            lo = hi;
            hi *= 2.0;
        }
        for _ in 0..MAX_BISECTIONS {
            let p = self.power(hi);
            if (p_t - p).abs() <= tol * p_t {
                break;
            }
            let mid = 0.5 * (lo + hi);
            if mid <= lo || mid >= hi {
                break;
            }
            if self.power(mid) > p_t {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        hi
    }
}

/// Lagrange multiplier of the power constraint for matched vectors `h` and weights `ρ`.
pub fn find_zeta(h: &[DVector<Complex64>], rho: &[f64], p_t: f64, zeta_tol: f64) -> Result<f64> {
    Ok(WeightedSolve::new(h, rho, InterferenceModel::Full)?.find_zeta(p_t, zeta_tol))
}

/// Power-constrained precoder update; returns the precoders and `ζ`.
pub fn update_w(
    h: &[DVector<Complex64>],
    rho: &[f64],
    p_t: f64,
    zeta_tol: f64,
    model: InterferenceModel,
) -> Result<(Vec<DVector<Complex64>>, f64)> {
    let solve = WeightedSolve::new(h, rho, model)?;
    let zeta = solve.find_zeta(p_t, zeta_tol);
    Ok((solve.precoders(zeta), zeta))
}

fn standard_complex(rng: &mut ChaCha8Rng) -> Complex64 {
    let re: f64 = StandardNormal.sample(rng);
    let im: f64 = StandardNormal.sample(rng);
    Complex64::new(re, im) * std::f64::consts::FRAC_1_SQRT_2
}

/// Seeded starting point: standard complex-Gaussian precoders rescaled to the
/// full budget, and standard complex-Gaussian combiners divided by `σ` so the
/// first MSE weights do not depend on the overall power scale.
pub fn initial_point(
    num_users: usize,
    dim: usize,
    budget: &LinkBudget,
    seed: u64,
) -> (Vec<DVector<Complex64>>, Combiners) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut v: Vec<DVector<Complex64>> = (0..num_users)
        .map(|_| DVector::from_fn(dim, |_, _| standard_complex(&mut rng)))
        .collect();
    let p = total_power(&v);
    if p > 0.0 {
        let s = Complex64::from((budget.pt() / p).sqrt());
        for x in &mut v {
            *x *= s;
        }
    }
    let inv_sigma = Complex64::from(1.0 / budget.sigma2().sqrt());
    let psi = (0..num_users)
        .map(|_| Complex3::from_fn(|_, _| standard_complex(&mut rng) * inv_sigma))
        .collect();
    (v, psi)
}

/// Sum-rate and transmit power of an iterate, as reported in the trace.
pub trait Evaluator {
    fn evaluate(&mut self, precoders: &[DVector<Complex64>]) -> Result<(f64, f64)>;
}

/// Evaluates iterates directly from the linear channel.
pub struct DirectEvaluator<'a> {
    pub channels: &'a LinearChannels,
    pub sigma2: f64,
    pub model: InterferenceModel,
}

impl Evaluator for DirectEvaluator<'_> {
    fn evaluate(&mut self, precoders: &[DVector<Complex64>]) -> Result<(f64, f64)> {
        let fields = self.channels.cross_fields(precoders)?;
        let rate = model_rate(&fields, self.sigma2, self.model)?;
        Ok((rate, total_power(precoders)))
    }
}

pub fn model_rate(fields: &CrossFields, sigma2: f64, model: InterferenceModel) -> Result<f64> {
    match model {
        InterferenceModel::Full => sum_rate_from_fields(fields, sigma2),
        InterferenceModel::Ignored => Ok(interference_free_rate(fields, sigma2)),
    }
}

fn check_finite(values: impl IntoIterator<Item = f64>, iteration: usize, what: &str) -> Result<()> {
    if values.into_iter().all(f64::is_finite) {
        Ok(())
    } else {
        Err(Error::Numerical {
            iteration,
            what: what.to_string(),
        })
    }
}

/// Runs the descent from the seeded starting point.
pub fn solve_linear(
    channels: &LinearChannels,
    budget: &LinkBudget,
    model: InterferenceModel,
    config: &SolverConfig,
    evaluator: &mut dyn Evaluator,
) -> Result<BcdOutcome> {
    config.validate()?;
    let (v0, psi0) = initial_point(channels.num_users(), channels.dim(), budget, config.seed);
    solve_linear_from(channels, budget, model, config, evaluator, v0, psi0)
}

/// Runs the descent from a given starting point.
pub fn solve_linear_from(
    channels: &LinearChannels,
    budget: &LinkBudget,
    model: InterferenceModel,
    config: &SolverConfig,
    evaluator: &mut dyn Evaluator,
    mut v: Vec<DVector<Complex64>>,
    mut psi: Combiners,
) -> Result<BcdOutcome> {
    config.validate()?;
    let sigma2 = budget.sigma2();
    let k_users = channels.num_users();
    if v.len() != k_users || psi.len() != k_users {
        return Err(Error::LengthMismatch {
            expected: k_users,
            got: v.len().min(psi.len()),
        });
    }

    let mut fields = channels.cross_fields(&v)?;
    let (mut rate, power) = evaluator.evaluate(&v)?;
    let e0 = user_mses(&fields, &psi, sigma2, model);
    let mut trace = vec![TraceEntry {
        iteration: 0,
        sum_rate: rate,
        surrogate: surrogate_rate(&update_rho(&e0)?, &e0)?,
        power,
    }];
    let mut converged = false;
    let mut iterations = 0;

    for it in 1..=config.max_iters {
        iterations = it;
        let e = user_mses(&fields, &psi, sigma2, model);
        check_finite(e.iter().copied(), it, "mean-square errors")?;
        let rho = update_rho(&e).map_err(|_| Error::Numerical {
            iteration: it,
            what: "non-positive mean-square error".into(),
        })?;
        psi = update_psi(&fields, sigma2, model);
        let h: Vec<DVector<Complex64>> =
            (0..k_users).map(|k| channels.matched(k, &psi[k])).collect();
        let (w, _zeta) = update_w(&h, &rho, budget.pt(), config.zeta_tol, model)?;
        check_finite(w.iter().flat_map(|x| x.iter().map(|z| z.norm())), it, "precoders")?;
        v = w;

        fields = channels.cross_fields(&v)?;
        let e_new = user_mses(&fields, &psi, sigma2, model);
        let surrogate = surrogate_rate(&rho, &e_new)?;
        let (new_rate, power) = evaluator.evaluate(&v)?;
        check_finite([new_rate, surrogate, power], it, "sum-rate")?;
        trace.push(TraceEntry {
            iteration: it,
            sum_rate: new_rate,
            surrogate,
            power,
        });
        let change = (new_rate - rate).abs() / rate.max(1e-12);
        rate = new_rate;
        if change < config.rel_tol {
            converged = true;
            break;
        }
    }

    let combiners = update_psi(&fields, sigma2, model);
    let e_final = user_mses(&fields, &combiners, sigma2, model);
    let final_surrogate = surrogate_rate(&update_rho(&e_final)?, &e_final)?;
    Ok(BcdOutcome {
        precoders: v,
        combiners,
        trace,
        iterations,
        converged,
        sum_rate: rate,
        final_surrogate,
    })
}

/// A continuous-aperture design problem: channel samples on a grid plus a budget.
#[derive(Debug, Clone)]
pub struct PdmProblem {
    pub aperture: Aperture,
    pub grid: QuadratureGrid,
    /// `G_k(s_i)`, indexed `[k][i]`.
    pub channels: Vec<Vec<ComplexMat3>>,
    pub budget: LinkBudget,
}

struct GridEvaluator<'a> {
    problem: &'a PdmProblem,
    table: &'a BasisTable,
    order: TruncationOrder,
    model: InterferenceModel,
}

impl GridEvaluator<'_> {
    fn patterns(&self, precoders: &[DVector<Complex64>]) -> Result<PatternSet> {
        let coeffs = coeffs_from_stacked(precoders, self.order);
        synthesize_pattern_with(&coeffs, &self.problem.grid, self.table)
    }
}

impl Evaluator for GridEvaluator<'_> {
    fn evaluate(&mut self, precoders: &[DVector<Complex64>]) -> Result<(f64, f64)> {
        let patterns = self.patterns(precoders)?;
        let fields = cross_fields(&self.problem.channels, &patterns, &self.problem.grid)?;
        let rate = model_rate(&fields, self.problem.budget.sigma2(), self.model)?;
        let power = transmit_power(&patterns, &self.problem.grid)?;
        Ok((rate, power))
    }
}

/// Splits stacked precoders into per-index 3-vectors.
pub fn coeffs_from_stacked(precoders: &[DVector<Complex64>], order: TruncationOrder) -> CoeffSet {
    CoeffSet {
        order,
        users: precoders
            .iter()
            .map(|v| {
                v.as_slice()
                    .chunks_exact(3)
                    .map(|c| Complex3::new(c[0], c[1], c[2]))
                    .collect()
            })
            .collect(),
    }
}

/// Designs the patterns of every user with the truncation order in `config`.
pub fn run_pdm(problem: &PdmProblem, config: &SolverConfig) -> Result<SolveResult> {
    run_pdm_with_model(problem, config, InterferenceModel::Full)
}

pub fn run_pdm_with_model(
    problem: &PdmProblem,
    config: &SolverConfig,
    model: InterferenceModel,
) -> Result<SolveResult> {
    config.validate()?;
    if problem.channels.is_empty() {
        return Err(Error::Config("at least one user is required".into()));
    }
    let (nx, ny) = (problem.grid.nx(), problem.grid.ny());
    if 2 * config.order.nx as usize >= nx || 2 * config.order.ny as usize >= ny {
        return Err(Error::Config(format!(
            "a {nx} x {ny} grid cannot resolve truncation order {}; need more than 2N samples per axis",
            config.order
        )));
    }
    let table = BasisTable::new(config.order, &problem.grid, &problem.aperture);
    let spectrum = channel_spectrum_with(&problem.channels, &problem.grid, &table)?;
    let linear = LinearChannels::from_spectrum(&spectrum)?;
    let mut on_grid = GridEvaluator {
        problem,
        table: &table,
        order: config.order,
        model,
    };
    let mut direct = DirectEvaluator {
        channels: &linear,
        sigma2: problem.budget.sigma2(),
        model,
    };
    let evaluator: &mut dyn Evaluator = if config.trace_on_grid {
        &mut on_grid
    } else {
        &mut direct
    };
    let out = solve_linear(&linear, &problem.budget, model, config, evaluator)?;
    let patterns = on_grid.patterns(&out.precoders)?;
    let power = transmit_power(&patterns, &problem.grid)?;
    let fields = cross_fields(&problem.channels, &patterns, &problem.grid)?;
    let sum_rate = model_rate(&fields, problem.budget.sigma2(), model)?;
    Ok(SolveResult {
        coeffs: coeffs_from_stacked(&out.precoders, config.order),
        patterns,
        combiners: out.combiners,
        trace: out.trace,
        iterations: out.iterations,
        converged: out.converged,
        sum_rate,
        final_surrogate: out.final_surrogate,
        power,
    })
}

/// Surrogate objective `R'` at arbitrary weights and combiners.
pub fn surrogate_at(
    fields: &CrossFields,
    combiners: &[Complex3],
    rho: &[f64],
    sigma2: f64,
    model: InterferenceModel,
) -> Result<f64> {
    let e = user_mses(fields, combiners, sigma2, model);
    surrogate_rate(rho, &e)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn crand(rng: &mut ChaCha8Rng) -> Complex64 {
        Complex64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0))
    }

    fn random_h(k: usize, d: usize, rng: &mut ChaCha8Rng) -> Vec<DVector<Complex64>> {
        (0..k).map(|_| DVector::from_fn(d, |_, _| crand(rng))).collect()
    }

    /// Dense `ρ_k (Σ ρ_j h_j h_j^H + ζI)⁻¹ h_k` through a Cholesky factorization.
    fn dense_w(h: &[DVector<Complex64>], rho: &[f64], zeta: f64) -> Vec<DVector<Complex64>> {
        let d = h[0].len();
        let mut m = DMatrix::<Complex64>::identity(d, d) * Complex64::from(zeta);
        for (x, r) in h.iter().zip(rho) {
            m += x * x.adjoint() * Complex64::from(*r);
        }
        let chol = m.cholesky().expect("ζ > 0 makes the system positive definite");
        h.iter()
            .zip(rho)
            .map(|(x, r)| chol.solve(x) * Complex64::from(*r))
            .collect()
    }

    #[test]
    fn rho_update() {
        assert_eq!(update_rho(&[1.0, 1.0]).unwrap(), vec![1.0, 1.0]);
        assert_eq!(update_rho(&[0.25]).unwrap(), vec![4.0]);
        assert!(update_rho(&[0.0]).is_err());
    }

    #[test]
    fn factored_solve_matches_dense_cholesky() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for (k, d) in [(1, 6), (3, 9), (5, 30), (8, 12)] {
            let h = random_h(k, d, &mut rng);
            let rho: Vec<f64> = (0..k).map(|_| rng.random_range(0.2..3.0)).collect();
            let solve = WeightedSolve::new(&h, &rho, InterferenceModel::Full).unwrap();
            for zeta in [1e-3, 0.7, 25.0] {
                let fast = solve.precoders(zeta);
                let slow = dense_w(&h, &rho, zeta);
                for (a, b) in fast.iter().zip(&slow) {
                    assert!((a - b).norm() <= 1e-9 * b.norm(), "k={k} d={d} ζ={zeta}");
                }
                let p = total_power(&slow);
                assert!((solve.power(zeta) - p).abs() <= 1e-9 * p);
            }
        }
    }

    #[test]
    fn interference_free_solve_is_per_user() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let h = random_h(4, 7, &mut rng);
        let rho = vec![0.5, 1.0, 2.0, 3.0];
        let solve = WeightedSolve::new(&h, &rho, InterferenceModel::Ignored).unwrap();
        let w = solve.precoders(0.3);
        for k in 0..4 {
            let single = dense_w(&h[k..k + 1], &rho[k..k + 1], 0.3);
            assert!((&w[k] - &single[0]).norm() <= 1e-12 * single[0].norm());
        }
        assert!((solve.power(0.3) - total_power(&w)).abs() <= 1e-12 * total_power(&w));
    }

    #[test]
    fn zero_combiners_give_zero_precoders() {
        let h = vec![DVector::zeros(6); 3];
        let (w, zeta) = update_w(&h, &[1.0, 2.0, 3.0], 1.0, 1e-12, InterferenceModel::Full).unwrap();
        assert_eq!(zeta, 0.0);
        assert!(w.iter().all(|x| x.norm() == 0.0));
    }

    #[test]
    fn unconstrained_single_user_is_pseudo_inverse() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let h = random_h(1, 9, &mut rng);
        let rho = [1.7];
        let (w, zeta) = update_w(&h, &rho, 1e6, 1e-12, InterferenceModel::Full).unwrap();
        assert_eq!(zeta, 0.0);
        let expect = &h[0] / Complex64::from(h[0].norm_squared());
        assert!((&w[0] - &expect).norm() <= 1e-12 * expect.norm());
        // stationarity: ρ h h^H w + ζ w = ρ h
        let resid = &h[0] * (h[0].dotc(&w[0]) * rho[0]) - &h[0] * Complex64::from(rho[0]);
        assert!(resid.norm() <= 1e-8 * h[0].norm() * rho[0]);
    }

    #[test]
    fn binding_budget_is_met_and_power_decreases() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let h = random_h(4, 20, &mut rng);
        let rho = vec![1.0, 0.5, 2.0, 1.5];
        let solve = WeightedSolve::new(&h, &rho, InterferenceModel::Full).unwrap();
        let p_t = 0.01 * solve.power(0.0);
        let zeta = solve.find_zeta(p_t, 1e-10);
        assert!(zeta > 0.0);
        let p = total_power(&solve.precoders(zeta));
        assert!(p <= p_t && (p - p_t).abs() <= 1e-10 * p_t);
        for z in [1e-4, 0.01, 1.0, 100.0] {
            assert!(solve.power(2.0 * z) <= solve.power(z));
        }
        assert_eq!(solve.find_zeta(1e3 * solve.power(0.0), 1e-10), 0.0);
        // KKT: (Σ ρ h h^H + ζ I) w_k = ρ_k h_k
        let w = solve.precoders(zeta);
        for k in 0..4 {
            let mut lhs = &w[k] * Complex64::from(zeta);
            for (x, r) in h.iter().zip(&rho) {
                lhs += x * (x.dotc(&w[k]) * r);
            }
            let rhs = &h[k] * Complex64::from(rho[k]);
            assert!((lhs - &rhs).norm() <= 1e-8 * rhs.norm());
        }
    }

    #[test]
    fn scalar_mmse_combiner() {
        let b = Complex64::new(0.3, -0.4);
        let f = CrossFields::new(vec![vec![Complex3::new(b, 0.0.into(), 0.0.into())]]).unwrap();
        let psi = update_psi(&f, 0.1, InterferenceModel::Full);
        let expect = b / Complex64::from(b.norm_sqr() + 0.1);
        assert!((psi[0][0] - expect).norm() < 1e-15);
        assert_eq!(psi[0][1], Complex64::from(0.0));
        let zero = CrossFields::new(vec![vec![Complex3::zeros(); 2]; 2]).unwrap();
        assert!(update_psi(&zero, 0.1, InterferenceModel::Full).iter().all(|p| p.norm() == 0.0));
    }

    #[test]
    fn initial_point_meets_budget_and_is_seeded() {
        let budget = LinkBudget::from_ma2(100.0, 5.6e-3).unwrap();
        let (v, psi) = initial_point(3, 12, &budget, 4);
        assert!((total_power(&v) - budget.pt()).abs() <= 1e-12 * budget.pt());
        let (v2, psi2) = initial_point(3, 12, &budget, 4);
        assert_eq!(v, v2);
        assert_eq!(psi, psi2);
        let (v3, _) = initial_point(3, 12, &budget, 5);
        assert_ne!(v, v3);
    }

    #[test]
    fn config_validation() {
        let mut c = SolverConfig::new(TruncationOrder::planar(1, 1));
        assert!(c.validate().is_ok());
        c.max_iters = 0;
        assert!(c.validate().is_err());
        let mut c = SolverConfig::new(TruncationOrder::planar(1, 1));
        c.rel_tol = 1.0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn descent_on_random_channels_is_monotone_and_feasible() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let users: Vec<DMatrix<Complex64>> =
            (0..4).map(|_| DMatrix::from_fn(3, 15, |_, _| crand(&mut rng))).collect();
        let ch = LinearChannels::new(users).unwrap();
        let budget = LinkBudget::new(2.0, 0.05).unwrap();
        let config = SolverConfig::new(TruncationOrder::planar(1, 1));
        let mut eval = DirectEvaluator {
            channels: &ch,
            sigma2: budget.sigma2(),
            model: InterferenceModel::Full,
        };
        let out = solve_linear(&ch, &budget, InterferenceModel::Full, &config, &mut eval).unwrap();
        for pair in out.trace.windows(2) {
            assert!(pair[1].surrogate >= pair[0].surrogate - 1e-9);
        }
        assert!(out.trace.iter().all(|t| t.power <= budget.pt() * (1.0 + 1e-8)));
        assert!((out.final_surrogate - out.sum_rate).abs() < 1e-3);
    }
}
