//! Comparison schemes: match filtering, a fully-digital patch array on the
//! same aperture, and the interference-free upper bound.

use nalgebra::{DVector, Vector3};
use num_complex::Complex64;

use crate::em::{build_grid, Aperture, QuadratureGrid, WaveParams};
use crate::error::{Error, Result};
use crate::metrics::LinkBudget;
use crate::solver::{
    run_pdm_with_model, solve_linear, total_power, BcdOutcome, DirectEvaluator,
    InterferenceModel, LinearChannels, PdmProblem, SolveResult, SolverConfig,
};
use crate::wavenumber::TruncationOrder;
use crate::{Combiners, Complex3, ComplexMat3, PatternSet};

/// Fewest grid samples a patch disc may capture before the grid is refined.
pub const MIN_PATCH_POINTS: usize = 9;

/// Smallest truncation order used by the interference-free bound.
pub const UPPER_BOUND_ORDER: TruncationOrder = TruncationOrder::planar(7, 7);

/// Match-filtering patterns `θ_k = √p G_k^H ψ` with the fixed combiner
/// `ψ = (0, 1, 0)` and one common scale `p` that spends the whole budget.
pub fn mf_design(
    channels: &[Vec<ComplexMat3>],
    grid: &QuadratureGrid,
    budget: &LinkBudget,
) -> Result<(PatternSet, Combiners)> {
    let psi = Complex3::new(0.0.into(), 1.0.into(), 0.0.into());
    let mut patterns: PatternSet = channels
        .iter()
        .map(|g| g.iter().map(|gi| gi.adjoint() * psi).collect())
        .collect();
    let raw = crate::metrics::transmit_power(&patterns, grid)?;
    if !(raw > 0.0) {
        return Err(Error::DegenerateChannel(
            "match filtering needs at least one nonzero channel".into(),
        ));
    }
    let scale = Complex64::from((budget.pt() / raw).sqrt());
    for theta in &mut patterns {
        for t in theta.iter_mut() {
            *t *= scale;
        }
    }
    Ok((patterns, vec![psi; channels.len()]))
}

/// Half-wavelength lattice of disc-shaped patches over the aperture.
#[derive(Debug, Clone)]
pub struct PatchLayout {
    pub mx: usize,
    pub my: usize,
    pub centers: Vec<Vector3<f64>>,
    /// Nominal effective area `λ²/4π` of every patch, m².
    pub area: f64,
    pub radius: f64,
}

impl PatchLayout {
    pub fn new(aperture: &Aperture, wave: &WaveParams) -> Self {
        let lambda = wave.wavelength();
        let mx = (2.0 * aperture.lx() / lambda).ceil() as usize;
        let my = (2.0 * aperture.ly() / lambda).ceil() as usize;
        let c = aperture.center();
        let centers = (0..mx * my)
            .map(|m| {
                Vector3::new(
                    c.x + (m % mx) as f64 * lambda / 2.0 - aperture.lx() / 2.0,
                    c.y + (m / mx) as f64 * lambda / 2.0 - aperture.ly() / 2.0,
                    c.z,
                )
            })
            .collect();
        let area = lambda * lambda / (4.0 * std::f64::consts::PI);
        Self {
            mx,
            my,
            centers,
            area,
            radius: (area / std::f64::consts::PI).sqrt(),
        }
    }

    pub fn len(&self) -> usize {
        self.centers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.centers.is_empty()
    }

    /// Grid samples inside patch `m`.
    pub fn members(&self, m: usize, grid: &QuadratureGrid) -> Vec<usize> {
        let r2 = self.radius * self.radius;
        let c = self.centers[m];
        grid.points()
            .iter()
            .enumerate()
            .filter(|(_, p)| (p.x - c.x).powi(2) + (p.y - c.y).powi(2) <= r2)
            .map(|(i, _)| i)
            .collect()
    }

    /// The patch capturing the fewest grid samples and its sample count.
    pub fn worst_patch(&self, grid: &QuadratureGrid) -> (usize, usize) {
        (0..self.len())
            .map(|m| (m, self.members(m, grid).len()))
            .min_by_key(|&(_, n)| n)
            .unwrap_or((0, 0))
    }

    /// Fewest grid samples captured by any patch.
    pub fn min_points(&self, grid: &QuadratureGrid) -> usize {
        self.worst_patch(grid).1
    }

    /// Doubles the grid resolution from `nx x ny` until every patch captures
    /// at least [`MIN_PATCH_POINTS`] samples.
    pub fn resolving_grid(&self, aperture: &Aperture, nx: usize, ny: usize) -> Result<QuadratureGrid> {
        let (mut nx, mut ny) = (nx.max(1), ny.max(1));
        let mut worst = (0, 0);
        for _ in 0..8 {
            let grid = build_grid(aperture, nx, ny)?;
            worst = self.worst_patch(&grid);
            if worst.1 >= MIN_PATCH_POINTS {
                return Ok(grid);
            }
            nx *= 2;
            ny *= 2;
        }
        Err(Error::Resolution {
            patch: worst.0,
            points: worst.1,
        })
    }
}

/// Per-user, per-patch channel blocks `H_{k,m}`.
#[derive(Debug, Clone)]
pub struct PatchChannels {
    /// Indexed `[k][m]`.
    pub blocks: Vec<Vec<ComplexMat3>>,
    /// Aperture area actually covered by each patch (its captured quadrature weight).
    pub areas: Vec<f64>,
}

/// `H_{k,m} = (1/√A_m) ∫_{S_m} G_k(s) ds`, with each disc clipped to the
/// aperture and `A_m` the clipped area.
pub fn patch_channels(
    channels: &[Vec<ComplexMat3>],
    layout: &PatchLayout,
    grid: &QuadratureGrid,
) -> Result<PatchChannels> {
    let members: Vec<Vec<usize>> = (0..layout.len()).map(|m| layout.members(m, grid)).collect();
    if let Some((patch, idx)) = members.iter().enumerate().find(|(_, idx)| idx.is_empty()) {
        return Err(Error::Resolution {
            patch,
            points: idx.len(),
        });
    }
    let areas: Vec<f64> = members
        .iter()
        .map(|idx| idx.iter().map(|&i| grid.weights()[i]).sum())
        .collect();
    let mut blocks = Vec::with_capacity(channels.len());
    for g in channels {
        if g.len() != grid.len() {
            return Err(Error::LengthMismatch {
                expected: grid.len(),
                got: g.len(),
            });
        }
        let row = members
            .iter()
            .zip(&areas)
            .map(|(idx, a)| {
                let mut acc = ComplexMat3::zeros();
                for &i in idx {
                    acc += g[i] * Complex64::from(grid.weights()[i]);
                }
                acc / Complex64::from(a.sqrt())
            })
            .collect();
        blocks.push(row);
    }
    Ok(PatchChannels { blocks, areas })
}

#[derive(Debug, Clone)]
pub struct DigitalSolution {
    /// Stacked per-patch excitations of every user.
    pub precoders: Vec<DVector<Complex64>>,
    pub sum_rate: f64,
    pub power: f64,
    pub outcome: BcdOutcome,
}

/// Sum-rate maximization over patch excitations by the same weighted-MMSE
/// descent used for continuous patterns.
pub fn solve_digital_mimo(
    channels: &PatchChannels,
    budget: &LinkBudget,
    config: &SolverConfig,
) -> Result<DigitalSolution> {
    let linear = LinearChannels::from_blocks(&channels.blocks)?;
    let mut eval = DirectEvaluator {
        channels: &linear,
        sigma2: budget.sigma2(),
        model: InterferenceModel::Full,
    };
    let outcome = solve_linear(&linear, budget, InterferenceModel::Full, config, &mut eval)?;
    Ok(DigitalSolution {
        precoders: outcome.precoders.clone(),
        sum_rate: outcome.sum_rate,
        power: total_power(&outcome.precoders),
        outcome,
    })
}

/// Truncation order used for the bound: at least [`UPPER_BOUND_ORDER`] and
/// never below the order of the design it bounds.
pub fn upper_bound_order(order: &TruncationOrder) -> TruncationOrder {
    UPPER_BOUND_ORDER.max(order)
}

/// Sum-rate reachable if every receiver were free of interference.
pub fn interference_free_bound(problem: &PdmProblem, config: &SolverConfig) -> Result<SolveResult> {
    let mut cfg = *config;
    cfg.order = upper_bound_order(&config.order);
    run_pdm_with_model(problem, &cfg, InterferenceModel::Ignored)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::em::channel_samples;
    use crate::metrics::{sum_rate, transmit_power};

    fn setup(n: usize) -> (Aperture, QuadratureGrid, WaveParams) {
        let ap = Aperture::new(0.5, 0.5, Vector3::zeros()).unwrap();
        (ap, build_grid(&ap, n, n).unwrap(), WaveParams::free_space(2.4e9).unwrap())
    }

    #[test]
    fn layout_count_and_centres() {
        let (ap, _, wave) = setup(4);
        let layout = PatchLayout::new(&ap, &wave);
        // 2 L / λ = 8.006 at 2.4 GHz
        assert_eq!((layout.mx, layout.my, layout.len()), (9, 9, 81));
        assert!((layout.centers[0] - Vector3::new(-0.25, -0.25, 0.0)).norm() < 1e-15);
        let l = wave.wavelength();
        assert!((layout.centers[10] - Vector3::new(l / 2.0 - 0.25, l / 2.0 - 0.25, 0.0)).norm() < 1e-15);
        assert!((layout.area - l * l / (4.0 * std::f64::consts::PI)).abs() < 1e-18);
    }

    #[test]
    fn refinement_reaches_minimum_capture() {
        let (ap, grid, wave) = setup(32);
        let layout = PatchLayout::new(&ap, &wave);
        assert!(layout.min_points(&grid) < MIN_PATCH_POINTS);
        let fine = layout.resolving_grid(&ap, 32, 32).unwrap();
        assert!(layout.min_points(&fine) >= MIN_PATCH_POINTS);
        assert_eq!(fine.nx() % 32, 0);
    }

    #[test]
    fn constant_channel_patches() {
        let (ap, _, wave) = setup(4);
        let layout = PatchLayout::new(&ap, &wave);
        let grid = layout.resolving_grid(&ap, 32, 32).unwrap();
        let c = ComplexMat3::from_fn(|i, j| Complex64::new(i as f64 + 1.0, j as f64));
        let pc = patch_channels(&[vec![c; grid.len()]], &layout, &grid).unwrap();
        for (h, a) in pc.blocks[0].iter().zip(&pc.areas) {
            assert!((h - c * Complex64::from(a.sqrt())).norm() < 1e-12);
            assert!(*a <= layout.area * 1.2);
        }
    }

    #[test]
    fn patch_energy_is_a_subset_of_the_aperture() {
        let (ap, _, wave) = setup(4);
        let layout = PatchLayout::new(&ap, &wave);
        let grid = layout.resolving_grid(&ap, 32, 32).unwrap();
        let g = channel_samples(&Vector3::new(1.0, -1.0, 5.0), &grid, &wave).unwrap();
        let pc = patch_channels(&[g.clone()], &layout, &grid).unwrap();
        let patches: f64 = pc.blocks[0].iter().map(|h| h.norm_squared()).sum();
        let total: f64 = g.iter().map(|x| x.norm_squared()).sum::<f64>() * grid.weights()[0];
        assert!(patches <= total);
    }

    #[test]
    fn coarse_grid_is_a_resolution_error() {
        let (ap, grid, wave) = setup(2);
        let layout = PatchLayout::new(&ap, &wave);
        let g = vec![ComplexMat3::identity(); grid.len()];
        assert!(matches!(
            patch_channels(&[g], &layout, &grid),
            Err(Error::Resolution { .. })
        ));
    }

    #[test]
    fn mf_spends_exact_budget() {
        let (_, grid, wave) = setup(16);
        let users = [Vector3::new(1.0, 1.0, 30.0), Vector3::new(-5.0, 5.0, 30.0)];
        let ch: Vec<_> = users.iter().map(|u| channel_samples(u, &grid, &wave).unwrap()).collect();
        let b = LinkBudget::from_ma2(100.0, 5.6e-3).unwrap();
        let (theta, psi) = mf_design(&ch, &grid, &b).unwrap();
        assert!((transmit_power(&theta, &grid).unwrap() - b.pt()).abs() <= 1e-10 * b.pt());
        assert!(psi.iter().all(|p| p[1] == Complex64::from(1.0)));
        assert!(sum_rate(&theta, &ch, &grid, &b).unwrap() > 0.0);
        let zero = vec![vec![ComplexMat3::zeros(); grid.len()]];
        assert!(matches!(mf_design(&zero, &grid, &b), Err(Error::DegenerateChannel(_))));
    }

    #[test]
    fn bound_order_rule() {
        assert_eq!(upper_bound_order(&TruncationOrder::planar(4, 4)), TruncationOrder::planar(7, 7));
        assert_eq!(upper_bound_order(&TruncationOrder::planar(9, 3)), TruncationOrder::planar(9, 7));
    }
}
