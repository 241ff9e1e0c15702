//! Fourier wavenumber basis on the aperture and the transforms between
//! sampled pattern functions and their projection coefficients.
//!
//! Indices are enumerated lexicographically with `nz` outermost and `nx`
//! innermost. Coefficients follow the orthonormal convention
//! `w_n = ∫ θ(s) Ψ_n*(s) ds`, so that `θ = Σ_n w_n Ψ_n` reproduces the pattern
//! and `Σ_n ‖w_n‖²` equals its transmit power.

use std::f64::consts::PI;

use nalgebra::Vector3;
use num_complex::Complex64;

use crate::em::{Aperture, QuadratureGrid, WaveParams};
use crate::error::{Error, Result};
use crate::{Complex3, ComplexMat3, PatternSet};

/// Number of retained Fourier indices per axis: `|n_x| <= nx`, etc.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
pub struct TruncationOrder {
    pub nx: u32,
    pub ny: u32,
    pub nz: u32,
}

impl TruncationOrder {
    pub const fn new(nx: u32, ny: u32, nz: u32) -> Self {
        Self { nx, ny, nz }
    }

    /// Planar order with `nz = 0`.
    pub const fn planar(nx: u32, ny: u32) -> Self {
        Self { nx, ny, nz: 0 }
    }

    /// Total coefficient count `N_F = (2Nx+1)(2Ny+1)(2Nz+1)`.
    pub fn num_coeffs(&self) -> usize {
        ((2 * self.nx + 1) * (2 * self.ny + 1) * (2 * self.nz + 1)) as usize
    }

    pub fn contains(&self, n: &WavenumberIndex) -> bool {
        n.nx.unsigned_abs() <= self.nx
            && n.ny.unsigned_abs() <= self.ny
            && n.nz.unsigned_abs() <= self.nz
    }

    /// Componentwise `self <= other`.
    pub fn within(&self, other: &TruncationOrder) -> bool {
        self.nx <= other.nx && self.ny <= other.ny && self.nz <= other.nz
    }

    pub fn max(&self, other: &TruncationOrder) -> TruncationOrder {
        TruncationOrder::new(
            self.nx.max(other.nx),
            self.ny.max(other.ny),
            self.nz.max(other.nz),
        )
    }

    pub fn scaled(&self, factor: u32) -> TruncationOrder {
        TruncationOrder::new(self.nx * factor, self.ny * factor, self.nz * factor)
    }

    /// All indices in enumeration order.
    pub fn indices(&self) -> Vec<WavenumberIndex> {
        let (nx, ny, nz) = (self.nx as i32, self.ny as i32, self.nz as i32);
        let mut out = Vec::with_capacity(self.num_coeffs());
        for kz in -nz..=nz {
            for ky in -ny..=ny {
                for kx in -nx..=nx {
                    out.push(WavenumberIndex::new(kx, ky, kz));
                }
            }
        }
        out
    }

    /// Position of `n` in [`indices`](Self::indices), if retained.
    pub fn position(&self, n: &WavenumberIndex) -> Option<usize> {
        if !self.contains(n) {
            return None;
        }
        let wx = (2 * self.nx + 1) as usize;
        let wy = (2 * self.ny + 1) as usize;
        let ix = (n.nx + self.nx as i32) as usize;
        let iy = (n.ny + self.ny as i32) as usize;
        let iz = (n.nz + self.nz as i32) as usize;
        Some((iz * wy + iy) * wx + ix)
    }
}

impl std::fmt::Display for TruncationOrder {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "({}, {}, {})", self.nx, self.ny, self.nz)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct WavenumberIndex {
    pub nx: i32,
    pub ny: i32,
    pub nz: i32,
}

impl WavenumberIndex {
    pub const fn new(nx: i32, ny: i32, nz: i32) -> Self {
        Self { nx, ny, nz }
    }

    pub const DC: WavenumberIndex = WavenumberIndex::new(0, 0, 0);
}

/// Per-user projection coefficients `w_{k,n}`, `K x N_F` three-vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct CoeffSet {
    pub order: TruncationOrder,
    pub users: Vec<Vec<Complex3>>,
}

impl CoeffSet {
    pub fn zeros(order: TruncationOrder, num_users: usize) -> Self {
        Self {
            order,
            users: vec![vec![Complex3::zeros(); order.num_coeffs()]; num_users],
        }
    }

    pub fn num_users(&self) -> usize {
        self.users.len()
    }

    /// `Σ_{k,n} ‖w_{k,n}‖²`.
    pub fn wavenumber_power(&self) -> f64 {
        self.users
            .iter()
            .flatten()
            .map(|w| w.norm_squared())
            .sum()
    }
}

/// Per-user channel spectrum `Ω_{k,n}`, `K x N_F` 3x3 matrices.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelSpectrum {
    pub order: TruncationOrder,
    pub users: Vec<Vec<ComplexMat3>>,
}

impl ChannelSpectrum {
    pub fn num_users(&self) -> usize {
        self.users.len()
    }

    /// Keeps only the indices inside `order`.
    pub fn restrict(&self, order: &TruncationOrder) -> Result<ChannelSpectrum> {
        if !order.within(&self.order) {
            return Err(Error::Config(format!(
                "cannot restrict spectrum of order {} to larger order {order}",
                self.order
            )));
        }
        let idx = order.indices();
        let users = self
            .users
            .iter()
            .map(|omega| {
                idx.iter()
                    .map(|n| omega[self.order.position(n).expect("index within order")])
                    .collect()
            })
            .collect();
        Ok(ChannelSpectrum { order: *order, users })
    }

    /// `Σ_n ‖Ω_{k,n}‖_F²` for user `k`.
    pub fn energy(&self, k: usize) -> f64 {
        self.users[k].iter().map(|m| m.norm_squared()).sum()
    }
}

/// Orthonormal Fourier basis function `Ψ_n(s)` on the aperture.
///
/// Coordinates are taken relative to the aperture centre; the z factor is
/// identically one for planar apertures.
pub fn basis_eval(n: &WavenumberIndex, s: &Vector3<f64>, aperture: &Aperture) -> Complex64 {
    let u = aperture.local(s);
    let mut arg = n.nx as f64 * (u.x - 0.5 * aperture.lx()) / aperture.lx()
        + n.ny as f64 * (u.y - 0.5 * aperture.ly()) / aperture.ly();
    if aperture.lz() > 0.0 {
        arg += n.nz as f64 * (u.z - 0.5 * aperture.lz()) / aperture.lz();
    }
    Complex64::from_polar(1.0 / aperture.area().sqrt(), 2.0 * PI * arg)
}

/// Relative slack applied before rounding `κ0 L / 2π` up, so an aperture a
/// hair longer than an integer number of wavelengths does not pull in a whole
/// extra ring of harmonics (0.5 m at 2.4 GHz is 4.003 wavelengths).
pub const ORDER_CEIL_SLACK: f64 = 1e-3;

/// Truncation order covering `|κ| <= κ0` on each axis.
pub fn truncation_order(aperture: &Aperture, wave: &WaveParams) -> TruncationOrder {
    let per_axis = |len: f64| -> u32 {
        if len > 0.0 {
            (wave.kappa0() * len / (2.0 * PI) * (1.0 - ORDER_CEIL_SLACK)).ceil() as u32
        } else {
            0
        }
    };
    TruncationOrder::new(
        per_axis(aperture.lx()),
        per_axis(aperture.ly()),
        per_axis(aperture.lz()),
    )
}

/// `Ψ_n(s_i)` tabulated for every retained index and grid sample.
#[derive(Debug, Clone)]
pub struct BasisTable {
    order: TruncationOrder,
    /// `values[n][i]`
    values: Vec<Vec<Complex64>>,
}

impl BasisTable {
    pub fn new(order: TruncationOrder, grid: &QuadratureGrid, aperture: &Aperture) -> Self {
        let values = order
            .indices()
            .iter()
            .map(|n| grid.points().iter().map(|s| basis_eval(n, s, aperture)).collect())
            .collect();
        Self { order, values }
    }

    pub fn order(&self) -> TruncationOrder {
        self.order
    }

    pub fn row(&self, n: usize) -> &[Complex64] {
        &self.values[n]
    }
}

fn check_samples<T>(samples: &[Vec<T>], grid: &QuadratureGrid) -> Result<()> {
    for s in samples {
        if s.len() != grid.len() {
            return Err(Error::LengthMismatch {
                expected: grid.len(),
                got: s.len(),
            });
        }
    }
    Ok(())
}

/// `Ω_{k,n} = ∫ G_k(s) Ψ_n(s) ds` for every user and retained index.
pub fn channel_spectrum(
    channels: &[Vec<ComplexMat3>],
    grid: &QuadratureGrid,
    order: TruncationOrder,
    aperture: &Aperture,
) -> Result<ChannelSpectrum> {
    let table = BasisTable::new(order, grid, aperture);
    channel_spectrum_with(channels, grid, &table)
}

pub fn channel_spectrum_with(
    channels: &[Vec<ComplexMat3>],
    grid: &QuadratureGrid,
    table: &BasisTable,
) -> Result<ChannelSpectrum> {
    check_samples(channels, grid)?;
    let nf = table.order.num_coeffs();
    let users = channels
        .iter()
        .map(|g| {
            (0..nf)
                .map(|n| {
                    let psi = table.row(n);
                    let mut acc = ComplexMat3::zeros();
                    for ((w, gi), p) in grid.weights().iter().zip(g).zip(psi) {
                        acc += gi * (p * *w);
                    }
                    acc
                })
                .collect()
        })
        .collect();
    Ok(ChannelSpectrum {
        order: table.order,
        users,
    })
}

/// `w_{k,n} = ∫ θ_k(s) Ψ_n*(s) ds`.
pub fn pattern_coeffs(
    patterns: &PatternSet,
    grid: &QuadratureGrid,
    order: TruncationOrder,
    aperture: &Aperture,
) -> Result<CoeffSet> {
    let table = BasisTable::new(order, grid, aperture);
    pattern_coeffs_with(patterns, grid, &table)
}

pub fn pattern_coeffs_with(
    patterns: &PatternSet,
    grid: &QuadratureGrid,
    table: &BasisTable,
) -> Result<CoeffSet> {
    check_samples(patterns, grid)?;
    let nf = table.order.num_coeffs();
    let users = patterns
        .iter()
        .map(|theta| {
            (0..nf)
                .map(|n| {
                    let psi = table.row(n);
                    let mut acc = Complex3::zeros();
                    for ((w, t), p) in grid.weights().iter().zip(theta).zip(psi) {
                        acc += t * (p.conj() * *w);
                    }
                    acc
                })
                .collect()
        })
        .collect();
    Ok(CoeffSet {
        order: table.order,
        users,
    })
}

/// `θ_k(s_i) = Σ_n w_{k,n} Ψ_n(s_i)` at every grid sample.
pub fn synthesize_pattern(
    coeffs: &CoeffSet,
    grid: &QuadratureGrid,
    aperture: &Aperture,
) -> Result<PatternSet> {
    let table = BasisTable::new(coeffs.order, grid, aperture);
    synthesize_pattern_with(coeffs, grid, &table)
}

pub fn synthesize_pattern_with(
    coeffs: &CoeffSet,
    grid: &QuadratureGrid,
    table: &BasisTable,
) -> Result<PatternSet> {
    if coeffs.order != table.order {
        return Err(Error::Config(format!(
            "coefficient order {} does not match basis order {}",
            coeffs.order, table.order
        )));
    }
    let nf = coeffs.order.num_coeffs();
    let mut out = Vec::with_capacity(coeffs.num_users());
    for w in &coeffs.users {
        if w.len() != nf {
            return Err(Error::LengthMismatch {
                expected: nf,
                got: w.len(),
            });
        }
        let mut theta = vec![Complex3::zeros(); grid.len()];
        for (n, wn) in w.iter().enumerate() {
            if wn.iter().all(|z| *z == Complex64::new(0.0, 0.0)) {
                continue;
            }
            for (t, p) in theta.iter_mut().zip(table.row(n)) {
                *t += wn * *p;
            }
        }
        out.push(theta);
    }
    Ok(out)
}

/// Fraction of user `k`'s spectral energy retained by `order`, relative to
/// the energy inside the reference order of `spectrum`.
pub fn energy_ratio_eta_for(
    spectrum: &ChannelSpectrum,
    order: &TruncationOrder,
    k: usize,
) -> Result<f64> {
    if !order.within(&spectrum.order) {
        return Err(Error::Config(format!(
            "truncation order {order} exceeds reference order {}",
            spectrum.order
        )));
    }
    let omega = &spectrum.users[k];
    let mut total = 0.0;
    let mut kept = 0.0;
    for (n, m) in spectrum.order.indices().iter().zip(omega) {
        let e = m.norm_squared();
        total += e;
        if order.contains(n) {
            kept += e;
        }
    }
    if !(total > 0.0) {
        return Err(Error::DegenerateChannel(
            "channel spectrum carries no energy".into(),
        ));
    }
    Ok((kept / total).clamp(0.0, 1.0))
}

/// Energy ratio `η` of the first (single) user.
pub fn energy_ratio_eta(spectrum: &ChannelSpectrum, order: &TruncationOrder) -> Result<f64> {
    if spectrum.num_users() == 0 {
        return Err(Error::DegenerateChannel("spectrum has no users".into()));
    }
    energy_ratio_eta_for(spectrum, order, 0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::em::build_grid;

    fn aperture() -> Aperture {
        Aperture::new(0.5, 0.5, Vector3::zeros()).unwrap()
    }

    #[test]
    fn suggested_order_at_2p4_ghz() {
        let wave = WaveParams::free_space(2.4e9).unwrap();
        let order = truncation_order(&aperture(), &wave);
        assert_eq!(order, TruncationOrder::new(4, 4, 0));
        assert_eq!(order.num_coeffs(), 81);
        let tiny = Aperture::new(1e-6, 1e-6, Vector3::zeros()).unwrap();
        assert_eq!(truncation_order(&tiny, &wave), TruncationOrder::new(1, 1, 0));
        let wide = Aperture::new(0.55, 0.5, Vector3::zeros()).unwrap();
        assert_eq!(truncation_order(&wide, &wave), TruncationOrder::new(5, 4, 0));
    }

    #[test]
    fn enumeration_order_and_positions() {
        let order = TruncationOrder::new(2, 1, 1);
        let idx = order.indices();
        assert_eq!(idx.len(), order.num_coeffs());
        assert_eq!(idx[0], WavenumberIndex::new(-2, -1, -1));
        assert_eq!(idx[1], WavenumberIndex::new(-1, -1, -1));
        assert_eq!(idx[5], WavenumberIndex::new(-2, 0, -1));
        for (p, n) in idx.iter().enumerate() {
            assert_eq!(order.position(n), Some(p));
        }
        assert_eq!(order.position(&WavenumberIndex::new(3, 0, 0)), None);
    }

    #[test]
    fn basis_is_unimodular_and_dc_is_flat() {
        let ap = aperture();
        let s = Vector3::new(0.1, -0.2, 0.0);
        let inv = 1.0 / ap.area().sqrt();
        assert!((basis_eval(&WavenumberIndex::DC, &s, &ap) - Complex64::from(inv)).norm() < 1e-15);
        for n in TruncationOrder::planar(3, 3).indices() {
            assert!((basis_eval(&n, &s, &ap).norm() - inv).abs() < 1e-14);
        }
    }

    #[test]
    fn constant_channel_has_only_dc_content() {
        let ap = aperture();
        let grid = build_grid(&ap, 16, 16).unwrap();
        let c = ComplexMat3::from_fn(|i, j| Complex64::new(1.0 + i as f64, j as f64));
        let spec = channel_spectrum(&[vec![c; grid.len()]], &grid, TruncationOrder::planar(3, 3), &ap).unwrap();
        let dc = spec.order.position(&WavenumberIndex::DC).unwrap();
        for (p, m) in spec.users[0].iter().enumerate() {
            if p == dc {
                assert!((m - c * Complex64::from(0.5)).norm() < 1e-12);
            } else {
                assert!(m.norm() < 1e-10);
            }
        }
    }

    #[test]
    fn basis_pattern_projects_to_itself() {
        let ap = aperture();
        let grid = build_grid(&ap, 24, 24).unwrap();
        let order = TruncationOrder::planar(3, 3);
        let m = WavenumberIndex::new(2, -1, 0);
        let v = Complex3::new(Complex64::new(1.0, -0.5), 0.25.into(), Complex64::new(0.0, 2.0));
        let theta: Vec<Complex3> = grid.points().iter().map(|s| v * basis_eval(&m, s, &ap)).collect();
        let w = pattern_coeffs(&vec![theta], &grid, order, &ap).unwrap();
        let pm = order.position(&m).unwrap();
        for (p, wn) in w.users[0].iter().enumerate() {
            let expect = if p == pm { v } else { Complex3::zeros() };
            assert!((wn - expect).norm() < 1e-12);
        }
        let zero = pattern_coeffs(&vec![vec![Complex3::zeros(); grid.len()]], &grid, order, &ap).unwrap();
        assert_eq!(zero.wavenumber_power(), 0.0);
    }

    #[test]
    fn synthesis_of_dc_and_zero() {
        let ap = aperture();
        let grid = build_grid(&ap, 8, 8).unwrap();
        let order = TruncationOrder::planar(2, 2);
        let mut w = CoeffSet::zeros(order, 2);
        let v = Complex3::new(1.0.into(), Complex64::new(0.0, 1.0), (-2.0).into());
        w.users[0][order.position(&WavenumberIndex::DC).unwrap()] = v;
        let theta = synthesize_pattern(&w, &grid, &ap).unwrap();
        let expect = v / Complex64::from(ap.area().sqrt());
        assert!(theta[0].iter().all(|t| (t - expect).norm() < 1e-14));
        assert!(theta[1].iter().all(|t| t.norm() == 0.0));
    }

    #[test]
    fn eta_edge_cases() {
        let ap = aperture();
        let grid = build_grid(&ap, 16, 16).unwrap();
        let reference = TruncationOrder::planar(3, 3);
        let c = ComplexMat3::identity();
        let spec = channel_spectrum(&[vec![c; grid.len()]], &grid, reference, &ap).unwrap();
        assert!((energy_ratio_eta(&spec, &reference).unwrap() - 1.0).abs() < 1e-15);
        assert!((energy_ratio_eta(&spec, &TruncationOrder::planar(0, 0)).unwrap() - 1.0).abs() < 1e-12);
        assert!(energy_ratio_eta(&spec, &TruncationOrder::planar(4, 0)).is_err());
        let zero = channel_spectrum(&[vec![ComplexMat3::zeros(); grid.len()]], &grid, reference, &ap).unwrap();
        assert!(matches!(
            energy_ratio_eta(&zero, &reference),
            Err(Error::DegenerateChannel(_))
        ));
    }

    #[test]
    fn restrict_keeps_matching_entries() {
        let ap = aperture();
        let grid = build_grid(&ap, 12, 12).unwrap();
        let wave = WaveParams::free_space(2.4e9).unwrap();
        let g = crate::em::channel_samples(&Vector3::new(1.0, 2.0, 5.0), &grid, &wave).unwrap();
        let big = channel_spectrum(&[g.clone()], &grid, TruncationOrder::planar(3, 3), &ap).unwrap();
        let small = channel_spectrum(&[g], &grid, TruncationOrder::planar(1, 2), &ap).unwrap();
        let restricted = big.restrict(&TruncationOrder::planar(1, 2)).unwrap();
        for (a, b) in restricted.users[0].iter().zip(&small.users[0]) {
            assert!((a - b).norm() <= 1e-14 * a.norm().max(1.0));
        }
    }
}
