//! Physical constants, aperture sampling and the free-space dyadic Green kernel.
//!
//! Every field quantity in the crate is produced by integrating a kernel
//! `G(r, s)` against a current pattern over the transmit aperture. The
//! aperture integral is replaced by a [`QuadratureGrid`], a set of sample
//! points with weights that sum to the aperture area.

use std::f64::consts::PI;

use nalgebra::{Matrix3, Vector3};
use num_complex::Complex64;

use crate::error::{Error, Result};
use crate::{Complex3, ComplexMat3};

/// Speed of light in vacuum, m/s.
pub const SPEED_OF_LIGHT: f64 = 299_792_458.0;

/// Intrinsic impedance of free space used throughout the experiments, ohm.
pub const FREE_SPACE_IMPEDANCE: f64 = 376.73;

/// Kernel evaluations closer than this are rejected rather than regularized.
pub const SINGULARITY_GUARD: f64 = 1e-9;

/// Carrier frequency and the medium constants derived from it.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WaveParams {
    freq_hz: f64,
    speed: f64,
    kappa0: f64,
    z0: f64,
}

impl WaveParams {
    pub fn new(freq_hz: f64, speed: f64, z0: f64) -> Result<Self> {
        if !(freq_hz > 0.0 && freq_hz.is_finite()) {
            return Err(Error::Config(format!("frequency must be positive, got {freq_hz}")));
        }
        if !(speed > 0.0 && speed.is_finite()) {
            return Err(Error::Config(format!("propagation speed must be positive, got {speed}")));
        }
        if !(z0 > 0.0 && z0.is_finite()) {
            return Err(Error::Config(format!("intrinsic impedance must be positive, got {z0}")));
        }
        Ok(Self {
            freq_hz,
            speed,
            kappa0: 2.0 * PI * freq_hz / speed,
            z0,
        })
    }

    /// Free-space medium at `freq_hz`.
    pub fn free_space(freq_hz: f64) -> Result<Self> {
        Self::new(freq_hz, SPEED_OF_LIGHT, FREE_SPACE_IMPEDANCE)
    }

    pub fn freq_hz(&self) -> f64 {
        self.freq_hz
    }

    pub fn speed(&self) -> f64 {
        self.speed
    }

    /// Spatial wavenumber in rad/m.
    pub fn kappa0(&self) -> f64 {
        self.kappa0
    }

    pub fn z0(&self) -> f64 {
        self.z0
    }

    pub fn wavelength(&self) -> f64 {
        self.speed / self.freq_hz
    }

    /// `j κ0 Z0 / 4π`, the constant in front of every Green kernel.
    fn kernel_scale(&self) -> Complex64 {
        Complex64::new(0.0, self.kappa0 * self.z0 / (4.0 * PI))
    }
}

/// Rectangular planar aperture with its normal along +z.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Aperture {
    lx: f64,
    ly: f64,
    center: Vector3<f64>,
}

impl Aperture {
    pub fn new(lx: f64, ly: f64, center: Vector3<f64>) -> Result<Self> {
        if !(lx > 0.0 && ly > 0.0 && lx.is_finite() && ly.is_finite()) {
            return Err(Error::Config(format!(
                "aperture side lengths must be positive, got {lx} x {ly}"
            )));
        }
        Ok(Self { lx, ly, center })
    }

    /// Square aperture of the given area centred at the origin.
    pub fn square(area: f64) -> Result<Self> {
        if !(area > 0.0) {
            return Err(Error::Config(format!("aperture area must be positive, got {area}")));
        }
        let side = area.sqrt();
        Self::new(side, side, Vector3::zeros())
    }

    pub fn lx(&self) -> f64 {
        self.lx
    }

    pub fn ly(&self) -> f64 {
        self.ly
    }

    /// Planar apertures have no extent along z.
    pub fn lz(&self) -> f64 {
        0.0
    }

    pub fn center(&self) -> Vector3<f64> {
        self.center
    }

    pub fn area(&self) -> f64 {
        self.lx * self.ly
    }

    /// Offset of `s` from the aperture centre.
    pub fn local(&self, s: &Vector3<f64>) -> Vector3<f64> {
        s - self.center
    }

    /// True when the point lies in the aperture plane inside its footprint.
    pub fn covers(&self, p: &Vector3<f64>) -> bool {
        let d = self.local(p);
        d.z.abs() <= SINGULARITY_GUARD
            && d.x.abs() <= 0.5 * self.lx + SINGULARITY_GUARD
            && d.y.abs() <= 0.5 * self.ly + SINGULARITY_GUARD
    }
}

/// Sample points and weights standing in for the aperture integral.
#[derive(Debug, Clone, PartialEq)]
pub struct QuadratureGrid {
    points: Vec<Vector3<f64>>,
    weights: Vec<f64>,
    nx: usize,
    ny: usize,
}

impl QuadratureGrid {
    pub fn points(&self) -> &[Vector3<f64>] {
        &self.points
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// Number of samples `I_s`.
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn nx(&self) -> usize {
        self.nx
    }

    pub fn ny(&self) -> usize {
        self.ny
    }

    pub fn total_weight(&self) -> f64 {
        self.weights.iter().sum()
    }

    fn check_len(&self, got: usize) -> Result<()> {
        if got != self.len() {
            return Err(Error::LengthMismatch {
                expected: self.len(),
                got,
            });
        }
        Ok(())
    }
}

/// Uniform midpoint rule on an `nx x ny` lattice. Samples are stored row-major
/// (y outer, x inner) and every cell carries the weight `A_T / (nx ny)`.
pub fn build_grid(aperture: &Aperture, nx: usize, ny: usize) -> Result<QuadratureGrid> {
    if nx == 0 || ny == 0 {
        return Err(Error::Config(format!("grid needs at least one cell per axis, got {nx} x {ny}")));
    }
    let count = nx * ny;
    let weight = aperture.area() / count as f64;
    let c = aperture.center();
    let mut points = Vec::with_capacity(count);
    for iy in 0..ny {
        let y = c.y - 0.5 * aperture.ly() + (iy as f64 + 0.5) * aperture.ly() / ny as f64;
        for ix in 0..nx {
            let x = c.x - 0.5 * aperture.lx() + (ix as f64 + 0.5) * aperture.lx() / nx as f64;
            points.push(Vector3::new(x, y, c.z));
        }
    }
    Ok(QuadratureGrid {
        points,
        weights: vec![weight; count],
        nx,
        ny,
    })
}

/// Values that can be accumulated by a weighted quadrature sum.
pub trait Integrand: Copy {
    fn zero() -> Self;
    fn add_scaled(&mut self, weight: f64, value: &Self);
}

impl Integrand for f64 {
    fn zero() -> Self {
        0.0
    }
    fn add_scaled(&mut self, weight: f64, value: &Self) {
        *self += weight * value;
    }
}

impl Integrand for Complex64 {
    fn zero() -> Self {
        Complex64::new(0.0, 0.0)
    }
    fn add_scaled(&mut self, weight: f64, value: &Self) {
        *self += value * weight;
    }
}

impl Integrand for Complex3 {
    fn zero() -> Self {
        Complex3::zeros()
    }
    fn add_scaled(&mut self, weight: f64, value: &Self) {
        for (a, v) in self.iter_mut().zip(value.iter()) {
            *a += v * weight;
        }
    }
}

impl Integrand for ComplexMat3 {
    fn zero() -> Self {
        ComplexMat3::zeros()
    }
    fn add_scaled(&mut self, weight: f64, value: &Self) {
        for (a, v) in self.iter_mut().zip(value.iter()) {
            *a += v * weight;
        }
    }
}

/// `Σ_i weight_i · field_i`, accumulated in grid order.
pub fn integrate<T: Integrand>(field: &[T], grid: &QuadratureGrid) -> Result<T> {
    grid.check_len(field.len())?;
    Ok(integrate_unchecked(field.iter().copied(), grid))
}

/// Quadrature over an iterator of samples; the caller guarantees one value per grid point.
pub(crate) fn integrate_unchecked<T: Integrand>(
    field: impl Iterator<Item = T>,
    grid: &QuadratureGrid,
) -> T {
    let mut acc = T::zero();
    for (w, v) in grid.weights().iter().zip(field) {
        acc.add_scaled(*w, &v);
    }
    acc
}

fn transverse_projector(dir: &Vector3<f64>) -> Matrix3<f64> {
    let norm2 = dir.norm_squared();
    Matrix3::identity() - dir * dir.transpose() / norm2
}

/// Free-space dyadic Green function mapping a current at `s` to the field at `r`.
pub fn green_free_space(r: &Vector3<f64>, s: &Vector3<f64>, wave: &WaveParams) -> Result<ComplexMat3> {
    let d = r - s;
    let dist = d.norm();
    if !(dist >= SINGULARITY_GUARD) {
        return Err(Error::Singularity { distance: dist });
    }
    let scalar = wave.kernel_scale() * Complex64::from_polar(1.0 / dist, wave.kappa0() * dist);
    Ok(transverse_projector(&d).map(|p| scalar * p))
}

/// Plane-wave approximation of [`green_free_space`] for `|r| >> |s|`, with the
/// observation point measured from the coordinate origin.
pub fn green_far_field(r: &Vector3<f64>, s: &Vector3<f64>, wave: &WaveParams) -> Result<ComplexMat3> {
    let dist = r.norm();
    if !(dist >= SINGULARITY_GUARD) {
        return Err(Error::Singularity { distance: dist });
    }
    let dir = r / dist;
    // wave vector κ(φ, ϕ) = κ0 r̂
    let phase = wave.kappa0() * (dist - dir.dot(s));
    let scalar = wave.kernel_scale() * Complex64::from_polar(1.0 / dist, phase);
    Ok(transverse_projector(&dir).map(|p| scalar * p))
}

/// `G(r_k, s_i)` at every grid sample for the user at `user_pos`.
pub fn channel_samples(
    user_pos: &Vector3<f64>,
    grid: &QuadratureGrid,
    wave: &WaveParams,
) -> Result<Vec<ComplexMat3>> {
    grid.points()
        .iter()
        .map(|s| green_free_space(user_pos, s, wave))
        .collect()
}
