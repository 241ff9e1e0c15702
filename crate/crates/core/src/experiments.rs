//! Scenarios, parameter sweeps and machine-readable result files.
//!
//! Every sweep expands into independent tasks (one per point, scheme, order
//! and seed) that run on a bounded thread pool. Rows come back in task order,
//! never completion order, so serial and parallel runs emit the same table.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::str::FromStr;
use std::time::Instant;

use nalgebra::Vector3;
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::baselines::{
    interference_free_bound, mf_design, patch_channels, solve_digital_mimo, upper_bound_order,
    PatchLayout,
};
use crate::em::{build_grid, channel_samples, green_free_space, Aperture, QuadratureGrid, WaveParams};
use crate::error::{Error, Result};
use crate::metrics::{sum_rate, transmit_power, LinkBudget, MA2_TO_A2};
use crate::solver::{run_pdm, PdmProblem, SolverConfig};
use crate::wavenumber::{truncation_order, TruncationOrder};
use crate::{ComplexMat3, PatternSet};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scheme {
    Pdm,
    Mf,
    Digital,
    Upper,
}

impl Scheme {
    pub const ALL: [Scheme; 4] = [Scheme::Pdm, Scheme::Mf, Scheme::Digital, Scheme::Upper];

    pub fn name(&self) -> &'static str {
        match self {
            Scheme::Pdm => "pdm",
            Scheme::Mf => "mf",
            Scheme::Digital => "digital",
            Scheme::Upper => "upper",
        }
    }

    /// Whether the scheme's result depends on the truncation order.
    pub fn uses_order(&self) -> bool {
        matches!(self, Scheme::Pdm | Scheme::Upper)
    }
}

impl std::fmt::Display for Scheme {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Scheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "pdm" => Ok(Scheme::Pdm),
            "mf" => Ok(Scheme::Mf),
            "digital" => Ok(Scheme::Digital),
            "upper" => Ok(Scheme::Upper),
            other => Err(Error::Config(format!(
                "unknown scheme '{other}' (expected pdm, mf, digital or upper)"
            ))),
        }
    }
}

/// Truncation-order selection: adaptive to the aperture, or pinned by `N_F`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NfChoice {
    Auto,
    Fixed(TruncationOrder),
}

impl NfChoice {
    pub fn resolve(&self, aperture: &Aperture, wave: &WaveParams) -> TruncationOrder {
        match self {
            NfChoice::Auto => truncation_order(aperture, wave),
            NfChoice::Fixed(o) => *o,
        }
    }
}

impl FromStr for NfChoice {
    type Err = Error;

    /// `auto`, or a planar coefficient count `(2N+1)²` such as 9, 81 or 225.
    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        if s.eq_ignore_ascii_case("auto") {
            return Ok(NfChoice::Auto);
        }
        let nf: u32 = s
            .parse()
            .map_err(|_| Error::Config(format!("N_F must be 'auto' or an integer, got '{s}'")))?;
        let side = (nf as f64).sqrt().round() as u32;
        if side * side != nf || side.is_multiple_of(2) || side < 3 {
            return Err(Error::Config(format!(
                "N_F = {nf} is not (2N+1)² for a planar order N >= 1"
            )));
        }
        let n = (side - 1) / 2;
        Ok(NfChoice::Fixed(TruncationOrder::planar(n, n)))
    }
}

impl std::fmt::Display for NfChoice {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            NfChoice::Auto => f.write_str("auto"),
            NfChoice::Fixed(o) => write!(f, "{}", o.num_coeffs()),
        }
    }
}

/// Geometry, medium, budget and discretization of one experiment point.
#[derive(Debug, Clone)]
pub struct Scenario {
    pub aperture: Aperture,
    pub users: Vec<Vector3<f64>>,
    pub wave: WaveParams,
    pub budget: LinkBudget,
    pub order: TruncationOrder,
    pub grid_nx: usize,
    pub grid_ny: usize,
}

/// The eight users of the reference deployment, 30 m above the aperture.
pub fn default_users() -> Vec<Vector3<f64>> {
    let mut users = Vec::with_capacity(8);
    for r in [1.0, 5.0] {
        for (sx, sy) in [(1.0, 1.0), (1.0, -1.0), (-1.0, 1.0), (-1.0, -1.0)] {
            users.push(Vector3::new(sx * r, sy * r, 30.0));
        }
    }
    users
}

/// 0.5 m square aperture at 2.4 GHz serving eight users, 100 (mA)² budget.
pub fn default_scenario() -> Scenario {
    let aperture = Aperture::new(0.5, 0.5, Vector3::zeros()).expect("valid aperture");
    let wave = WaveParams::free_space(2.4e9).expect("valid carrier");
    Scenario {
        order: truncation_order(&aperture, &wave),
        aperture,
        users: default_users(),
        wave,
        budget: LinkBudget::from_ma2(100.0, 5.6e-3).expect("valid budget"),
        grid_nx: 32,
        grid_ny: 32,
    }
}

impl Scenario {
    pub fn num_users(&self) -> usize {
        self.users.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.users.is_empty() {
            return Err(Error::Config("scenario needs at least one user".into()));
        }
        for (k, u) in self.users.iter().enumerate() {
            if !u.iter().all(|x| x.is_finite()) {
                return Err(Error::Config(format!("user {k} has a non-finite position")));
            }
            if self.aperture.covers(u) {
                return Err(Error::Config(format!(
                    "user {k} at ({}, {}, {}) lies on the aperture",
                    u.x, u.y, u.z
                )));
            }
        }
        if self.order.nx < 1 || self.order.ny < 1 {
            return Err(Error::Config(format!(
                "truncation order {} must be at least (1, 1, 0)",
                self.order
            )));
        }
        if self.grid_nx == 0 || self.grid_ny == 0 {
            return Err(Error::Config("grid resolution must be positive".into()));
        }
        Ok(())
    }

    /// Quadrature grid for `order`: the configured resolution, raised when
    /// needed so every axis carries more than `2N` samples.
    pub fn grid_for(&self, order: &TruncationOrder) -> Result<QuadratureGrid> {
        let nx = self.grid_nx.max(2 * order.nx as usize + 2);
        let ny = self.grid_ny.max(2 * order.ny as usize + 2);
        build_grid(&self.aperture, nx, ny)
    }

    pub fn channels(&self, grid: &QuadratureGrid) -> Result<Vec<Vec<ComplexMat3>>> {
        self.users
            .iter()
            .map(|u| channel_samples(u, grid, &self.wave))
            .collect()
    }

    pub fn pdm_problem(&self, order: &TruncationOrder) -> Result<PdmProblem> {
        self.validate()?;
        let grid = self.grid_for(order)?;
        Ok(PdmProblem {
            aperture: self.aperture,
            channels: self.channels(&grid)?,
            grid,
            budget: self.budget,
        })
    }

    /// Same scenario on a square aperture of `area`, with the order re-derived
    /// from `nf`.
    pub fn with_area(&self, area: f64, nf: NfChoice) -> Result<Scenario> {
        let side = area.sqrt();
        let aperture = Aperture::new(side, side, self.aperture.center())?;
        Ok(Scenario {
            aperture,
            order: nf.resolve(&aperture, &self.wave),
            ..self.clone()
        })
    }

    pub fn with_power_ma2(&self, pt_ma2: f64) -> Result<Scenario> {
        Ok(Scenario {
            budget: LinkBudget::from_ma2(pt_ma2, self.budget.sigma2())?,
            ..self.clone()
        })
    }

    pub fn with_users(&self, users: Vec<Vector3<f64>>) -> Scenario {
        Scenario {
            users,
            ..self.clone()
        }
    }

    pub fn with_order(&self, order: TruncationOrder) -> Scenario {
        Scenario {
            order,
            ..self.clone()
        }
    }
}

/// Users evenly spaced on a circle of radius `radius` at height `height`,
/// the `k`-th (1-based) at azimuth `2kπ/K`.
pub fn circle_users(k_users: usize, radius: f64, height: f64) -> Vec<Vector3<f64>> {
    (1..=k_users)
        .map(|k| {
            let phi = 2.0 * PI * k as f64 / k_users as f64;
            Vector3::new(radius * phi.cos(), radius * phi.sin(), height)
        })
        .collect()
}

/// Users at radius `radius` with uniform random azimuths and heights uniform
/// in `[h_min, h_max]`.
pub fn random_users(
    k_users: usize,
    radius: f64,
    heights: (f64, f64),
    rng: &mut ChaCha8Rng,
) -> Vec<Vector3<f64>> {
    (0..k_users)
        .map(|_| {
            let phi = rng.random_range(0.0..2.0 * PI);
            let h = rng.random_range(heights.0..=heights.1);
            Vector3::new(radius * phi.cos(), radius * phi.sin(), h)
        })
        .collect()
}

/// Iteration limits and seeds shared by every solve of a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverSettings {
    pub max_iters: usize,
    pub rel_tol: f64,
    pub zeta_tol: f64,
    pub seeds: Vec<u64>,
}

impl Default for SolverSettings {
    fn default() -> Self {
        Self {
            max_iters: 500,
            rel_tol: 1e-5,
            zeta_tol: 1e-12,
            seeds: (1..=5).collect(),
        }
    }
}

impl SolverSettings {
    pub fn config(&self, order: TruncationOrder, seed: u64) -> SolverConfig {
        SolverConfig {
            max_iters: self.max_iters,
            rel_tol: self.rel_tol,
            zeta_tol: self.zeta_tol,
            seed,
            order,
            trace_on_grid: false,
        }
    }
}

/// Result of one scheme on one scenario.
#[derive(Debug, Clone)]
pub struct RunOutput {
    pub sum_rate: f64,
    pub iterations: usize,
    pub power_a2: f64,
    /// Number of free coefficients per user: `N_F` for aperture designs, the
    /// patch count for the digital array, `None` for match filtering.
    pub nf: Option<usize>,
    pub patterns: Option<PatternSet>,
    pub grid: QuadratureGrid,
}

/// Runs `scheme` on `scenario`; `seed` only matters for iterative schemes.
pub fn run_scheme(
    scenario: &Scenario,
    scheme: Scheme,
    seed: u64,
    settings: &SolverSettings,
) -> Result<RunOutput> {
    scenario.validate()?;
    match scheme {
        Scheme::Pdm | Scheme::Upper => {
            let order = if scheme == Scheme::Upper {
                upper_bound_order(&scenario.order)
            } else {
                scenario.order
            };
            let problem = scenario.pdm_problem(&order)?;
            let config = settings.config(scenario.order, seed);
            let res = if scheme == Scheme::Upper {
                interference_free_bound(&problem, &config)?
            } else {
                run_pdm(&problem, &config)?
            };
            Ok(RunOutput {
                sum_rate: res.sum_rate,
                iterations: res.iterations,
                power_a2: res.power,
                nf: Some(order.num_coeffs()),
                patterns: Some(res.patterns),
                grid: problem.grid,
            })
        }
        Scheme::Mf => {
            let grid = scenario.grid_for(&scenario.order)?;
            let channels = scenario.channels(&grid)?;
            let (patterns, _) = mf_design(&channels, &grid, &scenario.budget)?;
            Ok(RunOutput {
                sum_rate: sum_rate(&patterns, &channels, &grid, &scenario.budget)?,
                iterations: 0,
                power_a2: transmit_power(&patterns, &grid)?,
                nf: None,
                patterns: Some(patterns),
                grid,
            })
        }
        Scheme::Digital => {
            let layout = PatchLayout::new(&scenario.aperture, &scenario.wave);
            let grid = layout.resolving_grid(&scenario.aperture, scenario.grid_nx, scenario.grid_ny)?;
            let channels = scenario.channels(&grid)?;
            let pc = patch_channels(&channels, &layout, &grid)?;
            let sol = solve_digital_mimo(&pc, &scenario.budget, &settings.config(scenario.order, seed))?;
            Ok(RunOutput {
                sum_rate: sol.sum_rate,
                iterations: sol.outcome.iterations,
                power_a2: sol.power,
                nf: Some(layout.len()),
                patterns: None,
                grid,
            })
        }
    }
}

/// One record per (sweep point, scheme, order, seed).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub sweep: String,
    pub variable: String,
    pub value: f64,
    /// Second coordinate of two-dimensional sweeps (user height in the geometry sweep).
    pub series: Option<f64>,
    pub scheme: Scheme,
    pub nf: Option<usize>,
    pub seed: u64,
    pub sum_rate: Option<f64>,
    pub iterations: Option<usize>,
    pub power_ma2: Option<f64>,
    /// Omitted in deterministic mode so repeated runs are byte-identical.
    pub wall_time_s: Option<f64>,
    pub error: Option<String>,
}

impl ResultRow {
    pub fn failed(&self) -> bool {
        self.error.is_some()
    }
}

/// A table type that can be written with an explicit header, even when empty.
pub trait Record: Serialize + DeserializeOwned {
    const COLUMNS: &'static [&'static str];
}

impl Record for ResultRow {
    const COLUMNS: &'static [&'static str] = &[
        "sweep",
        "variable",
        "value",
        "series",
        "scheme",
        "nf",
        "seed",
        "sum_rate",
        "iterations",
        "power_ma2",
        "wall_time_s",
        "error",
    ];
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Format {
    Csv,
    Jsonl,
}

impl FromStr for Format {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "csv" => Ok(Format::Csv),
            "jsonl" | "json-lines" => Ok(Format::Jsonl),
            other => Err(Error::Config(format!("unknown format '{other}' (expected csv or jsonl)"))),
        }
    }
}

/// How sweep tasks are executed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RunOptions {
    /// Worker threads; 1 runs on the calling thread.
    pub jobs: usize,
    /// Record wall-clock time per row (makes output non-reproducible).
    pub timing: bool,
}

impl Default for RunOptions {
    fn default() -> Self {
        Self {
            jobs: 1,
            timing: false,
        }
    }
}

impl RunOptions {
    /// Single-threaded, untimed: identical inputs give identical bytes.
    pub fn serial() -> Self {
        Self::default()
    }
}

/// A single independent solve within a sweep.
#[derive(Debug, Clone)]
pub struct Task {
    pub sweep: &'static str,
    pub variable: &'static str,
    pub value: f64,
    pub series: Option<f64>,
    pub scenario: Scenario,
    pub scheme: Scheme,
    pub seed: u64,
}

impl Task {
    fn run(&self, settings: &SolverSettings, timing: bool) -> ResultRow {
        let start = Instant::now();
        let out = run_scheme(&self.scenario, self.scheme, self.seed, settings);
        let elapsed = start.elapsed().as_secs_f64();
        let mut row = ResultRow {
            sweep: self.sweep.to_string(),
            variable: self.variable.to_string(),
            value: self.value,
            series: self.series,
            scheme: self.scheme,
            nf: None,
            seed: self.seed,
            sum_rate: None,
            iterations: None,
            power_ma2: None,
            wall_time_s: timing.then_some(elapsed),
            error: None,
        };
        match out {
            Ok(o) => {
                row.nf = o.nf;
                row.sum_rate = Some(o.sum_rate);
                row.iterations = Some(o.iterations);
                row.power_ma2 = Some(o.power_a2 / MA2_TO_A2);
            }
            Err(e) => {
                row.nf = self
                    .scheme
                    .uses_order()
                    .then(|| self.scenario.order.num_coeffs());
                row.error = Some(e.to_string());
            }
        }
        row
    }
}

/// Runs every task and returns rows in task order.
pub fn execute(tasks: &[Task], settings: &SolverSettings, opts: &RunOptions) -> Result<Vec<ResultRow>> {
    if opts.jobs <= 1 {
        return Ok(tasks.iter().map(|t| t.run(settings, opts.timing)).collect());
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(opts.jobs)
        .build()
        .map_err(|e| Error::Config(format!("cannot start {} worker threads: {e}", opts.jobs)))?;
    Ok(pool.install(|| {
        tasks
            .par_iter()
            .map(|t| t.run(settings, opts.timing))
            .collect()
    }))
}

/// Expands one sweep point into tasks over schemes, orders and seeds.
///
/// Order-dependent schemes run once per entry of `nf`; the bound runs once
/// with an order covering every design it is compared against.
#[allow(clippy::too_many_arguments)]
fn point_tasks(
    sweep: &'static str,
    variable: &'static str,
    value: f64,
    series: Option<f64>,
    scenario: &Scenario,
    schemes: &[Scheme],
    nf: &[NfChoice],
    seeds: &[u64],
) -> Vec<Task> {
    let orders: Vec<TruncationOrder> = if nf.is_empty() {
        vec![scenario.order]
    } else {
        nf.iter().map(|c| c.resolve(&scenario.aperture, &scenario.wave)).collect()
    };
    let widest = orders.iter().fold(orders[0], |acc, o| acc.max(o));
    let mut tasks = Vec::new();
    for &scheme in schemes {
        let variants: Vec<TruncationOrder> = match scheme {
            Scheme::Pdm => orders.clone(),
            Scheme::Upper => vec![widest],
            Scheme::Mf | Scheme::Digital => vec![scenario.order],
        };
        for order in variants {
            for &seed in seeds {
                tasks.push(Task {
                    sweep,
                    variable,
                    value,
                    series,
                    scenario: scenario.with_order(order),
                    scheme,
                    seed,
                });
            }
        }
    }
    tasks
}

/// Square apertures of the given areas.
pub fn sweep_aperture(
    base: &Scenario,
    areas_m2: &[f64],
    schemes: &[Scheme],
    nf: &[NfChoice],
    settings: &SolverSettings,
    opts: &RunOptions,
) -> Result<Vec<ResultRow>> {
    let mut tasks = Vec::new();
    for &area in areas_m2 {
        let scenario = base.with_area(area, NfChoice::Auto)?;
        tasks.extend(point_tasks(
            "aperture", "area_m2", area, None, &scenario, schemes, nf, &settings.seeds,
        ));
    }
    execute(&tasks, settings, opts)
}

/// Transmit powers in (mA)².
pub fn sweep_power(
    base: &Scenario,
    powers_ma2: &[f64],
    schemes: &[Scheme],
    nf: &[NfChoice],
    settings: &SolverSettings,
    opts: &RunOptions,
) -> Result<Vec<ResultRow>> {
    let mut tasks = Vec::new();
    for &p in powers_ma2 {
        let scenario = base.with_power_ma2(p)?;
        tasks.extend(point_tasks(
            "power", "pt_ma2", p, None, &scenario, schemes, nf, &settings.seeds,
        ));
    }
    execute(&tasks, settings, opts)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum GeometryMode {
    /// Users on a circle of radius `R` at each requested height.
    Circle,
    /// Users at radius `R` with random azimuths and random heights in the
    /// given range, drawn from `placement_seed` and the point index.
    Random {
        heights: (f64, f64),
        placement_seed: u64,
    },
}

/// User-position sweep over radius (and height in circle mode).
#[allow(clippy::too_many_arguments)]
pub fn sweep_geometry(
    base: &Scenario,
    radii_m: &[f64],
    heights_m: &[f64],
    mode: GeometryMode,
    schemes: &[Scheme],
    nf: &[NfChoice],
    settings: &SolverSettings,
    opts: &RunOptions,
) -> Result<Vec<ResultRow>> {
    let k_users = base.num_users();
    let mut tasks = Vec::new();
    match mode {
        GeometryMode::Circle => {
            for &h in heights_m {
                for &r in radii_m {
                    let scenario = base.with_users(circle_users(k_users, r, h));
                    scenario.validate()?;
                    tasks.extend(point_tasks(
                        "geometry", "radius_m", r, Some(h), &scenario, schemes, nf, &settings.seeds,
                    ));
                }
            }
        }
        GeometryMode::Random {
            heights,
            placement_seed,
        } => {
            if !(heights.0 > 0.0 && heights.1 >= heights.0) {
                return Err(Error::Config(format!(
                    "random heights must satisfy 0 < min <= max, got {heights:?}"
                )));
            }
            for (i, &r) in radii_m.iter().enumerate() {
                let mut rng = ChaCha8Rng::seed_from_u64(placement_seed.wrapping_add(i as u64));
                let scenario = base.with_users(random_users(k_users, r, heights, &mut rng));
                scenario.validate()?;
                tasks.extend(point_tasks(
                    "geometry", "radius_m", r, None, &scenario, schemes, nf, &settings.seeds,
                ));
            }
        }
    }
    execute(&tasks, settings, opts)
}

/// Best sum-rate over seeds for every (sweep point, scheme, order); failed
/// rows are ignored unless every seed failed.
pub fn best_of_seeds(rows: &[ResultRow]) -> Vec<ResultRow> {
    type Key = (String, u64, Option<u64>, Scheme, Option<usize>);
    let mut best: BTreeMap<Key, ResultRow> = BTreeMap::new();
    let mut order = Vec::new();
    for row in rows {
        let key = (
            row.sweep.clone(),
            row.value.to_bits(),
            row.series.map(f64::to_bits),
            row.scheme,
            row.nf,
        );
        match best.get_mut(&key) {
            None => {
                order.push(key.clone());
                best.insert(key, row.clone());
            }
            Some(cur) => {
                let better = match (row.sum_rate, cur.sum_rate) {
                    (Some(a), Some(b)) => a > b,
                    (Some(_), None) => true,
                    _ => false,
                };
                if better {
                    *cur = row.clone();
                }
            }
        }
    }
    order.into_iter().map(|k| best.remove(&k).expect("key inserted")).collect()
}

/// One sample of the normalized one-dimensional wavenumber gain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GainRow {
    pub distance_m: f64,
    pub freq_ghz: f64,
    /// `κx / κ0`.
    pub kappa_ratio: f64,
    /// `‖Ω(κx)‖_F²` relative to its peak over the sampled band, dB.
    pub gain_db: f64,
}

impl Record for GainRow {
    const COLUMNS: &'static [&'static str] = &["distance_m", "freq_ghz", "kappa_ratio", "gain_db"];
}

/// Samples of the linear aperture `|s_x| <= half_length` used by the gain study.
const LINE_SAMPLES: usize = 4096;

/// `‖∫ G((0,0,d), (x,0,0)) e^{−jκx x} dx‖_F²` over the segment `|x| <= half_length`.
pub fn line_spectrum_gain(
    distance: f64,
    half_length: f64,
    wave: &WaveParams,
    kappa_x: f64,
) -> Result<f64> {
    let r = Vector3::new(0.0, 0.0, distance);
    let dx = 2.0 * half_length / LINE_SAMPLES as f64;
    let mut acc = ComplexMat3::zeros();
    for i in 0..LINE_SAMPLES {
        let x = -half_length + (i as f64 + 0.5) * dx;
        let g = green_free_space(&r, &Vector3::new(x, 0.0, 0.0), wave)?;
        acc += g * Complex64::from_polar(dx, -kappa_x * x);
    }
    Ok(acc.norm_squared())
}

/// Normalized wavenumber gain of a 1 m linear aperture seen by a broadside
/// user, for every distance and carrier, at `points` ratios spread evenly over
/// `κx/κ0 ∈ [−2, 2]`.
pub fn wavenumber_gain_study(
    distances_m: &[f64],
    freqs_hz: &[f64],
    points: usize,
) -> Result<Vec<GainRow>> {
    if points < 2 {
        return Err(Error::Config("the gain study needs at least two wavenumber samples".into()));
    }
    let mut rows = Vec::new();
    for &f in freqs_hz {
        let wave = WaveParams::free_space(f)?;
        for &d in distances_m {
            if !(d > 0.0) {
                return Err(Error::Config(format!("user distance must be positive, got {d}")));
            }
            let ratios: Vec<f64> = (0..points)
                .map(|i| -2.0 + 4.0 * i as f64 / (points - 1) as f64)
                .collect();
            let gains = ratios
                .iter()
                .map(|q| line_spectrum_gain(d, 0.5, &wave, q * wave.kappa0()))
                .collect::<Result<Vec<_>>>()?;
            let peak = gains.iter().cloned().fold(0.0, f64::max);
            if !(peak > 0.0) {
                return Err(Error::DegenerateChannel("wavenumber spectrum is zero".into()));
            }
            for (q, g) in ratios.iter().zip(&gains) {
                rows.push(GainRow {
                    distance_m: d,
                    freq_ghz: f * 1e-9,
                    kappa_ratio: *q,
                    gain_db: 10.0 * (g / peak).log10(),
                });
            }
        }
    }
    Ok(rows)
}

/// One grid sample of one user's pattern.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatternRow {
    pub user: usize,
    pub ix: usize,
    pub iy: usize,
    pub nx: usize,
    pub ny: usize,
    pub x_m: f64,
    pub y_m: f64,
    pub theta_x_re: f64,
    pub theta_x_im: f64,
    pub theta_y_re: f64,
    pub theta_y_im: f64,
    pub theta_z_re: f64,
    pub theta_z_im: f64,
    /// `|θ_x|` over its maximum for this user.
    pub amp_x_norm: f64,
    pub phase_x_rad: f64,
}

impl Record for PatternRow {
    const COLUMNS: &'static [&'static str] = &[
        "user",
        "ix",
        "iy",
        "nx",
        "ny",
        "x_m",
        "y_m",
        "theta_x_re",
        "theta_x_im",
        "theta_y_re",
        "theta_y_im",
        "theta_z_re",
        "theta_z_im",
        "amp_x_norm",
        "phase_x_rad",
    ];
}

/// Flattens patterns into one row per (user, grid sample).
pub fn pattern_rows(patterns: &PatternSet, grid: &QuadratureGrid) -> Result<Vec<PatternRow>> {
    let mut rows = Vec::with_capacity(patterns.len() * grid.len());
    for (k, theta) in patterns.iter().enumerate() {
        if theta.len() != grid.len() {
            return Err(Error::LengthMismatch {
                expected: grid.len(),
                got: theta.len(),
            });
        }
        let peak = theta.iter().map(|t| t[0].norm()).fold(0.0, f64::max);
        for (i, (t, p)) in theta.iter().zip(grid.points()).enumerate() {
            rows.push(PatternRow {
                user: k,
                ix: i % grid.nx(),
                iy: i / grid.nx(),
                nx: grid.nx(),
                ny: grid.ny(),
                x_m: p.x,
                y_m: p.y,
                theta_x_re: t[0].re,
                theta_x_im: t[0].im,
                theta_y_re: t[1].re,
                theta_y_im: t[1].im,
                theta_z_re: t[2].re,
                theta_z_im: t[2].im,
                amp_x_norm: if peak > 0.0 { t[0].norm() / peak } else { 0.0 },
                phase_x_rad: t[0].arg(),
            });
        }
    }
    Ok(rows)
}

/// Writes records as CSV (header always present) or JSON lines.
pub fn write_records<T: Record>(rows: &[T], path: &Path, format: Format) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    write_records_to(rows, BufWriter::new(file), format).map_err(|e| match e {
        Error::Io { source, .. } => Error::io(path, source),
        other => other,
    })
}

pub fn write_records_to<T: Record, W: Write>(rows: &[T], out: W, format: Format) -> Result<()> {
    let io = |e: std::io::Error| Error::io("<output>", e);
    match format {
        Format::Csv => {
            let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(out);
            w.write_record(T::COLUMNS).map_err(|e| io(e.into()))?;
            for row in rows {
                w.serialize(row).map_err(|e| io(e.into()))?;
            }
            w.flush().map_err(io)?;
        }
        Format::Jsonl => {
            let mut out = out;
            for row in rows {
                serde_json::to_writer(&mut out, row).map_err(|e| io(e.into()))?;
                out.write_all(b"\n").map_err(io)?;
            }
            out.flush().map_err(io)?;
        }
    }
    Ok(())
}

pub fn emit_results(rows: &[ResultRow], path: &Path, format: Format) -> Result<()> {
    write_records(rows, path, format)
}

pub fn read_records<T: Record>(path: &Path, format: Format) -> Result<Vec<T>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let parse = |message: String| Error::Parse {
        path: path.to_path_buf(),
        message,
    };
    match format {
        Format::Csv => {
            let mut r = csv::Reader::from_reader(file);
            let header = r.headers().map_err(|e| parse(e.to_string()))?.clone();
            if header.iter().ne(T::COLUMNS.iter().copied()) {
                return Err(parse(format!("unexpected header {header:?}")));
            }
            r.deserialize()
                .map(|row| row.map_err(|e| parse(e.to_string())))
                .collect()
        }
        Format::Jsonl => BufReader::new(file)
            .lines()
            .enumerate()
            .filter(|(_, l)| !matches!(l, Ok(s) if s.trim().is_empty()))
            .map(|(i, line)| {
                let line = line.map_err(|e| Error::io(path, e))?;
                serde_json::from_str(&line).map_err(|e| parse(format!("line {}: {e}", i + 1)))
            })
            .collect(),
    }
}

pub fn read_results(path: &Path, format: Format) -> Result<Vec<ResultRow>> {
    read_records(path, format)
}

/// Experiment configuration file. Keys carry their units.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub scenario: ScenarioConfig,
    pub solver: SolverSettings,
    pub sweep: SweepConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioConfig {
    pub freq_ghz: f64,
    pub pt_ma2: f64,
    pub sigma2_v2m2: f64,
    pub aperture_lx_m: f64,
    pub aperture_ly_m: f64,
    pub aperture_center_m: [f64; 3],
    pub grid_nx: usize,
    pub grid_ny: usize,
    pub users_m: Vec<[f64; 3]>,
    /// `auto` or a planar coefficient count such as `81`.
    pub nf: String,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            freq_ghz: 2.4,
            pt_ma2: 100.0,
            sigma2_v2m2: 5.6e-3,
            aperture_lx_m: 0.5,
            aperture_ly_m: 0.5,
            aperture_center_m: [0.0; 3],
            grid_nx: 32,
            grid_ny: 32,
            users_m: default_users().iter().map(|u| [u.x, u.y, u.z]).collect(),
            nf: "auto".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    pub areas_m2: Vec<f64>,
    pub powers_ma2: Vec<f64>,
    pub radii_m: Vec<f64>,
    pub heights_m: Vec<f64>,
    /// `circle` or `random`.
    pub geometry: String,
    pub random_heights_m: [f64; 2],
    pub placement_seed: u64,
    pub distances_m: Vec<f64>,
    pub freqs_ghz: Vec<f64>,
    pub gain_points: usize,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            areas_m2: vec![0.0625, 0.25, 0.5625, 1.0],
            powers_ma2: (2..=7).map(|i| 10f64.powf(i as f64 / 2.0)).collect(),
            radii_m: vec![0.25, 0.5, 1.0, 2.0, 4.0, 6.0, 8.0, 10.0, 15.0, 20.0, 25.0, 30.0],
            heights_m: vec![2.0, 5.0, 10.0, 30.0],
            geometry: "circle".into(),
            random_heights_m: [2.0, 30.0],
            placement_seed: 2023,
            distances_m: vec![0.1, 1.0, 10.0],
            freqs_ghz: vec![2.4],
            gain_points: 401,
        }
    }
}

impl SweepConfig {
    pub fn geometry_mode(&self) -> Result<GeometryMode> {
        match self.geometry.trim().to_ascii_lowercase().as_str() {
            "circle" => Ok(GeometryMode::Circle),
            "random" => Ok(GeometryMode::Random {
                heights: (self.random_heights_m[0], self.random_heights_m[1]),
                placement_seed: self.placement_seed,
            }),
            other => Err(Error::Config(format!(
                "unknown geometry mode '{other}' (expected circle or random)"
            ))),
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        toml::from_str(&text).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            message: e.to_string(),
        })
    }

    pub fn nf_choice(&self) -> Result<NfChoice> {
        self.scenario.nf.parse()
    }

    pub fn to_scenario(&self) -> Result<Scenario> {
        let s = &self.scenario;
        let [cx, cy, cz] = s.aperture_center_m;
        let aperture = Aperture::new(s.aperture_lx_m, s.aperture_ly_m, Vector3::new(cx, cy, cz))?;
        let wave = WaveParams::free_space(s.freq_ghz * 1e9)?;
        let scenario = Scenario {
            order: self.nf_choice()?.resolve(&aperture, &wave),
            aperture,
            users: s.users_m.iter().map(|u| Vector3::new(u[0], u[1], u[2])).collect(),
            wave,
            budget: LinkBudget::from_ma2(s.pt_ma2, s.sigma2_v2m2)?,
            grid_nx: s.grid_nx,
            grid_ny: s.grid_ny,
        };
        scenario.validate()?;
        Ok(scenario)
    }

    pub fn validate(&self) -> Result<()> {
        self.to_scenario()?;
        self.sweep.geometry_mode()?;
        if self.solver.seeds.is_empty() {
            return Err(Error::Config("at least one seed is required".into()));
        }
        self.solver.config(TruncationOrder::planar(1, 1), 1).validate()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_scenario_matches_reference_setup() {
        let s = default_scenario();
        assert_eq!(s.num_users(), 8);
        assert_eq!(s.order.num_coeffs(), 81);
        assert_eq!(s.budget.sigma2(), 5.6e-3);
        assert_eq!(s.grid_for(&s.order).unwrap().len(), 1024);
        assert!(s.validate().is_ok());
    }

    #[test]
    fn nf_parsing() {
        assert_eq!("auto".parse::<NfChoice>().unwrap(), NfChoice::Auto);
        assert_eq!("9".parse::<NfChoice>().unwrap(), NfChoice::Fixed(TruncationOrder::planar(1, 1)));
        assert_eq!("225".parse::<NfChoice>().unwrap(), NfChoice::Fixed(TruncationOrder::planar(7, 7)));
        assert!("80".parse::<NfChoice>().is_err());
        assert!("1".parse::<NfChoice>().is_err());
        assert!("many".parse::<NfChoice>().is_err());
    }

    #[test]
    fn user_on_aperture_is_named() {
        let mut s = default_scenario();
        s.users[3] = Vector3::new(0.1, 0.1, 0.0);
        let msg = s.validate().unwrap_err().to_string();
        assert!(msg.contains("user 3"), "{msg}");
    }

    #[test]
    fn grid_is_raised_for_high_orders() {
        let s = default_scenario();
        let g = s.grid_for(&TruncationOrder::planar(20, 3)).unwrap();
        assert_eq!((g.nx(), g.ny()), (42, 32));
    }

    #[test]
    fn circle_placement() {
        let users = circle_users(8, 10.0, 5.0);
        assert_eq!(users.len(), 8);
        assert!((users[7] - Vector3::new(10.0, 0.0, 5.0)).norm() < 1e-12);
        assert!(users.iter().all(|u| ((u.x * u.x + u.y * u.y).sqrt() - 10.0).abs() < 1e-12));
    }

    #[test]
    fn config_defaults_and_unit_keys() {
        let cfg: ExperimentConfig = toml::from_str(
            "[scenario]\npt_ma2 = 1000.0\nnf = \"225\"\n[solver]\nseeds = [3]\n",
        )
        .unwrap();
        let s = cfg.to_scenario().unwrap();
        assert!((s.budget.pt() - 1e-3).abs() < 1e-15);
        assert_eq!(s.order, TruncationOrder::planar(7, 7));
        assert_eq!(cfg.solver.seeds, vec![3]);
        assert!(toml::from_str::<ExperimentConfig>("[scenario]\npt = 1.0\n").is_err());
    }

    #[test]
    fn best_of_seeds_picks_maximum() {
        let row = |seed, rate: Option<f64>| ResultRow {
            sweep: "power".into(),
            variable: "pt_ma2".into(),
            value: 100.0,
            series: None,
            scheme: Scheme::Pdm,
            nf: Some(81),
            seed,
            sum_rate: rate,
            iterations: Some(3),
            power_ma2: Some(100.0),
            wall_time_s: None,
            error: rate.is_none().then(|| "boom".to_string()),
        };
        let best = best_of_seeds(&[row(1, Some(2.0)), row(2, None), row(3, Some(5.0)), row(4, Some(4.0))]);
        assert_eq!(best.len(), 1);
        assert_eq!(best[0].seed, 3);
    }

    #[test]
    fn pattern_rows_cover_grid() {
        let s = default_scenario();
        let grid = s.grid_for(&s.order).unwrap();
        let ch = s.channels(&grid).unwrap();
        let (theta, _) = mf_design(&ch[..2], &grid, &s.budget).unwrap();
        let rows = pattern_rows(&theta, &grid).unwrap();
        assert_eq!(rows.len(), 2 * grid.len());
        assert!(rows.iter().all(|r| r.amp_x_norm <= 1.0 && r.nx == 32 && r.ny == 32));
    }
}
