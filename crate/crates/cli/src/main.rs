//! `capmimo` — runs pattern-design experiments and writes result tables.
//!
//! Exit status: 0 when every row succeeded, 2 when some rows carry an error,
//! 1 when the configuration or output could not be used at all.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use capmimo::experiments::{
    emit_results, pattern_rows, run_scheme, sweep_aperture, sweep_geometry, sweep_power,
    wavenumber_gain_study, write_records, write_records_to, ExperimentConfig, Format, NfChoice,
    Record, ResultRow, RunOptions, Scenario, Scheme, SolverSettings, Task,
};
use capmimo::{Error, Result};

#[derive(Parser, Debug)]
#[command(name = "capmimo", version, about = "Multi-user continuous-aperture MIMO pattern design")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Sum-rate against square aperture area.
    SweepAperture(Common),
    /// Sum-rate against transmit power.
    SweepPower(Common),
    /// Sum-rate against user radius (and height).
    SweepGeometry(Common),
    /// Normalized wavenumber gain of a linear aperture.
    WavenumberGain(Output),
    /// One scenario, every requested scheme and seed.
    Solve(Common),
    /// Optimized patterns over the aperture grid (best seed).
    DumpPatterns(Common),
}

#[derive(Args, Debug)]
struct Output {
    /// TOML experiment configuration; defaults reproduce the reference setup.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output file; standard output when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, default_value = "csv")]
    format: String,
}

#[derive(Args, Debug)]
struct Common {
    #[command(flatten)]
    output: Output,
    /// Comma-separated schemes: pdm, mf, digital, upper.
    #[arg(long, value_delimiter = ',')]
    scheme: Vec<String>,
    /// Comma-separated solver seeds (overrides the configuration).
    #[arg(long, value_delimiter = ',')]
    seeds: Vec<u64>,
    /// Comma-separated truncation choices: 9, 81, 225 or auto.
    #[arg(long, value_delimiter = ',')]
    nf: Vec<String>,
    /// Worker threads for independent sweep points.
    #[arg(long, default_value_t = 1)]
    jobs: usize,
    /// Single-threaded, untimed run: identical inputs give identical bytes.
    #[arg(long)]
    serial: bool,
}

struct Prepared {
    config: ExperimentConfig,
    scenario: Scenario,
    settings: SolverSettings,
    schemes: Vec<Scheme>,
    nf: Vec<NfChoice>,
    opts: RunOptions,
    format: Format,
}

fn load_config(path: Option<&Path>) -> Result<ExperimentConfig> {
    let config = match path {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    config.validate()?;
    Ok(config)
}

fn prepare(args: &Common, default_schemes: &[Scheme]) -> Result<Prepared> {
    let mut config = load_config(args.output.config.as_deref())?;
    if !args.seeds.is_empty() {
        config.solver.seeds = args.seeds.clone();
    }
    let schemes = if args.scheme.is_empty() {
        default_schemes.to_vec()
    } else {
        args.scheme.iter().map(|s| s.parse()).collect::<Result<_>>()?
    };
    let nf = if args.nf.is_empty() {
        vec![config.nf_choice()?]
    } else {
        args.nf.iter().map(|s| s.parse()).collect::<Result<_>>()?
    };
    if args.jobs == 0 {
        return Err(Error::Config("--jobs must be at least 1".into()));
    }
    let opts = if args.serial {
        RunOptions::serial()
    } else {
        RunOptions {
            jobs: args.jobs,
            timing: true,
        }
    };
    Ok(Prepared {
        scenario: config.to_scenario()?,
        settings: config.solver.clone(),
        format: args.output.format.parse()?,
        config,
        schemes,
        nf,
        opts,
    })
}

fn write_out<T: Record>(rows: &[T], out: Option<&Path>, format: Format) -> Result<()> {
    match out {
        Some(path) => write_records(rows, path, format),
        None => write_records_to(rows, std::io::stdout().lock(), format),
    }
}

fn emit(rows: &[ResultRow], out: Option<&Path>, format: Format) -> Result<ExitCode> {
    match out {
        Some(path) => emit_results(rows, path, format)?,
        None => write_records_to(rows, std::io::stdout().lock(), format)?,
    }
    let failed = rows.iter().filter(|r| r.failed()).count();
    if failed > 0 {
        eprintln!("{failed} of {} rows failed", rows.len());
        Ok(ExitCode::from(2))
    } else {
        Ok(ExitCode::SUCCESS)
    }
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::SweepAperture(args) => {
            let p = prepare(&args, &[Scheme::Pdm, Scheme::Mf])?;
            let rows = sweep_aperture(
                &p.scenario,
                &p.config.sweep.areas_m2,
                &p.schemes,
                &p.nf,
                &p.settings,
                &p.opts,
            )?;
            emit(&rows, args.output.out.as_deref(), p.format)
        }
        Command::SweepPower(args) => {
            let p = prepare(&args, &[Scheme::Pdm, Scheme::Mf, Scheme::Digital])?;
            let rows = sweep_power(
                &p.scenario,
                &p.config.sweep.powers_ma2,
                &p.schemes,
                &p.nf,
                &p.settings,
                &p.opts,
            )?;
            emit(&rows, args.output.out.as_deref(), p.format)
        }
        Command::SweepGeometry(args) => {
            let p = prepare(&args, &[Scheme::Pdm])?;
            let rows = sweep_geometry(
                &p.scenario,
                &p.config.sweep.radii_m,
                &p.config.sweep.heights_m,
                p.config.sweep.geometry_mode()?,
                &p.schemes,
                &p.nf,
                &p.settings,
                &p.opts,
            )?;
            emit(&rows, args.output.out.as_deref(), p.format)
        }
        Command::WavenumberGain(args) => {
            let config = load_config(args.config.as_deref())?;
            let format: Format = args.format.parse()?;
            let freqs: Vec<f64> = config.sweep.freqs_ghz.iter().map(|f| f * 1e9).collect();
            let rows = wavenumber_gain_study(
                &config.sweep.distances_m,
                &freqs,
                config.sweep.gain_points,
            )?;
            write_out(&rows, args.out.as_deref(), format)?;
            Ok(ExitCode::SUCCESS)
        }
        Command::Solve(args) => {
            let p = prepare(&args, &[Scheme::Pdm])?;
            let mut tasks = Vec::new();
            for &scheme in &p.schemes {
                let orders: Vec<NfChoice> = if scheme.uses_order() { p.nf.clone() } else { vec![NfChoice::Auto] };
                for nf in orders {
                    for &seed in &p.settings.seeds {
                        tasks.push(Task {
                            sweep: "solve",
                            variable: "pt_ma2",
                            value: p.scenario.budget.pt_ma2(),
                            series: None,
                            scenario: p
                                .scenario
                                .with_order(nf.resolve(&p.scenario.aperture, &p.scenario.wave)),
                            scheme,
                            seed,
                        });
                    }
                }
            }
            let rows = capmimo::experiments::execute(&tasks, &p.settings, &p.opts)?;
            emit(&rows, args.output.out.as_deref(), p.format)
        }
        Command::DumpPatterns(args) => {
            let p = prepare(&args, &[Scheme::Pdm])?;
            let scheme = p.schemes[0];
            let scenario = p
                .scenario
                .with_order(p.nf[0].resolve(&p.scenario.aperture, &p.scenario.wave));
            let mut best = None;
            for &seed in &p.settings.seeds {
                let out = run_scheme(&scenario, scheme, seed, &p.settings)?;
                if best.as_ref().is_none_or(|b: &capmimo::experiments::RunOutput| out.sum_rate > b.sum_rate) {
                    best = Some(out);
                }
            }
            let best = best.ok_or_else(|| Error::Config("no seeds to run".into()))?;
            let patterns = best.patterns.ok_or_else(|| {
                Error::Config(format!("scheme '{scheme}' has no aperture pattern to dump"))
            })?;
            let rows = pattern_rows(&patterns, &best.grid)?;
            write_out(&rows, args.output.out.as_deref(), p.format)?;
            Ok(ExitCode::SUCCESS)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
