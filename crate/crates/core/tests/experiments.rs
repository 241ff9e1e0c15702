use std::fs;

use nalgebra::Vector3;

use capmimo::experiments::{
    default_scenario, execute, pattern_rows, read_records, read_results, run_scheme, sweep_power,
    write_records, ExperimentConfig, Format, NfChoice, PatternRow, ResultRow, RunOptions, Scheme,
    SolverSettings, Task,
};
use capmimo::metrics::MA2_TO_A2;

fn quick() -> SolverSettings {
    SolverSettings {
        seeds: vec![1, 2],
        ..SolverSettings::default()
    }
}

fn tmp(name: &str) -> std::path::PathBuf {
    let dir = std::env::temp_dir().join(format!("capmimo-exp-{}", std::process::id()));
    fs::create_dir_all(&dir).unwrap();
    dir.join(name)
}

#[test]
fn empty_table_is_header_only() {
    let path = tmp("empty.csv");
    write_records::<ResultRow>(&[], &path, Format::Csv).unwrap();
    let text = fs::read_to_string(&path).unwrap();
    assert_eq!(
        text,
        "sweep,variable,value,series,scheme,nf,seed,sum_rate,iterations,power_ma2,wall_time_s,error\n"
    );
    assert!(read_results(&path, Format::Csv).unwrap().is_empty());
}

#[test]
fn rows_are_complete_ordered_and_flag_failures() {
    let base = default_scenario();
    let mut bad = base.clone();
    bad.users[5] = Vector3::new(0.0, 0.0, 0.0);
    let mut tasks = Vec::new();
    for (i, scenario) in [&base, &bad, &base].into_iter().enumerate() {
        for scheme in [Scheme::Pdm, Scheme::Mf] {
            tasks.push(Task {
                sweep: "test",
                variable: "point",
                value: i as f64,
                series: None,
                scenario: scenario.clone(),
                scheme,
                seed: 1,
            });
        }
    }
    let rows = execute(&tasks, &quick(), &RunOptions::serial()).unwrap();
    assert_eq!(rows.len(), tasks.len());
    for (row, task) in rows.iter().zip(&tasks) {
        assert_eq!((row.value, row.scheme), (task.value, task.scheme));
        assert_eq!(row.failed(), task.value == 1.0);
    }
    assert!(rows[2].error.as_ref().unwrap().contains("user 5"));
    for row in rows.iter().filter(|r| !r.failed()) {
        let rate = row.sum_rate.unwrap();
        assert!(rate >= 0.0);
        assert!(row.power_ma2.unwrap() <= base.budget.pt_ma2() * (1.0 + 1e-8));
    }
}

#[test]
fn serial_runs_are_byte_identical_and_parallel_rows_match() {
    let base = default_scenario();
    let schemes = [Scheme::Pdm, Scheme::Mf, Scheme::Digital, Scheme::Upper];
    let nf = [NfChoice::Auto];
    let run = |opts: RunOptions| sweep_power(&base, &[30.0, 300.0], &schemes, &nf, &quick(), &opts).unwrap();

    let a = run(RunOptions::serial());
    let b = run(RunOptions::serial());
    let (pa, pb) = (tmp("a.csv"), tmp("b.csv"));
    write_records(&a, &pa, Format::Csv).unwrap();
    write_records(&b, &pb, Format::Csv).unwrap();
    assert_eq!(fs::read(&pa).unwrap(), fs::read(&pb).unwrap());
    assert_eq!(a.len(), 2 * schemes.len() * 2);

    let mut par = run(RunOptions { jobs: 3, timing: true });
    assert!(par.iter().all(|r| r.wall_time_s.is_some()));
    for r in &mut par {
        r.wall_time_s = None;
    }
    assert_eq!(par, a);
}

#[test]
fn sum_rate_grows_with_power() {
    let base = default_scenario();
    let rows = sweep_power(
        &base,
        &[10.0, 100.0, 1000.0],
        &[Scheme::Pdm, Scheme::Mf, Scheme::Digital],
        &[NfChoice::Auto],
        &quick(),
        &RunOptions::serial(),
    )
    .unwrap();
    let best = capmimo::experiments::best_of_seeds(&rows);
    for scheme in [Scheme::Pdm, Scheme::Mf, Scheme::Digital] {
        let curve: Vec<f64> = best
            .iter()
            .filter(|r| r.scheme == scheme)
            .map(|r| r.sum_rate.unwrap())
            .collect();
        assert_eq!(curve.len(), 3);
        assert!(curve.windows(2).all(|w| w[1] >= w[0]), "{scheme}: {curve:?}");
    }
}

#[test]
fn pattern_dump_has_one_row_per_sample_and_round_trips() {
    let scenario = default_scenario();
    let out = run_scheme(&scenario, Scheme::Pdm, 1, &quick()).unwrap();
    let rows = pattern_rows(out.patterns.as_ref().unwrap(), &out.grid).unwrap();
    assert_eq!(rows.len(), scenario.num_users() * 1024);
    for k in 0..scenario.num_users() {
        let peak = rows
            .iter()
            .filter(|r| r.user == k)
            .map(|r| r.amp_x_norm)
            .fold(0.0, f64::max);
        assert!((peak - 1.0).abs() < 1e-12);
    }
    for format in [Format::Csv, Format::Jsonl] {
        let path = tmp("patterns.out");
        write_records(&rows, &path, format).unwrap();
        assert_eq!(read_records::<PatternRow>(&path, format).unwrap(), rows);
    }
    assert!((out.power_a2 / MA2_TO_A2 - 100.0).abs() < 1e-6);
}

#[test]
fn config_rejects_user_on_aperture_by_index() {
    let path = tmp("bad.toml");
    fs::write(
        &path,
        "[scenario]\nusers_m = [[1.0, 1.0, 30.0], [0.1, -0.1, 0.0]]\n",
    )
    .unwrap();
    let cfg = ExperimentConfig::load(&path).unwrap();
    let err = cfg.validate().unwrap_err().to_string();
    assert!(err.contains("user 1"), "{err}");
}

#[test]
fn io_errors_name_the_path() {
    let path = std::path::Path::new("/nonexistent-dir/capmimo/out.csv");
    let err = write_records::<ResultRow>(&[], path, Format::Csv).unwrap_err().to_string();
    assert!(err.contains("/nonexistent-dir/capmimo/out.csv"), "{err}");
}

#[test]
fn gain_spectrum_is_even_and_far_users_peak_at_broadside() {
    let rows = capmimo::experiments::wavenumber_gain_study(&[0.1, 10.0], &[2.4e9], 201).unwrap();
    for d in [0.1, 10.0] {
        let curve: Vec<f64> = rows.iter().filter(|r| r.distance_m == d).map(|r| r.gain_db).collect();
        assert_eq!(curve.len(), 201);
        for i in 0..curve.len() {
            assert!((curve[i] - curve[curve.len() - 1 - i]).abs() < 1e-9);
        }
        assert!(curve.iter().all(|g| *g <= 0.0));
    }
    let far: Vec<_> = rows.iter().filter(|r| r.distance_m == 10.0).collect();
    let peak = far.iter().max_by(|a, b| a.gain_db.total_cmp(&b.gain_db)).unwrap();
    assert_eq!(peak.kappa_ratio, 0.0);
}
