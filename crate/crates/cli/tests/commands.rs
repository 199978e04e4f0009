use panelshrink::panel::{fit_panel, to_normal_means};
use panelshrink::simlab::{draw_problem, replication_rng, Scenario, ScenarioKind};
use panelshrink_cli::io::{read_panel, read_problem, write_problem};
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn data(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/data").join(name)
}

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_panelshrink")).args(args).output().expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

/// Panel CSV with one unit missing period 2.
fn unbalanced_panel(dir: &Path) -> PathBuf {
    let path = dir.join("unbalanced.csv");
    let mut text = String::from("unit,period,individual,outcome,x1\n");
    let mut row = 0;
    for unit in ["a", "b", "c", "d"] {
        for period in 1..=3 {
            if unit == "c" && period == 2 {
                continue;
            }
            for i in 0..3 {
                row += 1;
                let x = (row % 5) as f64 * 0.3;
                let y = 0.5 * x + period as f64 * 0.1 + ((row * 7) % 11) as f64 * 0.05;
                text.push_str(&format!("{unit},{period},{unit}{i},{y},{x}\n"));
            }
        }
    }
    fs::write(&path, text).unwrap();
    path
}

#[test]
fn fit_ure_g_reproduces_golden_files() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&["--deterministic", "fit", s(&data("problem.json")), "--estimator", "ure-g", "--out-dir", s(dir.path())]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let golden = fs::read(data("golden/ure_g_estimates.csv")).unwrap();
    assert_eq!(fs::read(dir.path().join("estimates.csv")).unwrap(), golden);
    let golden = fs::read(data("golden/ure_g_fit.json")).unwrap();
    assert_eq!(fs::read(dir.path().join("fit.json")).unwrap(), golden);
}

#[test]
fn forecast_reproduces_golden_files() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("f.csv");
    let json = dir.path().join("f.json");
    let out = run(&["--deterministic", "forecast", s(&data("problem.json")), "--out", s(&csv), "--fit-out", s(&json)]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert_eq!(fs::read(&csv).unwrap(), fs::read(data("golden/forecast.csv")).unwrap());
    assert_eq!(fs::read(&json).unwrap(), fs::read(data("golden/forecast_fit.json")).unwrap());
}

#[test]
fn deterministic_runs_agree_across_thread_counts() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for (d, threads) in [(&a, "1"), (&b, "3")] {
        let out = run(&[
            "--deterministic",
            "--threads",
            threads,
            "fit",
            s(&data("problem.json")),
            "--estimator",
            "ebmle",
            "--out-dir",
            s(d),
        ]);
        assert_eq!(code(&out), 0, "{}", stderr(&out));
    }
    assert_eq!(fs::read(a.join("fit.json")).unwrap(), fs::read(b.join("fit.json")).unwrap());
    assert_eq!(fs::read(a.join("estimates.csv")).unwrap(), fs::read(b.join("estimates.csv")).unwrap());
}

#[test]
fn unknown_estimator_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&["fit", s(&data("problem.json")), "--estimator", "sure", "--out-dir", s(dir.path())]);
    assert_eq!(code(&out), 1);
    assert!(stderr(&out).contains("unknown estimator"));
}

#[test]
fn unknown_flag_and_missing_argument_exit_with_input_code() {
    assert_eq!(code(&run(&["fit", "--bogus"])), 1);
    assert_eq!(code(&run(&["simulate"])), 1);
    assert_eq!(code(&run(&["--help"])), 0);
}

#[test]
fn weights_change_the_fit() {
    let dir = tempfile::tempdir().unwrap();
    let w = dir.path().join("w.csv");
    fs::write(&w, "4,0,0\n0,1,0\n0,0,0.25\n").unwrap();
    let out_dir = dir.path().join("weighted");
    let out = run(&[
        "--deterministic",
        "fit",
        s(&data("problem.json")),
        "--weights",
        s(&w),
        "--out-dir",
        s(&out_dir),
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let weighted = fs::read_to_string(out_dir.join("fit.json")).unwrap();
    let plain = fs::read_to_string(data("golden/ure_g_fit.json")).unwrap();
    assert_ne!(weighted, plain);

    let row = dir.path().join("row.csv");
    fs::write(&row, "0.2,0.3,0.5\n").unwrap();
    let out = run(&["fit", s(&data("problem.json")), "--weights", s(&row), "--out-dir", s(&dir.path().join("row"))]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));

    let bad = dir.path().join("bad.csv");
    fs::write(&bad, "1,0\n0,1\n").unwrap();
    let out = run(&["fit", s(&data("problem.json")), "--weights", s(&bad), "--out-dir", s(&dir.path().join("bad"))]);
    assert_eq!(code(&out), 1);
}

#[test]
fn every_estimator_and_structure_runs() {
    let dir = tempfile::tempdir().unwrap();
    for est in ["ure-m", "ure-g", "ebmle", "mle"] {
        let d = dir.path().join(est);
        let out = run(&["fit", s(&data("problem.json")), "--estimator", est, "--out-dir", s(&d)]);
        assert_eq!(code(&out), 0, "{est}: {}", stderr(&out));
        let rows = fs::read_to_string(d.join("estimates.csv")).unwrap().lines().count();
        assert_eq!(rows, 1 + 40 * 3);
    }
    for st in ["diag", "toeplitz", "scalar", "rank1"] {
        let d = dir.path().join(st);
        let out = run(&["fit", s(&data("problem.json")), "--structure", st, "--out-dir", s(&d)]);
        assert_eq!(code(&out), 0, "{st}: {}", stderr(&out));
    }
    // The bundled problem has no covariates.
    let out = run(&["fit", s(&data("problem.json")), "--estimator", "ure-cov", "--out-dir", s(dir.path())]);
    assert_eq!(code(&out), 3);
    let out = run(&["fit", s(&data("problem.json")), "--structure", "banded", "--out-dir", s(dir.path())]);
    assert_eq!(code(&out), 1);
}

#[test]
fn covariate_estimator_uses_unit_covariates() {
    let dir = tempfile::tempdir().unwrap();
    let scenario = Scenario { kind: ScenarioKind::ConditionalHet, units: 60, reps: 1, seed: 3 };
    let problem = draw_problem::<f64, _>(scenario.kind, scenario.units, &mut replication_rng(&scenario, 0));
    let path = dir.path().join("cov.json");
    write_problem(&path, &problem).unwrap();
    assert_eq!(read_problem(&path).unwrap(), problem);
    let out = run(&["--deterministic", "fit", s(&path), "--estimator", "ure-cov", "--out-dir", s(dir.path())]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let fit = fs::read_to_string(dir.path().join("fit.json")).unwrap();
    assert!(fit.contains("\"coefficient\""));
}

#[test]
fn iteration_limit_exits_with_code_two_after_writing_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&["--max-iters", "1", "fit", s(&data("problem.json")), "--out-dir", s(dir.path())]);
    assert_eq!(code(&out), 2, "{}", stderr(&out));
    let fit = fs::read_to_string(dir.path().join("fit.json")).unwrap();
    assert!(fit.contains("\"converged\": false"));
}

#[test]
fn forecast_requires_balanced_panel() {
    let dir = tempfile::tempdir().unwrap();
    let csv = unbalanced_panel(dir.path());
    let problem = dir.path().join("p.json");
    let out = run(&["preprocess", s(&csv), "--out", s(&problem)]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let out = run(&["forecast", s(&problem), "--out", s(&dir.path().join("f.csv"))]);
    assert_eq!(code(&out), 3);
    // Fitting the same unbalanced problem is fine.
    let out = run(&["fit", s(&problem), "--out-dir", s(&dir.path().join("fit"))]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let rows = fs::read_to_string(dir.path().join("fit/estimates.csv")).unwrap().lines().count();
    assert_eq!(rows, 1 + 11);
}

#[test]
fn forecast_rejects_single_period() {
    let dir = tempfile::tempdir().unwrap();
    let problem = dir.path().join("t1.json");
    fs::write(
        &problem,
        r#"{"T": 1, "k": 0, "units": [
            {"id": "a", "mask": [true], "y": ["1.0"], "sigma": [["0.5"]]},
            {"id": "b", "mask": [true], "y": ["-0.5"], "sigma": [["0.7"]]}
        ]}"#,
    )
    .unwrap();
    let out = run(&["forecast", s(&problem), "--out", s(&dir.path().join("f.csv"))]);
    assert_eq!(code(&out), 3);
    assert!(stderr(&out).contains("T >= 2"));
}

#[test]
fn malformed_problem_json_is_an_input_error() {
    let dir = tempfile::tempdir().unwrap();
    let problem = dir.path().join("bad.json");
    fs::write(&problem, r#"{"T": 2, "k": 0, "units": [{"id": "a", "mask": [true], "y": ["1"], "sigma": [["1"]]}]}"#)
        .unwrap();
    let out = run(&["fit", s(&problem), "--out-dir", s(dir.path())]);
    assert_eq!(code(&out), 1);
}

#[test]
fn malformed_panel_row_reports_line_number() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("bad.csv");
    fs::write(&csv, "unit,period,individual,outcome,x1\na,1,i1,0.5,1.0\na,1,i2,oops,2.0\n").unwrap();
    let out = run(&["preprocess", s(&csv), "--out", s(&dir.path().join("p.json"))]);
    assert_eq!(code(&out), 1);
    assert!(stderr(&out).contains("line 3"), "{}", stderr(&out));
}

#[test]
fn preprocess_round_trip_matches_in_memory_problem() {
    let dir = tempfile::tempdir().unwrap();
    let out_path = dir.path().join("p.json");
    let report = dir.path().join("r.json");
    let out = run(&["preprocess", s(&data("panel.csv")), "--out", s(&out_path), "--report", s(&report)]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let expected = to_normal_means(&fit_panel(&read_panel(&data("panel.csv")).unwrap()).unwrap(), false).unwrap();
    let got = read_problem(&out_path).unwrap();
    assert_eq!(got, expected);
    assert_eq!(got, read_problem(&data("problem.json")).unwrap());
    let rep: serde_json::Value = serde_json::from_str(&fs::read_to_string(&report).unwrap()).unwrap();
    assert_eq!(rep["cells"], 120);
    assert!(rep["sigma2_hat"].as_str().unwrap().parse::<f64>().unwrap() > 0.0);

    let demeaned = dir.path().join("d.json");
    let out = run(&["preprocess", s(&data("panel.csv")), "--out", s(&demeaned), "--demean"]);
    assert_eq!(code(&out), 0);
    let d = read_problem(&demeaned).unwrap();
    for t in 0..3 {
        let mean: f64 = d.units.iter().map(|u| u.y[t]).sum::<f64>() / d.units.len() as f64;
        assert!(mean.abs() < 1e-12);
    }
}

#[test]
fn panel_without_covariates_is_accepted() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("p0.csv");
    let mut text = String::from("unit,period,individual,outcome\n");
    for (k, unit) in ["a", "b", "c"].iter().enumerate() {
        for period in 1..=2 {
            for i in 0..3 {
                text.push_str(&format!("{unit},{period},{i},{}\n", (k + i * period) as f64 * 0.5));
            }
        }
    }
    fs::write(&csv, text).unwrap();
    let out = run(&["preprocess", s(&csv), "--out", s(&dir.path().join("p.json"))]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert_eq!(read_problem(&dir.path().join("p.json")).unwrap().periods, 2);
}

#[test]
fn simulate_is_seed_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let paths: Vec<PathBuf> = ["a.csv", "b.csv", "c.csv"].iter().map(|n| dir.path().join(n)).collect();
    for (p, seed, threads) in [(&paths[0], "5", "1"), (&paths[1], "5", "2"), (&paths[2], "6", "2")] {
        let out = run(&[
            "--seed",
            seed,
            "--threads",
            threads,
            "--analytic-gradient",
            "simulate",
            "--scenario",
            "normal-normal",
            "--J",
            "20:40:20",
            "--reps",
            "3",
            "--out",
            s(p),
        ]);
        assert_eq!(code(&out), 0, "{}", stderr(&out));
    }
    let a = fs::read_to_string(&paths[0]).unwrap();
    assert_eq!(a, fs::read_to_string(&paths[1]).unwrap());
    assert_ne!(a, fs::read_to_string(&paths[2]).unwrap());
    assert!(a.starts_with("scenario,J,estimator,mean_loss,mc_se,ratio_to_oracle,failures"));
    // Two sizes, four estimators.
    assert_eq!(a.lines().count(), 1 + 2 * 4);
}

#[test]
fn simulate_validates_scenario_and_range() {
    let dir = tempfile::tempdir().unwrap();
    let out_path = dir.path().join("x.csv");
    let out = run(&["simulate", "--scenario", "lognormal", "--J", "10", "--reps", "1", "--out", s(&out_path)]);
    assert_eq!(code(&out), 1);
    assert!(stderr(&out).contains("normal-normal"));
    let out = run(&["simulate", "--scenario", "normal-normal", "--J", "100:10:5", "--reps", "1", "--out", s(&out_path)]);
    assert_eq!(code(&out), 1);
}

#[test]
fn commands_leave_inputs_untouched() {
    let dir = tempfile::tempdir().unwrap();
    let panel = dir.path().join("panel.csv");
    let problem = dir.path().join("problem.json");
    let weights = dir.path().join("w.csv");
    fs::copy(data("panel.csv"), &panel).unwrap();
    fs::copy(data("problem.json"), &problem).unwrap();
    fs::write(&weights, "1,0,0\n0,2,0\n0,0,1\n").unwrap();
    let before: Vec<Vec<u8>> = [&panel, &problem, &weights].iter().map(|p| fs::read(p).unwrap()).collect();
    let out_dir = dir.path().join("out");
    assert_eq!(code(&run(&["preprocess", s(&panel), "--out", s(&dir.path().join("p2.json"))])), 0);
    assert_eq!(code(&run(&["fit", s(&problem), "--weights", s(&weights), "--out-dir", s(&out_dir)])), 0);
    assert_eq!(code(&run(&["forecast", s(&problem), "--out", s(&dir.path().join("f.csv"))])), 0);
    let after: Vec<Vec<u8>> = [&panel, &problem, &weights].iter().map(|p| fs::read(p).unwrap()).collect();
    assert_eq!(before, after);
}
