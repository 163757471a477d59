use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use metacate::io;
use metacate::sim::{frozen_target, gen_replication, SimConfig, COVARIATE_NAMES};
use tempfile::TempDir;

fn metacate(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_metacate"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Four simulated trial files and the 100 frozen target profiles.
fn write_inputs(dir: &Path) -> (Vec<PathBuf>, PathBuf) {
    let cfg = SimConfig { k_studies: 4, n_per_study: 200, ..SimConfig::default() };
    let (trials, _) = gen_replication(&cfg, 0);
    let files = trials
        .iter()
        .map(|t| {
            let p = dir.join(format!("trial{}.csv", t.study_id()));
            fs::write(&p, io::write_trials(std::slice::from_ref(t))).unwrap();
            p
        })
        .collect();
    let names: Vec<String> = COVARIATE_NAMES.iter().map(|s| s.to_string()).collect();
    let (profiles, _) = frozen_target(&cfg);
    let pp = dir.join("profiles.csv");
    fs::write(&pp, io::write_profiles(&names, &profiles)).unwrap();
    (files, pp)
}

fn estimate(out: &Path, trials: &[PathBuf], profiles: &Path, extra: &[&str]) -> Output {
    let mut args = vec!["--seed", "7", "--out-dir", path(out), "estimate", "--profiles", path(profiles), "--trials"];
    args.extend(trials.iter().map(|t| path(t)));
    args.extend_from_slice(extra);
    metacate(&args)
}

fn assert_ok(o: &Output) {
    assert!(o.status.success(), "stderr: {}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn estimate_writes_every_profile_study_pair_deterministically() {
    let dir = TempDir::new().unwrap();
    let (trials, profiles) = write_inputs(dir.path());
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        assert_ok(&estimate(out, &trials, &profiles, &[]));
    }
    let csv = fs::read_to_string(a.join("aggregates.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 400);
    assert_eq!(csv.lines().next().unwrap(), io::AGGREGATE_HEADER);
    assert_eq!(csv, fs::read_to_string(b.join("aggregates.csv")).unwrap());
    let reparsed = io::parse_aggregate_csv("x", &csv).unwrap();
    assert_eq!(io::write_aggregates(&reparsed), csv);
    assert!(a.join("coverage_flags.csv").exists());
    let manifest = fs::read_to_string(a.join("manifest.json")).unwrap();
    assert!(manifest.contains("\"subcommand\": \"estimate\""));
    assert!(manifest.contains("aggregates.csv"));
}

#[test]
fn forest_estimate_is_reproducible() {
    let dir = TempDir::new().unwrap();
    let (trials, profiles) = write_inputs(dir.path());
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        assert_ok(&estimate(out, &trials, &profiles, &["--stage1", "forest", "--trees", "40"]));
    }
    assert_eq!(
        fs::read(a.join("aggregates.csv")).unwrap(),
        fs::read(b.join("aggregates.csv")).unwrap()
    );
}

#[test]
fn missing_treatment_column_is_a_schema_error() {
    let dir = TempDir::new().unwrap();
    let (_, profiles) = write_inputs(dir.path());
    let bad = dir.path().join("bad.csv");
    fs::write(&bad, "study_id,y,age,sex,smoking,weight,madrs\n1,0.5,0,1,0,0,0\n").unwrap();
    let o = estimate(dir.path(), &[bad], &profiles, &[]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("`a`"));
}

#[test]
fn unparsable_cell_reports_its_line() {
    let dir = TempDir::new().unwrap();
    let (_, profiles) = write_inputs(dir.path());
    let bad = dir.path().join("bad.csv");
    fs::write(&bad, "study_id,y,a,age,sex,smoking,weight,madrs\n1,0.5,1,0,1,0,0,0\n1,oops,0,0,1,0,0,0\n").unwrap();
    let o = estimate(dir.path(), &[bad], &profiles, &[]);
    assert_eq!(o.status.code(), Some(2));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("line 3") && err.contains("`y`"), "{err}");
}

#[test]
fn predict_flags_signs_and_handles_two_studies() {
    let dir = TempDir::new().unwrap();
    let agg = dir.path().join("agg.csv");
    fs::write(
        &agg,
        "profile_id,study_id,tau_hat,se2\n\
         1,1,1,0.0001\n1,2,1.01,0.0001\n1,3,0.99,0.0001\n\
         2,1,-1,1\n2,2,3,1\n2,3,1,1\n\
         3,1,0,0.1\n3,2,1,0.1\n",
    )
    .unwrap();
    let o = metacate(&["--out-dir", path(dir.path()), "predict", "--aggregates", path(&agg), "--svg"]);
    assert_ok(&o);
    assert!(String::from_utf8_lossy(&o.stderr).contains("profile 3"));
    let csv = fs::read_to_string(dir.path().join("predictions.csv")).unwrap();
    let rows = io::parse_prediction_csv("p", &csv).unwrap();
    assert_eq!(rows[0].flag, io::SignFlag::Positive);
    assert_eq!(rows[1].flag, io::SignFlag::CrossesZero);
    assert_eq!(rows[2].flag, io::SignFlag::NoInterval);
    assert!(csv.lines().nth(3).unwrap().ends_with(",,,no_pi"));
    assert_eq!(io::write_predictions(&rows), csv);
    let svg = fs::read_to_string(dir.path().join("predictions.svg")).unwrap();
    assert_eq!(svg.matches("class=\"center\"").count(), 3);
    assert_eq!(svg.matches("class=\"pi\"").count(), 2);
}

#[test]
fn single_study_profile_is_a_runtime_error() {
    let dir = TempDir::new().unwrap();
    let agg = dir.path().join("agg.csv");
    fs::write(&agg, "profile_id,study_id,tau_hat,se2\n1,1,1,0.01\n").unwrap();
    let o = metacate(&["--out-dir", path(dir.path()), "predict", "--aggregates", path(&agg)]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn compare_intervals_draws_k_plus_one_segments() {
    let dir = TempDir::new().unwrap();
    let (trials, profiles) = write_inputs(dir.path());
    assert_ok(&estimate(dir.path(), &trials, &profiles, &[]));
    let agg = dir.path().join("aggregates.csv");
    assert_ok(&metacate(&["--out-dir", path(dir.path()), "predict", "--aggregates", path(&agg)]));
    let preds = dir.path().join("predictions.csv");
    let args = ["--out-dir", path(dir.path()), "compare-intervals", "--aggregates", path(&agg), "--predictions", path(&preds), "--profiles", "5"];
    assert_ok(&metacate(&args));
    let svg = fs::read_to_string(dir.path().join("compare.svg")).unwrap();
    assert_eq!(svg.matches("class=\"study-ci\"").count(), 4);
    assert_eq!(svg.matches("class=\"target-pi\"").count(), 1);
    assert_ok(&metacate(&args));
    assert_eq!(svg, fs::read_to_string(dir.path().join("compare.svg")).unwrap());

    let unknown = ["--out-dir", path(dir.path()), "compare-intervals", "--aggregates", path(&agg), "--predictions", path(&preds), "--profiles", "999"];
    let o = metacate(&unknown);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("999"));
}

#[test]
fn simulate_emits_one_box_per_method_and_profile_rows() {
    let dir = TempDir::new().unwrap();
    let cfg = dir.path().join("sim.txt");
    fs::write(
        &cfg,
        "k_studies = 4\nn_per_study = 120\nn_replications = 3\nmethods = linear, oracle\n",
    )
    .unwrap();
    let run = |out: &Path| {
        assert_ok(&metacate(&["--seed", "11", "--out-dir", path(out), "simulate", "--config", path(&cfg)]));
        fs::read_to_string(out.join("metrics.csv")).unwrap()
    };
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    let csv = run(&a);
    assert_eq!(csv, run(&b));
    assert_eq!(csv.lines().count(), 1 + 100 * 2);
    let svg = fs::read_to_string(a.join("coverage.svg")).unwrap();
    assert_eq!(svg.matches("class=\"box\"").count(), 2);
    let manifest = fs::read_to_string(a.join("manifest.json")).unwrap();
    assert!(manifest.contains("\"master_seed\": 11"));
}

#[test]
fn config_errors_exit_three_and_name_the_key() {
    let dir = TempDir::new().unwrap();
    let cfg = dir.path().join("sim.txt");
    fs::write(&cfg, "k_studies = many\n").unwrap();
    let o = metacate(&["--out-dir", path(dir.path()), "simulate", "--config", path(&cfg)]);
    assert_eq!(o.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&o.stderr).contains("k_studies"));
}
