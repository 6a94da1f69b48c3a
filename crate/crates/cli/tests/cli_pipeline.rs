use std::fs;
use std::path::Path;
use std::process::Command;

use dcmil_cli::{load_config, run, EXIT_OK, EXIT_RUNTIME, EXIT_VALIDATION};
use dcmil_dataio::{ingest_tiles, MANIFEST_FILE};

const TINY: &str = "\
token_dim = 16
n_blocks = 3
n_heads = 2
tile_side_coarse = 16
pretrain_epochs = 2
joint_epochs = 1
epochs_c2 = 4
batch_c2 = 8
folds = 3
mc_passes = 6
synthetic.n_patients = 18
synthetic.n_normals = 2
synthetic.instances_min = 3
synthetic.instances_max = 5
";

fn dcmil(args: &[&str], dir: &Path) -> i32 {
    let mut argv = vec!["dcmil".to_string()];
    argv.extend(args.iter().map(|a| a.replace("{}", dir.to_str().unwrap())));
    run(argv)
}

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_dcmil"));
    c.env_remove("DCMIL_RUN_DIR").env("RUST_LOG", "error");
    c
}

fn write_config(dir: &Path) {
    fs::write(dir.join("tiny.cfg"), TINY).unwrap();
}

#[test]
fn staged_commands_reproduce_the_crossval_run() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    write_config(d);
    let cfg = "--config {}/tiny.cfg";
    let step = |rest: &str| {
        let args: Vec<&str> = cfg.split(' ').chain(rest.split(' ')).collect();
        dcmil(&args, d)
    };
    assert_eq!(step("generate-data --out {}/data"), EXIT_OK);
    assert!(d.join("data").join(MANIFEST_FILE).is_file());
    for cmd in ["train-c1", "train-c2", "evaluate", "uncertainty", "compare-normal", "report"] {
        assert_eq!(step(&format!("{cmd} --data {{}}/data --out {{}}/run")), EXIT_OK, "{cmd}");
    }

    // Independent end-to-end run on the same cohort.
    let (run_cfg, _) = load_config(Some(TINY), None).unwrap();
    let bags = ingest_tiles(&d.join("data"), &d.join("data").join(MANIFEST_FILE), run_cfg.risk_threshold_months).unwrap();
    let report = dcmil_trainer::crossval_run(&bags, &run_cfg).unwrap();
    let staged = fs::read_to_string(d.join("run/metrics.csv")).unwrap();
    assert_eq!(staged, report.metrics_csv());

    let run = d.join("run");
    for f in [
        "config.cfg",
        "folds.json",
        "fold0/c1_history.csv",
        "fold2/c2_history.csv",
        "plots/km_pooled.svg",
        "exports/uncertainty_fold1.csv",
        "exports/uncertainty_summary.csv",
        "plots/uncertainty_fold0.svg",
        "exports/distances_fold2.csv",
        "plots/distance_heatmap_fold0.svg",
        "report/ci_table.md",
        "report/km.svg",
        "report/indicators_fold0.svg",
        "report/indicators_fold2.svg",
    ] {
        assert!(run.join(f).is_file(), "{f}");
    }
    let table = fs::read_to_string(run.join("report/ci_table.md")).unwrap();
    assert!(table.contains(&format!("{:.6}", report.mean_c_index)));
    let unc = fs::read_to_string(run.join("exports/uncertainty_fold0.csv")).unwrap();
    let held_out_instances: usize = report.folds[0]
        .test
        .iter()
        .map(|p| bags.iter().find(|b| b.patient_id() == p.patient_id).unwrap())
        .filter(|b| b.risk_status().label().is_some())
        .map(|b| b.len())
        .sum();
    assert_eq!(unc.lines().count() - 1, held_out_instances);

    // A single-fold re-run on a fresh directory matches the same fold.
    assert_eq!(step("train-c1 --fold 1 --data {}/data --out {}/one"), EXIT_OK);
    assert_eq!(step("train-c2 --fold 1 --data {}/data --out {}/one"), EXIT_OK);
    assert_eq!(
        fs::read(run.join("fold1/c2.json")).unwrap(),
        fs::read(d.join("one/fold1/c2.json")).unwrap()
    );
    // The run directory is pinned to its config.
    assert_eq!(step("train-c1 --seed 99 --data {}/data --out {}/run"), EXIT_VALIDATION);
}

#[test]
fn data_generation_is_idempotent() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    write_config(d);
    for out in ["a", "b"] {
        let args = ["--config", "{}/tiny.cfg", "generate-data", "--seed", "4", "--out"];
        let mut v: Vec<String> = args.iter().map(|s| s.to_string()).collect();
        v.push(format!("{{}}/{out}"));
        let refs: Vec<&str> = v.iter().map(String::as_str).collect();
        assert_eq!(dcmil(&refs, d), EXIT_OK);
    }
    for f in [MANIFEST_FILE, "config.cfg", "ground_truth.csv", "tiles/T0003/i000_s3.png"] {
        assert_eq!(fs::read(d.join("a").join(f)).unwrap(), fs::read(d.join("b").join(f)).unwrap(), "{f}");
    }
    let cfg = fs::read_to_string(d.join("a/config.cfg")).unwrap();
    assert!(cfg.contains("rng_seed = 4"));
}

#[test]
fn evaluate_without_checkpoints_is_a_validation_error() {
    let tmp = tempfile::tempdir().unwrap();
    let out = bin()
        .args(["evaluate", "--data", "nowhere", "--out"])
        .arg(tmp.path())
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(EXIT_VALIDATION));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("missing artifact") && err.contains("checkpoint"), "{err}");
}

#[test]
fn report_needs_metrics() {
    let tmp = tempfile::tempdir().unwrap();
    let out = bin().args(["report", "--out"]).arg(tmp.path()).output().unwrap();
    assert_eq!(out.status.code(), Some(EXIT_VALIDATION));
    assert!(String::from_utf8_lossy(&out.stderr).contains("metrics"));
}

#[test]
fn unknown_flag_prints_usage() {
    let out = bin().args(["evaluate", "--bogus"]).output().unwrap();
    assert_eq!(out.status.code(), Some(EXIT_VALIDATION));
    assert!(String::from_utf8_lossy(&out.stderr).contains("Usage"));
    let out = bin().args(["frobnicate"]).output().unwrap();
    assert_eq!(out.status.code(), Some(EXIT_VALIDATION));
    let out = bin().arg("--help").output().unwrap();
    assert_eq!(out.status.code(), Some(EXIT_OK));
    assert!(String::from_utf8_lossy(&out.stdout).contains("compare-normal"));
}

#[test]
fn output_root_comes_from_flag_or_environment() {
    let out = bin().arg("report").output().unwrap();
    assert_eq!(out.status.code(), Some(EXIT_VALIDATION));
    assert!(String::from_utf8_lossy(&out.stderr).contains("DCMIL_RUN_DIR"));

    let tmp = tempfile::tempdir().unwrap();
    write_config(tmp.path());
    let out = bin()
        .env("DCMIL_RUN_DIR", tmp.path().join("env"))
        .args(["generate-data", "--config"])
        .arg(tmp.path().join("tiny.cfg"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(EXIT_OK));
    assert!(tmp.path().join("env").join(MANIFEST_FILE).is_file());
}

#[test]
fn bad_config_and_corrupt_tiles_map_to_distinct_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    fs::write(d.join("bad.cfg"), "token_dim = -3\n").unwrap();
    let code = dcmil(&["--config", "{}/bad.cfg", "generate-data", "--out", "{}/x"], d);
    assert_eq!(code, EXIT_VALIDATION);
    assert_eq!(dcmil(&["--config", "{}/absent.cfg", "generate-data", "--out", "{}/x"], d), EXIT_VALIDATION);

    write_config(d);
    assert_eq!(dcmil(&["--config", "{}/tiny.cfg", "generate-data", "--out", "{}/data"], d), EXIT_OK);
    fs::write(d.join("data/tiles/T0000/i000_s1.png"), b"not an image").unwrap();
    let code = dcmil(&["--config", "{}/tiny.cfg", "train-c1", "--data", "{}/data", "--out", "{}/run"], d);
    assert_eq!(code, EXIT_RUNTIME);
}
