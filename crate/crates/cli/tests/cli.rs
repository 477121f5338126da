//! End-to-end checks of the `unlearn` binary: every verb, flag and
//! environment overrides, output schema, and rerun determinism.

use std::path::Path;
use std::process::{Command, Output};
use unlearn_core::data::{
    apply_badnet, generate_dataset, sample_forget_set, save_dataset, GenConfig, ManipulationSpec,
};
use unlearn_core::model::{save_checkpoint, Arch};
use unlearn_core::optim::SgdHyper;
use unlearn_core::train::train_model;

const SCHEMA: &str = "method,manipulation,n,sf_fraction,repetition,seed,acc_dm_test,\
                      acc_sm_clean,acc_utility,val_acc,deletion_change,selection_score,\
                      wall_time_seconds,hyperparams_json";

fn unlearn() -> Command {
    Command::new(env!("CARGO_BIN_EXE_unlearn"))
}

fn run_checked(cmd: &mut Command) -> Output {
    let out = cmd.output().expect("spawn unlearn");
    assert!(
        out.status.success(),
        "command failed\nstdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

/// A config small enough that a full run takes seconds.
fn micro_config() -> &'static str {
    r#"{
        "gen": {
            "num_classes": 4, "height": 8, "width": 8,
            "train": 160, "val": 32, "test": 32,
            "confusable_pair": [1, 3]
        },
        "arch": {"kind": "mlp", "input": 64, "hidden": 16, "num_classes": 4},
        "hyper": {"total_steps": 40, "batch_size": 32},
        "manipulations": [{"kind": "poison", "fraction": 0.1}],
        "sf_fractions": [0.5, 1.0],
        "methods": ["EU", "SSD"],
        "method_defaults": {"steps": 10, "scrub_forget_steps": 5},
        "grids": {"ssd_alphas": [1.0, 10.0], "ssd_gamma_factors": [1.0]},
        "master_seed": 7
    }"#
}

fn read_rows(path: &Path) -> (String, Vec<csv::StringRecord>) {
    let mut reader = csv::Reader::from_path(path).expect("open csv");
    let header = reader.headers().expect("header").iter().collect::<Vec<_>>().join(",");
    let rows = reader.records().map(|r| r.expect("row")).collect();
    (header, rows)
}

#[test]
fn selftest_reports_every_check_passing() {
    let out = run_checked(unlearn().arg("selftest"));
    let stdout = String::from_utf8_lossy(&out.stdout);
    let passes = stdout.lines().filter(|l| l.starts_with("PASS ")).count();
    assert!(passes >= 11, "expected at least 11 PASS lines, got {passes}:\n{stdout}");
    assert!(!stdout.contains("FAIL"), "unexpected failure:\n{stdout}");
}

#[test]
fn run_writes_schema_exact_outputs_and_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("config.json");
    std::fs::write(&config, micro_config()).unwrap();

    let out_a = dir.path().join("a");
    run_checked(unlearn().args(["run", "--config"]).arg(&config).arg("--out").arg(&out_a));
    for file in ["results.csv", "grid.csv", "manifest.json"] {
        assert!(out_a.join(file).exists(), "missing {file}");
    }

    let (header, rows) = read_rows(&out_a.join("results.csv"));
    assert_eq!(header, SCHEMA);
    // Baseline row plus 2 methods x 2 fractions.
    assert_eq!(rows.len(), 5);
    assert!(rows.iter().any(|r| &r[0] == "None"));

    let (_, grid) = read_rows(&out_a.join("grid.csv"));
    // Per fraction: 1 exact-retrain point and 2 dampening points.
    assert_eq!(grid.len(), 6);

    let out_b = dir.path().join("b");
    run_checked(unlearn().args(["run", "--config"]).arg(&config).arg("--out").arg(&out_b));
    let (_, rows_b) = read_rows(&out_b.join("results.csv"));
    let wall_time_col = 12;
    for (a, b) in rows.iter().zip(rows_b.iter()) {
        for i in 0..a.len() {
            if i != wall_time_col {
                assert_eq!(&a[i], &b[i], "column {i} differs between reruns");
            }
        }
    }
}

#[test]
fn run_respects_flag_and_env_overrides() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("config.json");
    std::fs::write(&config, micro_config()).unwrap();

    // Flags narrow the method and fraction lists.
    let out_flags = dir.path().join("flags");
    run_checked(
        unlearn()
            .args(["run", "--config"])
            .arg(&config)
            .arg("--out")
            .arg(&out_flags)
            .args(["--methods", "EU", "--fractions", "1.0", "--seed", "5"]),
    );
    let (_, rows) = read_rows(&out_flags.join("results.csv"));
    assert_eq!(rows.len(), 2);
    assert!(rows.iter().all(|r| &r[0] == "None" || &r[0] == "EU"));

    // The same overrides travel through the environment.
    let out_env = dir.path().join("env");
    run_checked(
        unlearn()
            .arg("run")
            .env("UNLEARN_CONFIG", &config)
            .env("UNLEARN_OUT", &out_env)
            .env("UNLEARN_METHODS", "EU")
            .env("UNLEARN_FRACTIONS", "1.0")
            .env("UNLEARN_SEED", "5"),
    );
    let (_, env_rows) = read_rows(&out_env.join("results.csv"));
    assert_eq!(rows.len(), env_rows.len());
    for (a, b) in rows.iter().zip(env_rows.iter()) {
        assert_eq!(&a[5], &b[5], "seed override should match across flag and env runs");
    }
}

#[test]
fn summarize_builds_per_metric_tables() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("config.json");
    std::fs::write(&config, micro_config()).unwrap();
    let out = dir.path().join("run");
    run_checked(unlearn().args(["run", "--config"]).arg(&config).arg("--out").arg(&out));

    let summary = dir.path().join("summary");
    run_checked(
        unlearn()
            .args(["summarize", "--results"])
            .arg(out.join("results.csv"))
            .arg("--out")
            .arg(&summary),
    );
    let table = summary.join("summary_acc_dm_test_poison.csv");
    assert!(table.exists(), "missing {}", table.display());
    let (header, rows) = read_rows(&table);
    assert_eq!(header, "sf_fraction,None,EU,SSD");
    assert_eq!(rows.len(), 2);
}

#[test]
fn eval_prints_one_csv_row_for_a_saved_model() {
    let dir = tempfile::tempdir().unwrap();
    let gen = GenConfig {
        num_classes: 4,
        height: 8,
        width: 8,
        train: 120,
        val: 24,
        test: 24,
        confusable_pair: (1, 3),
        ..GenConfig::default()
    };
    let data = generate_dataset(&gen, 11).unwrap();
    let md = apply_badnet(&data, &ManipulationSpec::poison(12, 12)).unwrap();
    let md = sample_forget_set(&md, 0.5, 13).unwrap();
    let dataset_path = dir.path().join("data.cmud");
    save_dataset(&md, &dataset_path).unwrap();

    let arch = Arch::Mlp { input: 64, hidden: 12, num_classes: 4 };
    let hyper = SgdHyper { total_steps: 30, batch_size: 32, ..SgdHyper::default() };
    let model = train_model(&arch, &md.data.train, &hyper, 14).unwrap();
    let checkpoint_path = dir.path().join("model.ckpt");
    save_checkpoint(&model, &checkpoint_path).unwrap();

    let out = run_checked(
        unlearn()
            .args(["eval", "--checkpoint"])
            .arg(&checkpoint_path)
            .arg("--dataset")
            .arg(&dataset_path),
    );
    let stdout = String::from_utf8(out.stdout).unwrap();
    let mut reader = csv::Reader::from_reader(stdout.as_bytes());
    assert_eq!(reader.headers().unwrap().iter().collect::<Vec<_>>().join(","), SCHEMA);
    let rows: Vec<_> = reader.records().map(|r| r.unwrap()).collect();
    assert_eq!(rows.len(), 1);
    assert_eq!(&rows[0][0], "Eval");
    assert_eq!(&rows[0][3], "0.5");
}

#[test]
fn missing_config_fails_with_an_error() {
    let out = unlearn()
        .args(["run", "--config", "/nonexistent/config.json"])
        .output()
        .expect("spawn unlearn");
    assert!(!out.status.success());
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("error"), "stderr should explain the failure: {stderr}");
}
