use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const ZERO_DYNAMICS: &str = r#"
schema_version = 1
experiment = "simulate"
seed = 5

[dynamics]
dim = 1
sigma = 0.5
horizon = 1.0
dt = 0.01
followers = 3
y0 = [[0.0]]
initial_law = { kind = "gaussian", mean = [0.0], std = 1.0 }
"#;

fn herdsim(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_herdsim"))
        .args(args)
        .env_remove("HERDSIM_THREADS")
        .output()
        .expect("binary runs")
}

fn write_config(dir: &Path, name: &str, text: &str) -> PathBuf {
    let path = dir.join(name);
    fs::write(&path, text).unwrap();
    path
}

fn run_config(config: &Path, out: &Path, extra: &[&str]) -> Output {
    let mut args = vec!["run", "--config", config.to_str().unwrap(), "--out", out.to_str().unwrap()];
    args.extend_from_slice(extra);
    herdsim(&args)
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn workspace_file(rel: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..").join(rel)
}

#[test]
fn zero_dynamics_simulation_writes_one_row_per_node_and_particle() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "sim.toml", ZERO_DYNAMICS);
    let out = dir.path().join("run");
    let o = run_config(&cfg, &out, &[]);
    assert!(o.status.success(), "{}", stderr(&o));

    let csv = fs::read_to_string(out.join("trajectory.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("t,kind,id,x1"));
    let rows: Vec<&str> = lines.collect();
    // 3 followers + 1 herder, 101 nodes each.
    assert_eq!(rows.len(), 101 * 4);
    for id in 0..3 {
        let prefix = format!(",follower,{id},");
        assert_eq!(rows.iter().filter(|r| r.contains(&prefix)).count(), 101);
    }
    assert_eq!(rows.iter().filter(|r| r.contains(",herder,0,")).count(), 101);
    // The uncontrolled herder never moves.
    assert!(rows.iter().filter(|r| r.contains(",herder,")).all(|r| r.ends_with(",0")));

    let summary = fs::read_to_string(out.join("summary.txt")).unwrap();
    assert!(summary.ends_with("result: PASS\n"), "{summary}");
    let manifest: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["experiment"], "simulate");
    assert_eq!(manifest["config_hash"].as_str().unwrap().len(), 64);
    assert_eq!(manifest["artifacts"][0]["path"], "config.toml");
    assert_eq!(manifest["artifacts"][1]["path"], "trajectory.csv");
    assert!(manifest["wall_clock_seconds"].as_f64().unwrap() >= 0.0);
    assert!(!out.join("trajectory.csv.tmp").exists());
}

#[test]
fn negative_sigma_is_rejected_by_name() {
    let dir = tempfile::tempdir().unwrap();
    let bad = ZERO_DYNAMICS.replace("sigma = 0.5", "sigma = -0.5").replace("followers = 3", "followers = 0");
    let cfg = write_config(dir.path(), "bad.toml", &bad);
    let out = dir.path().join("run");
    let o = run_config(&cfg, &out, &[]);
    assert!(!o.status.success());
    let err = stderr(&o);
    assert!(err.contains("sigma"), "{err}");
    // Every violated field is listed, not only the first.
    assert!(err.contains("dynamics.followers"), "{err}");
    assert!(err.contains("2 configuration error(s)"), "{err}");
    assert!(!out.exists(), "nothing is written before validation passes");
}

#[test]
fn unknown_keys_are_errors() {
    let dir = tempfile::tempdir().unwrap();
    let typo = ZERO_DYNAMICS.replace("followers = 3", "folowers = 3");
    let cfg = write_config(dir.path(), "typo.toml", &typo);
    let o = run_config(&cfg, &dir.path().join("run"), &[]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("folowers"), "{}", stderr(&o));
}

#[test]
fn reruns_are_byte_identical_across_thread_counts() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = workspace_file("configs/simulate.toml");
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    assert!(run_config(&cfg, &a, &["--threads", "1"]).status.success());
    let o = Command::new(env!("CARGO_BIN_EXE_herdsim"))
        .args(["run", "--config", cfg.to_str().unwrap(), "--out", b.to_str().unwrap()])
        .env("HERDSIM_THREADS", "3")
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", stderr(&o));
    for f in ["config.toml", "trajectory.csv", "summary.txt"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }

    let c = dir.path().join("c");
    assert!(run_config(&cfg, &c, &["--seed", "43"]).status.success());
    assert_ne!(fs::read(a.join("trajectory.csv")).unwrap(), fs::read(c.join("trajectory.csv")).unwrap());
}

#[test]
fn report_is_deterministic_and_names_missing_files() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "sim.toml", ZERO_DYNAMICS);
    let out = dir.path().join("run");
    let manifest = out.join("manifest.json");
    let manifest = manifest.to_str().unwrap();

    assert!(run_config(&cfg, &out, &[]).status.success());
    let first = herdsim(&["report", manifest]);
    assert!(first.status.success(), "{}", stderr(&first));
    let text = String::from_utf8(first.stdout.clone()).unwrap();
    assert!(text.contains("PASS finite_states"), "{text}");
    assert!(text.ends_with("result: PASS\n"), "{text}");

    assert!(run_config(&cfg, &out, &[]).status.success());
    assert_eq!(herdsim(&["report", manifest]).stdout, first.stdout);

    fs::remove_file(out.join("trajectory.csv")).unwrap();
    let partial = herdsim(&["report", manifest]);
    assert!(!partial.status.success());
    let text = String::from_utf8(partial.stdout).unwrap();
    assert!(text.contains("MISSING trajectory.csv"), "{text}");
    assert!(text.contains("PASS finite_states"), "the rest of the report is still printed: {text}");
}

#[test]
fn convert_round_trips_between_csv_and_herd1() {
    let dir = tempfile::tempdir().unwrap();
    let text = ZERO_DYNAMICS.to_string() + "\n[simulate]\nformat = \"herd1\"\n";
    let cfg = write_config(dir.path(), "sim.toml", &text);
    let bin_run = dir.path().join("bin");
    assert!(run_config(&cfg, &bin_run, &[]).status.success());
    let csv_cfg = write_config(dir.path(), "sim_csv.toml", ZERO_DYNAMICS);
    let csv_run = dir.path().join("csv");
    assert!(run_config(&csv_cfg, &csv_run, &[]).status.success());

    let herd1 = bin_run.join("trajectory.herd1");
    assert_eq!(&fs::read(&herd1).unwrap()[..5], b"HERD1");
    let converted = dir.path().join("converted.csv");
    let o = herdsim(&["convert", herd1.to_str().unwrap(), converted.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(fs::read(&converted).unwrap(), fs::read(csv_run.join("trajectory.csv")).unwrap());

    let back = dir.path().join("back.bin");
    let o = herdsim(&["convert", converted.to_str().unwrap(), back.to_str().unwrap(), "--to", "herd1"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(fs::read(&back).unwrap(), fs::read(&herd1).unwrap());

    let o = herdsim(&["convert", converted.to_str().unwrap(), dir.path().join("x.dat").to_str().unwrap()]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("--to"));
}

#[test]
fn chaos_rate_config_reports_a_decaying_slope() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("chaos");
    let o = run_config(&workspace_file("configs/chaos_rate.toml"), &out, &[]);
    assert!(o.status.success(), "{}\n{}", String::from_utf8_lossy(&o.stdout), stderr(&o));
    let csv = fs::read_to_string(out.join("chaos.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("N,median_error,min_error,max_error,slope"));
    let rows: Vec<Vec<f64>> = lines
        .map(|l| l.split(',').map(|v| v.parse().unwrap()).collect())
        .collect();
    assert_eq!(rows.len(), 7);
    assert!(rows[0][4] <= -0.35, "slope {}", rows[0][4]);
}
