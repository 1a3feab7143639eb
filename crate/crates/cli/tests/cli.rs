use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn specrep(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_specrep")).args(args).output().expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).unwrap()
}

fn write_config(dir: &Path, text: &str) -> String {
    let path = dir.join("runs.cfg");
    fs::write(&path, text).unwrap();
    path.to_str().unwrap().to_string()
}

const TWO_RUNS: &str = "# two quick runs\nrun_id = sc\nobjective = spectral_contrastive\n---\nrun_id = minc\nobjective = minc\nlearner = minc\nmax_iters = 2000\n";

#[test]
fn gen_writes_a_valid_table() {
    let o = specrep(&["gen", "--fixture", "block4"]);
    assert!(o.status.success());
    let text = stdout(&o);
    let total: f64 = text
        .lines()
        .filter(|l| !l.starts_with('#') && !l.trim().is_empty())
        .flat_map(|l| l.split(',').filter_map(|v| v.trim().parse::<f64>().ok()).collect::<Vec<_>>())
        .sum();
    assert!((total - 1.0).abs() < 1e-12, "{text}");

    let a = stdout(&specrep(&["gen", "--fixture", "random:4:3:1", "--seed", "9", "--format", "json"]));
    let b = stdout(&specrep(&["gen", "--fixture", "random:4:3:9", "--format", "json"]));
    assert_eq!(a, b);
}

#[test]
fn train_then_eval_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), TWO_RUNS);
    let out = dir.path().join("out");
    let o = specrep(&["train", "--config", &cfg, "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    for run in ["sc", "minc"] {
        assert!(out.join(run).join("trace.csv").exists());
        assert!(out.join(run).join("config.json").exists());
    }
    let params = out.join("sc").join("params.json");
    let e = specrep(&["eval", "--params", params.to_str().unwrap(), "--fixture", "block4", "--format", "json"]);
    assert!(e.status.success());
    let m: serde_json::Value = serde_json::from_str(&stdout(&e)).unwrap();
    assert!(m["principal_angle"].as_f64().unwrap() <= 1e-3);

    let bad = specrep(&["eval", "--params", params.to_str().unwrap(), "--fixture", "lowrank"]);
    assert!(!bad.status.success());
}

#[test]
fn repeated_runs_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), TWO_RUNS);
    for format in ["csv", "json"] {
        let a = dir.path().join(format!("a-{format}"));
        let b = dir.path().join(format!("b-{format}"));
        for d in [&a, &b] {
            assert!(specrep(&["train", "--config", &cfg, "--format", format, "--out", d.to_str().unwrap()])
                .status
                .success());
        }
        for run in ["sc", "minc"] {
            for file in [format!("trace.{format}"), "params.json".to_string()] {
                assert_eq!(fs::read(a.join(run).join(&file)).unwrap(), fs::read(b.join(run).join(&file)).unwrap());
            }
        }
    }
    let one = stdout(&specrep(&["sweep", "--config", &cfg, "--parallelism", "1"]));
    let many = stdout(&specrep(&["sweep", "--config", &cfg, "--parallelism", "4"]));
    assert_eq!(one, many);
    assert!(one.starts_with("run_id,objective,learner"));
}

#[test]
fn seed_flag_overrides_every_run() {
    let dir = tempfile::tempdir().unwrap();
    let cfg =
        write_config(dir.path(), "run_id = a\nmax_iters = 3\nseed = 1\n---\nrun_id = b\nmax_iters = 3\nseed = 2\n");
    let csv = stdout(&specrep(&["sweep", "--config", &cfg, "--seed", "42"]));
    let seeds: Vec<&str> = csv.lines().skip(1).map(|l| l.split(',').nth(5).unwrap()).collect();
    assert_eq!(seeds, ["42", "42"]);
}

#[test]
fn any_failed_run_fails_the_command() {
    let dir = tempfile::tempdir().unwrap();
    let cfg =
        write_config(dir.path(), "run_id = ok\nmax_iters = 5\n---\nrun_id = bad\nobjective = minc\nlearner = byol\n");
    let o = specrep(&["sweep", "--config", &cfg]);
    assert!(!o.status.success());
    let csv = stdout(&o);
    assert_eq!(csv.lines().count(), 3, "failed runs still get a row");
    assert!(!specrep(&["train", "--config", &cfg]).status.success());
    assert!(!specrep(&["sweep"]).status.success(), "missing --config");
}

#[test]
fn classic_and_downstream_subcommands() {
    let dir = tempfile::tempdir().unwrap();
    let pts = dir.path().join("line.csv");
    fs::write(&pts, "0\n1\n2\n").unwrap();
    let o = specrep(&["classic", "--method", "mds", "--points", pts.to_str().unwrap(), "-d", "1", "--format", "json"]);
    assert!(o.status.success());
    let v: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert!((v["eigenvalues"][0].as_f64().unwrap() - 4.0).abs() < 1e-10);

    let o = specrep(&["classic", "--method", "cca", "--fixture", "table2x2", "-d", "1"]);
    assert!(o.status.success());
    assert!((stdout(&o).lines().nth(1).unwrap().parse::<f64>().unwrap() - 0.6).abs() < 1e-9);

    let o = specrep(&["downstream", "--task", "iv", "--format", "json"]);
    let v: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert!((v["f_hat"][1].as_f64().unwrap() - 1.0).abs() < 1e-4 && v["f_hat"][0].as_f64().unwrap().abs() < 1e-4);

    let o = specrep(&["downstream", "--task", "lstd", "--format", "json"]);
    let v: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert!((v["q_hat"][0].as_f64().unwrap() - 4.0 / 3.0).abs() < 1e-6);

    let out = dir.path().join("ds");
    let o = specrep(&["downstream", "--task", "regression", "--fixture", "lowrank", "--out", out.to_str().unwrap()]);
    assert!(o.status.success());
    let text = fs::read_to_string(out.join("downstream.csv")).unwrap();
    let mse: f64 = text.lines().nth(1).unwrap().split(',').next().unwrap().parse().unwrap();
    assert!(mse <= 1e-10);
}

#[test]
fn selftest_passes() {
    let o = specrep(&["selftest", "--points", "3"]);
    assert!(o.status.success(), "{}", stdout(&o));
    assert!(stdout(&o).lines().skip(1).all(|l| l.ends_with(",ok")));
}
