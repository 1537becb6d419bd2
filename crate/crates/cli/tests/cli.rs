use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_hawkes-lob"));
    c.env_remove("HAWKES_LOB_SEED").env_remove("HAWKES_LOB_THREADS");
    c
}

fn config(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs").join(name)
}

fn run(args: &[&str], out: &Path) -> Output {
    bin().args(args).arg("--out").arg(out).output().unwrap()
}

const SMALL_CIR: &str = r#"
schema_version = 1
seed = 5

[oracle]
check = "cir"
x0 = 0.5
a = 1.0
b = 0.0
c = 1.0
dt = 0.001
steps = 200
paths = 200
"#;

const SMALL_MICRO: &str = r#"
schema_version = 1
seed = 9

[grid]
delta_x = 0.1
delta_v = 0.05
half_width = 1.0
nodes = 21
dt = 0.001
horizon = 1.0

[output]
paths = 2

[model.initial]
p_a = 1.0
p_b = 0.5
ask = { level = 1.0 }
bid = { level = 1.0 }

[model.ask]
rate = { family = "constant", rho = 1.0, varrho = 0.1 }
mu_hat = { family = "constant", value = 0.05 }

[model.bid]
rate = { family = "constant", rho = 1.0, varrho = 0.1 }
mu_hat = { family = "constant", value = 0.05 }

[model.ask_place]
exo = { profile = { family = "gaussian", amplitude = 0.5, center = 0.3, width = 0.4 } }
size = { family = "dirac", z = 0.5 }

[model.ask_cancel]
exo = { profile = { family = "zero" } }
size = { family = "dirac", z = 0.5 }

[model.bid_place]
exo = { profile = { family = "gaussian", amplitude = 0.5, center = 0.3, width = 0.4 } }
size = { family = "dirac", z = 0.5 }

[model.bid_cancel]
exo = { profile = { family = "zero" } }
size = { family = "dirac", z = 0.5 }
"#;

fn write(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    fs::write(&p, text).unwrap();
    p
}

fn same_files(a: &Path, b: &Path, names: &[&str]) {
    for n in names {
        assert_eq!(fs::read(a.join(n)).unwrap(), fs::read(b.join(n)).unwrap(), "{n} differs");
    }
}

#[test]
fn oracle_check_writes_a_passing_report() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write(tmp.path(), "cir.toml", SMALL_CIR);
    let out = tmp.path().join("out");
    let o = run(&["oracle-check", "--config", cfg.to_str().unwrap()], &out);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let report: serde_json::Value = serde_json::from_slice(&fs::read(out.join("oracle_report.json")).unwrap()).unwrap();
    assert_eq!(report["check"], "cir");
    assert_eq!(report["pass"], true);
    assert_eq!(report["report"]["zero_hits"], 0);
    assert!(String::from_utf8_lossy(&o.stdout).contains("manifest.json"));
}

#[test]
fn manifest_rerun_is_byte_identical() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write(tmp.path(), "micro.toml", SMALL_MICRO);
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    let o = run(&["simulate-micro", "--config", cfg.to_str().unwrap(), "--level", "1"], &a);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let o = run(&["--manifest", a.join("manifest.json").to_str().unwrap()], &b);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    same_files(&a, &b, &["micro_events_0.csv", "micro_path_1.csv", "micro_summary.csv", "micro_report.json", "manifest.json"]);
    let header = fs::read_to_string(a.join("micro_path_0.csv")).unwrap();
    assert!(header.starts_with("t,p_a,p_b\n"));
}

#[test]
fn thread_count_does_not_change_results() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write(tmp.path(), "cir.toml", SMALL_CIR);
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    assert!(run(&["oracle-check", "--config", cfg.to_str().unwrap(), "--threads", "1"], &a).status.success());
    let o = bin()
        .args(["oracle-check", "--config", cfg.to_str().unwrap(), "--out", b.to_str().unwrap()])
        .env("HAWKES_LOB_THREADS", "3")
        .output()
        .unwrap();
    assert!(o.status.success());
    same_files(&a, &b, &["oracle_report.json", "manifest.json"]);
}

#[test]
fn seed_environment_override() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write(tmp.path(), "micro.toml", SMALL_MICRO);
    let (a, b, c) = (tmp.path().join("a"), tmp.path().join("b"), tmp.path().join("c"));
    let go = |out: &Path, seed: Option<&str>| {
        let mut cmd = bin();
        cmd.args(["simulate-micro", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]);
        if let Some(s) = seed {
            cmd.env("HAWKES_LOB_SEED", s);
        }
        assert!(cmd.output().unwrap().status.success());
        serde_json::from_slice::<serde_json::Value>(&fs::read(out.join("manifest.json")).unwrap()).unwrap()
    };
    assert_eq!(go(&a, None)["master_seed"], 9);
    assert_eq!(go(&b, Some("77"))["master_seed"], 77);
    let o = bin()
        .args(["simulate-micro", "--config", cfg.to_str().unwrap(), "--out", c.to_str().unwrap(), "--seed", "78"])
        .env("HAWKES_LOB_SEED", "77")
        .output()
        .unwrap();
    assert!(o.status.success());
    assert_ne!(fs::read(b.join("micro_events_0.csv")).unwrap(), fs::read(c.join("micro_events_0.csv")).unwrap());
}

#[test]
fn invalid_config_exits_with_a_report() {
    let tmp = tempfile::tempdir().unwrap();
    let bad = SMALL_MICRO.replace("delta_v = 0.05", "delta_v = 0.5");
    let cfg = write(tmp.path(), "bad.toml", &bad);
    let out = tmp.path().join("out");
    let o = run(&["simulate-micro", "--config", cfg.to_str().unwrap()], &out);
    assert_eq!(o.status.code(), Some(1));
    let report: serde_json::Value = serde_json::from_slice(&fs::read(out.join("error.json")).unwrap()).unwrap();
    assert_eq!(report["kind"], "config");
    let issue = &report["issues"][0];
    assert!(issue["message"].as_str().unwrap().contains("volume positivity"), "{report}");
    assert!(issue["line"].as_u64().is_some(), "{report}");
}

#[test]
fn unknown_keys_are_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write(tmp.path(), "bad.toml", &SMALL_CIR.replace("paths = 200", "paths = 200\nwalkers = 3"));
    let out = tmp.path().join("out");
    let o = run(&["oracle-check", "--config", cfg.to_str().unwrap()], &out);
    assert_eq!(o.status.code(), Some(1));
    assert!(out.join("error.json").exists());
}

#[test]
fn shipped_resolvent_config_passes() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("out");
    let o = run(&["resolvent", "--config", config("resolvent.toml").to_str().unwrap()], &out);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let csv = fs::read_to_string(out.join("resolvent.csv")).unwrap();
    assert!(csv.starts_with(
        "family,horizon,dt,residual,simpson_residual,err_vs_exact,diff_vs_stated,stated_vs_doubled_kernel,residual_ok\n"
    ));
    assert_eq!(csv.lines().count(), 4);
}

#[test]
fn missing_command_is_a_usage_error() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("out");
    let o = run(&["--config", config("cir.toml").to_str().unwrap()], &out);
    assert_eq!(o.status.code(), Some(1));
    let report: serde_json::Value = serde_json::from_slice(&fs::read(out.join("error.json")).unwrap()).unwrap();
    assert_eq!(report["kind"], "usage");
}
