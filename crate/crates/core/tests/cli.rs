use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_corrupt-mfg"));
    c.env_remove("CORRUPT_MFG_THREADS").env("RUST_LOG", "error");
    c
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn text(o: &Output) -> String {
    format!("{}{}", String::from_utf8_lossy(&o.stdout), String::from_utf8_lossy(&o.stderr))
}

fn small_config(dir: &Path) -> String {
    let path = dir.join("small.toml");
    std::fs::write(
        &path,
        "sigma1_sq = 0.2\nsigma2_sq = 0.2\nT = 2.0\n\n[grid]\nnx = 9\nny = 9\nnt = 17\n\n[sim]\nn_agents = 200\nseed = 5\nrecord_paths = 10\n",
    )
    .unwrap();
    path.to_str().unwrap().to_owned()
}

fn manifest(dir: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(dir.join("manifest.json")).unwrap()).unwrap()
}

fn checksums_match(dir: &Path, m: &Value) {
    for f in m["outputs"].as_array().unwrap() {
        let path = dir.join(f["path"].as_str().unwrap());
        assert_eq!(corrupt_mfg::config::sha256_file(&path).unwrap(), f["sha256"].as_str().unwrap(), "{}", path.display());
    }
}

#[test]
fn help_exits_zero() {
    let o = run(&["--help"]);
    assert_eq!(o.status.code(), Some(0));
    assert!(text(&o).contains("Usage"));
}

#[test]
fn unknown_command_and_missing_file_exit_two() {
    assert_eq!(run(&["sideways"]).status.code(), Some(2));
    let o = run(&["solve", "--config", "missing.json"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(text(&o).contains("missing.json"));
}

#[test]
fn invalid_configs_exit_two_naming_the_problem() {
    let dir = tempfile::tempdir().unwrap();
    let bad = |name: &str, body: &str| {
        let p = dir.path().join(name);
        std::fs::write(&p, body).unwrap();
        run(&["solve", "--config", p.to_str().unwrap(), "--out", dir.path().join("o").to_str().unwrap()])
    };
    let o = bad("eps.json", r#"{"epsilon": 0}"#);
    assert_eq!(o.status.code(), Some(2));
    assert!(text(&o).contains("epsilon must be > 0"), "{}", text(&o));
    let o = bad("variant.json", r#"{"variant": "sideways"}"#);
    assert_eq!(o.status.code(), Some(2));
    assert!(text(&o).contains("plus") && text(&o).contains("minus"));
    let o = bad("broken.json", "{");
    assert_eq!(o.status.code(), Some(2));
    let o = bad("m0.json", r#"{"initial_density": "x - 0.5"}"#);
    assert_eq!(o.status.code(), Some(2));
    assert!(text(&o).contains("initial_density"));
}

#[test]
fn bad_thread_count_exits_two() {
    let o = bin().args(["logistic-check"]).env("CORRUPT_MFG_THREADS", "zero").output().unwrap();
    assert_eq!(o.status.code(), Some(2));
    let o = bin().args(["logistic-check"]).env("CORRUPT_MFG_THREADS", "2").output().unwrap();
    assert_eq!(o.status.code(), Some(0));
}

#[test]
fn logistic_check_prints_the_error() {
    let o = run(&["logistic-check"]);
    assert_eq!(o.status.code(), Some(0));
    let out = text(&o);
    assert!(out.contains("0.73105858") && out.contains("max error"), "{out}");
}

#[test]
fn solve_writes_fields_report_and_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let out = dir.path().join("solve");
    let o = run(&["solve", "--config", &cfg, "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", text(&o));
    let report: Value = serde_json::from_str(&std::fs::read_to_string(out.join("convergence.json")).unwrap()).unwrap();
    assert_eq!(report["converged"], Value::Bool(true));
    assert_eq!(report["mass_history"].as_array().unwrap().len(), 17);
    let u = corrupt_mfg::SpaceTimeField::read_csv(&out.join("u.csv")).unwrap();
    assert_eq!(u.time().nt(), 17);
    let m = manifest(&out);
    assert_eq!(m["command"], "solve");
    assert_eq!(m["config"]["grid"]["nx"], 9);
    assert_eq!(m["config"]["epsilon"], 0.1);
    checksums_match(&out, &m);
}

#[test]
fn non_convergence_exits_one() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("c.json");
    std::fs::write(&p, r#"{"grid": {"nx": 9, "ny": 9, "nt": 9}, "solver": {"max_picard_iters": 1}}"#).unwrap();
    let o = run(&["solve", "--config", p.to_str().unwrap(), "--out", dir.path().join("o").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1), "{}", text(&o));
}

#[test]
fn simulate_is_reproducible_from_its_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    let o = run(&["simulate", "--config", &cfg, "--control", "feedback", "--out", a.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", text(&o));
    let replay = a.join("manifest.json");
    let o = run(&["simulate", "--config", replay.to_str().unwrap(), "--out", b.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", text(&o));
    let (ma, mb) = (manifest(&a), manifest(&b));
    assert_eq!(ma["outputs"], mb["outputs"]);
    assert_eq!(ma["seed"], 5);
    checksums_match(&a, &ma);
    let mut rdr = csv::Reader::from_path(a.join("paths.csv")).unwrap();
    assert_eq!(rdr.headers().unwrap(), vec!["t", "agent_id", "x", "y", "alive"]);
    assert_eq!(rdr.records().count(), 17 * 10);
    assert_eq!(csv::Reader::from_path(a.join("costs.csv")).unwrap().records().count(), 200);
}

#[test]
fn verify_carleman_writes_a_report() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("car").join("report.json");
    let o = run(&["verify-carleman", "--theorem", "7.1", "--suite-size", "3", "--lambda-list", "1,2", "--s-list", "2,3", "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", text(&o));
    let report: Value = serde_json::from_str(&std::fs::read_to_string(&out).unwrap()).unwrap();
    assert_eq!(report["theorem"], "7.1");
    assert_eq!(report["rows"].as_array().unwrap().len(), 4);
    assert_eq!(report["threshold"], 2.0);
    checksums_match(out.parent().unwrap(), &manifest(out.parent().unwrap()));
    assert_eq!(run(&["verify-carleman", "--theorem", "9.9"]).status.code(), Some(2));
}

#[test]
fn retro_writes_stability_report_and_fields() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let out = dir.path().join("retro");
    let o = run(&["retro", "--config", &cfg, "--delta-list", "0.1,0.01", "--seeds", "0,1", "--alpha", "auto", "--out-dir", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", text(&o));
    let report: Value = serde_json::from_str(&std::fs::read_to_string(out.join("stability.json")).unwrap()).unwrap();
    assert_eq!(report["records"].as_array().unwrap().len(), 4);
    assert!(report["fitted_exponent"].as_f64().unwrap() > 0.0);
    for name in ["u_delta_1e-1.csv", "m_delta_1e-2.csv"] {
        assert!(out.join(name).exists(), "{name}");
    }
    checksums_match(&out, &manifest(&out));
    let o = run(&["retro", "--config", &cfg, "--gamma", "3", "--out-dir", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(text(&o).contains("gamma"));
    let o = run(&["retro", "--alpha", "-1"]);
    assert_eq!(o.status.code(), Some(2));
}
