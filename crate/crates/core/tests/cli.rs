use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn dlspf(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dlspf"))
        .args(args)
        .current_dir(dir)
        .env_remove("DLSPF_WORKERS")
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(out: &Output) -> String {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout.clone()).unwrap()
}

fn write_config(dir: &Path, preset: &str, edit: impl Fn(&mut serde_json::Value)) {
    let text = ok(&dlspf(&["default-config", preset], dir));
    let mut v: serde_json::Value = serde_json::from_str(&text).unwrap();
    edit(&mut v);
    fs::write(dir.join("cfg.json"), v.to_string()).unwrap();
}

#[test]
fn missing_config_is_a_usage_error() {
    let tmp = tempfile::tempdir().unwrap();
    let out = dlspf(&["simulate"], tmp.path());
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("--config"));
}

#[test]
fn invalid_config_is_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    write_config(tmp.path(), "burgers", |v| v["stepper"]["latent_dim"] = 8.into());
    let out = dlspf(&["simulate", "--config", "cfg.json"], tmp.path());
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn unreadable_artifacts_are_io_errors() {
    let tmp = tempfile::tempdir().unwrap();
    write_config(tmp.path(), "burgers", |_| {});
    let out = dlspf(&["train-ae", "--config", "cfg.json", "--out", "nowhere"], tmp.path());
    assert_eq!(out.status.code(), Some(5));
}

#[test]
fn linear_gaussian_run_reports_kalman_agreement() {
    let tmp = tempfile::tempdir().unwrap();
    write_config(tmp.path(), "linear-gaussian", |v| v["model"]["steps"] = 40.into());
    let d = tmp.path();
    ok(&dlspf(&["simulate", "--config", "cfg.json", "--out", "run"], d));
    ok(&dlspf(&["filter", "--config", "cfg.json", "--out", "run", "--mode", "hf", "--particles", "2000"], d));
    let report: serde_json::Value =
        serde_json::from_str(&ok(&dlspf(&["evaluate", "--config", "cfg.json", "--out", "run", "--particles", "2000"], d)))
            .unwrap();
    let k = &report["kalman"];
    assert!(k["mean_rel_l2"].as_f64().unwrap() < 0.1, "{k}");
    assert!(k["std_rel_err"].as_f64().unwrap() < 0.2, "{k}");
    assert!(d.join("run/eval/series.csv").exists());
}

#[test]
fn burgers_stages_chain_and_reject_stale_artifacts() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    write_config(d, "burgers", |v| {
        v["data"]["n_train"] = 6.into();
        v["data"]["n_test"] = 2.into();
        v["ae_train"]["epochs"] = 1.into();
        v["stepper_train"]["epochs"] = 1.into();
        v["filter"]["particles"] = 16.into();
    });
    let args = |cmd: &'static str| vec![cmd, "--config", "cfg.json", "--out", "run"];
    ok(&dlspf(&args("simulate"), d));
    // the stepper needs a trained autoencoder
    assert_eq!(dlspf(&args("train-dyn"), d).status.code(), Some(5));
    ok(&dlspf(&args("train-ae"), d));
    ok(&dlspf(&args("train-dyn"), d));
    for mode in ["hf", "latent"] {
        let mut a = args("filter");
        a.extend(["--mode", mode, "--workers", "2"]);
        ok(&dlspf(&a, d));
        let manifest = fs::read(d.join(format!("run/filter_{mode}/manifest.json"))).unwrap();
        a.pop();
        a.push("1");
        ok(&dlspf(&a, d));
        assert_eq!(manifest, fs::read(d.join(format!("run/filter_{mode}/manifest.json"))).unwrap());
    }
    let report: serde_json::Value = serde_json::from_str(&ok(&dlspf(&args("evaluate"), d))).unwrap();
    assert!(report["comparison"]["rmse_ratio"].as_f64().unwrap().is_finite());

    // a changed seed invalidates the data, autoencoder and stepper
    let mut a = args("filter");
    a.extend(["--seed", "5"]);
    assert_eq!(dlspf(&a, d).status.code(), Some(2));
}

#[test]
fn worker_count_comes_from_the_environment() {
    let tmp = tempfile::tempdir().unwrap();
    write_config(tmp.path(), "linear-gaussian", |v| v["model"]["steps"] = 5.into());
    let d = tmp.path();
    ok(&dlspf(&["simulate", "--config", "cfg.json"], d));
    let out = Command::new(env!("CARGO_BIN_EXE_dlspf"))
        .args(["filter", "--config", "cfg.json", "--mode", "hf"])
        .current_dir(d)
        .env("DLSPF_WORKERS", "3")
        .output()
        .unwrap();
    ok(&out);
    let t: serde_json::Value = serde_json::from_slice(&fs::read(d.join("runs/filter_hf/timings.json")).unwrap()).unwrap();
    assert_eq!(t["workers"], 3);
    let bad = Command::new(env!("CARGO_BIN_EXE_dlspf"))
        .args(["filter", "--config", "cfg.json", "--mode", "hf"])
        .current_dir(d)
        .env("DLSPF_WORKERS", "many")
        .output()
        .unwrap();
    assert_eq!(bad.status.code(), Some(2));
}
