use std::path::{Path, PathBuf};
use std::process::Command;

use mglmm::ModelSpec;
use serde_json::Value;
use tempfile::TempDir;

fn configs() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn mglmm(args: &[&str]) -> i32 {
    let out = Command::new(env!("CARGO_BIN_EXE_mglmm")).args(args).output().expect("binary runs");
    out.status.code().expect("exit code")
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn manifest(dir: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(dir.join("manifest.json")).unwrap()).unwrap()
}

fn small_study(dir: &Path, kind: &str) -> PathBuf {
    let path = dir.join(format!("{kind}.json"));
    let text = format!(
        r#"{{"kind": "{kind}", "methods": ["condinf"], "const_grid": [1.0, 50.0], "q": 12, "q_grid": [6, 12],
            "cluster_size": 40, "replicates": 5, "seed": 11}}"#
    );
    std::fs::write(&path, text).unwrap();
    path
}

#[test]
fn fit_writes_four_files_and_echoes_the_config() {
    let tmp = TempDir::new().unwrap();
    let out = tmp.path().join("fit");
    let cfg = configs().join("toy_gaussian.json");
    let code = mglmm(&["fit", "--config", p(&cfg), "--data", p(&configs().join("toy_gaussian.csv")), "--out", p(&out)]);
    assert_eq!(code, 0);
    let mut names: Vec<String> = std::fs::read_dir(&out).unwrap().map(|e| e.unwrap().file_name().into_string().unwrap()).collect();
    names.sort();
    assert_eq!(names, ["covariance.csv", "estimates.csv", "manifest.json", "random_components.csv"]);
    let m = manifest(&out);
    assert_eq!(m["status"], "ok");
    let echoed: ModelSpec = serde_json::from_value(m["config"].clone()).unwrap();
    assert_eq!(echoed, ModelSpec::from_path(&cfg).unwrap());
    let est = std::fs::read_to_string(out.join("estimates.csv")).unwrap();
    assert!(est.starts_with("marginal,parameter,value,std_error\n"));
    assert_eq!(est.lines().count(), 4);
}

#[test]
fn missing_column_is_an_input_error() {
    let tmp = TempDir::new().unwrap();
    let cfg = tmp.path().join("bad.json");
    std::fs::write(&cfg, r#"{"marginals": [{"response": "height", "family": "normal"}], "clusters": [{"name": "batch", "column": "batch"}]}"#).unwrap();
    let out = tmp.path().join("out");
    let code = mglmm(&["fit", "--config", p(&cfg), "--data", p(&configs().join("toy_gaussian.csv")), "--out", p(&out)]);
    assert_eq!(code, 1);
    assert!(!out.join("estimates.csv").exists());
    let m = manifest(&out);
    assert_eq!(m["status"], "error");
    assert!(m["error"].as_str().unwrap().contains("height"));
}

#[test]
fn usage_errors_exit_with_one() {
    assert_eq!(mglmm(&["fit", "--no-such-flag"]), 1);
    assert_eq!(mglmm(&["--version"]), 0);
}

#[test]
fn iteration_cap_reports_non_convergence_and_keeps_outputs() {
    let tmp = TempDir::new().unwrap();
    let sim = tmp.path().join("sim");
    assert_eq!(mglmm(&["simulate", "--config", p(&configs().join("study_normality.json")), "--q", "15", "--out", p(&sim)]), 0);
    let out = tmp.path().join("fit");
    let code = mglmm(&[
        "fit",
        "--config",
        p(&sim.join("model.json")),
        "--data",
        p(&sim.join("data_0001.csv")),
        "--max-iter",
        "1",
        "--out",
        p(&out),
    ]);
    assert_eq!(code, 2);
    assert_eq!(manifest(&out)["convergence"]["converged"], false);
    assert!(out.join("estimates.csv").exists());
}

#[test]
fn laplace_and_asymptotics_commands_run() {
    let tmp = TempDir::new().unwrap();
    let (cfg, data) = (configs().join("toy_gaussian.json"), configs().join("toy_gaussian.csv"));
    let out = tmp.path().join("laplace");
    assert_eq!(mglmm(&["fit", "--config", p(&cfg), "--data", p(&data), "--method", "laplace", "--out", p(&out)]), 0);
    assert_eq!(manifest(&out)["options"]["method"], "laplace");
    let out = tmp.path().join("asy");
    assert_eq!(mglmm(&["asymptotics", "--config", p(&cfg), "--data", p(&data), "--replicates", "40", "--out", p(&out)]), 0);
    assert!(out.join("sandwich.csv").exists() && out.join("unconditional.csv").exists());
}

#[test]
fn default_studies_have_the_documented_cells() {
    let tmp = TempDir::new().unwrap();
    let out = tmp.path().join("n");
    let code = mglmm(&["study", "--config", p(&configs().join("study_normality.json")), "--replicates", "3", "--method", "condinf", "--out", p(&out)]);
    assert_eq!(code, 0);
    let normality = std::fs::read_to_string(out.join("normality.csv")).unwrap();
    assert_eq!(normality.lines().count(), 1 + 2 * 3);

    let out = tmp.path().join("b");
    let code = mglmm(&["study", "--config", p(&configs().join("study_bias.json")), "--replicates", "2", "--method", "condinf", "--out", p(&out)]);
    assert_eq!(code, 0);
    let bias = std::fs::read_to_string(out.join("bias.csv")).unwrap();
    let qs: std::collections::BTreeSet<&str> = bias.lines().skip(1).map(|l| l.split(',').nth(1).unwrap()).collect();
    assert_eq!(qs.into_iter().collect::<Vec<_>>(), ["10", "100", "50"]);
}

#[test]
fn reruns_are_byte_identical_and_leave_no_temporaries() {
    let tmp = TempDir::new().unwrap();
    let cfg = small_study(tmp.path(), "bias");
    let run = |name: &str| {
        let out = tmp.path().join(name);
        let code = mglmm(&["study", "--config", p(&cfg), "--replicates", "10", "--seed", "7", "--threads", "1", "--out", p(&out)]);
        assert_eq!(code, 0);
        out
    };
    let (a, b) = (run("a"), run("b"));
    for entry in std::fs::read_dir(&a).unwrap() {
        let name = entry.unwrap().file_name();
        assert!(!name.to_string_lossy().ends_with(".tmp"));
        assert_eq!(std::fs::read(a.join(&name)).unwrap(), std::fs::read(b.join(&name)).unwrap(), "{name:?}");
    }
}
