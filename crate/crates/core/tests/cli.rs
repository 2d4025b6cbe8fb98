//! The `pball` binary: exit codes and provenance of outputs.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn pball(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pball"))
        .args(args)
        .current_dir(dir)
        .env("RUST_LOG", "warn")
        .env_remove("PBALL_WORKERS")
        .output()
        .unwrap()
}

fn code(dir: &Path, args: &[&str]) -> i32 {
    pball(dir, args).status.code().unwrap()
}

#[test]
fn help_and_usage_errors() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    assert_eq!(code(d, &["--help"]), 0);
    assert_eq!(code(d, &["eval-pointing", "--help"]), 0);
    assert_eq!(code(d, &[]), 1);
    assert_eq!(code(d, &["no-such-command"]), 1);
    assert_eq!(code(d, &["train", "--no-such-flag"]), 1);
    assert_eq!(code(d, &["train", "--epochs", "many"]), 1);
    assert_eq!(code(d, &["train", "--set", "nonsense.field=1"]), 1);
    assert_eq!(code(d, &["train", "--workers", "0"]), 1);
    // no dataset yet
    assert_eq!(code(d, &["train"]), 1);
    assert_eq!(code(d, &["perturb", "--model", "missing.pbw"]), 1);
}

#[test]
fn corrupt_model_is_a_runtime_error() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    assert_eq!(code(d, &["gen-data", "--out", "data", "--count", "4"]), 0);
    fs::write(d.join("model.pbw"), b"definitely not weights").unwrap();
    let out = pball(d, &["perturb", "--out", "p", "--max-iters", "2"]);
    assert_eq!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stderr));
    let run: serde_json::Value = serde_json::from_slice(&fs::read(d.join("p/run.json")).unwrap()).unwrap();
    assert!(run["status"].as_str().unwrap().starts_with("failed"));
}

fn walk(root: &Path, out: &mut Vec<std::path::PathBuf>) {
    for e in fs::read_dir(root).unwrap() {
        let p = e.unwrap().path();
        if p.is_dir() {
            walk(&p, out);
        } else {
            out.push(p);
        }
    }
}

#[test]
fn outputs_carry_the_config_hash() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let steps: [&[&str]; 6] = [
        &["gen-data", "--out", "data", "--count", "12", "--seed", "3"],
        &["train", "--out", ".", "--epochs", "1"],
        &["perturb", "--out", "p", "--max-iters", "5"],
        &["eval-pointing", "--out", "pt", "--limit", "3", "--max-iters", "5"],
        &["ablate", "--out", "ab", "--limit", "2", "--max-iters", "5", "--cells", "0:0,0:1"],
        &["sanity-check", "--out", "sc", "--limit", "2", "--max-iters", "5", "--depths", "0,6"],
    ];
    for args in steps {
        let out = pball(d, args);
        assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    }
    for sub in ["p", "pt", "ab", "sc"] {
        let run: serde_json::Value = serde_json::from_slice(&fs::read(d.join(sub).join("run.json")).unwrap()).unwrap();
        let hash = run["config_hash"].as_str().unwrap().to_string();
        assert_eq!(hash.len(), 16);
        assert_eq!(run["status"], "ok");
        let mut files = Vec::new();
        walk(&d.join(sub), &mut files);
        for f in files {
            match f.extension().and_then(|e| e.to_str()) {
                Some("csv") => {
                    let text = fs::read_to_string(&f).unwrap();
                    let mut lines = text.lines();
                    assert!(lines.next().unwrap().contains("config_hash"), "{f:?}");
                    assert!(lines.all(|l| l.contains(&hash)), "{f:?}");
                }
                Some("json") => {
                    let v: serde_json::Value = serde_json::from_slice(&fs::read(&f).unwrap()).unwrap();
                    assert_eq!(v["config_hash"], hash.as_str(), "{f:?}");
                }
                _ => {}
            }
        }
    }
}

#[test]
fn seed_flag_changes_generated_data() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    for (out, seed) in [("a", "1"), ("b", "1"), ("c", "2")] {
        assert_eq!(code(d, &["gen-data", "--out", out, "--count", "3", "--seed", seed]), 0);
    }
    let manifest = |o: &str| fs::read(d.join(o).join("manifest.json")).unwrap();
    assert_eq!(manifest("a"), manifest("b"));
    assert_ne!(manifest("a"), manifest("c"));
}

fn json(path: &Path) -> serde_json::Value {
    serde_json::from_slice(&fs::read(path).unwrap()).unwrap()
}

fn x_prime(path: &Path) -> pball::Tensor {
    let (_, tensors) = pball::container::read(path).unwrap();
    tensors.into_iter().find(|(n, _)| n == "x_prime").unwrap().1
}

#[test]
fn grids_and_the_unregularized_path() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    assert_eq!(code(d, &["gen-data", "--out", "data", "--count", "8", "--seed", "4"]), 0);
    assert_eq!(code(d, &["train", "--out", ".", "--epochs", "1"]), 0);

    // a zero perceptual weight on a non-empty range is the plain path
    let run = |out: &str, extra: &[&str]| {
        let mut args = vec!["perturb", "--out", out, "--sample", "2", "--max-iters", "20"];
        args.extend_from_slice(extra);
        assert_eq!(code(d, &args), 0, "{args:?}");
        x_prime(&d.join(out).join("perturbation.tns"))
    };
    let zero = run("zero", &["--lambda-prime", "0", "--layers", "0..3"]);
    let none = run("none", &["--layers", "none"]);
    assert_eq!(zero, none);
    assert_ne!(zero, run("reg", &["--layers", "0..3"]));

    let args = ["ablate", "--out", "ab", "--limit", "1", "--max-iters", "2", "--game", "pointing", "--sigma", "0:100:1", "--cells", "0:0"];
    assert_eq!(code(d, &args), 0);
    let sigmas = json(&d.join("ab/ablation.json"))["config"]["ablate"]["sigmas"].as_array().unwrap().clone();
    assert_eq!(sigmas.len(), 101);
    assert_eq!(sigmas[100].as_f64(), Some(100.0));

    let args = ["eval-localization", "--out", "loc", "--limit", "1", "--max-iters", "2", "--alpha-step", "0.05"];
    assert_eq!(code(d, &args), 0);
    assert_eq!(json(&d.join("loc/localization.json"))["config"]["localization"]["alpha_step"].as_f64(), Some(0.05));
    let rows = fs::read_to_string(d.join("loc/localization.csv")).unwrap();
    let alphas: std::collections::BTreeSet<&str> = rows.lines().skip(1).map(|l| l.split(',').nth(3).unwrap()).collect();
    assert!(alphas.contains("0.05") && alphas.contains("0.95"));
}
