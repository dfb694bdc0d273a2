//! End-to-end checks of the run commands and the `sgtm` binary.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use sgtm::config::{ExperimentConfig, MethodName};
use sgtm::runs::{cmd_analyze, cmd_sweep, cmd_train, read_manifest, Precision, Report, SweepAxis, Workspace};

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_sgtm"));
    c.env_remove("SGTM_SEED").env_remove("SGTM_OUT");
    c
}

fn default_config() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/default.toml")
}

fn ok(out: Output) -> Vec<PathBuf> {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap().lines().map(PathBuf::from).collect()
}

/// The desk config shrunk so a run takes about a second.
fn small() -> ExperimentConfig {
    let mut c = ExperimentConfig::desk();
    c.data.train_tokens_per_domain = 12_000;
    c.data.test_tokens_per_domain = 1_500;
    c.train.eval_every = 20;
    c
}

fn ws(dir: &Path) -> Workspace {
    Workspace { out: dir.to_path_buf(), precision: Precision::F32, threads: 2 }
}

fn column(path: &Path, name: &str) -> Vec<f64> {
    let mut r = csv::Reader::from_path(path).unwrap();
    let i = r.headers().unwrap().iter().position(|h| h == name).unwrap();
    r.records().map(|rec| rec.unwrap()[i].parse().unwrap()).collect()
}

#[test]
fn train_on_default_config_writes_a_complete_run_and_reruns_touch_nothing() {
    let tmp = tempfile::tempdir().unwrap();
    let config = default_config();
    let args = ["--config", config.to_str().unwrap(), "--out", tmp.path().to_str().unwrap(), "train"];
    let dirs = ok(bin().args(args).output().unwrap());
    let dir = &dirs[0];
    let steps = column(&dir.join("metrics.csv"), "step");
    assert!(steps.len() > 2 && steps.windows(2).all(|w| w[0] < w[1]), "{steps:?}");
    for f in ["config.toml", "labels.csv", "record.json", "final.ckpt", "final-ablated.ckpt"] {
        assert!(dir.join(f).exists(), "missing {f}");
    }
    let manifest = read_manifest(dir).unwrap().expect("manifest written");
    assert!(manifest.artifacts.contains(&PathBuf::from("final.ckpt")));
    assert!(!dir.join(".lock").exists());

    let before = fs::read(dir.join("manifest.json")).unwrap();
    let mtime = fs::metadata(dir.join("final.ckpt")).unwrap().modified().unwrap();
    assert_eq!(ok(bin().args(args).output().unwrap()), dirs);
    assert_eq!(fs::read(dir.join("manifest.json")).unwrap(), before);
    assert_eq!(fs::metadata(dir.join("final.ckpt")).unwrap().modified().unwrap(), mtime);

    // the seed is part of the run address
    let other = ok(bin().args(args).env("SGTM_SEED", "5").output().unwrap());
    assert_ne!(other, dirs);
}

#[test]
fn undiscovered_rate_sweep_yields_one_run_per_rate() {
    let tmp = tempfile::tempdir().unwrap();
    let c = small();
    let (dir, runs) = cmd_sweep(&ws(tmp.path()), &c, SweepAxis::UndiscoveredRate).unwrap();
    assert_eq!(runs.len(), 4);
    let unique: std::collections::BTreeSet<_> = runs.iter().map(|r| r.dir.clone()).collect();
    assert_eq!(unique.len(), 4);
    assert_eq!(column(&dir.join("sweep.csv"), "point").len(), 4);
    let undiscovered = column(&dir.join("sweep.csv"), "undiscovered_forget_tokens");
    assert_eq!(undiscovered[0], 0.0);
    assert!(undiscovered.windows(2).all(|w| w[0] < w[1]), "{undiscovered:?}");
    let (_, again) = cmd_sweep(&ws(tmp.path()), &c, SweepAxis::UndiscoveredRate).unwrap();
    assert!(again.iter().all(|r| r.reused));
}

#[test]
fn leakage_of_a_filter_run_is_one() {
    let tmp = tempfile::tempdir().unwrap();
    let mut c = small();
    c.train.method = MethodName::FilterWeak;
    c.partition = None;
    c.labels.tpr = 0.8;
    let run = cmd_train(&ws(tmp.path()), &c).unwrap();
    let dir = cmd_analyze(&ws(tmp.path()), &run.dir, Report::Leakage, &[]).unwrap();
    let report: serde_json::Value = serde_json::from_slice(&fs::read(dir.join("leakage.json")).unwrap()).unwrap();
    let l = report["report"]["leakage"].as_f64().expect("interpolated");
    assert!((l - 1.0).abs() <= 0.05, "leakage {l}");
    assert_eq!(column(&dir.join("leakage_curve.csv"), "forget_loss").len(), c.analysis.leakage_grid.len() + 1);
}

#[test]
fn reports_on_an_sgtm_run() {
    let tmp = tempfile::tempdir().unwrap();
    let mut c = small();
    c.analysis.gradnorm_examples = 10;
    c.analysis.raw_gradients = true;
    let run = cmd_train(&ws(tmp.path()), &c).unwrap();
    let n_ckpts = fs::read_dir(run.dir.join("checkpoints")).unwrap().count();
    let dir = cmd_analyze(&ws(tmp.path()), &run.dir, Report::Tradeoff, &[]).unwrap();
    let calibrated = column(&dir.join("tradeoff.csv"), "loss_forget_calibrated");
    let raw = column(&dir.join("tradeoff.csv"), "loss_forget");
    assert_eq!(raw.len(), n_ckpts);
    assert!(calibrated.iter().all(|x| x.is_finite()));

    let dir = cmd_analyze(&ws(tmp.path()), &run.dir, Report::Gradnorms, &[]).unwrap();
    assert_eq!(column(&dir.join("gradnorms.csv"), "forget").len(), 20);
    let shape: serde_json::Value = serde_json::from_slice(&fs::read(dir.join("gradients.json")).unwrap()).unwrap();
    let row = (shape["forget_len"].as_u64().unwrap() + shape["retain_len"].as_u64().unwrap()) as usize;
    assert_eq!(fs::metadata(dir.join("gradients.f32")).unwrap().len() as usize, 20 * row * 4);

    let dir = cmd_analyze(&ws(tmp.path()), &run.dir, Report::Pertoken, &[]).unwrap();
    let counts = column(&dir.join("histogram.csv"), "count");
    let tokens = column(&dir.join("pertoken.csv"), "loss").len();
    assert_eq!(counts.iter().sum::<f64>() as usize, tokens);

    // analysis lives beside the run and never rewrites it
    assert!(dir.starts_with(&run.dir));
    assert!(read_manifest(&run.dir).unwrap().unwrap().artifacts.iter().all(|a| !a.starts_with("analysis")));
}

#[test]
fn scaling_report_fits_baselines() {
    let tmp = tempfile::tempdir().unwrap();
    let mut c = small();
    c.train.method = MethodName::FilterNone;
    c.partition = None;
    let w = ws(tmp.path());
    let (sweep, runs) = cmd_sweep(&w, &c, SweepAxis::ModelSize).unwrap();
    let dir = cmd_analyze(&w, &runs[0].dir, Report::Scaling, &[sweep]).unwrap();
    let s: serde_json::Value = serde_json::from_slice(&fs::read(dir.join("scaling.json")).unwrap()).unwrap();
    assert_eq!(s["points"].as_array().unwrap().len(), 3);
    assert!(s["compute_penalty"]["retain"].as_f64().unwrap().is_finite());
}

#[test]
fn checkpoint_commands_refuse_bad_input() {
    let tmp = tempfile::tempdir().unwrap();
    let run = cmd_train(&ws(tmp.path()), &small()).unwrap();
    let out = tmp.path().to_str().unwrap();

    let ckpt = run.dir.join("final.ckpt");
    let dirs = ok(bin().args(["--out", out, "calibrate", ckpt.to_str().unwrap()]).output().unwrap());
    let cal: serde_json::Value = serde_json::from_slice(&fs::read(dirs[0].join("calibration.json")).unwrap()).unwrap();
    let trace: Vec<f64> = cal["result"]["objective"].as_array().unwrap().iter().map(|x| x.as_f64().unwrap()).collect();
    assert!(trace.len() > 1 && trace.windows(2).all(|w| w[1] <= w[0]));

    // a config describing another model is refused with a diff
    let mut other = small();
    other.model.d_model = 48;
    let cfg = tmp.path().join("other.toml");
    fs::write(&cfg, other.to_toml_string()).unwrap();
    let res = bin().args(["--out", out, "--config", cfg.to_str().unwrap(), "calibrate", ckpt.to_str().unwrap()]).output().unwrap();
    assert!(!res.status.success());
    assert!(String::from_utf8_lossy(&res.stderr).contains("d_model"));

    let bad = tmp.path().join("bad.ckpt");
    let mut bytes = fs::read(&ckpt).unwrap();
    let n = bytes.len();
    bytes[n - 5] ^= 1;
    fs::write(&bad, bytes).unwrap();
    for cmd in [vec!["calibrate"], vec!["ablate"], vec!["attack", "--mode", "rmu"]] {
        let res = bin().args(["--out", out]).args(&cmd).arg(&bad).output().unwrap();
        assert!(!res.status.success());
        assert!(String::from_utf8_lossy(&res.stderr).contains("checksum"), "{cmd:?}");
    }

    let schema = tmp.path().join("schema.toml");
    fs::write(&schema, small().to_toml_string().replace("[train]", "[train]\nlearning_rate = 1.0")).unwrap();
    let res = bin().args(["--config", schema.to_str().unwrap(), "--out", out, "train"]).output().unwrap();
    assert!(!res.status.success());
    assert!(String::from_utf8_lossy(&res.stderr).contains("learning_rate"));
}

#[test]
fn attacks_write_their_own_directories() {
    let tmp = tempfile::tempdir().unwrap();
    let mut c = small();
    c.attack.finetune.max_steps = 20;
    c.attack.rmu.steps = 10;
    c.attack.rmu.eval_every = 5;
    let run = cmd_train(&ws(tmp.path()), &c).unwrap();
    let out = tmp.path().to_str().unwrap();
    let ckpt = run.dir.join("final.ckpt");
    let dirs = ok(bin().args(["--out", out, "attack", "--mode", "finetune", "--baseline", "2.0"]).arg(&ckpt).output().unwrap());
    assert!(!column(&dirs[0].join("attack.csv"), "forget_loss").is_empty());
    let dirs = ok(bin().args(["--out", out, "attack", "--mode", "rmu"]).arg(&ckpt).output().unwrap());
    assert!(dirs[0].join("rmu.ckpt").exists());
    let res = bin().args(["--out", out, "attack", "--mode", "finetune"]).arg(&ckpt).output().unwrap();
    assert!(!res.status.success());

    let ablated = ok(bin().args(["--out", out, "ablate"]).arg(&ckpt).output().unwrap());
    assert_eq!(ablated[0], run.dir.join("final-ablated.ckpt"));
}
