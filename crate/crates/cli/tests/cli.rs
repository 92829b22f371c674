//! Drives the `itfa` binary through a complete tiny experiment.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use itfa_cli::manifest::{RunManifest, RUN_MANIFEST_FILE};
use itfa_core::evalmetrics::EvalReport;
use itfa_core::synthdata::DatasetConfig;
use itfa_core::training::{load_checkpoint, save_checkpoint};

const TINY: &str = r#"
shots = [2]
seeds = [0, 1]
policy = "fc2"

[dataset]
base_train_images = 16
novel_pool_images = 45
test_images = 9

[detector]
backbone_channels = [4, 8, 8, 8]
rpn_channels = 8
roi_feature_dim = 16

[base]
steps = 8
warmup_steps = 2
decay_steps = [6]

[finetune]
steps = 6
decay_steps = [4]
"#;

struct Workspace {
    _dir: tempfile::TempDir,
    config: PathBuf,
    out: PathBuf,
}

fn workspace(text: &str) -> Workspace {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("exp.toml");
    std::fs::write(&config, text).unwrap();
    let out = dir.path().join("runs");
    Workspace { _dir: dir, config, out }
}

fn itfa(ws: &Workspace, args: &[&str]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_itfa"));
    cmd.args(args).arg("--config").arg(&ws.config).arg("--output").arg(&ws.out);
    cmd.output().unwrap()
}

fn ok(ws: &Workspace, args: &[&str]) -> String {
    let o = itfa(ws, args);
    assert!(o.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&o.stderr));
    String::from_utf8(o.stdout).unwrap()
}

fn base_dir(ws: &Workspace) -> PathBuf {
    ws.out.join("base").join("linear_agnostic")
}

fn cell(ws: &Workspace, seed: u64) -> PathBuf {
    ws.out.join("finetune").join("k2").join(format!("seed{seed}")).join("fc2")
}

fn trained(ws: &Workspace) {
    ok(ws, &["train", "base"]);
    ok(ws, &["finetune"]);
}

fn manifest(dir: &Path) -> RunManifest {
    serde_json::from_str(&std::fs::read_to_string(dir.join(RUN_MANIFEST_FILE)).unwrap()).unwrap()
}

#[test]
fn full_experiment_from_the_command_line() {
    let ws = workspace(TINY);
    let stdout = ok(&ws, &["dataset", "build", "--images"]);
    assert!(stdout.contains("16 base_train"), "{stdout}");
    assert!(ws.out.join("dataset/test.json").is_file());
    assert!(ws.out.join("dataset/images/test").read_dir().unwrap().count() == 9);

    trained(&ws);
    for f in ["log.json", "report.json", "report_initial.json", RUN_MANIFEST_FILE] {
        assert!(base_dir(&ws).join(f).is_file(), "{f}");
    }
    for seed in [0, 1] {
        assert_eq!(manifest(&cell(&ws, seed)).seed, Some(seed));
    }
    assert!(ws.out.join("finetune/k2/summary_fc2.json").is_file());

    assert!(ok(&ws, &["audit"]).contains("pass"));

    let eval = ws.out.join("eval_novel.json");
    let cell0 = cell(&ws, 0);
    ok(&ws, &["eval", "--checkpoint", cell0.to_str().unwrap(), "--mode", "novel-only", "--out", eval.to_str().unwrap()]);
    let report: EvalReport = serde_json::from_str(&std::fs::read_to_string(&eval).unwrap()).unwrap();
    let vocab = DatasetConfig::default().vocabulary().unwrap();
    assert!(!report.per_class.is_empty());
    assert!(report.per_class.iter().all(|c| c.novel && vocab.is_novel(c.class_index)));
    assert!(report.bap.is_none());

    let base_eval = ws.out.join("eval_base.json");
    let bd = base_dir(&ws);
    ok(&ws, &["eval", "--checkpoint", bd.to_str().unwrap(), "--out", base_eval.to_str().unwrap()]);
    let report: EvalReport = serde_json::from_str(&std::fs::read_to_string(&base_eval).unwrap()).unwrap();
    assert_eq!(report.nap, Some(0.0));
    assert!(report.bap.is_some());

    let png = ws.out.join("overlay.png");
    ok(&ws, &["render", "--checkpoint", cell0.to_str().unwrap(), "--threshold", "0.0", "--out", png.to_str().unwrap()]);
    let img = image::open(&png).unwrap();
    assert_eq!((img.width(), img.height()), (256, 256));

    let plots = ok(&ws, &["plot"]);
    for name in ["loss_curves.svg", "metrics.svg"] {
        assert!(plots.contains(name), "{plots}");
        assert!(ws.out.join("plots").join(name).is_file());
    }
}

#[test]
fn repeated_runs_produce_identical_artifacts() {
    let a = workspace(TINY);
    let b = workspace(TINY);
    trained(&a);
    trained(&b);
    assert_eq!(manifest(&base_dir(&a)), manifest(&base_dir(&b)));
    assert_eq!(manifest(&cell(&a, 1)), manifest(&cell(&b, 1)));
    assert_ne!(manifest(&cell(&a, 0)).artifacts, manifest(&cell(&a, 1)).artifacts);
}

#[test]
fn tampered_frozen_tensor_fails_the_audit() {
    let ws = workspace(TINY);
    trained(&ws);
    let dir = cell(&ws, 1).join("checkpoint");
    let mut ckpt = load_checkpoint(&dir).unwrap();
    let mut w = ckpt.params.get("cls.base.W").unwrap().clone();
    w[[0, 0]] += 1e-12;
    ckpt.params.insert("cls.base.W", w, false);
    save_checkpoint(&ckpt, &dir).unwrap();

    let o = itfa(&ws, &["audit"]);
    assert_eq!(o.status.code(), Some(3));
    let text = std::fs::read_to_string(ws.out.join("violations.json")).unwrap();
    assert!(text.contains("\"freeze\"") && text.contains("cls.base.W") && text.contains("k2/seed1/fc2"), "{text}");
}

#[test]
fn recorded_base_train_reads_fail_the_audit() {
    let ws = workspace(TINY);
    trained(&ws);
    let p = cell(&ws, 0).join("audit.json");
    let mut audit: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&p).unwrap()).unwrap();
    assert_eq!(audit["reads"]["base_train"], 0);
    audit["reads"]["base_train"] = 4.into();
    std::fs::write(&p, audit.to_string()).unwrap();

    let o = itfa(&ws, &["audit"]);
    assert_eq!(o.status.code(), Some(3));
    let text = std::fs::read_to_string(ws.out.join("violations.json")).unwrap();
    assert!(text.contains("\"leakage\"") && text.contains("k2/seed0/fc2"), "{text}");
}

#[test]
fn configuration_errors_exit_with_code_two() {
    let ws = workspace("shots = [2]\nlearning_rate = 0.1\n");
    assert_eq!(itfa(&ws, &["train", "base"]).status.code(), Some(2));
    let ws = workspace("shots = []\n");
    assert_eq!(itfa(&ws, &["finetune"]).status.code(), Some(2));
}

#[test]
fn ablation_without_base_checkpoints_names_the_missing_mode() {
    let ws = workspace(TINY);
    let o = itfa(&ws, &["ablate", "--classifiers", "cosine", "--regressors", "specific"]);
    assert_eq!(o.status.code(), Some(1));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("cosine") && err.contains("specific"), "{err}");
}
