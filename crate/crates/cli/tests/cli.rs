use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = r#"{
  "dataset": {"classes": 3, "train_per_class": 4, "test_per_class": 3, "points": 128, "resolution": 4},
  "model": {
    "encoder": {"knn_k": 4, "point_widths": [8, 8], "view_hidden": 8, "view_dim": 8, "descriptor_len": 48},
    "fusion": {"relation_hidden": 8, "fusion_hidden": 8, "fused_dim": 8, "embed_dim": 8, "top_k": 3}
  },
  "schedule": {"total_epochs": 3, "freeze_epochs": 1, "batch_size": 4}
}
"#;

fn pvrf(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pvrf"))
        .args(args)
        .current_dir(dir)
        .env_remove("PVRF_SEED")
        .env_remove("RUST_LOG")
        .output()
        .expect("binary runs")
}

fn pvrf_env(dir: &Path, args: &[&str], seed: &str) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pvrf"))
        .args(args)
        .current_dir(dir)
        .env("PVRF_SEED", seed)
        .output()
        .expect("binary runs")
}

fn workspace() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("tiny.json"), TINY).unwrap();
    dir
}

fn text(bytes: &[u8]) -> String {
    String::from_utf8_lossy(bytes).into_owned()
}

fn ok(out: &Output) {
    assert!(out.status.success(), "stdout:\n{}\nstderr:\n{}", text(&out.stdout), text(&out.stderr));
}

fn manifest(dir: &Path) -> serde_json::Value {
    serde_json::from_str(&fs::read_to_string(dir.join("data/shapes.manifest.json")).unwrap()).unwrap()
}

/// Every file under `root`, keyed by relative path.
fn snapshot(root: &Path) -> BTreeMap<String, Vec<u8>> {
    fn walk(root: &Path, dir: &Path, out: &mut BTreeMap<String, Vec<u8>>) {
        for entry in fs::read_dir(dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                walk(root, &path, out);
            } else {
                out.insert(path.strip_prefix(root).unwrap().display().to_string(), fs::read(&path).unwrap());
            }
        }
    }
    let mut out = BTreeMap::new();
    walk(root, root, &mut out);
    out
}

#[test]
fn gen_data_writes_manifest_and_refuses_to_overwrite() {
    let dir = workspace();
    let out = pvrf(dir.path(), &["-c", "tiny.json", "gen-data"]);
    ok(&out);
    assert!(dir.path().join("data/shapes.bin").exists());
    assert_eq!(manifest(dir.path())["config"]["seed"], 2019);
    assert!(text(&out.stdout).contains("sphere"));

    let again = pvrf(dir.path(), &["-c", "tiny.json", "gen-data"]);
    assert_eq!(again.status.code(), Some(1));
    assert!(text(&again.stderr).contains("--force"));
    ok(&pvrf(dir.path(), &["-c", "tiny.json", "gen-data", "--force"]));
}

#[test]
fn seed_override_changes_only_the_seed() {
    let dir = workspace();
    ok(&pvrf(dir.path(), &["-c", "tiny.json", "gen-data"]));
    let base = manifest(dir.path());
    ok(&pvrf(dir.path(), &["-c", "tiny.json", "gen-data", "--force", "--seed", "7"]));
    let seeded = manifest(dir.path());
    assert_eq!(seeded["config"]["seed"], 7);
    assert_ne!(seeded["sha256"], base["sha256"]);
    for key in ["train_count", "test_count", "per_class_train", "per_class_test", "class_names"] {
        assert_eq!(seeded[key], base[key], "{key}");
    }
    let mut a = base["config"].clone();
    let mut b = seeded["config"].clone();
    a["seed"] = 0.into();
    b["seed"] = 0.into();
    assert_eq!(a, b);
}

#[test]
fn flag_seed_beats_environment_seed() {
    let dir = workspace();
    ok(&pvrf_env(dir.path(), &["-c", "tiny.json", "gen-data"], "11"));
    assert_eq!(manifest(dir.path())["config"]["seed"], 11);
    ok(&pvrf_env(dir.path(), &["-c", "tiny.json", "gen-data", "--force", "--seed", "12"], "11"));
    assert_eq!(manifest(dir.path())["config"]["seed"], 12);
    let bad = pvrf_env(dir.path(), &["-c", "tiny.json", "gen-data", "--force"], "eleven");
    assert_eq!(bad.status.code(), Some(1));
}

#[test]
fn fusion_without_point_checkpoint_names_the_prior_step() {
    let dir = workspace();
    let out = pvrf(dir.path(), &["-c", "tiny.json", "train", "fusion"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(text(&out.stderr).contains("pretrain point"), "{}", text(&out.stderr));
}

#[test]
fn dry_run_prints_parameter_counts_without_writing() {
    let dir = workspace();
    let out = pvrf(dir.path(), &["-c", "tiny.json", "train", "fusion", "--dry-run"]);
    ok(&out);
    let stdout = text(&out.stdout);
    assert!(stdout.contains("sm_fusion_k3") && stdout.contains("parameters"), "{stdout}");
    assert!(stdout.contains("relation") && stdout.contains("mfusion"));
    assert_eq!(snapshot(dir.path()).len(), 1);
}

#[test]
fn invalid_configuration_exits_with_one() {
    let dir = workspace();
    fs::write(dir.path().join("bad.json"), r#"{"schedule": {"epochs": 3}}"#).unwrap();
    let out = pvrf(dir.path(), &["-c", "bad.json", "train", "point", "--dry-run"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(text(&out.stderr).contains("epochs"));
    let out = pvrf(dir.path(), &["-c", "tiny.json", "--freeze-epochs", "9", "train", "point", "--dry-run"]);
    assert_eq!(out.status.code(), Some(1));
    assert_eq!(pvrf(dir.path(), &["frobnicate"]).status.code(), Some(1));
    assert_eq!(pvrf(dir.path(), &["--help"]).status.code(), Some(0));
}

#[test]
fn eval_without_dataset_is_a_runtime_error() {
    let dir = workspace();
    let out = pvrf(dir.path(), &["-c", "tiny.json", "train", "point"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(text(&out.stderr).contains("gen-data"));
}

#[test]
fn verify_passes_and_a_sign_flip_is_reported_by_name() {
    let dir = workspace();
    let out = pvrf(dir.path(), &["verify"]);
    ok(&out);
    assert!(!text(&out.stdout).contains("FAIL"));

    let out = pvrf(dir.path(), &["verify", "--sign-flip", "sigmoid"]);
    assert_eq!(out.status.code(), Some(3));
    let stdout = text(&out.stdout);
    let failing: Vec<&str> = stdout.lines().filter(|l| l.contains("FAIL")).collect();
    assert!(failing.iter().any(|l| l.starts_with("grad sigmoid ")), "{stdout}");
    assert!(!stdout.lines().any(|l| l.starts_with("grad matmul ") && l.contains("FAIL")));
}

/// Runs every data-producing subcommand in `dir`, returning stdout of each.
fn full_pipeline(dir: &Path) -> Vec<String> {
    let steps: [&[&str]; 9] = [
        &["gen-data"],
        &["train", "point"],
        &["train", "view"],
        &["train", "fusion"],
        &["train", "fusion", "--single-view"],
        &["train", "late"],
        &["eval"],
        &["robustness"],
        &["ablate"],
    ];
    steps
        .iter()
        .map(|args| {
            let mut full = vec!["-c", "tiny.json"];
            full.extend_from_slice(args);
            let out = pvrf(dir, &full);
            ok(&out);
            text(&out.stdout)
        })
        .collect()
}

#[test]
fn pipeline_outputs_are_byte_identical_across_runs() {
    let (a, b) = (workspace(), workspace());
    let out_a = full_pipeline(a.path());
    let out_b = full_pipeline(b.path());
    assert_eq!(out_a, out_b);
    let (sa, sb) = (snapshot(a.path()), snapshot(b.path()));
    assert_eq!(sa.keys().collect::<Vec<_>>(), sb.keys().collect::<Vec<_>>());
    for (name, bytes) in &sa {
        assert!(bytes == &sb[name], "{name} differs between runs");
    }
    for expected in [
        "reports/ablation.csv",
        "reports/robustness_views.csv",
        "reports/robustness_points.csv",
        "reports/pr_curve.csv",
        "reports/sm_fusion_k3_eval.json",
        "checkpoints/sm_fusion_k3.ckpt",
        "checkpoints/ablation/late_fusion.ckpt",
    ] {
        assert!(sa.contains_key(expected), "missing {expected}");
    }
    assert_eq!(String::from_utf8_lossy(&sa["reports/ablation.csv"]).lines().count(), 1 + 6);

    let eval: serde_json::Value = serde_json::from_slice(&sa["reports/sm_fusion_k3_eval.json"]).unwrap();
    for key in ["overall_acc", "mean_class_acc", "retrieval_map", "pr_curve", "config"] {
        assert!(!eval[key].is_null(), "eval report lacks {key}");
    }
}

#[test]
fn different_training_seed_changes_checkpoints() {
    let dir = workspace();
    ok(&pvrf(dir.path(), &["-c", "tiny.json", "gen-data"]));
    ok(&pvrf(dir.path(), &["-c", "tiny.json", "train", "point"]));
    let first = fs::read(dir.path().join("checkpoints/point_only.ckpt")).unwrap();
    ok(&pvrf(dir.path(), &["-c", "tiny.json", "--seed", "5", "train", "point"]));
    let second = fs::read(dir.path().join("checkpoints/point_only.ckpt")).unwrap();
    assert_ne!(first, second);
}
