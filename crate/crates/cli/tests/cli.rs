use std::path::Path;
use std::process::Command;

use mvclip_cli::commands::{cmd_eval, EvalData};
use mvclip_cli::config::EvalSection;
use mvclip_cli::{cmd_audit, cmd_synth, cmd_train, parse_config, sweep_settings, RunConfig, Sweep};
use mvclip_core::data::synthetic::{SyntheticSpec, Task};
use mvclip_core::model::Backbone;

fn mvclip() -> Command {
    Command::new(env!("CARGO_BIN_EXE_mvclip"))
}

/// Tiny model over a small synthetic set; trains in seconds.
fn tiny_config(n_cases: usize, task: &str, out: &Path) -> RunConfig {
    let text = format!(
        r#"{{
        "model": {{
            "vision": {{"image_size": 16, "channels": 3, "patch_size": 8, "width": 16, "heads": 2,
                        "depth": 2, "local_depth": 0, "views": 4, "embed_dim": 8}},
            "text": {{"context_length": 40, "width": 16, "heads": 2, "depth": 1, "embed_dim": 8}},
            "adapters": {{"bottleneck_ratio": 4}}
        }},
        "train": {{"epochs": 3, "warmup_epochs": 1, "batch_size": 4}},
        "data": {{"synthetic": {{"task": "{task}", "n_cases": {n_cases}, "image_size": 16}}}},
        "eval": {{"n_boot": 50}},
        "output_dir": {out:?}
    }}"#
    );
    parse_config(&text).unwrap()
}

fn read_csv_rows(path: &Path) -> Vec<Vec<String>> {
    let mut r = csv::Reader::from_path(path).unwrap();
    r.records().map(|x| x.unwrap().iter().map(str::to_string).collect()).collect()
}

#[test]
fn synth_writes_four_images_per_case_and_is_repeatable() {
    let dir = tempfile::tempdir().unwrap();
    let run = |sub: &str| {
        let out = dir.path().join(sub);
        let st = mvclip()
            .args(["synth", "--task", "asymmetry", "--n", "128", "--seed", "7", "--size", "32", "--out"])
            .arg(&out)
            .output()
            .unwrap();
        assert!(st.status.success(), "{}", String::from_utf8_lossy(&st.stderr));
        assert!(String::from_utf8_lossy(&st.stdout).trim().ends_with("manifest.csv"));
        out
    };
    let a = run("a");
    let b = run("b");
    let images = std::fs::read_dir(a.join("images")).unwrap().count();
    assert_eq!(images, 512);
    assert_eq!(read_csv_rows(&a.join("manifest.csv")).len(), 512);
    assert_eq!(
        std::fs::read(a.join("manifest.csv")).unwrap(),
        std::fs::read(b.join("manifest.csv")).unwrap()
    );
    for name in ["case0000_LCC.png", "case0127_RMLO.png"] {
        assert_eq!(
            std::fs::read(a.join("images").join(name)).unwrap(),
            std::fs::read(b.join("images").join(name)).unwrap()
        );
    }
}

#[test]
fn synth_balance_sets_positive_count() {
    let dir = tempfile::tempdir().unwrap();
    let spec = SyntheticSpec {
        task: Task::Presence,
        n_cases: 128,
        image_size: 16,
        balance: 0.25,
        ..SyntheticSpec::default()
    };
    let manifest = cmd_synth(&spec, dir.path()).unwrap();
    let rows = read_csv_rows(&manifest);
    let positives = rows.iter().filter(|r| r[1] == "LCC" && r[3] == "1").count();
    assert_eq!(positives, 32);
}

#[test]
fn bad_config_exits_one_with_field_path() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.json");
    std::fs::write(&path, r#"{"data": {"synthetic": {}}, "train": {"epochs": "many"}}"#).unwrap();
    let out = mvclip().args(["train", "--config"]).arg(&path).output().unwrap();
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("train.epochs"), "{err}");
}

#[test]
fn unknown_subcommand_arguments_exit_one() {
    let out = mvclip().args(["ablate", "--config", "x.json", "--sweep", "depth"]).output().unwrap();
    assert_eq!(out.status.code(), Some(1));
    let out = mvclip().args(["audit", "--backbone", "resnet50"]).output().unwrap();
    assert_eq!(out.status.code(), Some(1));
    let out = mvclip().args(["train"]).output().unwrap();
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn missing_manifest_is_a_validation_error() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("cfg.json");
    std::fs::write(&path, r#"{"data": {"manifest": "nowhere/manifest.csv"}}"#).unwrap();
    let out = mvclip().args(["train", "--config"]).arg(&path).output().unwrap();
    assert_ne!(out.status.code(), Some(0));
}

#[test]
fn zero_learning_rate_gives_flat_history() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny_config(10, "presence", dir.path());
    cfg.train.base_lr = 0.0;
    cfg.train.min_lr = 0.0;
    cfg.train.augment.hflip_prob = 0.0;
    cfg.train.augment.erase_prob = 0.0;
    cfg.cv.run_folds = Some(1);
    cmd_train(&cfg).unwrap();
    let rows = read_csv_rows(&dir.path().join("history.csv"));
    assert_eq!(rows.len(), 3);
    let losses: Vec<f64> = rows.iter().map(|r| r[3].parse().unwrap()).collect();
    for l in &losses {
        assert!((l - losses[0]).abs() < 1e-5 * losses[0].abs().max(1.0), "{losses:?}");
    }
}

#[test]
fn five_folds_on_ten_cases_write_five_checkpoints() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny_config(10, "presence", dir.path());
    cfg.train.epochs = 2;
    let report = cmd_train(&cfg).unwrap();
    assert_eq!(report.folds.len(), 5);
    for k in 0..5 {
        let f = dir.path().join(format!("fold{k}"));
        assert!(f.join("model.json").is_file());
        assert!(f.join("model.bin").is_file());
    }
    let metrics: serde_json::Value =
        serde_json::from_slice(&std::fs::read(dir.path().join("metrics.json")).unwrap()).unwrap();
    assert_eq!(metrics["config_hash"], serde_json::json!(cfg.hash()));
    assert!(metrics["summary"]["accuracy"]["std"].as_f64().unwrap() >= 0.0);
}

#[test]
fn parallel_folds_match_sequential() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny_config(12, "presence", &dir.path().join("seq"));
    cfg.train.epochs = 2;
    cfg.cv.folds = 3;
    let seq = cmd_train(&cfg).unwrap();
    cfg.cv.parallel = true;
    cfg.output_dir = dir.path().join("par");
    let par = cmd_train(&cfg).unwrap();
    assert_eq!(seq.folds, par.folds);
    assert_eq!(
        std::fs::read(dir.path().join("seq/history.csv")).unwrap(),
        std::fs::read(dir.path().join("par/history.csv")).unwrap()
    );
}

#[test]
fn eval_paths_give_probability_vectors_and_ordered_ci() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny_config(16, "presence", &dir.path().join("train"));
    cfg.cv.folds = 2;
    cfg.cv.run_folds = Some(1);
    cmd_train(&cfg).unwrap();
    let ckpt = dir.path().join("train/fold0/model.json");
    let eval = EvalSection {
        n_boot: 200,
        alpha: 0.05,
    };
    for zero_shot in [false, true] {
        let out = dir.path().join(format!("eval{zero_shot}"));
        let r = cmd_eval(&ckpt, &EvalData::Config(Box::new(cfg.clone())), zero_shot, &eval, 3, &out).unwrap();
        assert_eq!(r.predictions.len(), 16);
        for p in &r.predictions {
            assert!((p.p_negative + p.p_positive - 1.0).abs() < 1e-12);
            assert!((0.0..=1.0).contains(&p.p_positive));
        }
        if let (Some(auc), Some([lo, hi])) = (r.metrics.auc, r.metrics.auc_ci) {
            assert!(lo <= auc && auc <= hi, "{lo} {auc} {hi}");
            assert!(out.join("roc.csv").is_file());
            assert!(out.join("pr.csv").is_file());
        }
        assert!(out.join("metrics.json").is_file());
    }
    let zs: serde_json::Value =
        serde_json::from_slice(&std::fs::read(dir.path().join("evaltrue/metrics.json")).unwrap()).unwrap();
    assert_eq!(zs["prompts"][1], "This is an abnormal mammogram case.");
}

#[test]
fn eval_rejects_mismatched_config() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny_config(8, "presence", &dir.path().join("train"));
    cfg.train.epochs = 2;
    cfg.cv.folds = 2;
    cfg.cv.run_folds = Some(1);
    cmd_train(&cfg).unwrap();
    let mut other = cfg.clone();
    other.model.vision.width = 32;
    other.model.text.width = 32;
    let err = cmd_eval(
        &dir.path().join("train/fold0/model.json"),
        &EvalData::Config(Box::new(other)),
        false,
        &EvalSection::default(),
        0,
        &dir.path().join("eval"),
    )
    .unwrap_err();
    assert_eq!(err.exit_code(), 1, "{err}");
}

#[test]
fn sweeps_enumerate_their_settings() {
    let base = RunConfig::synthetic(SyntheticSpec::default());
    assert_eq!(base.model.vision.depth, 4);
    let lg: Vec<(usize, usize)> = sweep_settings(&base, Sweep::LocalGlobal)
        .iter()
        .map(|(_, c)| (c.model.vision.local_depth, c.model.vision.global_depth()))
        .collect();
    assert_eq!(lg, [(0, 4), (2, 2), (4, 0)]);
    let names: Vec<String> = sweep_settings(&base, Sweep::LocalGlobal).into_iter().map(|s| s.0).collect();
    assert_eq!(names, ["0/4", "2/2", "4/0"]);

    let views: Vec<usize> = sweep_settings(&base, Sweep::Views)
        .iter()
        .map(|(_, c)| {
            c.validate().unwrap();
            c.model.vision.views
        })
        .collect();
    assert_eq!(views, [2, 2, 4]);

    let targets: Vec<(bool, bool)> = sweep_settings(&base, Sweep::Adapters)
        .iter()
        .map(|(_, c)| (c.model.adapter_targets.vision, c.model.adapter_targets.text))
        .collect();
    assert_eq!(targets, [(true, false), (false, true), (true, true)]);
}

#[test]
fn ablate_writes_one_row_per_setting() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny_config(8, "presence", dir.path());
    cfg.train.epochs = 2;
    cfg.cv.folds = 2;
    let r = mvclip_cli::cmd_ablate(&cfg, Sweep::LocalGlobal).unwrap();
    assert_eq!(r.rows.len(), 2);
    let rows = read_csv_rows(&dir.path().join("ablation.csv"));
    assert_eq!(rows.len(), 2);
    assert_eq!(rows[0][0], "0/2");
    assert_eq!(rows[1][0], "2/0");
}

#[test]
fn audit_writes_json() {
    let dir = tempfile::tempdir().unwrap();
    let r = cmd_audit(Backbone::Vitb32, Some(dir.path())).unwrap();
    assert_eq!(r.trainable, 903_744 + 405_888);
    let v: serde_json::Value =
        serde_json::from_slice(&std::fs::read(dir.path().join("audit.json")).unwrap()).unwrap();
    assert_eq!(v["total"].as_u64().unwrap() as usize, r.total);
    assert_eq!(v["backbone"], "vitb32");
    assert_eq!(v["config_hash"].as_str().unwrap().len(), 64);
}

#[test]
fn gradcheck_command_succeeds() {
    let dir = tempfile::tempdir().unwrap();
    let out = mvclip().args(["gradcheck", "--out"]).arg(dir.path()).output().unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stdout));
    let text = String::from_utf8_lossy(&out.stdout);
    for op in mvclip_core::autograd::OP_NAMES {
        assert!(text.contains(op), "{op} missing from report");
    }
    assert!(dir.path().join("gradcheck.json").is_file());
}

#[test]
fn readme_example_config_is_valid() {
    let readme = std::fs::read_to_string(Path::new(env!("CARGO_MANIFEST_DIR")).join("../../README.md")).unwrap();
    let start = readme.find("```json\n").unwrap() + "```json\n".len();
    let end = start + readme[start..].find("```").unwrap();
    let cfg = parse_config(&readme[start..end]).unwrap();
    cfg.validate().unwrap();
}
