//! The subcommands as library functions.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::json;

use mvclip_core::adapters::audit;
use mvclip_core::data::checkpoint::{load_model, save_model};
use mvclip_core::data::manifest::{load_cases, load_manifest};
use mvclip_core::data::synthetic::{synthetic_cases, write_synthetic, SyntheticSpec};
use mvclip_core::data::Case;
use mvclip_core::gradcheck::{run_suite, SuiteReport};
use mvclip_core::model::{AdapterTargets, Backbone, ClipModel, ModelConfig};
use mvclip_core::text::{canonical_prompts, Vocabulary};
use mvclip_core::train::{fit, kfold_split, predict_cases, AugmentConfig, EpochRecord, Normalization};
use mvclip_core::vision::View;

use crate::config::{hash_json, EvalSection, RunConfig};
use crate::error::{io_error, CliError, CliResult};
use crate::report::{score_predictions, write_curves, write_history, write_json, Curves, SetMetrics, Summary};

fn create_dir(dir: &Path) -> CliResult<()> {
    std::fs::create_dir_all(dir).map_err(|e| io_error(dir, e))
}

/// The vocabulary every model is built with: the four prompts.
pub fn prompt_vocabulary() -> Vocabulary {
    Vocabulary::build(&canonical_prompts().all())
}

/// Writes a synthetic dataset; returns the manifest path.
pub fn cmd_synth(spec: &SyntheticSpec, out: &Path) -> CliResult<PathBuf> {
    spec.validate()?;
    create_dir(out)?;
    Ok(write_synthetic(spec, out)?)
}

/// Loads the configured cases at the model's input size.
pub fn load_dataset(cfg: &RunConfig) -> CliResult<Vec<Case>> {
    let v = &cfg.model.vision;
    match (&cfg.data.manifest, &cfg.data.synthetic) {
        (Some(m), None) => {
            let records = load_manifest(m, &cfg.data.views)?;
            Ok(load_cases(&records, v.image_size, v.channels)?)
        }
        (None, Some(spec)) => Ok(synthetic_cases(spec, &cfg.data.views, v.image_size, v.channels)?),
        _ => Err(CliError::validation("data: give exactly one of `manifest` and `synthetic`")),
    }
}

/// Outcome of training and scoring one fold.
#[derive(Clone, Debug)]
pub struct FoldOutcome {
    pub fold: usize,
    pub n_train: usize,
    pub best_epoch: usize,
    pub history: Vec<EpochRecord>,
    pub metrics: SetMetrics,
    pub curves: Option<Curves>,
    /// Weights of the best epoch.
    pub model: ClipModel<f32>,
    pub normalization: Normalization,
}

fn pick(cases: &[Case], idx: &[usize]) -> Vec<Case> {
    idx.iter().map(|&i| cases[i].clone()).collect()
}

fn run_fold(cfg: &RunConfig, model_cfg: &ModelConfig, cases: &[Case], fold: usize, train: &[usize], val: &[usize]) -> CliResult<FoldOutcome> {
    let prompts = canonical_prompts();
    let mut model = ClipModel::<f32>::new(model_cfg.clone(), prompt_vocabulary(), cfg.seed)?;
    let train_cases = pick(cases, train);
    let val_cases = pick(cases, val);
    let tc = cfg.train_config();
    let result = fit(&mut model, &train_cases, &val_cases, &tc, prompts.train_pair())?;
    model.params = result.best_params;
    let preds = predict_cases(&model, &val_cases, prompts.train_pair(), &tc.augment, &result.normalization)?;
    let labels: Vec<usize> = val_cases.iter().map(|c| c.label).collect();
    let (metrics, curves) = score_predictions(&preds, &labels, &cfg.eval, cfg.seed)?;
    log::info!("fold {fold}: best epoch {} accuracy {:.4}", result.best_epoch, metrics.accuracy);
    Ok(FoldOutcome {
        fold,
        n_train: train_cases.len(),
        best_epoch: result.best_epoch,
        history: result.history,
        metrics,
        curves,
        model,
        normalization: result.normalization,
    })
}

/// Stratified k-fold training of the configured model; folds run in order,
/// or on separate threads when `cv.parallel` is set.
pub fn train_folds(cfg: &RunConfig, cases: &[Case]) -> CliResult<Vec<FoldOutcome>> {
    cfg.validate()?;
    let vocab = prompt_vocabulary();
    let model_cfg = cfg.model.build(vocab.len(), cfg.train.freeze_policy())?;
    let labels: Vec<usize> = cases.iter().map(|c| c.label).collect();
    let mut splits = kfold_split(&labels, cfg.cv.folds, cfg.seed)?;
    splits.truncate(cfg.cv.run_folds.unwrap_or(cfg.cv.folds));
    if cfg.cv.parallel {
        std::thread::scope(|s| {
            let handles: Vec<_> = splits
                .iter()
                .map(|f| s.spawn(|| run_fold(cfg, &model_cfg, cases, f.k, &f.train, &f.val)))
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().unwrap_or_else(|_| Err(CliError::runtime("fold thread panicked"))))
                .collect()
        })
    } else {
        splits
            .iter()
            .map(|f| run_fold(cfg, &model_cfg, cases, f.k, &f.train, &f.val))
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoldReport {
    pub fold: usize,
    pub n_train: usize,
    pub best_epoch: usize,
    pub metrics: SetMetrics,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub command: String,
    pub config_hash: String,
    pub folds: Vec<FoldReport>,
    pub summary: Summary,
}

/// Trains every requested fold and writes `fold<k>/model.json` (+ `.bin`),
/// `fold<k>/roc.csv`, `fold<k>/pr.csv`, `history.csv` and `metrics.json`
/// under the output directory.
pub fn cmd_train(cfg: &RunConfig) -> CliResult<TrainReport> {
    cfg.validate()?;
    let cases = load_dataset(cfg)?;
    let outcomes = train_folds(cfg, &cases)?;
    let out = &cfg.output_dir;
    create_dir(out)?;
    let hash = cfg.hash();
    for o in &outcomes {
        let dir = out.join(format!("fold{}", o.fold));
        create_dir(&dir)?;
        let extra = json!({ "config_hash": hash, "fold": o.fold, "best_epoch": o.best_epoch });
        save_model(&dir.join("model.json"), &o.model, o.normalization, extra)?;
        if let Some(c) = &o.curves {
            write_curves(&dir, c)?;
        }
    }
    let histories: Vec<(usize, &[EpochRecord])> = outcomes.iter().map(|o| (o.fold, o.history.as_slice())).collect();
    write_history(&out.join("history.csv"), &histories)?;
    let report = TrainReport {
        command: "train".into(),
        config_hash: hash,
        folds: outcomes
            .iter()
            .map(|o| FoldReport {
                fold: o.fold,
                n_train: o.n_train,
                best_epoch: o.best_epoch,
                metrics: o.metrics.clone(),
            })
            .collect(),
        summary: Summary::of(&outcomes.iter().map(|o| &o.metrics).collect::<Vec<_>>())?,
    };
    write_json(&out.join("metrics.json"), &report)?;
    Ok(report)
}

/// Where `eval` reads cases from.
#[derive(Clone, Debug)]
pub enum EvalData {
    /// A manifest; the views are the model's canonical order.
    Manifest(PathBuf),
    /// A run config: its data section, and its model section must describe
    /// the checkpoint.
    Config(Box<RunConfig>),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictionRow {
    pub case_id: String,
    pub label: usize,
    pub p_negative: f64,
    pub p_positive: f64,
    pub predicted: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub command: String,
    pub config_hash: String,
    pub zero_shot: bool,
    pub prompts: [String; 2],
    pub metrics: SetMetrics,
    pub predictions: Vec<PredictionRow>,
}

/// Scores a checkpoint on a dataset with the training prompts, or with the
/// short prompts under `zero_shot`. Writes `metrics.json`, `roc.csv` and
/// `pr.csv` (the curves only when both classes occur).
pub fn cmd_eval(
    checkpoint: &Path,
    data: &EvalData,
    zero_shot: bool,
    eval: &EvalSection,
    seed: u64,
    out: &Path,
) -> CliResult<EvalReport> {
    let (expected, source) = match data {
        EvalData::Manifest(m) => (None, json!({ "manifest": m })),
        EvalData::Config(c) => {
            c.validate()?;
            let mc = c.model.build(prompt_vocabulary().len(), c.train.freeze_policy())?;
            (Some(mc), serde_json::to_value(c.as_ref()).map_err(|e| CliError::runtime(e.to_string()))?)
        }
    };
    let (mut model, snap) = load_model(checkpoint, expected.as_ref())?;
    if let Some(e) = expected {
        model.config = e;
    }
    let vcfg = &model.config.vision;
    let cases = match data {
        EvalData::Manifest(m) => {
            let views = View::order(vcfg.views)?;
            load_cases(&load_manifest(m, views)?, vcfg.image_size, vcfg.channels)?
        }
        EvalData::Config(c) => {
            let mut c = c.as_ref().clone();
            c.model.vision = vcfg.clone();
            load_dataset(&c)?
        }
    };
    if cases.is_empty() {
        return Err(CliError::validation("no cases to evaluate"));
    }
    let prompts = canonical_prompts();
    let pair = if zero_shot { prompts.zeroshot_pair() } else { prompts.train_pair() };
    let augment = AugmentConfig::default();
    let preds = predict_cases(&model, &cases, pair, &augment, &snap.normalization)?;
    let labels: Vec<usize> = cases.iter().map(|c| c.label).collect();
    let (metrics, curves) = score_predictions(&preds, &labels, eval, seed)?;
    let hash = hash_json(&json!({
        "checkpoint": snap,
        "data": source,
        "zero_shot": zero_shot,
        "eval": eval,
        "seed": seed,
    }));
    let report = EvalReport {
        command: "eval".into(),
        config_hash: hash,
        zero_shot,
        prompts: [pair[0].to_string(), pair[1].to_string()],
        metrics,
        predictions: cases
            .iter()
            .zip(&preds)
            .map(|(c, p)| PredictionRow {
                case_id: c.id.clone(),
                label: c.label,
                p_negative: p.probabilities[0],
                p_positive: p.probabilities[1],
                predicted: p.label,
            })
            .collect(),
    };
    create_dir(out)?;
    write_json(&out.join("metrics.json"), &report)?;
    if let Some(c) = &curves {
        write_curves(out, c)?;
    }
    Ok(report)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Sweep {
    LocalGlobal,
    Views,
    Adapters,
}

impl Sweep {
    pub fn parse(s: &str) -> Option<Sweep> {
        match s {
            "local_global" => Some(Sweep::LocalGlobal),
            "views" => Some(Sweep::Views),
            "adapters" => Some(Sweep::Adapters),
            _ => None,
        }
    }
}

/// One ablation setting: a label and the config that realizes it.
pub fn sweep_settings(base: &RunConfig, sweep: Sweep) -> Vec<(String, RunConfig)> {
    let mut out = Vec::new();
    match sweep {
        Sweep::LocalGlobal => {
            let n = base.model.vision.depth;
            let mut locals: Vec<usize> = (0..=n).step_by(2).collect();
            if locals.last() != Some(&n) {
                locals.push(n);
            }
            for l in locals {
                let mut c = base.clone();
                c.model.vision.local_depth = l;
                out.push((format!("{l}/{}", n - l), c));
            }
        }
        Sweep::Views => {
            let sets: [(&str, Vec<View>); 3] = [
                ("cc", vec![View::Lcc, View::Rcc]),
                ("mlo", vec![View::Lmlo, View::Rmlo]),
                ("cc+mlo", View::ALL.to_vec()),
            ];
            for (name, views) in sets {
                let mut c = base.clone();
                c.model.vision.views = views.len();
                c.data.views = views;
                out.push((name.to_string(), c));
            }
        }
        Sweep::Adapters => {
            for (name, vision, text) in [("image", true, false), ("text", false, true), ("both", true, true)] {
                let mut c = base.clone();
                c.model.adapter_targets = AdapterTargets { vision, text };
                out.push((name.to_string(), c));
            }
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub setting: String,
    pub local_depth: usize,
    pub global_depth: usize,
    pub views: usize,
    pub vision_adapters: bool,
    pub text_adapters: bool,
    pub summary: Summary,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub command: String,
    pub config_hash: String,
    pub sweep: Sweep,
    pub rows: Vec<AblationRow>,
}

/// Runs the k-fold experiment once per setting with the same seeds and
/// writes `ablation.csv` and `ablation.json`.
pub fn cmd_ablate(base: &RunConfig, sweep: Sweep) -> CliResult<AblationReport> {
    base.validate()?;
    let mut rows = Vec::new();
    for (name, cfg) in sweep_settings(base, sweep) {
        cfg.validate()?;
        log::info!("ablation setting {name}");
        let cases = load_dataset(&cfg)?;
        let outcomes = train_folds(&cfg, &cases)?;
        let v = &cfg.model.vision;
        rows.push(AblationRow {
            setting: name,
            local_depth: v.local_depth,
            global_depth: v.global_depth(),
            views: v.views,
            vision_adapters: cfg.model.adapter_targets.vision,
            text_adapters: cfg.model.adapter_targets.text,
            summary: Summary::of(&outcomes.iter().map(|o| &o.metrics).collect::<Vec<_>>())?,
        });
    }
    let report = AblationReport {
        command: "ablate".into(),
        config_hash: base.hash(),
        sweep,
        rows,
    };
    let out = &base.output_dir;
    create_dir(out)?;
    write_ablation_csv(&out.join("ablation.csv"), &report.rows)?;
    write_json(&out.join("ablation.json"), &report)?;
    Ok(report)
}

fn write_ablation_csv(path: &Path, rows: &[AblationRow]) -> CliResult<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| CliError::runtime(format!("{}: {e}", path.display())))?;
    let err = |e: csv::Error| CliError::runtime(format!("{}: {e}", path.display()));
    let opt = |m: Option<crate::report::MeanStd>, f: fn(crate::report::MeanStd) -> f64| m.map(f).map(|x| x.to_string()).unwrap_or_default();
    w.write_record([
        "setting",
        "local_depth",
        "global_depth",
        "views",
        "vision_adapters",
        "text_adapters",
        "accuracy_mean",
        "accuracy_std",
        "auc_mean",
        "auc_std",
        "prauc_mean",
        "prauc_std",
    ])
    .map_err(err)?;
    for r in rows {
        let s = &r.summary;
        w.write_record([
            r.setting.clone(),
            r.local_depth.to_string(),
            r.global_depth.to_string(),
            r.views.to_string(),
            r.vision_adapters.to_string(),
            r.text_adapters.to_string(),
            s.accuracy.mean.to_string(),
            s.accuracy.std.to_string(),
            opt(s.auc, |m| m.mean),
            opt(s.auc, |m| m.std),
            opt(s.prauc, |m| m.mean),
            opt(s.prauc, |m| m.std),
        ])
        .map_err(err)?;
    }
    w.flush().map_err(|e| io_error(path, e))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AuditOutput {
    pub command: String,
    pub config_hash: String,
    pub backbone: Backbone,
    pub total: usize,
    pub trainable: usize,
    pub fraction: f64,
}

/// Parameter counts of a full-size backbone; nothing is allocated.
pub fn cmd_audit(backbone: Backbone, out: Option<&Path>) -> CliResult<AuditOutput> {
    let cfg = ModelConfig::backbone(backbone);
    let report = audit(&cfg.layout()?);
    let result = AuditOutput {
        command: "audit".into(),
        config_hash: hash_json(&serde_json::to_value(&cfg).map_err(|e| CliError::runtime(e.to_string()))?),
        backbone,
        total: report.total,
        trainable: report.trainable,
        fraction: report.fraction,
    };
    if let Some(dir) = out {
        create_dir(dir)?;
        write_json(&dir.join("audit.json"), &result)?;
    }
    Ok(result)
}

/// Runs the finite-difference suite; an error when any check fails or an op
/// is not covered.
pub fn cmd_gradcheck(out: Option<&Path>) -> CliResult<SuiteReport> {
    let report = run_suite()?;
    if let Some(dir) = out {
        create_dir(dir)?;
        let checks: Vec<_> = report
            .checks
            .iter()
            .map(|c| json!({ "op": c.op, "name": c.name, "max_rel_error": c.max_rel_error, "checked": c.checked, "passed": c.passed }))
            .collect();
        let value = json!({
            "command": "gradcheck",
            "config_hash": hash_json(&json!({ "tolerance": report.tolerance })),
            "tolerance": report.tolerance,
            "passed": report.passed(),
            "uncovered": report.uncovered(),
            "checks": checks,
        });
        write_json(&dir.join("gradcheck.json"), &value)?;
    }
    Ok(report)
}
