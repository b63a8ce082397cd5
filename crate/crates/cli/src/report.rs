//! Metrics and output files.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use mvclip_core::objective::CasePrediction;
use mvclip_core::train::metrics::{auc_only, CurvePoint};
use mvclip_core::train::{accuracy, bootstrap_ci, mean_std, pr_auc, roc_auc, EpochRecord, PrCurve, RocCurve};

use crate::config::EvalSection;
use crate::error::{io_error, CliError, CliResult};

/// Classification metrics over one set of cases. Ranking metrics are absent
/// when the set holds a single class.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SetMetrics {
    pub n_cases: usize,
    pub n_positive: usize,
    pub accuracy: f64,
    pub auc: Option<f64>,
    pub auc_ci: Option<[f64; 2]>,
    pub prauc: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Curves {
    pub roc: RocCurve,
    pub pr: PrCurve,
}

/// Ranking score of a prediction: the positive-minus-negative logit margin,
/// which orders cases like the positive probability without saturating.
pub fn ranking_score(p: &CasePrediction) -> f64 {
    p.logits[1] - p.logits[0]
}

pub fn score_predictions(
    preds: &[CasePrediction],
    labels: &[usize],
    eval: &EvalSection,
    seed: u64,
) -> CliResult<(SetMetrics, Option<Curves>)> {
    let predicted: Vec<usize> = preds.iter().map(|p| p.label).collect();
    let acc = accuracy(&predicted, labels)?;
    let n_positive = labels.iter().filter(|&&l| l == 1).count();
    let mut m = SetMetrics {
        n_cases: labels.len(),
        n_positive,
        accuracy: acc,
        auc: None,
        auc_ci: None,
        prauc: None,
    };
    if n_positive == 0 || n_positive == labels.len() {
        return Ok((m, None));
    }
    let scores: Vec<f64> = preds.iter().map(ranking_score).collect();
    let (roc, auc) = roc_auc(&scores, labels)?;
    let (pr, prauc) = pr_auc(&scores, labels)?;
    let (lo, hi) = bootstrap_ci(auc_only, &scores, labels, eval.n_boot, eval.alpha, seed)?;
    m.auc = Some(auc);
    m.auc_ci = Some([lo, hi]);
    m.prauc = Some(prauc);
    Ok((m, Some(Curves { roc, pr })))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

impl MeanStd {
    pub fn of(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let (mean, std) = mean_std(values);
        Some(MeanStd { mean, std })
    }
}

/// Mean and sample standard deviation across folds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub accuracy: MeanStd,
    pub auc: Option<MeanStd>,
    pub prauc: Option<MeanStd>,
}

impl Summary {
    pub fn of(sets: &[&SetMetrics]) -> CliResult<Self> {
        let acc: Vec<f64> = sets.iter().map(|m| m.accuracy).collect();
        let auc: Vec<f64> = sets.iter().filter_map(|m| m.auc).collect();
        let prauc: Vec<f64> = sets.iter().filter_map(|m| m.prauc).collect();
        Ok(Summary {
            accuracy: MeanStd::of(&acc).ok_or_else(|| CliError::runtime("no folds to summarize"))?,
            auc: MeanStd::of(&auc),
            prauc: MeanStd::of(&prauc),
        })
    }
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| CliError::runtime(e.to_string()))?;
    text.push('\n');
    std::fs::write(path, text).map_err(|e| io_error(path, e))
}

fn csv_writer(path: &Path) -> CliResult<csv::Writer<std::fs::File>> {
    csv::Writer::from_path(path).map_err(|e| CliError::runtime(format!("{}: {e}", path.display())))
}

fn finish(path: &Path, mut w: csv::Writer<std::fs::File>) -> CliResult<()> {
    w.flush().map_err(|e| io_error(path, e))
}

fn write_points(path: &Path, header: [&str; 3], points: &[CurvePoint]) -> CliResult<()> {
    let mut w = csv_writer(path)?;
    let err = |e: csv::Error| CliError::runtime(format!("{}: {e}", path.display()));
    w.write_record(header).map_err(err)?;
    for p in points {
        w.write_record([p.threshold.to_string(), p.x.to_string(), p.y.to_string()])
            .map_err(err)?;
    }
    finish(path, w)
}

pub fn write_curves(dir: &Path, curves: &Curves) -> CliResult<()> {
    write_points(&dir.join("roc.csv"), ["threshold", "fpr", "tpr"], &curves.roc.points)?;
    write_points(&dir.join("pr.csv"), ["threshold", "recall", "precision"], &curves.pr.points)
}

/// Per-epoch history of every fold.
pub fn write_history(path: &Path, folds: &[(usize, &[EpochRecord])]) -> CliResult<()> {
    let mut w = csv_writer(path)?;
    let err = |e: csv::Error| CliError::runtime(format!("{}: {e}", path.display()));
    w.write_record(["fold", "epoch", "lr", "train_loss", "val_accuracy"])
        .map_err(err)?;
    for (fold, history) in folds {
        for h in history.iter() {
            w.write_record([
                fold.to_string(),
                h.epoch.to_string(),
                h.lr.to_string(),
                h.train_loss.to_string(),
                h.val_accuracy.to_string(),
            ])
            .map_err(err)?;
        }
    }
    finish(path, w)
}

/// Writes `text` followed by a newline to stdout, ignoring a closed pipe.
pub fn print_line(text: &str) {
    let mut out = std::io::stdout().lock();
    let _ = writeln!(out, "{text}");
}
