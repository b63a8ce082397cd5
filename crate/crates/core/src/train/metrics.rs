//! Accuracy, ROC/AUC, precision-recall area and bootstrap intervals.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::registry::stream_rng;

pub fn accuracy(predicted: &[usize], labels: &[usize]) -> Result<f64> {
    if predicted.is_empty() || predicted.len() != labels.len() {
        return Err(Error::Metric(format!(
            "accuracy needs equal non-empty inputs, got {} and {}",
            predicted.len(),
            labels.len()
        )));
    }
    let hits = predicted.iter().zip(labels).filter(|(a, b)| a == b).count();
    Ok(hits as f64 / labels.len() as f64)
}

/// Operating points from the highest threshold down.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub threshold: f64,
    pub x: f64,
    pub y: f64,
}

/// `(fpr, tpr)` points starting at (0,0) and ending at (1,1).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RocCurve {
    pub points: Vec<CurvePoint>,
    pub area: f64,
}

/// `(recall, precision)` points, recall nondecreasing.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrCurve {
    pub points: Vec<CurvePoint>,
    pub area: f64,
}

struct Sweep {
    /// (threshold, cumulative tp, cumulative fp) after each tie group.
    groups: Vec<(f64, u64, u64)>,
    pos: u64,
    neg: u64,
}

fn sweep(scores: &[f64], labels: &[usize]) -> Result<Sweep> {
    if scores.len() != labels.len() || scores.is_empty() {
        return Err(Error::Metric(format!(
            "need equal non-empty inputs, got {} scores and {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if let Some(s) = scores.iter().find(|s| s.is_nan()) {
        return Err(Error::Metric(format!("score {s} is not a number")));
    }
    if let Some(l) = labels.iter().find(|&&l| l > 1) {
        return Err(Error::Metric(format!("label {l} is not binary")));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut groups = Vec::new();
    let (mut tp, mut fp) = (0u64, 0u64);
    let mut i = 0;
    while i < order.len() {
        let s = scores[order[i]];
        while i < order.len() && scores[order[i]] == s {
            if labels[order[i]] == 1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        groups.push((s, tp, fp));
    }
    Ok(Sweep {
        groups,
        pos: tp,
        neg: fp,
    })
}

/// Empirical ROC and its trapezoidal area. Areas are accumulated in integers,
/// so the result equals the Mann-Whitney statistic with half credit for ties.
pub fn roc_auc(scores: &[f64], labels: &[usize]) -> Result<(RocCurve, f64)> {
    let sw = sweep(scores, labels)?;
    if sw.pos == 0 || sw.neg == 0 {
        return Err(Error::Metric("ROC needs both classes".into()));
    }
    let (p, n) = (sw.pos as f64, sw.neg as f64);
    let mut points = vec![CurvePoint {
        threshold: f64::INFINITY,
        x: 0.0,
        y: 0.0,
    }];
    // twice the area in units of one (positive, negative) pair
    let mut twice: u128 = 0;
    let (mut ptp, mut pfp) = (0u64, 0u64);
    for &(t, tp, fp) in &sw.groups {
        twice += ((fp - pfp) as u128) * ((tp + ptp) as u128);
        points.push(CurvePoint {
            threshold: t,
            x: fp as f64 / n,
            y: tp as f64 / p,
        });
        ptp = tp;
        pfp = fp;
    }
    let area = twice as f64 / (2.0 * p * n);
    Ok((RocCurve { points, area }, area))
}

/// Precision-recall sweep with the step-wise area `sum (R_i - R_{i-1}) P_i`.
pub fn pr_auc(scores: &[f64], labels: &[usize]) -> Result<(PrCurve, f64)> {
    let sw = sweep(scores, labels)?;
    if sw.pos == 0 {
        return Err(Error::Metric("precision-recall needs at least one positive".into()));
    }
    let p = sw.pos as f64;
    let mut points = Vec::with_capacity(sw.groups.len());
    let mut area = 0.0;
    let mut prev_recall = 0.0;
    for &(t, tp, fp) in &sw.groups {
        let recall = tp as f64 / p;
        let precision = tp as f64 / (tp + fp) as f64;
        area += (recall - prev_recall) * precision;
        prev_recall = recall;
        points.push(CurvePoint {
            threshold: t,
            x: recall,
            y: precision,
        });
    }
    Ok((PrCurve { points, area }, area))
}

pub fn auc_only(scores: &[f64], labels: &[usize]) -> Result<f64> {
    Ok(roc_auc(scores, labels)?.1)
}

pub fn prauc_only(scores: &[f64], labels: &[usize]) -> Result<f64> {
    Ok(pr_auc(scores, labels)?.1)
}

/// Linear-interpolated quantile of sorted values.
fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// Percentile bootstrap interval of `metric` over case-level resamples.
/// Resamples that contain a single class are redrawn.
pub fn bootstrap_ci(
    metric: impl Fn(&[f64], &[usize]) -> Result<f64>,
    scores: &[f64],
    labels: &[usize],
    n_boot: usize,
    alpha: f64,
    seed: u64,
) -> Result<(f64, f64)> {
    if n_boot == 0 || !(0.0..1.0).contains(&alpha) {
        return Err(Error::Metric(format!("bad bootstrap setup n_boot={n_boot} alpha={alpha}")));
    }
    if scores.len() != labels.len() || scores.is_empty() {
        return Err(Error::Metric("bootstrap needs equal non-empty inputs".into()));
    }
    let pos = labels.iter().filter(|&&l| l == 1).count();
    if pos == 0 || pos == labels.len() {
        return Err(Error::Metric("bootstrap needs both classes".into()));
    }
    let mut rng = stream_rng(seed, "bootstrap");
    let n = scores.len();
    let mut values = Vec::with_capacity(n_boot);
    let mut s = vec![0.0; n];
    let mut l = vec![0usize; n];
    while values.len() < n_boot {
        for k in 0..n {
            let i = rng.random_range(0..n);
            s[k] = scores[i];
            l[k] = labels[i];
        }
        let p = l.iter().filter(|&&x| x == 1).count();
        if p == 0 || p == n {
            continue;
        }
        values.push(metric(&s, &l)?);
    }
    values.sort_by(f64::total_cmp);
    Ok((quantile(&values, alpha / 2.0), quantile(&values, 1.0 - alpha / 2.0)))
}

/// Mean and sample standard deviation (zero for a single value).
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() == 1 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn worked_example() {
        let (_, auc) = roc_auc(&[0.1, 0.4, 0.35, 0.8], &[0, 0, 1, 1]).unwrap();
        assert_eq!(auc, 0.75);
    }

    #[test]
    fn separated_and_tied() {
        assert_eq!(auc_only(&[0.1, 0.2, 0.8, 0.9], &[0, 0, 1, 1]).unwrap(), 1.0);
        assert_eq!(auc_only(&[0.5; 6], &[0, 1, 0, 1, 1, 0]).unwrap(), 0.5);
        assert!(auc_only(&[0.1, 0.2], &[1, 1]).is_err());
    }

    #[test]
    fn roc_endpoints() {
        let (c, _) = roc_auc(&[0.3, 0.1, 0.9, 0.3], &[1, 0, 1, 0]).unwrap();
        let first = &c.points[0];
        let last = c.points.last().unwrap();
        assert_eq!((first.x, first.y), (0.0, 0.0));
        assert_eq!((last.x, last.y), (1.0, 1.0));
    }

    #[test]
    fn pr_perfect_and_single_positive_first() {
        assert_eq!(prauc_only(&[0.1, 0.2, 0.8, 0.9], &[0, 0, 1, 1]).unwrap(), 1.0);
        assert_eq!(prauc_only(&[0.9, 0.2, 0.1], &[1, 0, 0]).unwrap(), 1.0);
        assert!(prauc_only(&[0.9, 0.2], &[0, 0]).is_err());
    }

    #[test]
    fn pr_steps() {
        // ranking: +, -, +  -> recall 0.5 at precision 1, then 1.0 at 2/3
        let a = prauc_only(&[0.9, 0.5, 0.1], &[1, 0, 1]).unwrap();
        assert!((a - (0.5 + 0.5 * 2.0 / 3.0)).abs() < 1e-15);
    }

    #[test]
    fn bootstrap_is_seeded() {
        let s = [0.1, 0.4, 0.35, 0.8, 0.2, 0.7, 0.65, 0.3];
        let l = [0, 0, 1, 1, 0, 1, 1, 0];
        let a = bootstrap_ci(auc_only, &s, &l, 200, 0.05, 3).unwrap();
        let b = bootstrap_ci(auc_only, &s, &l, 200, 0.05, 3).unwrap();
        assert_eq!(a, b);
        assert!(a.0 <= a.1);
    }

    #[test]
    fn mean_std_sample() {
        let (m, s) = mean_std(&[1.0, 2.0, 3.0]);
        assert_eq!(m, 2.0);
        assert!((s - 1.0).abs() < 1e-15);
        assert_eq!(mean_std(&[4.0]), (4.0, 0.0));
    }
}
