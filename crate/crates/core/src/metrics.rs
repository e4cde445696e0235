//! Semantic scores, instance average precision and regression statistics.

use serde::{Deserialize, Serialize};

use crate::cloud::UNLABELED;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub class: i32,
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub iou: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SemanticReport {
    pub per_class: Vec<ClassMetrics>,
    pub mean_precision: f64,
    pub mean_recall: f64,
    pub mean_f1: f64,
    pub miou: f64,
    /// Classes with no predicted or true points; left out of the means.
    pub excluded: Vec<i32>,
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Per-class precision, recall, F1 and IoU plus their means.
///
/// Points whose ground truth is unlabeled (`-1`) are ignored. A prediction
/// outside `classes` counts as a false negative of the true class.
pub fn semantic_metrics(pred: &[i32], gt: &[i32], classes: &[i32]) -> Result<SemanticReport> {
    if pred.len() != gt.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} predictions vs {} ground-truth labels",
            pred.len(),
            gt.len()
        )));
    }
    let mut per_class = Vec::with_capacity(classes.len());
    let mut excluded = Vec::new();
    for &c in classes {
        let (mut tp, mut fp, mut fn_) = (0, 0, 0);
        for (&p, &g) in pred.iter().zip(gt) {
            if g == UNLABELED {
                continue;
            }
            match (p == c, g == c) {
                (true, true) => tp += 1,
                (true, false) => fp += 1,
                (false, true) => fn_ += 1,
                _ => {}
            }
        }
        let precision = ratio(tp, tp + fp);
        let recall = ratio(tp, tp + fn_);
        let f1 = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
        if tp + fp + fn_ == 0 {
            excluded.push(c);
        }
        per_class.push(ClassMetrics {
            class: c,
            tp,
            fp,
            fn_,
            precision,
            recall,
            f1,
            iou: ratio(tp, tp + fp + fn_),
        });
    }
    let included: Vec<&ClassMetrics> = per_class.iter().filter(|m| !excluded.contains(&m.class)).collect();
    let mean = |f: fn(&ClassMetrics) -> f64| {
        if included.is_empty() {
            0.0
        } else {
            included.iter().map(|m| f(m)).sum::<f64>() / included.len() as f64
        }
    };
    Ok(SemanticReport {
        mean_precision: mean(|m| m.precision),
        mean_recall: mean(|m| m.recall),
        mean_f1: mean(|m| m.f1),
        miou: mean(|m| m.iou),
        per_class,
        excluded,
    })
}

/// Point-set intersection over union of two sorted, deduplicated index lists.
pub fn set_iou(a: &[usize], b: &[usize]) -> f64 {
    let (mut i, mut j, mut inter) = (0, 0, 0);
    while i < a.len() && j < b.len() {
        match a[i].cmp(&b[j]) {
            std::cmp::Ordering::Less => i += 1,
            std::cmp::Ordering::Greater => j += 1,
            std::cmp::Ordering::Equal => {
                inter += 1;
                i += 1;
                j += 1;
            }
        }
    }
    let union = a.len() + b.len() - inter;
    ratio(inter, union)
}

/// A predicted instance for scoring: sorted point indices and a confidence.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoredInstance {
    pub indices: Vec<usize>,
    pub score: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Interpolation {
    /// Area under the monotone precision envelope at every recall step.
    AllPoint,
    /// Mean envelope precision at recall 0, 0.1, ..., 1.
    ElevenPoint,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdResult {
    pub threshold: f64,
    pub ap: f64,
    /// Precision and recall after each prediction in score order.
    pub precision: Vec<f64>,
    pub recall: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ApReport {
    pub ap: f64,
    pub ap50: f64,
    pub ap25: f64,
    pub per_threshold: Vec<ThresholdResult>,
}

/// IoU thresholds averaged into AP: 0.50, 0.55, ..., 0.95.
pub fn ap_thresholds() -> Vec<f64> {
    (0..10).map(|i| (50 + 5 * i) as f64 / 100.0).collect()
}

/// True-positive flags of predictions in descending score order (stable for
/// ties). Each prediction takes the unmatched ground truth of highest IoU,
/// lowest index on ties, when that IoU is at least `t`.
pub fn greedy_match(preds: &[ScoredInstance], gt: &[Vec<usize>], t: f64) -> Vec<bool> {
    let mut order: Vec<usize> = (0..preds.len()).collect();
    order.sort_by(|&a, &b| preds[b].score.total_cmp(&preds[a].score));
    let mut matched = vec![false; gt.len()];
    order
        .into_iter()
        .map(|p| {
            let mut best: Option<(usize, f64)> = None;
            for (g, inst) in gt.iter().enumerate() {
                if matched[g] {
                    continue;
                }
                let iou = set_iou(&preds[p].indices, inst);
                if best.is_none_or(|(_, b)| iou > b) {
                    best = Some((g, iou));
                }
            }
            match best {
                Some((g, iou)) if iou >= t => {
                    matched[g] = true;
                    true
                }
                _ => false,
            }
        })
        .collect()
}

/// Average precision of a sequence of TP flags against `n_gt` ground truths.
pub fn average_precision(tp_flags: &[bool], n_gt: usize, interp: Interpolation) -> (f64, Vec<f64>, Vec<f64>) {
    let mut precision = Vec::with_capacity(tp_flags.len());
    let mut recall = Vec::with_capacity(tp_flags.len());
    let mut tp = 0usize;
    for (k, &flag) in tp_flags.iter().enumerate() {
        tp += usize::from(flag);
        precision.push(tp as f64 / (k + 1) as f64);
        recall.push(ratio(tp, n_gt));
    }
    let mut envelope = precision.clone();
    for k in (0..envelope.len().saturating_sub(1)).rev() {
        envelope[k] = envelope[k].max(envelope[k + 1]);
    }
    let ap = match interp {
        Interpolation::AllPoint => {
            let sum: f64 = tp_flags
                .iter()
                .zip(&envelope)
                .filter(|(f, _)| **f)
                .map(|(_, p)| p)
                .sum();
            sum / n_gt as f64
        }
        Interpolation::ElevenPoint => {
            let mut total = 0.0;
            for i in 0..=10 {
                let r = i as f64 / 10.0;
                let p = recall
                    .iter()
                    .zip(&envelope)
                    .filter(|(rc, _)| **rc >= r - 1e-12)
                    .map(|(_, p)| *p)
                    .fold(0.0, f64::max);
                total += p;
            }
            total / 11.0
        }
    };
    (ap, precision, recall)
}

/// AP averaged over 0.50..0.95 plus AP@50 and AP@25.
pub fn instance_ap(preds: &[ScoredInstance], gt: &[Vec<usize>], interp: Interpolation) -> Result<ApReport> {
    if gt.is_empty() {
        return Err(Error::EmptyInput("AP is undefined without ground-truth instances".into()));
    }
    if preds.iter().any(|p| !p.score.is_finite()) {
        return Err(Error::NonFinite("instance score".into()));
    }
    let at = |t: f64| {
        let flags = greedy_match(preds, gt, t);
        let (ap, precision, recall) = average_precision(&flags, gt.len(), interp);
        ThresholdResult {
            threshold: t,
            ap,
            precision,
            recall,
        }
    };
    let per_threshold: Vec<ThresholdResult> = ap_thresholds().into_iter().map(at).collect();
    let mean = per_threshold.iter().map(|r| r.ap).sum::<f64>() / per_threshold.len() as f64;
    // The mean of equal values can round one ulp above them.
    let ap = mean.min(per_threshold.iter().map(|r| r.ap).fold(0.0, f64::max));
    let ap50 = per_threshold[0].ap;
    let ap25 = at(0.25).ap;
    let report = ApReport {
        ap,
        ap50,
        ap25,
        per_threshold,
    };
    assert!(
        report.ap25 >= report.ap50 && report.ap50 >= report.ap,
        "AP monotonicity violated: {report:?}"
    );
    Ok(report)
}

/// Ground-truth instance sets of one semantic class; unlabeled points and
/// negative instance ids are skipped.
pub fn gt_instances(semantic: &[i32], instance: &[i32], class: i32) -> Vec<Vec<usize>> {
    let mut map: std::collections::BTreeMap<i32, Vec<usize>> = std::collections::BTreeMap::new();
    for (i, (&s, &k)) in semantic.iter().zip(instance).enumerate() {
        if s == class && k >= 0 {
            map.entry(k).or_default().push(i);
        }
    }
    map.into_values().collect()
}

fn check_pairs(truth: &[f64], pred: &[f64]) -> Result<()> {
    if truth.len() != pred.len() {
        return Err(Error::DimensionMismatch(format!("{} truths vs {} predictions", truth.len(), pred.len())));
    }
    if truth.len() < 2 {
        return Err(Error::invalid("need at least two pairs"));
    }
    Ok(())
}

/// Coefficient of determination `1 - SS_res / SS_tot`.
pub fn r2(truth: &[f64], pred: &[f64]) -> Result<f64> {
    check_pairs(truth, pred)?;
    let mean = truth.iter().sum::<f64>() / truth.len() as f64;
    let ss_tot: f64 = truth.iter().map(|t| (t - mean).powi(2)).sum();
    if ss_tot == 0.0 {
        return Err(Error::Degenerate("R² is undefined for constant truth".into()));
    }
    let ss_res: f64 = truth.iter().zip(pred).map(|(t, p)| (t - p).powi(2)).sum();
    Ok(1.0 - ss_res / ss_tot)
}

pub fn rmse(truth: &[f64], pred: &[f64]) -> Result<f64> {
    check_pairs(truth, pred)?;
    let ss: f64 = truth.iter().zip(pred).map(|(t, p)| (t - p).powi(2)).sum();
    Ok((ss / truth.len() as f64).sqrt())
}

/// Report values scaled by 100 and rounded to one decimal.
pub fn percent(v: f64) -> f64 {
    (v * 1000.0).round() / 10.0
}
