use serde::{Deserialize, Serialize};

use crate::datagen::Polarity;
use crate::error::{arg, Result};

/// Classification and regression-style scores for one prediction set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub num_classes: usize,
    pub accuracy: f64,
    pub weighted_f1: f64,
    /// Mean absolute error of polarity scores; present when a polarity table is given.
    pub mae: Option<f64>,
    /// Pearson correlation of polarity scores; absent when either side is constant.
    pub corr: Option<f64>,
    /// Weighted F1 for negative vs non-negative, and negative vs positive
    /// (truly neutral samples excluded from the second).
    pub binary_f1: Option<(f64, Option<f64>)>,
}

/// `(tp, fp, fn)` per class.
fn confusion_counts(
    predictions: &[usize],
    labels: &[usize],
    num_classes: usize,
) -> Vec<(usize, usize, usize)> {
    let mut counts = vec![(0, 0, 0); num_classes];
    for (&p, &y) in predictions.iter().zip(labels) {
        if p == y {
            counts[y].0 += 1;
        } else {
            counts[p].1 += 1;
            counts[y].2 += 1;
        }
    }
    counts
}

/// Per-class F1 averaged with weights proportional to true-class support.
pub fn weighted_f1(predictions: &[usize], labels: &[usize], num_classes: usize) -> f64 {
    let n = labels.len() as f64;
    confusion_counts(predictions, labels, num_classes)
        .into_iter()
        .map(|(tp, fp, fneg)| {
            let support = (tp + fneg) as f64;
            let denom = (2 * tp + fp + fneg) as f64;
            let f1 = if denom == 0.0 {
                0.0
            } else {
                2.0 * tp as f64 / denom
            };
            f1 * support / n
        })
        .sum()
}

pub fn accuracy(predictions: &[usize], labels: &[usize]) -> f64 {
    predictions
        .iter()
        .zip(labels)
        .filter(|(p, y)| p == y)
        .count() as f64
        / labels.len() as f64
}

/// Mean absolute error and Pearson correlation.
pub fn regression_metrics(predicted: &[f64], target: &[f64]) -> Result<(f64, Option<f64>)> {
    if predicted.len() != target.len() || predicted.is_empty() {
        return arg("regression metrics need equal, non-empty vectors");
    }
    let n = predicted.len() as f64;
    let mae = predicted
        .iter()
        .zip(target)
        .map(|(p, t)| (p - t).abs())
        .sum::<f64>()
        / n;
    let (mp, mt) = (
        predicted.iter().sum::<f64>() / n,
        target.iter().sum::<f64>() / n,
    );
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (p, t) in predicted.iter().zip(target) {
        sxy += (p - mp) * (t - mt);
        sxx += (p - mp) * (p - mp);
        syy += (t - mt) * (t - mt);
    }
    let corr = if sxx == 0.0 || syy == 0.0 {
        None
    } else {
        Some((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
    };
    Ok((mae, corr))
}

pub fn compute_metrics(
    predictions: &[usize],
    labels: &[usize],
    num_classes: usize,
    polarity_table: Option<&[Polarity]>,
) -> Result<MetricsReport> {
    if predictions.len() != labels.len() {
        return arg(format!(
            "{} predictions for {} labels",
            predictions.len(),
            labels.len()
        ));
    }
    if labels.is_empty() {
        return arg("cannot score an empty prediction set");
    }
    if let Some(&bad) = predictions
        .iter()
        .chain(labels)
        .find(|&&c| c >= num_classes)
    {
        return arg(format!(
            "class {bad} out of range for {num_classes} classes"
        ));
    }
    let mut report = MetricsReport {
        num_classes,
        accuracy: accuracy(predictions, labels),
        weighted_f1: weighted_f1(predictions, labels, num_classes),
        mae: None,
        corr: None,
        binary_f1: None,
    };
    if let Some(table) = polarity_table {
        let score = |c: usize| table[c].score();
        let ps: Vec<f64> = predictions.iter().map(|&c| score(c)).collect();
        let ts: Vec<f64> = labels.iter().map(|&c| score(c)).collect();
        let (mae, corr) = regression_metrics(&ps, &ts)?;
        report.mae = Some(mae);
        report.corr = corr;

        let neg = |c: usize| usize::from(table[c] != Polarity::Negative);
        let bp: Vec<usize> = predictions.iter().map(|&c| neg(c)).collect();
        let bl: Vec<usize> = labels.iter().map(|&c| neg(c)).collect();
        let non_negative = weighted_f1(&bp, &bl, 2);
        let (mut bp2, mut bl2) = (Vec::new(), Vec::new());
        for (&p, &y) in predictions.iter().zip(labels) {
            if table[y] != Polarity::Neutral {
                bp2.push(neg(p));
                bl2.push(neg(y));
            }
        }
        let positive = (!bl2.is_empty()).then(|| weighted_f1(&bp2, &bl2, 2));
        report.binary_f1 = Some((non_negative, positive));
    }
    Ok(report)
}
