//! Per-class and support-weighted F1.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct F1Report {
    pub weighted: f64,
    pub per_class: Vec<f64>,
    pub support: Vec<usize>,
}

/// F1 per class (0 when undefined) and the support-weighted mean over `k`
/// classes.
pub fn weighted_f1(predictions: &[usize], golds: &[usize], k: usize) -> Result<F1Report> {
    if predictions.len() != golds.len() {
        return Err(Error::Shape(format!(
            "{} predictions for {} gold labels",
            predictions.len(),
            golds.len()
        )));
    }
    if golds.is_empty() {
        return Err(Error::Dataset("weighted F1 of an empty label sequence".into()));
    }
    if let Some(&bad) = predictions.iter().chain(golds).find(|&&c| c >= k) {
        return Err(Error::Shape(format!("label {bad} outside [0, {k})")));
    }
    let mut tp = vec![0usize; k];
    let mut predicted = vec![0usize; k];
    let mut support = vec![0usize; k];
    for (&p, &g) in predictions.iter().zip(golds) {
        predicted[p] += 1;
        support[g] += 1;
        if p == g {
            tp[p] += 1;
        }
    }
    let ratio = |num: usize, den: usize| if den == 0 { 0.0 } else { num as f64 / den as f64 };
    let per_class: Vec<f64> = (0..k)
        .map(|c| {
            let precision = ratio(tp[c], predicted[c]);
            let recall = ratio(tp[c], support[c]);
            if precision + recall == 0.0 {
                0.0
            } else {
                2.0 * precision * recall / (precision + recall)
            }
        })
        .collect();
    let n = golds.len() as f64;
    let weighted = per_class
        .iter()
        .zip(&support)
        .map(|(f, &s)| f * s as f64 / n)
        .sum();
    Ok(F1Report {
        weighted,
        per_class,
        support,
    })
}

/// Fraction of exact matches.
pub fn accuracy(predictions: &[usize], golds: &[usize]) -> f64 {
    let hits = predictions.iter().zip(golds).filter(|(p, g)| p == g).count();
    hits as f64 / golds.len().max(1) as f64
}
