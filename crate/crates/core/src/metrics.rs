//! Open-vocabulary metrics over generated strings.

use alloc::collections::BTreeMap;
use alloc::string::String;

use crate::error::{Error, Result};
use crate::text::{normalize, tokenize};

/// Fraction of predictions equal to their reference after normalization.
pub fn exact_match_accuracy<P: AsRef<str>, G: AsRef<str>>(predictions: &[P], golds: &[G]) -> Result<f64> {
    if predictions.len() != golds.len() {
        return Err(Error::LengthMismatch(predictions.len(), golds.len()));
    }
    if golds.is_empty() {
        return Err(Error::EmptyReference);
    }
    let hits = predictions
        .iter()
        .zip(golds)
        .filter(|(p, g)| normalize(p.as_ref()) == normalize(g.as_ref()))
        .count();
    Ok(hits as f64 / golds.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct DetectionScore {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

fn multiset<'a, I: IntoIterator<Item = &'a str>>(items: I) -> BTreeMap<&'a str, usize> {
    let mut m = BTreeMap::new();
    for it in items {
        *m.entry(it).or_insert(0) += 1;
    }
    m
}

/// Multiset precision/recall/F1 of predicted object names.
///
/// Every predicted word counts toward the prediction size, so words that
/// are not object names lower precision without ever matching.
pub fn detection_f1<S: AsRef<str>>(prediction: &str, gold_names: &[S]) -> Result<DetectionScore> {
    if gold_names.is_empty() {
        return Err(Error::EmptyReference);
    }
    let pred_tokens = tokenize(prediction);
    let gold_tokens: alloc::vec::Vec<String> = gold_names.iter().map(|g| normalize(g.as_ref())).collect();
    let pred = multiset(pred_tokens.iter().map(String::as_str));
    let gold = multiset(gold_tokens.iter().map(String::as_str));
    let matches: usize = pred
        .iter()
        .map(|(name, &c)| c.min(gold.get(name).copied().unwrap_or(0)))
        .sum();
    let precision = if pred_tokens.is_empty() {
        0.0
    } else {
        matches as f64 / pred_tokens.len() as f64
    };
    let recall = matches as f64 / gold_tokens.len() as f64;
    let f1 = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    Ok(DetectionScore { precision, recall, f1 })
}
