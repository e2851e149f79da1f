//! Evaluation helpers: exact-match QA accuracy, pairwise diversity of a
//! query set, and CST depth counts.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::LengthUnit;
use crate::filter::ScoredQuery;
use crate::metrics::{rouge_l, tokenize};

#[derive(Debug, Error, PartialEq)]
pub enum MetricError {
    #[error("no items to score")]
    Empty,
    #[error("item {0} has no gold answers")]
    NoGold(usize),
    #[error("diversity needs at least 2 queries, got {0}")]
    TooFewQueries(usize),
}

/// One line of `predictions.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QaItem {
    pub question: String,
    pub gold_answers: Vec<String>,
    pub prediction: String,
}

/// Lowercase, drop punctuation and the articles a/an/the, collapse spaces.
pub fn normalize_answer(s: &str) -> String {
    let lower = s.to_lowercase();
    let no_punct: String = lower
        .chars()
        .map(|c| if c.is_alphanumeric() || c.is_whitespace() { c } else { ' ' })
        .collect();
    no_punct
        .split_whitespace()
        .filter(|w| !matches!(*w, "a" | "an" | "the"))
        .collect::<Vec<_>>()
        .join(" ")
}

pub fn exact_match(prediction: &str, gold: &[String], normalize: bool) -> bool {
    if normalize {
        let p = normalize_answer(prediction);
        gold.iter().any(|g| normalize_answer(g) == p)
    } else {
        gold.iter().any(|g| g == prediction)
    }
}

/// Fraction of items whose prediction matches any gold answer.
pub fn exact_match_accuracy(items: &[QaItem], normalize: bool) -> Result<f64, MetricError> {
    if items.is_empty() {
        return Err(MetricError::Empty);
    }
    if let Some(i) = items.iter().position(|it| it.gold_answers.is_empty()) {
        return Err(MetricError::NoGold(i));
    }
    let hits = items
        .iter()
        .filter(|it| exact_match(&it.prediction, &it.gold_answers, normalize))
        .count();
    Ok(hits as f64 / items.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiversityReport {
    pub pair_count_above_threshold: usize,
    pub mean_pairwise_f1: f64,
    pub max_pairwise_f1: f64,
}

/// ROUGE-L F1 over all unordered query pairs. A pair counts as above the
/// threshold when its F1 is at least `threshold`, the same bound the filter
/// rejects at.
pub fn diversity_report(
    queries: &[String],
    threshold: f64,
    unit: LengthUnit,
) -> Result<DiversityReport, MetricError> {
    if queries.len() < 2 {
        return Err(MetricError::TooFewQueries(queries.len()));
    }
    let toks: Vec<_> = queries.iter().map(|q| tokenize(q, unit)).collect();
    let mut count = 0;
    let mut sum = 0.0;
    let mut max = 0.0f64;
    let mut pairs = 0usize;
    for i in 0..toks.len() {
        for j in i + 1..toks.len() {
            let f1 = rouge_l(&toks[i], &toks[j]).f1;
            sum += f1;
            max = max.max(f1);
            pairs += 1;
            if f1 >= threshold {
                count += 1;
            }
        }
    }
    Ok(DiversityReport {
        pair_count_above_threshold: count,
        mean_pairwise_f1: sum / pairs as f64,
        max_pairwise_f1: max,
    })
}

pub fn depth_histogram(queries: &[ScoredQuery]) -> BTreeMap<usize, usize> {
    let mut hist = BTreeMap::new();
    for q in queries {
        *hist.entry(q.depth).or_insert(0) += 1;
    }
    hist
}
