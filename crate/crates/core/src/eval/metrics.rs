//! Overlap metrics between a prediction and a reference.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use super::EvalError;

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Scores {
    pub precision: f64,
    pub recall: f64,
    pub f_measure: f64,
}

impl Scores {
    fn from_counts(overlap: usize, pred: usize, reference: usize) -> Self {
        let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
        let precision = ratio(overlap, pred);
        let recall = ratio(overlap, reference);
        let f_measure = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        Scores {
            precision,
            recall,
            f_measure,
        }
    }
}

fn words(text: &str) -> Vec<String> {
    text.split_whitespace().map(str::to_lowercase).collect()
}

fn ngram_counts(tokens: &[String], n: usize) -> HashMap<&[String], usize> {
    let mut counts = HashMap::new();
    if tokens.len() >= n {
        for gram in tokens.windows(n) {
            *counts.entry(gram).or_insert(0) += 1;
        }
    }
    counts
}

/// Clipped n-gram overlap on lowercased whitespace tokens. `n` must be ≥ 1.
pub fn rouge_n(pred: &str, reference: &str, n: usize) -> Scores {
    assert!(n >= 1, "n-gram order must be positive");
    let (p, r) = (words(pred), words(reference));
    let (pc, rc) = (ngram_counts(&p, n), ngram_counts(&r, n));
    let overlap = pc
        .iter()
        .map(|(gram, &c)| c.min(rc.get(gram).copied().unwrap_or(0)))
        .sum();
    Scores::from_counts(overlap, pc.values().sum(), rc.values().sum())
}

/// Length of the longest common subsequence.
pub fn lcs_len<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut row = vec![0usize; b.len() + 1];
    for x in a {
        let mut diag = 0;
        for (j, y) in b.iter().enumerate() {
            let up = row[j + 1];
            row[j + 1] = if x == y { diag + 1 } else { up.max(row[j]) };
            diag = up;
        }
    }
    row[b.len()]
}

/// LCS-based scores: `P = LCS/|pred|`, `R = LCS/|ref|`.
pub fn rouge_l(pred: &str, reference: &str) -> Scores {
    let (p, r) = (words(pred), words(reference));
    Scores::from_counts(lcs_len(&p, &r), p.len(), r.len())
}

fn normalize_answer(text: &str) -> Vec<String> {
    text.to_lowercase()
        .chars()
        .filter(|c| !c.is_ascii_punctuation())
        .collect::<String>()
        .split_whitespace()
        .map(str::to_string)
        .collect()
}

/// Bag-of-words F1 after lowercasing and stripping punctuation. Articles are kept.
///
/// If either side normalizes to nothing, the score is 1 when both do and 0 otherwise.
pub fn token_f1(pred: &str, reference: &str) -> f64 {
    let (p, r) = (normalize_answer(pred), normalize_answer(reference));
    if p.is_empty() || r.is_empty() {
        return if p == r { 1.0 } else { 0.0 };
    }
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for w in &r {
        *counts.entry(w).or_insert(0) += 1;
    }
    let mut common = 0;
    for w in &p {
        if let Some(c) = counts.get_mut(w.as_str()) {
            if *c > 0 {
                *c -= 1;
                common += 1;
            }
        }
    }
    Scores::from_counts(common, p.len(), r.len()).f_measure
}

/// First label, in `labels` order, contained in `output` ignoring case.
pub fn extract_label<'a>(output: &str, labels: &'a [String]) -> Option<&'a str> {
    let output = output.to_lowercase();
    labels
        .iter()
        .find(|l| output.contains(&l.to_lowercase()))
        .map(String::as_str)
}

/// Percentage of positions whose extracted labels agree. Two outputs with no
/// recognisable label agree. An empty comparison scores 100.
pub fn agreement_accuracy<A: AsRef<str>, B: AsRef<str>>(
    outputs_a: &[A],
    outputs_b: &[B],
    labels: &[String],
) -> Result<f64, EvalError> {
    if outputs_a.len() != outputs_b.len() {
        return Err(EvalError::LengthMismatch {
            left: outputs_a.len(),
            right: outputs_b.len(),
        });
    }
    if outputs_a.is_empty() {
        return Ok(100.0);
    }
    let agree = outputs_a
        .iter()
        .zip(outputs_b)
        .filter(|(a, b)| extract_label(a.as_ref(), labels) == extract_label(b.as_ref(), labels))
        .count();
    Ok(100.0 * agree as f64 / outputs_a.len() as f64)
}
