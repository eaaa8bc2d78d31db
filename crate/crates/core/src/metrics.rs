//! ROC AUC, positive-class F1 and threshold selection.
//!
//! A score at or above the threshold is predicted positive.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Parallel scores and binary labels.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoredSet {
    scores: Vec<f64>,
    labels: Vec<u8>,
}

impl ScoredSet {
    pub fn new(scores: Vec<f64>, labels: Vec<u8>) -> Result<Self> {
        if scores.len() != labels.len() {
            return Err(Error::Config(format!(
                "{} scores for {} labels",
                scores.len(),
                labels.len()
            )));
        }
        if let Some(&y) = labels.iter().find(|&&y| y > 1) {
            return Err(Error::InvalidLabel(y));
        }
        if scores.iter().any(|s| !s.is_finite()) {
            return Err(Error::Config("scores must be finite".into()));
        }
        Ok(Self { scores, labels })
    }

    pub fn from_pairs(pairs: &[(f64, u8)]) -> Result<Self> {
        Self::new(
            pairs.iter().map(|p| p.0).collect(),
            pairs.iter().map(|p| p.1).collect(),
        )
    }

    pub fn scores(&self) -> &[f64] {
        &self.scores
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    pub fn positives(&self) -> usize {
        self.labels.iter().filter(|&&y| y == 1).count()
    }

    pub fn negatives(&self) -> usize {
        self.len() - self.positives()
    }

    fn require_both_classes(&self) -> Result<()> {
        if self.positives() == 0 || self.negatives() == 0 {
            return Err(Error::SingleClass);
        }
        Ok(())
    }
}

/// Mann-Whitney AUC via average ranks.
///
/// Ranks are kept doubled so every intermediate is an integer; the final
/// value is `(wins + ties/2) / (P·N)` computed with one division.
pub fn roc_auc(set: &ScoredSet) -> Result<f64> {
    set.require_both_classes()?;
    let mut order: Vec<usize> = (0..set.len()).collect();
    order.sort_by(|&a, &b| set.scores[a].total_cmp(&set.scores[b]));

    let mut doubled_rank_sum: u128 = 0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && set.scores[order[j + 1]] == set.scores[order[i]] {
            j += 1;
        }
        // 1-based ranks i+1 ..= j+1 share the doubled average (i+1)+(j+1)
        let doubled = (i + j + 2) as u128;
        let pos_in_group = order[i..=j].iter().filter(|&&k| set.labels[k] == 1).count() as u128;
        doubled_rank_sum += doubled * pos_in_group;
        i = j + 1;
    }
    let p = set.positives() as u128;
    let n = set.negatives() as u128;
    let doubled_u = doubled_rank_sum - p * (p + 1);
    Ok((doubled_u as f64 / 2.0) / ((p * n) as f64))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    pub fn_: usize,
}

impl Confusion {
    pub fn f1(&self) -> f64 {
        if self.tp == 0 {
            return 0.0;
        }
        2.0 * self.tp as f64 / (2 * self.tp + self.fp + self.fn_) as f64
    }
}

pub fn confusion_at(set: &ScoredSet, threshold: f64) -> Confusion {
    let mut c = Confusion::default();
    for (&s, &y) in set.scores.iter().zip(&set.labels) {
        match (s >= threshold, y == 1) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, true) => c.fn_ += 1,
            (false, false) => c.tn += 1,
        }
    }
    c
}

/// Positive-class F1; 0 when nothing is predicted positive or nothing is
/// positive.
pub fn f1_at(set: &ScoredSet, threshold: f64) -> f64 {
    confusion_at(set, threshold).f1()
}

/// Candidates are 0, 1 and every midpoint between consecutive distinct
/// scores. Returns the F1-maximising candidate, smallest on ties.
pub fn optimal_threshold(set: &ScoredSet) -> Result<(f64, f64)> {
    set.require_both_classes()?;
    let mut sorted = set.scores.clone();
    sorted.sort_by(f64::total_cmp);
    sorted.dedup();
    let mut candidates = vec![0.0, 1.0];
    candidates.extend(sorted.windows(2).map(|w| 0.5 * (w[0] + w[1])));
    candidates.sort_by(f64::total_cmp);
    candidates.dedup();

    let mut best = (candidates[0], f1_at(set, candidates[0]));
    for &t in &candidates[1..] {
        let f = f1_at(set, t);
        if f > best.1 {
            best = (t, f);
        }
    }
    Ok(best)
}
