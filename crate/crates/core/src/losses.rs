//! Training objectives.
//!
//! Every objective exists twice: as a plain function over probabilities (used
//! for reporting and as a reference) and as a graph fragment that the trainer
//! differentiates.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::autograd::{GraphBuilder, NodeId};
use crate::error::{Error, Result};
use crate::packing::{FunctionSample, Partition, Regime};
use crate::tensor::Tensor;

/// Probabilities are clamped to `[PROB_EPS, 1 - PROB_EPS]` before any log.
pub const PROB_EPS: f64 = 1e-12;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Reduction {
    #[default]
    Sum,
    Mean,
}

impl fmt::Display for Reduction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Reduction::Sum => "sum",
            Reduction::Mean => "mean",
        })
    }
}

impl FromStr for Reduction {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sum" => Ok(Reduction::Sum),
            "mean" => Ok(Reduction::Mean),
            _ => Err(Error::Config(format!("unknown reduction `{s}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PartitionWeights {
    #[serde(rename = "P1")]
    pub p1: f64,
    #[serde(rename = "P2")]
    pub p2: f64,
    #[serde(rename = "P3")]
    pub p3: f64,
}

impl Default for PartitionWeights {
    fn default() -> Self {
        Self::uniform()
    }
}

impl PartitionWeights {
    pub fn uniform() -> Self {
        Self {
            p1: 1.0,
            p2: 1.0,
            p3: 1.0,
        }
    }

    /// Same weight on P1 and P2, unit weight on P3.
    pub fn emphasize_changed(w: f64) -> Self {
        Self {
            p1: w,
            p2: w,
            p3: 1.0,
        }
    }

    pub fn get(&self, p: Partition) -> f64 {
        match p {
            Partition::P1 => self.p1,
            Partition::P2 => self.p2,
            Partition::P3 => self.p3,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for p in Partition::ALL {
            let w = self.get(p);
            if !(w > 0.0 && w.is_finite()) {
                return Err(Error::Config(format!("weight for {p} must be positive, got {w}")));
            }
        }
        Ok(())
    }
}

impl FromStr for PartitionWeights {
    type Err = Error;

    /// Parses `P1=3,P2=3` (unspecified partitions default to 1.0).
    fn from_str(s: &str) -> Result<Self> {
        let mut w = Self::uniform();
        for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            let (k, v) = part
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("expected P<n>=<weight>, got `{part}`")))?;
            let value: f64 = v
                .trim()
                .parse()
                .map_err(|_| Error::Config(format!("bad weight `{v}`")))?;
            match k.trim().parse::<Partition>()? {
                Partition::P1 => w.p1 = value,
                Partition::P2 => w.p2 = value,
                Partition::P3 => w.p3 = value,
            }
        }
        w.validate()?;
        Ok(w)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub objective: Regime,
    pub reduction: Reduction,
    pub focal_gamma: f64,
    pub partition_weights: PartitionWeights,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            objective: Regime::Classification,
            reduction: Reduction::Sum,
            focal_gamma: 0.0,
            partition_weights: PartitionWeights::uniform(),
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Vec<String> {
        let mut problems = Vec::new();
        if !(self.focal_gamma >= 0.0 && self.focal_gamma.is_finite()) {
            problems.push(format!("focal_gamma must be >= 0, got {}", self.focal_gamma));
        }
        if let Err(e) = self.partition_weights.validate() {
            problems.push(e.to_string());
        }
        problems
    }
}

/// `-sum log p(target)` over the positions where `mask` is set.
/// `predictions` is `[T, vocab]`, one distribution per position.
pub fn ntp_loss(predictions: &Tensor, targets: &[u32], mask: &[bool]) -> Result<f64> {
    let (rows, vocab) = predictions.rows_cols();
    if targets.len() != rows || mask.len() != rows {
        return Err(Error::Config(format!(
            "{rows} prediction rows, {} targets, {} mask entries",
            targets.len(),
            mask.len()
        )));
    }
    let mut total = 0.0;
    let mut any = false;
    for t in 0..rows {
        if !mask[t] {
            continue;
        }
        let id = targets[t] as usize;
        if id >= vocab {
            return Err(Error::TokenOutOfRange {
                id: targets[t],
                vocab,
            });
        }
        total -= predictions.data()[t * vocab + id].ln();
        any = true;
    }
    if !any {
        return Err(Error::EmptyMask);
    }
    Ok(total)
}

fn check_label(y: u8) -> Result<()> {
    if y > 1 {
        return Err(Error::InvalidLabel(y));
    }
    Ok(())
}

/// `w * (1 - p_t)^gamma * CE` for one prediction.
pub fn focal_term(p: f64, y: u8, w: f64, gamma: f64) -> Result<f64> {
    check_label(y)?;
    let p = p.clamp(PROB_EPS, 1.0 - PROB_EPS);
    let yf = y as f64;
    let ce = -yf * p.ln() - (1.0 - yf) * (1.0 - p).ln();
    let p_t = if y == 1 { p } else { 1.0 - p };
    let modulation = if gamma == 0.0 { 1.0 } else { (1.0 - p_t).powf(gamma) };
    Ok(w * modulation * ce)
}

/// Per-entry loss terms before reduction.
pub fn loss_terms(probs: &[f64], labels: &[u8], weights: &[f64], gamma: f64) -> Result<Vec<f64>> {
    if probs.len() != labels.len() || probs.len() != weights.len() {
        return Err(Error::Config("probs, labels and weights differ in length".into()));
    }
    probs
        .iter()
        .zip(labels)
        .zip(weights)
        .map(|((&p, &y), &w)| focal_term(p, y, w, gamma))
        .collect()
}

/// Batch loss over the functions of one packed sequence.
pub fn classification_batch_loss(
    probs: &[f64],
    labels: &[u8],
    weights: &[f64],
    gamma: f64,
    reduction: Reduction,
) -> Result<f64> {
    if probs.is_empty() {
        return Err(Error::Config("empty batch".into()));
    }
    let sum: f64 = loss_terms(probs, labels, weights, gamma)?.iter().sum();
    Ok(match reduction {
        Reduction::Sum => sum,
        Reduction::Mean => sum / probs.len() as f64,
    })
}

pub fn assign_weights(samples: &[FunctionSample], weights: &PartitionWeights) -> Result<Vec<f64>> {
    weights.validate()?;
    Ok(samples.iter().map(|s| weights.get(s.partition)).collect())
}

/// Graph form of [`ntp_loss`] on a `[T, vocab]` probability node, with the
/// given reduction over unmasked positions.
pub fn ntp_loss_node(
    b: &mut GraphBuilder,
    probs: NodeId,
    targets: &[u32],
    mask: &[bool],
    reduction: Reduction,
) -> Result<NodeId> {
    let index: Vec<(usize, usize)> = targets
        .iter()
        .zip(mask)
        .enumerate()
        .filter(|(_, (_, &m))| m)
        .map(|(t, (&id, _))| (t, id as usize))
        .collect();
    if index.is_empty() {
        return Err(Error::EmptyMask);
    }
    let n = index.len();
    let picked = b.gather(probs, index);
    let logs = b.log(picked);
    let total = b.sum(logs);
    Ok(match reduction {
        Reduction::Sum => b.scale(total, -1.0),
        Reduction::Mean => b.scale(total, -1.0 / n as f64),
    })
}

/// Graph form of [`classification_batch_loss`]; `probs` is a `[B, 1]` node.
pub fn classification_loss_node(
    b: &mut GraphBuilder,
    probs: NodeId,
    labels: &[u8],
    weights: &[f64],
    gamma: f64,
    reduction: Reduction,
) -> Result<NodeId> {
    let n = labels.len();
    if n == 0 || weights.len() != n {
        return Err(Error::Config("labels and weights must be non-empty and equal length".into()));
    }
    for &y in labels {
        check_label(y)?;
    }
    let sign = Tensor::matrix(n, 1, labels.iter().map(|&y| 2.0 * y as f64 - 1.0).collect());
    let offset = Tensor::matrix(n, 1, labels.iter().map(|&y| 1.0 - y as f64).collect());
    let neg_w = Tensor::matrix(n, 1, weights.iter().map(|w| -w).collect());

    let p = b.clamp(probs, PROB_EPS, 1.0 - PROB_EPS);
    let sign = b.constant(sign);
    let offset = b.constant(offset);
    let signed = b.mul(p, sign);
    let p_t = b.add(signed, offset);
    let log_pt = b.log(p_t);
    let weighted = if gamma == 0.0 {
        log_pt
    } else {
        let flipped = b.scale(p_t, -1.0);
        let one_minus = b.add_scalar(flipped, 1.0);
        let modulation = b.pow(one_minus, gamma);
        b.mul(modulation, log_pt)
    };
    let neg_w = b.constant(neg_w);
    let terms = b.mul(weighted, neg_w);
    let total = b.sum(terms);
    Ok(match reduction {
        Reduction::Sum => total,
        Reduction::Mean => b.scale(total, 1.0 / n as f64),
    })
}
