//! Packs many short functions into one context window.
//!
//! Two training layouts are supported:
//!
//! * next-token prediction: `code, YES|NO, EOS` per function, the readout
//!   position is the label slot;
//! * classification: `code, EOS` per function, the readout position is the EOS.
//!
//! Evaluation never packs: [`eval_layout`] places a single function followed
//! by EOS and padding.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tokenizer::{self, EOS, PAD};

pub const MIN_CONTEXT: usize = 8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Partition {
    P1,
    P2,
    P3,
}

impl Partition {
    pub const ALL: [Partition; 3] = [Partition::P1, Partition::P2, Partition::P3];

    /// Label implied by the partition: only pre-fix functions are vulnerable.
    pub fn label(self) -> u8 {
        match self {
            Partition::P1 => 1,
            Partition::P2 | Partition::P3 => 0,
        }
    }
}

impl fmt::Display for Partition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Partition::P1 => "P1",
            Partition::P2 => "P2",
            Partition::P3 => "P3",
        })
    }
}

impl FromStr for Partition {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "P1" | "p1" => Ok(Partition::P1),
            "P2" | "p2" => Ok(Partition::P2),
            "P3" | "p3" => Ok(Partition::P3),
            _ => Err(Error::Config(format!("unknown partition `{s}`"))),
        }
    }
}

/// One labeled function.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FunctionSample {
    pub id: String,
    pub code: String,
    pub label: u8,
    pub partition: Partition,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cwe: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub project: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub commit: Option<String>,
}

impl FunctionSample {
    pub fn new(id: impl Into<String>, code: impl Into<String>, partition: Partition) -> Self {
        Self {
            id: id.into(),
            code: code.into(),
            label: partition.label(),
            partition,
            cwe: None,
            project: None,
            commit: None,
        }
    }

    pub fn tokens(&self) -> Vec<u32> {
        tokenizer::encode(self.code.as_bytes())
    }

    /// Checks that the label is binary and agrees with the partition.
    pub fn validate(&self) -> Result<()> {
        if self.label > 1 {
            return Err(Error::InvalidLabel(self.label));
        }
        if self.label != self.partition.label() {
            return Err(Error::Config(format!(
                "sample `{}`: partition {} requires label {}, found {}",
                self.id,
                self.partition,
                self.partition.label(),
                self.label
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Regime {
    Ntp,
    #[default]
    Classification,
}

impl fmt::Display for Regime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Regime::Ntp => "ntp",
            Regime::Classification => "classification",
        })
    }
}

impl FromStr for Regime {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ntp" => Ok(Regime::Ntp),
            "classification" | "class" => Ok(Regime::Classification),
            _ => Err(Error::Config(format!("unknown regime `{s}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PackedEntry {
    pub sample_id: String,
    pub label: u8,
    /// Label slot (ntp) or EOS index (classification).
    pub readout: usize,
    pub weight: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PackedSequence {
    pub tokens: Vec<u32>,
    pub entries: Vec<PackedEntry>,
}

impl PackedSequence {
    /// Number of leading non-PAD positions.
    pub fn used_len(&self) -> usize {
        self.tokens.iter().take_while(|&&t| t != PAD).count()
    }

    pub fn context_size(&self) -> usize {
        self.tokens.len()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PackOptions {
    pub regime: Regime,
    pub context_size: usize,
    pub max_funcs_per_batch: Option<usize>,
    pub shuffle_seed: u64,
}

fn check_context(context_size: usize) -> Result<()> {
    if context_size < MIN_CONTEXT {
        return Err(Error::ContextTooSmall(context_size));
    }
    Ok(())
}

/// Code tokens kept for a function: the first `context_size - 2`.
pub fn truncated_len(code_len: usize, context_size: usize) -> usize {
    code_len.min(context_size - 2)
}

fn footprint(code_len: usize, regime: Regime, context_size: usize) -> usize {
    let extra = match regime {
        Regime::Ntp => 2,
        Regime::Classification => 1,
    };
    truncated_len(code_len, context_size) + extra
}

/// Packs `samples` with unit weights. See [`pack_weighted`].
pub fn pack(samples: &[FunctionSample], opts: &PackOptions) -> Result<Vec<PackedSequence>> {
    pack_weighted(samples, &vec![1.0; samples.len()], opts)
}

/// Shuffles `samples` with `opts.shuffle_seed`, then fills sequences in that
/// order: a sequence is closed as soon as the next function does not fit or
/// the per-sequence function cap is reached. Every sample lands in exactly one
/// sequence.
pub fn pack_weighted(
    samples: &[FunctionSample],
    weights: &[f64],
    opts: &PackOptions,
) -> Result<Vec<PackedSequence>> {
    check_context(opts.context_size)?;
    if samples.is_empty() {
        return Err(Error::Config("cannot pack an empty sample list".into()));
    }
    if weights.len() != samples.len() {
        return Err(Error::Config(format!(
            "{} weights for {} samples",
            weights.len(),
            samples.len()
        )));
    }
    if opts.max_funcs_per_batch == Some(0) {
        return Err(Error::Config("max_funcs_per_batch must be at least 1".into()));
    }
    let cap = opts.max_funcs_per_batch.unwrap_or(usize::MAX);
    let ctx = opts.context_size;

    let mut encoded = Vec::with_capacity(samples.len());
    for s in samples {
        s.validate()?;
        let toks = s.tokens();
        if toks.is_empty() {
            return Err(Error::EmptyFunction);
        }
        encoded.push(toks);
    }

    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(opts.shuffle_seed);
    order.shuffle(&mut rng);

    let mut out = Vec::new();
    let mut tokens: Vec<u32> = Vec::with_capacity(ctx);
    let mut entries: Vec<PackedEntry> = Vec::new();
    let mut close = |tokens: &mut Vec<u32>, entries: &mut Vec<PackedEntry>| {
        let mut t = std::mem::take(tokens);
        t.resize(ctx, PAD);
        out.push(PackedSequence {
            tokens: t,
            entries: std::mem::take(entries),
        });
    };

    for i in order {
        let code = &encoded[i];
        let need = footprint(code.len(), opts.regime, ctx);
        if !entries.is_empty() && (tokens.len() + need > ctx || entries.len() >= cap) {
            close(&mut tokens, &mut entries);
        }
        let kept = truncated_len(code.len(), ctx);
        tokens.extend_from_slice(&code[..kept]);
        let s = &samples[i];
        let readout = tokens.len();
        if opts.regime == Regime::Ntp {
            tokens.push(tokenizer::label_token(s.label));
        }
        tokens.push(EOS);
        entries.push(PackedEntry {
            sample_id: s.id.clone(),
            label: s.label,
            readout,
            weight: weights[i],
        });
    }
    if !entries.is_empty() {
        close(&mut tokens, &mut entries);
    }
    Ok(out)
}

/// Single-function evaluation layout: `code, EOS, PAD...` with the readout at
/// the EOS.
pub fn eval_layout(sample: &FunctionSample, context_size: usize) -> Result<PackedSequence> {
    check_context(context_size)?;
    sample.validate()?;
    let seq = eval_tokens(&sample.tokens(), context_size)?;
    Ok(PackedSequence {
        entries: vec![PackedEntry {
            sample_id: sample.id.clone(),
            label: sample.label,
            readout: seq.1,
            weight: 1.0,
        }],
        tokens: seq.0,
    })
}

/// Token layout used by [`eval_layout`]; returns the tokens and the EOS index.
pub fn eval_tokens(code: &[u32], context_size: usize) -> Result<(Vec<u32>, usize)> {
    check_context(context_size)?;
    if code.is_empty() {
        return Err(Error::EmptyFunction);
    }
    let kept = truncated_len(code.len(), context_size);
    let mut tokens = Vec::with_capacity(context_size);
    tokens.extend_from_slice(&code[..kept]);
    tokens.push(EOS);
    tokens.resize(context_size, PAD);
    Ok((tokens, kept))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UtilizationStats {
    /// Fraction of non-PAD positions across all sequences.
    pub utilization: f64,
    /// Mean functions per sequence: the packing multiplier over one function
    /// per sequence.
    pub mean_funcs: f64,
    pub max_funcs: usize,
    pub sequences: usize,
}

pub fn utilization(sequences: &[PackedSequence]) -> Result<UtilizationStats> {
    if sequences.is_empty() {
        return Err(Error::Config("utilization of an empty sequence list".into()));
    }
    let total: usize = sequences.iter().map(|s| s.tokens.len()).sum();
    let used: usize = sequences
        .iter()
        .map(|s| s.tokens.iter().filter(|&&t| t != PAD).count())
        .sum();
    let funcs: usize = sequences.iter().map(|s| s.entries.len()).sum();
    Ok(UtilizationStats {
        utilization: used as f64 / total as f64,
        mean_funcs: funcs as f64 / sequences.len() as f64,
        max_funcs: sequences.iter().map(|s| s.entries.len()).max().unwrap_or(0),
        sequences: sequences.len(),
    })
}
