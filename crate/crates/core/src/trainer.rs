//! Finetuning loop: AdamW over packed sequences with a per-step cosine
//! schedule, validation after every epoch and best-epoch selection.

use std::collections::{BTreeMap, BTreeSet};
use std::f64::consts::PI;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autograd::{Gradients, GraphBuilder, NodeId, NO_INPUTS};
use crate::error::{Error, Result};
use crate::losses::{assign_weights, classification_loss_node, ntp_loss_node, LossConfig};
use crate::metrics::{f1_at, optimal_threshold, roc_auc, ScoredSet};
use crate::model::{LanguageModel, LoraConfig};
use crate::packing::{pack_weighted, FunctionSample, PackOptions, PackedSequence, Regime};
use crate::params::ParamStore;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub loss: LossConfig,
    /// `None` trains every parameter.
    pub lora: Option<LoraConfig>,
    pub lr_max: f64,
    pub epochs: usize,
    pub context_size: usize,
    pub max_funcs_per_batch: Option<usize>,
    pub seed: u64,
    pub optimizer: OptimizerConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            loss: LossConfig::default(),
            lora: Some(LoraConfig::default()),
            lr_max: 1e-4,
            epochs: 50,
            context_size: 256,
            max_funcs_per_batch: None,
            seed: 0,
            optimizer: OptimizerConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn regime(&self) -> Regime {
        self.loss.objective
    }

    /// Every problem found, not just the first.
    pub fn validate(&self) -> Vec<String> {
        let mut problems = self.loss.validate();
        if let Some(l) = &self.lora {
            problems.extend(l.validate());
        }
        if !(self.lr_max.is_finite() && self.lr_max > 0.0) {
            problems.push(format!("lr_max must be positive, got {}", self.lr_max));
        }
        if self.epochs == 0 {
            problems.push("epochs must be at least 1".into());
        }
        if self.context_size < crate::packing::MIN_CONTEXT {
            problems.push(format!(
                "context_size must be at least {}, got {}",
                crate::packing::MIN_CONTEXT,
                self.context_size
            ));
        }
        if self.max_funcs_per_batch == Some(0) {
            problems.push("max_funcs_per_batch must be at least 1".into());
        }
        let o = &self.optimizer;
        if !(0.0..1.0).contains(&o.beta1) || !(0.0..1.0).contains(&o.beta2) {
            problems.push("optimizer betas must lie in [0, 1)".into());
        }
        if !(o.eps > 0.0) || !(o.weight_decay >= 0.0) {
            problems.push("optimizer eps must be positive and weight_decay non-negative".into());
        }
        problems
    }

    fn pack_options(&self, epoch: usize) -> PackOptions {
        PackOptions {
            regime: self.regime(),
            context_size: self.context_size,
            max_funcs_per_batch: self.max_funcs_per_batch,
            shuffle_seed: epoch_seed(self.seed, epoch),
        }
    }
}

fn epoch_seed(seed: u64, epoch: usize) -> u64 {
    seed ^ (epoch as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// `lr_max · ½(1 + cos(π·step/total))`.
pub fn cosine_lr(step: usize, total_steps: usize, lr_max: f64) -> Result<f64> {
    if total_steps == 0 {
        return Err(Error::Config("cosine schedule needs at least one step".into()));
    }
    if step > total_steps {
        return Err(Error::Config(format!("step {step} beyond {total_steps}")));
    }
    Ok(lr_max * 0.5 * (1.0 + (PI * step as f64 / total_steps as f64).cos()))
}

/// Adam with decoupled weight decay. Moment buffers are keyed by parameter
/// name and created on first use.
#[derive(Clone, Debug)]
pub struct AdamW {
    cfg: OptimizerConfig,
    t: u32,
    moments: BTreeMap<String, (Vec<f64>, Vec<f64>)>,
}

impl AdamW {
    pub fn new(cfg: OptimizerConfig) -> Self {
        Self {
            cfg,
            t: 0,
            moments: BTreeMap::new(),
        }
    }

    pub fn steps_taken(&self) -> u32 {
        self.t
    }

    pub fn step(&mut self, params: &mut ParamStore, grads: &Gradients, lr: f64) -> Result<()> {
        self.t += 1;
        let c = &self.cfg;
        let bc1 = 1.0 - c.beta1.powi(self.t as i32);
        let bc2 = 1.0 - c.beta2.powi(self.t as i32);
        for (name, g) in grads.iter() {
            if !params.is_trainable(name) {
                continue;
            }
            let p = params
                .get_mut(name)
                .ok_or_else(|| Error::UnknownParameter(name.to_string()))?;
            let (m, v) = self
                .moments
                .entry(name.to_string())
                .or_insert_with(|| (vec![0.0; g.len()], vec![0.0; g.len()]));
            let decay = 1.0 - lr * c.weight_decay;
            for (((w, &gi), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m).zip(v) {
                *mi = c.beta1 * *mi + (1.0 - c.beta1) * gi;
                *vi = c.beta2 * *vi + (1.0 - c.beta2) * gi * gi;
                let m_hat = *mi / bc1;
                let v_hat = *vi / bc2;
                *w = *w * decay - lr * m_hat / (v_hat.sqrt() + c.eps);
            }
        }
        Ok(())
    }
}

/// Builds the loss graph for one packed sequence. The body only covers the
/// non-PAD prefix; causal masking makes that equivalent to the full window.
fn loss_graph(
    model: &LanguageModel,
    seq: &PackedSequence,
    loss: &LossConfig,
    dropout: Option<&mut ChaCha8Rng>,
) -> Result<(crate::autograd::Graph, NodeId)> {
    let used = seq.used_len();
    let mut b = GraphBuilder::new();
    let hidden = model.build_body(&mut b, &seq.tokens[..used], dropout)?;
    let out = match loss.objective {
        Regime::Classification => {
            let rows: Vec<usize> = seq.entries.iter().map(|e| e.readout).collect();
            let labels: Vec<u8> = seq.entries.iter().map(|e| e.label).collect();
            let weights: Vec<f64> = seq.entries.iter().map(|e| e.weight).collect();
            let probs = model.class_prob_node(&mut b, hidden, rows);
            classification_loss_node(&mut b, probs, &labels, &weights, loss.focal_gamma, loss.reduction)?
        }
        Regime::Ntp => {
            let logits = model.head_logits(&mut b, hidden);
            let probs = b.softmax(logits);
            let targets: Vec<u32> = (0..used)
                .map(|t| seq.tokens.get(t + 1).copied().unwrap_or(0))
                .collect();
            let mask: Vec<bool> = (0..used).map(|t| t + 1 < used).collect();
            ntp_loss_node(&mut b, probs, &targets, &mask, loss.reduction)?
        }
    };
    Ok((b.build(), out))
}

/// Loss of one packed sequence without dropout.
pub fn sequence_loss(model: &LanguageModel, seq: &PackedSequence, loss: &LossConfig) -> Result<f64> {
    let (g, out) = loss_graph(model, seq, loss, None)?;
    let eval = g.evaluate(model.params(), NO_INPUTS)?;
    Ok(eval.value(out).data()[0])
}

/// Loss and trainable-parameter gradients of one packed sequence.
pub fn loss_and_grads(
    model: &LanguageModel,
    seq: &PackedSequence,
    loss: &LossConfig,
    dropout: Option<&mut ChaCha8Rng>,
) -> Result<(f64, Gradients)> {
    let (g, out) = loss_graph(model, seq, loss, dropout)?;
    let eval = g.evaluate(model.params(), NO_INPUTS)?;
    let value = eval.value(out).data()[0];
    let grads = g.backward(&eval, out, model.params())?;
    Ok((value, grads))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_auc: f64,
    pub val_f1: f64,
    pub threshold: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub records: Vec<EpochRecord>,
    pub best_epoch: usize,
}

impl TrainHistory {
    pub fn best(&self) -> &EpochRecord {
        &self.records[self.best_epoch]
    }

    /// One JSON object per epoch, newline-terminated.
    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&serde_json::to_string(r)?);
            out.push('\n');
        }
        Ok(out)
    }

    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_jsonl()?)?;
        Ok(())
    }

    pub fn from_jsonl(text: &str) -> Result<Self> {
        let records = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(serde_json::from_str)
            .collect::<std::result::Result<Vec<EpochRecord>, _>>()?;
        let best_epoch = select_best(&records)?;
        Ok(Self { records, best_epoch })
    }
}

/// Earliest epoch with the highest validation AUC.
pub fn select_best(records: &[EpochRecord]) -> Result<usize> {
    if records.is_empty() {
        return Err(Error::Config("empty training history".into()));
    }
    let mut best = 0;
    for (i, r) in records.iter().enumerate() {
        if r.val_auc > records[best].val_auc {
            best = i;
        }
    }
    Ok(best)
}

/// Scores every sample alone in the context window. Order follows `samples`.
pub fn score_samples(model: &LanguageModel, samples: &[FunctionSample], regime: Regime) -> Result<Vec<f64>> {
    samples
        .par_iter()
        .map(|s| model.predict_vuln_prob(&s.tokens(), regime))
        .collect()
}

/// Validation AUC, optimal threshold and F1 at that threshold.
pub fn validation_metrics(
    model: &LanguageModel,
    samples: &[FunctionSample],
    regime: Regime,
) -> Result<(f64, f64, f64)> {
    let scores = score_samples(model, samples, regime)?;
    let set = ScoredSet::new(scores, samples.iter().map(|s| s.label).collect())?;
    let auc = roc_auc(&set)?;
    let (threshold, f1) = optimal_threshold(&set)?;
    debug_assert_eq!(f1, f1_at(&set, threshold));
    Ok((auc, f1, threshold))
}

/// Prepares `model` for the configured finetuning mode.
pub fn prepare_model(model: LanguageModel, cfg: &TrainConfig) -> Result<LanguageModel> {
    if model.config().context_size != cfg.context_size {
        return Err(Error::Config(format!(
            "model context {} differs from training context {}",
            model.config().context_size,
            cfg.context_size
        )));
    }
    match (&cfg.lora, model.lora()) {
        (Some(l), None) => model.apply_lora(l, cfg.seed),
        (Some(l), Some(existing)) if l == existing => Ok(model),
        (Some(_), Some(_)) => Err(Error::Config("model carries different LoRA adapters".into())),
        (None, Some(_)) => Err(Error::Config("full finetuning requested on a LoRA model".into())),
        (None, None) => {
            let mut m = model;
            m.unfreeze_all();
            Ok(m)
        }
    }
}

/// Runs the full finetuning loop and returns the model at the best epoch
/// together with the per-epoch history.
pub fn train(
    model: LanguageModel,
    train: &[FunctionSample],
    val: &[FunctionSample],
    cfg: &TrainConfig,
) -> Result<(LanguageModel, TrainHistory)> {
    let problems = cfg.validate();
    if !problems.is_empty() {
        return Err(Error::Config(problems.join("; ")));
    }
    let train_ids: BTreeSet<&str> = train.iter().map(|s| s.id.as_str()).collect();
    if let Some(s) = val.iter().find(|s| train_ids.contains(s.id.as_str())) {
        return Err(Error::Config(format!("sample `{}` is in both train and validation", s.id)));
    }
    let mut model = prepare_model(model, cfg)?;
    let weights = match cfg.regime() {
        Regime::Classification => assign_weights(train, &cfg.loss.partition_weights)?,
        Regime::Ntp => vec![1.0; train.len()],
    };

    let epochs: Vec<Vec<PackedSequence>> = (0..cfg.epochs)
        .map(|e| pack_weighted(train, &weights, &cfg.pack_options(e)))
        .collect::<Result<_>>()?;
    let total_steps: usize = epochs.iter().map(Vec::len).sum();

    let mut opt = AdamW::new(cfg.optimizer.clone());
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xD1B5_4A32_D192_ED03);
    let mut records = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(f64, ParamStore)> = None;
    let mut step = 0;

    for (epoch, sequences) in epochs.iter().enumerate() {
        let mut total_loss = 0.0;
        for (k, seq) in sequences.iter().enumerate() {
            let diag = || Error::NonFiniteLoss {
                sequence: format!("epoch {epoch} sequence {k}"),
            };
            let (loss, grads) = match loss_and_grads(&model, seq, &cfg.loss, Some(&mut dropout_rng)) {
                Err(Error::NonFinite(_)) => return Err(diag()),
                other => other?,
            };
            if !loss.is_finite() || grads.iter().any(|(_, g)| !g.is_finite()) {
                return Err(diag());
            }
            total_loss += loss;
            let lr = cosine_lr(step, total_steps, cfg.lr_max)?;
            opt.step(model.params_mut(), &grads, lr)?;
            step += 1;
        }
        let (val_auc, val_f1, threshold) = validation_metrics(&model, val, cfg.regime())?;
        if best.as_ref().map_or(true, |(auc, _)| val_auc > *auc) {
            best = Some((val_auc, model.params().clone()));
        }
        records.push(EpochRecord {
            epoch,
            train_loss: total_loss / sequences.len() as f64,
            val_auc,
            val_f1,
            threshold,
        });
    }

    let best_epoch = select_best(&records)?;
    let (_, best_params) = best.expect("at least one epoch");
    *model.params_mut() = best_params;
    Ok((model, TrainHistory { records, best_epoch }))
}
