//! Miniature causal decoder-only transformer with an LM head over the
//! byte-level vocabulary and optional LoRA adapters on attention projections.
//!
//! Layout per block (pre-norm):
//!
//! ```text
//! x = x + W_o · attn(LN1(x))
//! x = x + W_2 · gelu(W_1 · LN2(x))
//! ```
//!
//! followed by a final layer norm and the LM head. Position embeddings are
//! learned and absolute.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, GraphBuilder, NodeId};
use crate::error::{Error, Result};
use crate::packing::{eval_tokens, Regime, MIN_CONTEXT};
use crate::params::ParamStore;
use crate::tensor::Tensor;
use crate::tokenizer::{NO, VOCAB_SIZE, YES};

pub const INIT_STD: f64 = 0.02;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub context_size: usize,
    pub vocab_size: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            n_layers: 2,
            n_heads: 4,
            d_model: 64,
            context_size: 256,
            vocab_size: VOCAB_SIZE,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Vec<String> {
        let mut problems = Vec::new();
        if self.n_layers == 0 {
            problems.push("n_layers must be at least 1".into());
        }
        if self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            problems.push(format!(
                "d_model ({}) must be divisible by n_heads ({})",
                self.d_model, self.n_heads
            ));
        }
        if self.context_size < MIN_CONTEXT {
            problems.push(format!(
                "context_size must be at least {MIN_CONTEXT}, got {}",
                self.context_size
            ));
        }
        if self.vocab_size != VOCAB_SIZE {
            problems.push(format!("vocab_size must be {VOCAB_SIZE}"));
        }
        problems
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Projection {
    Query,
    Key,
    Value,
    Output,
}

impl Projection {
    fn short(self) -> &'static str {
        match self {
            Projection::Query => "q",
            Projection::Key => "k",
            Projection::Value => "v",
            Projection::Output => "o",
        }
    }
}

impl fmt::Display for Projection {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.short())
    }
}

/// Low-rank adapter settings. The effective weight of every targeted
/// projection is `W + (alpha / rank) · A · B` with `A: d×r`, `B: r×d`.
///
/// Trainable parameters: `rank · (d_in + d_out)` per adapted matrix. For a
/// 40-layer, 6144-wide model with adapters on all four linear maps of every
/// block (fused QKV `6144→6400`, attention output `6144→6144`, MLP
/// `6144→24576→6144`) this gives about 27.6M parameters, i.e. a 13B model
/// trained through tens of millions of weights.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LoraConfig {
    pub rank: usize,
    pub alpha: f64,
    pub dropout: f64,
    pub targets: Vec<Projection>,
}

impl Default for LoraConfig {
    fn default() -> Self {
        Self {
            rank: 8,
            alpha: 32.0,
            dropout: 0.05,
            targets: vec![Projection::Query, Projection::Value],
        }
    }
}

impl LoraConfig {
    pub fn validate(&self) -> Vec<String> {
        let mut problems = Vec::new();
        if self.rank == 0 {
            problems.push("lora rank must be at least 1".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            problems.push(format!("lora dropout must be in [0, 1), got {}", self.dropout));
        }
        if !(self.alpha.is_finite() && self.alpha > 0.0) {
            problems.push(format!("lora alpha must be positive, got {}", self.alpha));
        }
        if self.targets.is_empty() {
            problems.push("lora needs at least one target projection".into());
        }
        problems
    }

    pub fn scaling(&self) -> f64 {
        self.alpha / self.rank as f64
    }
}

fn block(l: usize, rest: &str) -> String {
    format!("blocks.{l}.{rest}")
}

fn proj_weight(l: usize, p: Projection) -> String {
    block(l, &format!("attn.{}.weight", p.short()))
}

fn proj_bias(l: usize, p: Projection) -> String {
    block(l, &format!("attn.{}.bias", p.short()))
}

fn lora_a(l: usize, p: Projection) -> String {
    block(l, &format!("attn.{}.lora_a", p.short()))
}

fn lora_b(l: usize, p: Projection) -> String {
    block(l, &format!("attn.{}.lora_b", p.short()))
}

const PROJECTIONS: [Projection; 4] = [
    Projection::Query,
    Projection::Key,
    Projection::Value,
    Projection::Output,
];

/// Randomness for one training forward pass; `None` disables dropout.
pub type DropoutRng<'a> = Option<&'a mut ChaCha8Rng>;

#[derive(Clone, Debug, PartialEq)]
pub struct LanguageModel {
    config: ModelConfig,
    lora: Option<LoraConfig>,
    params: ParamStore,
}

impl LanguageModel {
    /// Fresh model with `N(0, 0.02)` matrices, unit layer-norm gains and zero
    /// biases. All parameters start trainable.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        let problems = config.validate();
        if !problems.is_empty() {
            return Err(Error::Config(problems.join("; ")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = config.d_model;
        let mut params = ParamStore::new();
        let mut add = |name: String, t: Tensor| params.insert(name, t, true);

        add("tok_emb".into(), Tensor::randn(&[config.vocab_size, d], INIT_STD, &mut rng));
        add("pos_emb".into(), Tensor::randn(&[config.context_size, d], INIT_STD, &mut rng));
        for l in 0..config.n_layers {
            for ln in ["ln1", "ln2"] {
                add(block(l, &format!("{ln}.gain")), Tensor::full(&[d], 1.0));
                add(block(l, &format!("{ln}.bias")), Tensor::zeros(&[d]));
            }
            for p in PROJECTIONS {
                add(proj_weight(l, p), Tensor::randn(&[d, d], INIT_STD, &mut rng));
                add(proj_bias(l, p), Tensor::zeros(&[d]));
            }
            add(block(l, "mlp.fc.weight"), Tensor::randn(&[d, 4 * d], INIT_STD, &mut rng));
            add(block(l, "mlp.fc.bias"), Tensor::zeros(&[4 * d]));
            add(block(l, "mlp.proj.weight"), Tensor::randn(&[4 * d, d], INIT_STD, &mut rng));
            add(block(l, "mlp.proj.bias"), Tensor::zeros(&[d]));
        }
        add("ln_f.gain".into(), Tensor::full(&[d], 1.0));
        add("ln_f.bias".into(), Tensor::zeros(&[d]));
        add("lm_head.weight".into(), Tensor::randn(&[d, config.vocab_size], INIT_STD, &mut rng));

        Ok(Self {
            config,
            lora: None,
            params,
        })
    }

    /// Rebuilds a model from stored parameters, checking names and shapes.
    pub fn from_parts(config: ModelConfig, lora: Option<LoraConfig>, params: ParamStore) -> Result<Self> {
        let reference = match &lora {
            Some(cfg) => Self::new(config.clone(), 0)?.apply_lora(cfg, 0)?,
            None => Self::new(config.clone(), 0)?,
        };
        for (name, p) in reference.params.iter() {
            let got = params
                .get(name)
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor `{name}`")))?;
            if got.shape() != p.tensor.shape() {
                return Err(Error::Checkpoint(format!(
                    "tensor `{name}` has shape {:?}, expected {:?}",
                    got.shape(),
                    p.tensor.shape()
                )));
            }
        }
        if let Some(extra) = params.names().find(|n| !reference.params.contains(n)) {
            return Err(Error::Checkpoint(format!("unexpected tensor `{extra}`")));
        }
        Ok(Self {
            config,
            lora,
            params,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn lora(&self) -> Option<&LoraConfig> {
        self.lora.as_ref()
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn trainable_parameter_count(&self) -> usize {
        self.params.num_trainable_elements()
    }

    /// Freezes every base weight and adds zero-initialised adapters on the
    /// configured projections. Only adapter tensors remain trainable.
    pub fn apply_lora(mut self, cfg: &LoraConfig, seed: u64) -> Result<Self> {
        let problems = cfg.validate();
        if !problems.is_empty() {
            return Err(Error::Config(problems.join("; ")));
        }
        if self.lora.is_some() {
            return Err(Error::Config("model already carries LoRA adapters".into()));
        }
        let d = self.config.d_model;
        if cfg.rank > d {
            return Err(Error::Config(format!("lora rank {} exceeds d_model {d}", cfg.rank)));
        }
        let mut targets = cfg.targets.clone();
        targets.sort();
        targets.dedup();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        self.params.freeze_all();
        for l in 0..self.config.n_layers {
            for &p in &targets {
                self.params
                    .insert(lora_a(l, p), Tensor::randn(&[d, cfg.rank], INIT_STD, &mut rng), true);
                self.params.insert(lora_b(l, p), Tensor::zeros(&[cfg.rank, d]), true);
            }
        }
        self.lora = Some(LoraConfig {
            targets,
            ..cfg.clone()
        });
        Ok(self)
    }

    /// Marks every parameter trainable (full finetuning).
    pub fn unfreeze_all(&mut self) {
        let names: Vec<String> = self.params.names().map(String::from).collect();
        for n in names {
            self.params.set_trainable(&n, true).expect("name from store");
        }
    }

    fn check_tokens(&self, tokens: &[u32]) -> Result<()> {
        if let Some(&id) = tokens.iter().find(|&&t| t as usize >= self.config.vocab_size) {
            return Err(Error::TokenOutOfRange {
                id,
                vocab: self.config.vocab_size,
            });
        }
        if tokens.is_empty() || tokens.len() > self.config.context_size {
            return Err(Error::Config(format!(
                "expected 1..={} tokens, got {}",
                self.config.context_size,
                tokens.len()
            )));
        }
        Ok(())
    }

    /// Adds the transformer body for `tokens` to `b` and returns the final
    /// normalised hidden states `[T, d_model]`.
    ///
    /// Any prefix of a padded sequence may be passed: with the causal mask,
    /// rows `< T` do not depend on later tokens.
    pub fn build_body(
        &self,
        b: &mut GraphBuilder,
        tokens: &[u32],
        mut dropout: DropoutRng<'_>,
    ) -> Result<NodeId> {
        self.check_tokens(tokens)?;
        let cfg = &self.config;
        let t = tokens.len();
        let d = cfg.d_model;
        let dh = cfg.head_dim();

        let ids = b.constant(Tensor::vector(tokens.iter().map(|&x| x as f64).collect()));
        let positions = b.constant(Tensor::vector((0..t).map(|x| x as f64).collect()));
        let tok_table = b.param("tok_emb");
        let pos_table = b.param("pos_emb");
        let tok = b.embedding(tok_table, ids);
        let pos = b.embedding(pos_table, positions);
        let mut x = b.add(tok, pos);

        for l in 0..cfg.n_layers {
            let h = self.layer_norm(b, x, &block(l, "ln1"));
            let q = self.projection(b, h, l, Projection::Query, t, dropout.as_deref_mut());
            let k = self.projection(b, h, l, Projection::Key, t, dropout.as_deref_mut());
            let v = self.projection(b, h, l, Projection::Value, t, dropout.as_deref_mut());
            let mut heads = Vec::with_capacity(cfg.n_heads);
            for hd in 0..cfg.n_heads {
                let qh = b.slice_cols(q, hd * dh, dh);
                let kh = b.slice_cols(k, hd * dh, dh);
                let vh = b.slice_cols(v, hd * dh, dh);
                let kt = b.transpose(kh);
                let scores = b.matmul(qh, kt);
                let scores = b.scale(scores, 1.0 / (dh as f64).sqrt());
                let attn = b.causal_softmax(scores);
                heads.push(b.matmul(attn, vh));
            }
            let merged = if heads.len() == 1 {
                heads[0]
            } else {
                b.concat_cols(heads)
            };
            let o = self.projection(b, merged, l, Projection::Output, t, dropout.as_deref_mut());
            x = b.add(x, o);

            let h2 = self.layer_norm(b, x, &block(l, "ln2"));
            let w1 = b.param(&block(l, "mlp.fc.weight"));
            let b1 = b.param(&block(l, "mlp.fc.bias"));
            let w2 = b.param(&block(l, "mlp.proj.weight"));
            let b2 = b.param(&block(l, "mlp.proj.bias"));
            let f = b.matmul(h2, w1);
            let f = b.add(f, b1);
            let f = b.gelu(f);
            let m = b.matmul(f, w2);
            let m = b.add(m, b2);
            x = b.add(x, m);
        }
        let _ = d;
        Ok(self.layer_norm(b, x, "ln_f"))
    }

    fn layer_norm(&self, b: &mut GraphBuilder, x: NodeId, prefix: &str) -> NodeId {
        let g = b.param(&format!("{prefix}.gain"));
        let bias = b.param(&format!("{prefix}.bias"));
        b.layer_norm(x, g, bias)
    }

    fn projection(
        &self,
        b: &mut GraphBuilder,
        input: NodeId,
        layer: usize,
        p: Projection,
        rows: usize,
        dropout: Option<&mut ChaCha8Rng>,
    ) -> NodeId {
        let w = b.param(&proj_weight(layer, p));
        let bias = b.param(&proj_bias(layer, p));
        let base = b.matmul(input, w);
        let mut out = b.add(base, bias);
        if let Some(cfg) = self.lora.as_ref().filter(|c| c.targets.contains(&p)) {
            let mut adapter_in = input;
            if let Some(rng) = dropout {
                if cfg.dropout > 0.0 {
                    let keep = 1.0 - cfg.dropout;
                    let d = self.config.d_model;
                    let mask: Vec<f64> = (0..rows * d)
                        .map(|_| if rng.gen::<f64>() < keep { 1.0 / keep } else { 0.0 })
                        .collect();
                    let mask = b.constant(Tensor::matrix(rows, d, mask));
                    adapter_in = b.mul(input, mask);
                }
            }
            let a = b.param(&lora_a(layer, p));
            let bm = b.param(&lora_b(layer, p));
            let low = b.matmul(adapter_in, a);
            let delta = b.matmul(low, bm);
            let delta = b.scale(delta, cfg.scaling());
            out = b.add(out, delta);
        }
        out
    }

    /// LM-head logits `[T, vocab]` for every row of `hidden`.
    pub fn head_logits(&self, b: &mut GraphBuilder, hidden: NodeId) -> NodeId {
        let w = b.param("lm_head.weight");
        b.matmul(hidden, w)
    }

    /// `σ(z_YES − z_NO)` at each of `rows`, as a `[rows.len(), 1]` node.
    pub fn class_prob_node(&self, b: &mut GraphBuilder, hidden: NodeId, rows: Vec<usize>) -> NodeId {
        let w = b.param("lm_head.weight");
        let yes = b.select_cols(w, vec![YES as usize]);
        let no = b.select_cols(w, vec![NO as usize]);
        let no = b.scale(no, -1.0);
        let diff_w = b.add(yes, no);
        let h = b.select_rows(hidden, rows);
        let z = b.matmul(h, diff_w);
        b.sigmoid(z)
    }

    fn run(&self, graph: &Graph, node: NodeId) -> Result<Tensor> {
        let inputs = BTreeMap::new();
        let eval = graph.evaluate(&self.params, &inputs)?;
        Ok(eval.value(node).clone())
    }

    /// Raw logits `[N, vocab]` for a full context-length sequence.
    pub fn logits(&self, tokens: &[u32]) -> Result<Tensor> {
        self.check_full(tokens)?;
        let mut b = GraphBuilder::new();
        let h = self.build_body(&mut b, tokens, None)?;
        let z = self.head_logits(&mut b, h);
        self.run(&b.build(), z)
    }

    /// Next-token distributions `[N, vocab]`; row `t` depends only on tokens `<= t`.
    pub fn forward(&self, tokens: &[u32]) -> Result<Tensor> {
        self.check_full(tokens)?;
        let mut b = GraphBuilder::new();
        let h = self.build_body(&mut b, tokens, None)?;
        let z = self.head_logits(&mut b, h);
        let p = b.softmax(z);
        self.run(&b.build(), p)
    }

    fn check_full(&self, tokens: &[u32]) -> Result<()> {
        self.check_tokens(tokens)?;
        if tokens.len() != self.config.context_size {
            return Err(Error::Config(format!(
                "forward expects exactly {} tokens, got {}",
                self.config.context_size,
                tokens.len()
            )));
        }
        Ok(())
    }

    /// Index whose logits carry the class decision for a function laid out
    /// by [`eval_tokens`] with EOS at `eos`.
    pub fn readout_index(eos: usize, regime: Regime) -> usize {
        match regime {
            Regime::Classification => eos,
            // the label token would follow the last code token
            Regime::Ntp => eos - 1,
        }
    }

    /// Vulnerability probability of one function: lays it out alone in the
    /// context window and returns `σ(z_YES − z_NO)` at the readout position.
    pub fn predict_vuln_prob(&self, function_tokens: &[u32], regime: Regime) -> Result<f64> {
        let (tokens, eos) = eval_tokens(function_tokens, self.config.context_size)?;
        let readout = Self::readout_index(eos, regime);
        let prefix = &tokens[..readout + 1];
        let mut b = GraphBuilder::new();
        let h = self.build_body(&mut b, prefix, None)?;
        let p = self.class_prob_node(&mut b, h, vec![readout]);
        Ok(self.run(&b.build(), p)?.data()[0])
    }

    pub fn save(&self, path: &Path, regime: Option<Regime>) -> Result<()> {
        crate::checkpoint::save(path, self, regime)
    }
}
