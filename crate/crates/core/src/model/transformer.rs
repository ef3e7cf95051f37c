//! Post-norm transformer encoder classifier.
//!
//! Parameter names:
//!
//! | name | dims |
//! |---|---|
//! | `embed.word` | `[vocab, d]` |
//! | `embed.position` | `[max_len, d]` |
//! | `layer{i}.attn.wq`, `.wk`, `.wv` | `[heads, d/heads, d]` |
//! | `layer{i}.attn.wo` | `[heads, d, d/heads]` |
//! | `layer{i}.ln1.gamma`, `.beta` | `[d]` |
//! | `layer{i}.ffn.w1`, `.b1` | `[ffn, d]`, `[ffn]` |
//! | `layer{i}.ffn.w2`, `.b2` | `[d, ffn]`, `[d]` |
//! | `layer{i}.ln2.gamma`, `.beta` | `[d]` |
//! | `classifier.w`, `.b` | `[classes, d]`, `[classes]` |
//!
//! Layers are numbered from 1. Each layer computes
//! `x ← LN(x + MHSA(x))`, then `x ← LN(x + FFN(x))`, and the classifier reads
//! the final state of token position 0.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::objective::{load_params, ComputeMode, Objective, ParamVars};
use crate::params::ParamSet;
use crate::tensor::tape::{NodeId, Tape};
use crate::tensor::{Scalar, Tensor};

use super::data::Dataset;

const LN_EPS: f64 = 1e-5;

/// Denominator of the attention logits.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionScale {
    /// `√d` with `d` the model width.
    #[default]
    ModelDim,
    /// `√(d / heads)`.
    HeadDim,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub vocab: usize,
    pub max_len: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub ffn_dim: usize,
    pub n_classes: usize,
    pub seed: u64,
    pub attention_scale: AttentionScale,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            vocab: 64,
            max_len: 16,
            d_model: 32,
            n_heads: 4,
            n_layers: 2,
            ffn_dim: 64,
            n_classes: 2,
            seed: 0,
            attention_scale: AttentionScale::ModelDim,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [self.vocab, self.max_len, self.d_model, self.n_heads, self.ffn_dim, self.n_classes];
        if dims.contains(&0) {
            return Err(Error::invalid("model dimensions must be positive"));
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::invalid(format!("d_model {} is not divisible by {} heads", self.d_model, self.n_heads)));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    /// Parameter count from the dimensions alone.
    pub fn param_count(&self) -> usize {
        let (d, f) = (self.d_model, self.ffn_dim);
        let per_layer = 4 * d * d + 4 * d + 2 * f * d + f + d;
        (self.vocab + self.max_len) * d + self.n_layers * per_layer + self.n_classes * (d + 1)
    }

    pub fn layer_names(&self) -> Vec<String> {
        (1..=self.n_layers).map(|i| format!("layer{i}")).collect()
    }
}

/// Role of a parameter for quantization and size accounting.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamRole {
    EmbeddingWord,
    EmbeddingPosition,
    /// Attention projection, rows grouped by head.
    Attention,
    /// FFN matrix.
    Dense,
    /// Bias or layer-norm vector.
    Vector,
    Output,
}

/// How a parameter is laid out for group-wise quantization: the tensor is
/// viewed as `out_neurons` rows split across `n_heads` heads. Embeddings
/// are grouped along the model-width axis, so they are quantized
/// transposed.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct QuantLayout {
    pub role: ParamRole,
    pub out_neurons: usize,
    pub n_heads: usize,
    pub transposed: bool,
}

/// One fixed-length batch, flattened row-major as `[batch, seq_len]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub tokens: Vec<usize>,
    pub labels: Vec<usize>,
    pub batch: usize,
    pub seq_len: usize,
}

impl Batch {
    pub fn new(sequences: &[&[usize]], labels: &[usize]) -> Result<Self> {
        let seq_len = sequences.first().map(|s| s.len()).unwrap_or(0);
        if sequences.is_empty() || seq_len == 0 {
            return Err(Error::invalid("empty batch"));
        }
        if sequences.iter().any(|s| s.len() != seq_len) || labels.len() != sequences.len() {
            return Err(Error::shape("batch", "sequences must share one length and have one label each"));
        }
        Ok(Self { tokens: sequences.concat(), labels: labels.to_vec(), batch: sequences.len(), seq_len })
    }
}

/// Replaces an activation entering a linear layer. Used for activation
/// fake-quantization; `site` names the consuming layer input.
pub trait ActivationHook {
    /// Returns the substituted values and the straight-through mask, or
    /// `None` to leave the activation untouched.
    fn apply(&mut self, site: &str, values: &[f64]) -> Result<Option<(Vec<f64>, Vec<bool>)>>;
}

/// Hook that leaves every activation as is.
pub struct NoHook;

impl ActivationHook for NoHook {
    fn apply(&mut self, _: &str, _: &[f64]) -> Result<Option<(Vec<f64>, Vec<bool>)>> {
        Ok(None)
    }
}

/// Tape handles produced by one forward pass.
pub struct ForwardOut {
    /// `[batch, classes]`.
    pub logits: NodeId,
    /// Attention probabilities per layer and head, each `[batch, n, n]`.
    pub attention: Vec<Vec<NodeId>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Transformer {
    pub cfg: ModelConfig,
}

/// Builds the model and its seeded initial parameters.
pub fn build_model(cfg: &ModelConfig) -> Result<(Transformer, ParamSet)> {
    let model = Transformer::new(cfg.clone())?;
    let params = model.init_params()?;
    Ok((model, params))
}

impl Transformer {
    pub fn new(cfg: ModelConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self { cfg })
    }

    pub fn init_params(&self) -> Result<ParamSet> {
        let c = &self.cfg;
        let (d, h, dh, f) = (c.d_model, c.n_heads, c.head_dim(), c.ffn_dim);
        let mut rng = ChaCha8Rng::seed_from_u64(c.seed);
        let std_normal = Normal::new(0.0, 1.0).unwrap();
        let mut normal = |dims: &[usize], std: f64| Tensor::from_fn(dims, |_| std * std_normal.sample(&mut rng));
        let inv = |n: usize| 1.0 / (n as f64).sqrt();
        let mut p = ParamSet::new();
        p.insert("embed.word", normal(&[c.vocab, d], 1.0), true)?;
        p.insert("embed.position", normal(&[c.max_len, d], 1.0), true)?;
        for i in 1..=c.n_layers {
            for w in ["wq", "wk", "wv"] {
                p.insert(format!("layer{i}.attn.{w}"), normal(&[h, dh, d], inv(d)), true)?;
            }
            p.insert(format!("layer{i}.attn.wo"), normal(&[h, d, dh], inv(d)), true)?;
            p.insert(format!("layer{i}.ln1.gamma"), Tensor::from_fn(&[d], |_| 1.0), true)?;
            p.insert(format!("layer{i}.ln1.beta"), Tensor::zeros(&[d]), true)?;
            p.insert(format!("layer{i}.ffn.w1"), normal(&[f, d], inv(d)), true)?;
            p.insert(format!("layer{i}.ffn.b1"), Tensor::zeros(&[f]), true)?;
            p.insert(format!("layer{i}.ffn.w2"), normal(&[d, f], inv(f)), true)?;
            p.insert(format!("layer{i}.ffn.b2"), Tensor::zeros(&[d]), true)?;
            p.insert(format!("layer{i}.ln2.gamma"), Tensor::from_fn(&[d], |_| 1.0), true)?;
            p.insert(format!("layer{i}.ln2.beta"), Tensor::zeros(&[d]), true)?;
        }
        p.insert("classifier.w", normal(&[c.n_classes, d], inv(d)), true)?;
        p.insert("classifier.b", Tensor::zeros(&[c.n_classes]), true)?;
        Ok(p)
    }

    /// Quantization layout of a parameter, keyed by name.
    pub fn quant_layout(&self, name: &str, dims: &[usize]) -> Result<QuantLayout> {
        let heads = self.cfg.n_heads;
        let rows = dims.first().copied().unwrap_or(1);
        let layout = |role, out_neurons, n_heads, transposed| QuantLayout { role, out_neurons, n_heads, transposed };
        Ok(match name {
            "embed.word" => layout(ParamRole::EmbeddingWord, self.cfg.d_model, 1, true),
            "embed.position" => layout(ParamRole::EmbeddingPosition, self.cfg.d_model, 1, true),
            n if n.starts_with("classifier.") => layout(ParamRole::Output, rows, 1, false),
            n if n.contains(".attn.") => layout(ParamRole::Attention, dims[0] * dims[1], heads, false),
            n if n.ends_with(".w1") || n.ends_with(".w2") => layout(ParamRole::Dense, rows, 1, false),
            n if n.starts_with("layer") => layout(ParamRole::Vector, 1, 1, false),
            other => return Err(Error::UnknownName(other.to_string())),
        })
    }

    fn scale(&self) -> f64 {
        let denom = match self.cfg.attention_scale {
            AttentionScale::ModelDim => self.cfg.d_model,
            AttentionScale::HeadDim => self.cfg.head_dim(),
        };
        1.0 / (denom as f64).sqrt()
    }

    fn hook<T: Scalar>(tape: &mut Tape<T>, hook: &mut dyn ActivationHook, site: &str, x: NodeId) -> Result<NodeId> {
        let values: Vec<f64> = tape.value(x).data().iter().map(|v| v.value()).collect();
        match hook.apply(site, &values)? {
            None => Ok(x),
            Some((q, pass)) => {
                let t = Tensor::new(tape.dims(x).to_vec(), q.into_iter().map(T::from_f64).collect())?;
                tape.straight_through(x, t, pass)
            }
        }
    }

    /// Multi-head self-attention over `x: [batch·n, d]`. Returns the summed
    /// head outputs `[batch·n, d]` and each head's attention probabilities.
    #[allow(clippy::too_many_arguments)]
    pub fn mhsa<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        vars: &ParamVars,
        layer: usize,
        x: NodeId,
        batch: usize,
        n: usize,
        hook: &mut dyn ActivationHook,
    ) -> Result<(NodeId, Vec<NodeId>)> {
        let (d, dh) = (self.cfg.d_model, self.cfg.head_dim());
        if tape.dims(x) != [batch * n, d] {
            return Err(Error::shape("mhsa", format!("input {:?}, expected [{}, {d}]", tape.dims(x), batch * n)));
        }
        let x = Self::hook(tape, hook, &format!("layer{layer}.attn.in"), x)?;
        let w = |s: &str| vars.get(&format!("layer{layer}.attn.{s}"));
        let (wq, wk, wv, wo) = (w("wq")?, w("wk")?, w("wv")?, w("wo")?);
        let mut out = None;
        let mut probs = Vec::with_capacity(self.cfg.n_heads);
        for h in 0..self.cfg.n_heads {
            let project = |tape: &mut Tape<T>, wm: NodeId| -> Result<NodeId> {
                let wh = tape.select(wm, h)?;
                let y = tape.matmul(x, wh, true)?;
                tape.reshape(y, &[batch, n, dh])
            };
            let q = project(tape, wq)?;
            let k = project(tape, wk)?;
            let v = project(tape, wv)?;
            let scores = tape.batch_matmul(q, k, true)?;
            let scores = tape.scale(scores, self.scale())?;
            let p = tape.softmax_rows(scores)?;
            probs.push(p);
            let ctx = tape.batch_matmul(p, v, false)?;
            let ctx = tape.reshape(ctx, &[batch * n, dh])?;
            let ctx = Self::hook(tape, hook, &format!("layer{layer}.attn.ctx{h}"), ctx)?;
            let woh = tape.select(wo, h)?;
            let head_out = tape.matmul(ctx, woh, true)?;
            out = Some(match out {
                None => head_out,
                Some(acc) => tape.add(acc, head_out)?,
            });
        }
        Ok((out.expect("at least one head"), probs))
    }

    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        vars: &ParamVars,
        batch: &Batch,
        hook: &mut dyn ActivationHook,
    ) -> Result<ForwardOut> {
        let c = &self.cfg;
        let (b, n) = (batch.batch, batch.seq_len);
        if n > c.max_len || batch.tokens.len() != b * n {
            return Err(Error::shape("forward", format!("batch of {b}×{n} with max_len {}", c.max_len)));
        }
        if let Some(&t) = batch.tokens.iter().find(|&&t| t >= c.vocab) {
            return Err(Error::shape("forward", format!("token {t} outside vocab {}", c.vocab)));
        }
        let word = tape.gather_rows(vars.get("embed.word")?, &batch.tokens)?;
        let positions: Vec<usize> = (0..b).flat_map(|_| 0..n).collect();
        let pos = tape.gather_rows(vars.get("embed.position")?, &positions)?;
        let mut x = tape.add(word, pos)?;
        let mut attention = Vec::with_capacity(c.n_layers);
        for i in 1..=c.n_layers {
            let p = |s: &str| vars.get(&format!("layer{i}.{s}"));
            let (a, probs) = self.mhsa(tape, vars, i, x, b, n, hook)?;
            attention.push(probs);
            let r = tape.add(x, a)?;
            x = tape.layer_norm(r, p("ln1.gamma")?, p("ln1.beta")?, LN_EPS)?;

            let hin = Self::hook(tape, hook, &format!("layer{i}.ffn.in"), x)?;
            let hdn = tape.matmul(hin, p("ffn.w1")?, true)?;
            let hdn = tape.add_bias(hdn, p("ffn.b1")?)?;
            let hdn = tape.gelu(hdn)?;
            let hdn = Self::hook(tape, hook, &format!("layer{i}.ffn.hidden"), hdn)?;
            let f = tape.matmul(hdn, p("ffn.w2")?, true)?;
            let f = tape.add_bias(f, p("ffn.b2")?)?;
            let r = tape.add(x, f)?;
            x = tape.layer_norm(r, p("ln2.gamma")?, p("ln2.beta")?, LN_EPS)?;
        }
        let first: Vec<usize> = (0..b).map(|s| s * n).collect();
        let pooled = tape.gather_rows(x, &first)?;
        let pooled = Self::hook(tape, hook, "classifier.in", pooled)?;
        let z = tape.matmul(pooled, vars.get("classifier.w")?, true)?;
        let logits = tape.add_bias(z, vars.get("classifier.b")?)?;
        Ok(ForwardOut { logits, attention })
    }

    /// Logits `[batch, classes]` as plain values.
    pub fn logits(&self, params: &ParamSet, batch: &Batch, mode: ComputeMode, hook: &mut dyn ActivationHook) -> Result<Tensor<f64>> {
        fn run<T: Scalar>(m: &Transformer, params: &ParamSet, batch: &Batch, hook: &mut dyn ActivationHook) -> Result<Tensor<f64>> {
            let mut tape = Tape::<T>::new();
            let vars = load_params(&mut tape, params)?;
            let out = m.forward(&mut tape, &vars, batch, hook)?;
            Ok(tape.value(out.logits).to_f64())
        }
        match mode {
            ComputeMode::F32 => run::<f32>(self, params, batch, hook),
            ComputeMode::F64 => run::<f64>(self, params, batch, hook),
        }
    }

    /// Attention probabilities `[layer][head] → [batch, n, n]` in 64-bit.
    pub fn attention(&self, params: &ParamSet, batch: &Batch, hook: &mut dyn ActivationHook) -> Result<Vec<Vec<Tensor<f64>>>> {
        let mut tape = Tape::<f64>::new();
        let vars = load_params(&mut tape, params)?;
        let out = self.forward(&mut tape, &vars, batch, hook)?;
        Ok(out.attention.iter().map(|l| l.iter().map(|&id| tape.value(id).clone()).collect()).collect())
    }

    /// Mean cross-entropy and arg-max accuracy over a dataset in one pass.
    pub fn score(
        &self,
        params: &ParamSet,
        data: &Dataset,
        batch_size: usize,
        mode: ComputeMode,
        hook: &mut dyn ActivationHook,
    ) -> Result<(f64, f64)> {
        if data.is_empty() {
            return Err(Error::invalid("cannot evaluate on an empty dataset"));
        }
        let c = self.cfg.n_classes;
        let (mut total, mut correct) = (0.0, 0usize);
        for batch in data.batches(batch_size)? {
            let logits = self.logits(params, &batch, mode, hook)?;
            for (row, &y) in logits.data().chunks(c).zip(&batch.labels) {
                let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
                total += lse - row[y];
                correct += usize::from(argmax(row) == y);
            }
        }
        let n = data.len() as f64;
        Ok((total / n, correct as f64 / n))
    }

    /// Fraction of samples whose arg-max logit equals the label.
    pub fn evaluate(
        &self,
        params: &ParamSet,
        data: &Dataset,
        batch_size: usize,
        mode: ComputeMode,
        hook: &mut dyn ActivationHook,
    ) -> Result<f64> {
        self.score(params, data, batch_size, mode, hook).map(|r| r.1)
    }
}

/// First index of the largest value.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Cross-entropy of the model on one batch, as an [`Objective`].
pub struct BatchLoss<'a> {
    pub model: &'a Transformer,
    pub batch: &'a Batch,
}

impl Objective for BatchLoss<'_> {
    fn loss<T: Scalar>(&self, tape: &mut Tape<T>, vars: &ParamVars) -> Result<NodeId> {
        let out = self.model.forward(tape, vars, self.batch, &mut NoHook)?;
        tape.softmax_cross_entropy(out.logits, &self.batch.labels)
    }
}

/// Cross-entropy of the model over a whole dataset taken as one batch.
pub struct DatasetLoss<'a> {
    pub model: &'a Transformer,
    pub batch: Batch,
}

impl<'a> DatasetLoss<'a> {
    pub fn new(model: &'a Transformer, data: &Dataset) -> Result<Self> {
        data.check(&model.cfg)?;
        let seqs: Vec<&[usize]> = data.sequences.iter().map(Vec::as_slice).collect();
        Ok(Self { model, batch: Batch::new(&seqs, &data.labels)? })
    }
}

impl Objective for DatasetLoss<'_> {
    fn loss<T: Scalar>(&self, tape: &mut Tape<T>, vars: &ParamVars) -> Result<NodeId> {
        BatchLoss { model: self.model, batch: &self.batch }.loss(tape, vars)
    }
}
