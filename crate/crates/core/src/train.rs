//! Full-precision training, quantization-aware fine-tuning, and the
//! uniform layer-wise baseline.
//!
//! All runs use SGD with momentum on `f64` master weights. During
//! quantization-aware fine-tuning each step re-quantizes the master
//! weights group-wise, puts the dequantized values on the tape in place of
//! the weights, and routes gradients back through a clipped
//! straight-through node. Inputs to every linear layer are fake-quantized
//! with ranges tracked as an exponential moving average of batch min/max.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::allocate::{model_size, BitAllocation, Category, LayerShape, SizeReport, FULL_PRECISION_BITS};
use crate::checkpoint::{Checkpoint, Entry};
use crate::derive_seed;
use crate::error::{Error, Result};
use crate::model::data::Split;
use crate::model::transformer::{argmax, ActivationHook, NoHook, ParamRole};
use crate::model::{Batch, Dataset, Transformer};
use crate::objective::{load_params, ComputeMode};
use crate::params::{GradientSet, ParamSet};
use crate::quant::group::{build_group_spec, groupwise_quantize, GroupMode, GroupQuantizedTensor, GroupSpec};
use crate::quant::{fake_quantize, QuantRange, QuantSpec, RangePolicy, MAX_BITS};
use crate::tensor::tape::Tape;
use crate::tensor::{Scalar, Tensor};

pub const ACTIVATION_EMA_DECAY: f64 = 0.9;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub seed: u64,
    pub compute: ComputeMode,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { epochs: 20, batch_size: 128, lr: 0.01, momentum: 0.9, seed: 0, compute: ComputeMode::F32 }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::invalid("batch_size must be positive and lr finite and non-negative"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::invalid(format!("momentum {} outside [0, 1)", self.momentum)));
        }
        Ok(())
    }
}

/// How the rows of a weight matrix are split into quantization groups.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Grouping {
    #[default]
    Layerwise,
    /// One group per attention head; a single group for matrices without
    /// heads.
    PerHead,
    /// This many groups per matrix, as consecutive row buckets of
    /// `ceil(rows / count)`.
    Count(usize),
    /// Consecutive row buckets of this size.
    BucketSize(usize),
}

impl Grouping {
    pub fn mode(self, out_neurons: usize) -> Result<GroupMode> {
        Ok(match self {
            Grouping::Layerwise => GroupMode::Layerwise,
            Grouping::PerHead => GroupMode::PerHead,
            Grouping::Count(0) | Grouping::BucketSize(0) => return Err(Error::invalid("group count and bucket size must be positive")),
            Grouping::Count(n) => GroupMode::Bucketed(out_neurons.div_ceil(n)),
            Grouping::BucketSize(s) => GroupMode::Bucketed(s),
        })
    }
}

impl std::str::FromStr for Grouping {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "layerwise" => Ok(Grouping::Layerwise),
            "per-head" | "per_head" => Ok(Grouping::PerHead),
            n => n
                .parse::<usize>()
                .ok()
                .filter(|&n| n > 0)
                .map(Grouping::Count)
                .ok_or_else(|| Error::invalid(format!("groups must be a positive count, `per-head` or `layerwise`, got `{n}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QuantConfig {
    pub allocation: BitAllocation,
    /// Grouping of the six encoder weight matrices.
    #[serde(default)]
    pub groups: Grouping,
    #[serde(default)]
    pub embedding_groups: Grouping,
    #[serde(default = "minmax")]
    pub range_policy: RangePolicy,
}

fn minmax() -> RangePolicy {
    RangePolicy::MinMax
}

fn quantized(bits: u8) -> Result<bool> {
    match bits {
        b if b >= FULL_PRECISION_BITS => Ok(false),
        b if (1..=MAX_BITS).contains(&b) => Ok(true),
        b => Err(Error::invalid(format!("bit-width {b} must be in 1..=16 or at least 32"))),
    }
}

fn transpose(t: &Tensor<f64>) -> Tensor<f64> {
    let (r, c) = (t.dims()[0], t.dims()[1]);
    Tensor::from_fn(&[c, r], |i| t.data()[(i % r) * c + i / r])
}

fn transpose_mask(m: &[bool], r: usize, c: usize) -> Vec<bool> {
    (0..r * c).map(|i| m[(i % c) * r + i / c]).collect()
}

#[derive(Clone, Debug, PartialEq)]
struct PlanEntry {
    name: String,
    bits: u8,
    spec: GroupSpec,
    transposed: bool,
}

/// A quantized parameter: the stored codes, plus the dequantized values
/// and straight-through mask in the parameter's own layout.
#[derive(Clone, Debug, PartialEq)]
pub struct QuantizedParam {
    pub codes: GroupQuantizedTensor,
    pub transposed: bool,
    pub values: Tensor<f64>,
    pub pass: Vec<bool>,
}

/// Per-parameter bit-widths and group specs resolved against a model.
#[derive(Clone, Debug, PartialEq)]
pub struct QuantPlan {
    entries: Vec<PlanEntry>,
    pub allocation: Option<BitAllocation>,
    pub range_policy: RangePolicy,
}

impl QuantPlan {
    /// No quantization at all.
    pub fn none() -> Self {
        Self { entries: Vec::new(), allocation: None, range_policy: RangePolicy::MinMax }
    }

    pub fn new(model: &Transformer, params: &ParamSet, cfg: &QuantConfig) -> Result<Self> {
        let alloc = &cfg.allocation;
        let layers = model.cfg.layer_names();
        for l in &alloc.layers {
            if !layers.contains(&l.name) {
                return Err(Error::UnknownName(l.name.clone()));
            }
        }
        quantized(alloc.a_bits)?;
        let mut entries = Vec::new();
        for p in params.iter() {
            let layout = model.quant_layout(&p.name, p.value.dims())?;
            let (bits, grouping) = match layout.role {
                ParamRole::EmbeddingWord => (alloc.e_bits.word, cfg.embedding_groups),
                ParamRole::EmbeddingPosition => (alloc.e_bits.position, cfg.embedding_groups),
                ParamRole::Output => continue,
                role => {
                    let layer = p.name.split('.').next().unwrap_or_default();
                    let bits = alloc.bits_of(layer).ok_or_else(|| Error::UnknownName(format!("{layer} (no bits allocated)")))?;
                    (bits, if role == ParamRole::Vector { Grouping::Layerwise } else { cfg.groups })
                }
            };
            if !quantized(bits)? {
                continue;
            }
            let spec = build_group_spec(layout.out_neurons, layout.n_heads, grouping.mode(layout.out_neurons)?)?;
            entries.push(PlanEntry { name: p.name.clone(), bits, spec, transposed: layout.transposed });
        }
        Ok(Self { entries, allocation: Some(alloc.clone()), range_policy: cfg.range_policy })
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn activation_bits(&self) -> Option<u8> {
        self.allocation.as_ref().map(|a| a.a_bits).filter(|&b| b < FULL_PRECISION_BITS)
    }

    /// Group count per parameter name.
    pub fn group_counts(&self) -> BTreeMap<String, usize> {
        self.entries.iter().map(|e| (e.name.clone(), e.spec.len())).collect()
    }

    pub fn quantize(&self, params: &ParamSet) -> Result<Vec<(String, QuantizedParam)>> {
        self.entries
            .iter()
            .map(|e| {
                let w = params.get(&e.name)?;
                let qspec = QuantSpec::new(e.bits, self.range_policy)?;
                let q = if e.transposed {
                    let (r, c) = (w.dims()[0], w.dims()[1]);
                    let codes = groupwise_quantize(&transpose(w), &e.spec, &qspec)?;
                    let values = transpose(&codes.dequantize());
                    let pass = transpose_mask(&codes.pass_mask(&transpose(w)), r, c);
                    QuantizedParam { codes, transposed: true, values, pass }
                } else {
                    let codes = groupwise_quantize(w, &e.spec, &qspec)?;
                    let values = codes.dequantize();
                    let pass = codes.pass_mask(w);
                    QuantizedParam { codes, transposed: false, values, pass }
                };
                Ok((e.name.clone(), q))
            })
            .collect()
    }

    /// Parameters with every quantized tensor replaced by its dequantized
    /// values.
    pub fn effective_params(&self, params: &ParamSet) -> Result<ParamSet> {
        let mut out = params.clone();
        for (name, q) in self.quantize(params)? {
            *out.get_mut(&name)? = q.values;
        }
        Ok(out)
    }

    /// Size-accounting shapes: the two embeddings, one entry per encoder
    /// layer (all of its parameters), and the classifier.
    pub fn shapes(&self, model: &Transformer, params: &ParamSet) -> Result<Vec<LayerShape>> {
        let groups = self.group_counts();
        let g = |names: &[&str]| names.iter().map(|n| groups.get(*n).copied().unwrap_or(1) as u64).sum::<u64>();
        let count = |group: &str| params.group_len(group).map(|n| n as u64);
        let mut shapes = vec![
            LayerShape::new("embed.word", count("embed.word")?, Category::EmbeddingWord).with_groups(g(&["embed.word"])),
            LayerShape::new("embed.position", count("embed.position")?, Category::EmbeddingPosition).with_groups(g(&["embed.position"])),
        ];
        for layer in model.cfg.layer_names() {
            let members = params.group_members(&layer)?;
            shapes.push(LayerShape::new(layer.clone(), count(&layer)?, Category::Encoder).with_groups(g(&members)));
        }
        shapes.push(LayerShape::new("classifier", count("classifier")?, Category::Output));
        Ok(shapes)
    }

    pub fn size(&self, model: &Transformer, params: &ParamSet) -> Result<SizeReport> {
        let names = model.cfg.layer_names();
        let alloc = self.allocation.clone().unwrap_or_else(|| BitAllocation::uniform(&names, 32, 32, 32));
        model_size(&alloc, &self.shapes(model, params)?)
    }

    /// Checkpoint with code tensors for quantized parameters, `f32` for
    /// the rest, and activation ranges as `act.<site>` = `[lo, hi]`.
    pub fn checkpoint(&self, params: &ParamSet, act: Option<&ActivationQuantizer>) -> Result<Checkpoint> {
        let q: BTreeMap<String, QuantizedParam> = self.quantize(params)?.into_iter().collect();
        let mut ck = Checkpoint::new();
        for p in params.iter() {
            match q.get(&p.name) {
                Some(qp) => ck.push(p.name.clone(), Entry::Codes(qp.codes.clone())),
                None => ck.push(p.name.clone(), Entry::F32(p.value.map(|v| v as f32 as f64))),
            }
        }
        if let Some(a) = act {
            for (site, (lo, hi)) in &a.ranges {
                ck.push(format!("act.{site}"), Entry::F64(Tensor::new(vec![2], vec![*lo, *hi])?));
            }
        }
        Ok(ck)
    }
}

/// Restores a parameter set from a checkpoint written by
/// [`QuantPlan::checkpoint`] or as plain tensors. Code tensors stored
/// transposed are transposed back.
pub fn params_from_checkpoint(model: &Transformer, ck: &Checkpoint) -> Result<ParamSet> {
    let mut params = model.init_params()?;
    let names: Vec<String> = params.names().map(String::from).collect();
    for name in names {
        let entry = ck.get(&name).ok_or_else(|| Error::Format(format!("checkpoint is missing `{name}`")))?;
        let mut v = entry.values();
        let slot = params.get_mut(&name)?;
        if v.dims() != slot.dims() && v.rank() == 2 && v.dims().iter().rev().eq(slot.dims()) {
            v = transpose(&v);
        }
        if v.dims() != slot.dims() {
            return Err(Error::Format(format!("`{name}`: dims {:?}, model expects {:?}", v.dims(), slot.dims())));
        }
        *slot = v;
    }
    Ok(params)
}

/// Activation ranges stored in a checkpoint, if any.
pub fn activations_from_checkpoint(ck: &Checkpoint, bits: u8) -> Result<Option<ActivationQuantizer>> {
    let mut ranges = BTreeMap::new();
    for (name, e) in &ck.entries {
        if let Some(site) = name.strip_prefix("act.") {
            let v = e.values();
            if v.numel() != 2 {
                return Err(Error::Format(format!("`{name}` must hold [lo, hi]")));
            }
            ranges.insert(site.to_string(), (v.data()[0], v.data()[1]));
        }
    }
    if ranges.is_empty() || bits >= FULL_PRECISION_BITS {
        return Ok(None);
    }
    let mut a = ActivationQuantizer::new(bits)?;
    a.ranges = ranges;
    a.frozen = true;
    Ok(Some(a))
}

/// Fake-quantizes layer inputs against EMA-tracked ranges.
#[derive(Clone, Debug, PartialEq)]
pub struct ActivationQuantizer {
    pub bits: u8,
    pub decay: f64,
    /// `[lo, hi]` per site.
    pub ranges: BTreeMap<String, (f64, f64)>,
    /// When set, ranges are used as they are and unseen sites are errors.
    pub frozen: bool,
}

impl ActivationQuantizer {
    pub fn new(bits: u8) -> Result<Self> {
        if !quantized(bits)? {
            return Err(Error::invalid("activation quantizer needs bits in 1..=16"));
        }
        Ok(Self { bits, decay: ACTIVATION_EMA_DECAY, ranges: BTreeMap::new(), frozen: false })
    }
}

impl ActivationHook for ActivationQuantizer {
    fn apply(&mut self, site: &str, values: &[f64]) -> Result<Option<(Vec<f64>, Vec<bool>)>> {
        let (lo, hi) = if self.frozen {
            *self.ranges.get(site).ok_or_else(|| Error::UnknownName(format!("activation site {site} has no range")))?
        } else {
            let mn = values.iter().cloned().fold(f64::INFINITY, f64::min);
            let mx = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let d = self.decay;
            let r = self.ranges.entry(site.to_string()).or_insert((mn, mx));
            *r = (d * r.0 + (1.0 - d) * mn, d * r.1 + (1.0 - d) * mx);
            *r
        };
        let range = QuantRange::new(lo, hi.max(lo), self.bits)?;
        Ok(Some(fake_quantize(values, &range, self.bits)))
    }
}

/// Per-epoch record, one line of the metrics stream.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub split: Split,
    pub loss: f64,
    pub accuracy: f64,
    pub size_mb: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Full-precision master weights.
    pub params: ParamSet,
    pub plan: QuantPlan,
    pub activations: Option<ActivationQuantizer>,
    pub metrics: Vec<EpochMetrics>,
    pub steps: usize,
    pub size: SizeReport,
}

impl TrainOutcome {
    /// Parameters the model actually runs with.
    pub fn effective_params(&self) -> Result<ParamSet> {
        self.plan.effective_params(&self.params)
    }

    pub fn evaluate(&self, model: &Transformer, data: &Dataset, batch_size: usize, mode: ComputeMode) -> Result<f64> {
        let p = self.effective_params()?;
        match &self.activations {
            Some(a) => model.evaluate(&p, data, batch_size, mode, &mut a.clone()),
            None => model.evaluate(&p, data, batch_size, mode, &mut NoHook),
        }
    }

    pub fn checkpoint(&self) -> Result<Checkpoint> {
        self.plan.checkpoint(&self.params, self.activations.as_ref())
    }

    pub fn last(&self, split: Split) -> Option<&EpochMetrics> {
        self.metrics.iter().rev().find(|m| m.split == split)
    }
}

/// Loss, logits and master-weight gradients for one batch. Quantized
/// parameters enter the tape as straight-through nodes over their master
/// leaves.
pub fn step_gradient(
    model: &Transformer,
    params: &ParamSet,
    plan: &QuantPlan,
    batch: &Batch,
    hook: &mut dyn ActivationHook,
    mode: ComputeMode,
) -> Result<(f64, Tensor<f64>, GradientSet)> {
    fn run<T: Scalar>(
        model: &Transformer,
        params: &ParamSet,
        plan: &QuantPlan,
        batch: &Batch,
        hook: &mut dyn ActivationHook,
    ) -> Result<(f64, Tensor<f64>, GradientSet)> {
        let mut tape = Tape::<T>::new();
        let mut vars = load_params(&mut tape, params)?;
        let leaves: Vec<(String, bool, _)> = params.iter().map(|p| (p.name.clone(), p.trainable, vars.get(&p.name))).collect();
        for (name, q) in plan.quantize(params)? {
            let leaf = vars.get(&name)?;
            let node = tape.straight_through(leaf, Tensor::<T>::from_f64(&q.values), q.pass)?;
            vars.insert(name, node);
        }
        let out = model.forward(&mut tape, &vars, batch, hook)?;
        let loss = tape.softmax_cross_entropy(out.logits, &batch.labels)?;
        let grads = tape.backward(loss)?;
        let mut g = BTreeMap::new();
        for (name, trainable, leaf) in leaves {
            if !trainable {
                continue;
            }
            let leaf = leaf?;
            let t = grads.get(leaf).map(Tensor::to_f64).unwrap_or_else(|| Tensor::zeros(tape.dims(leaf)));
            g.insert(name, t);
        }
        let value = tape.value(loss).item()?.value();
        Ok((value, tape.value(out.logits).to_f64(), GradientSet { grads: g }))
    }
    match mode {
        ComputeMode::F32 => run::<f32>(model, params, plan, batch, hook),
        ComputeMode::F64 => run::<f64>(model, params, plan, batch, hook),
    }
}

fn diverged(epoch: usize, step: usize, e: Error) -> Error {
    match e {
        Error::NonFinite(_) => Error::Diverged { epoch, step, loss: f64::NAN },
        other => other,
    }
}

fn fit(
    model: &Transformer,
    init: &ParamSet,
    train: &Dataset,
    eval: Option<&Dataset>,
    cfg: &TrainConfig,
    plan: QuantPlan,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    train.check(&model.cfg)?;
    if train.is_empty() {
        return Err(Error::invalid("empty training set"));
    }
    let mut params = init.clone();
    let mut act = plan.activation_bits().map(ActivationQuantizer::new).transpose()?;
    let size = plan.size(model, &params)?;
    let mut velocity: BTreeMap<String, Vec<f64>> =
        params.iter().filter(|p| p.trainable).map(|p| (p.name.clone(), vec![0.0; p.value.numel()])).collect();
    let mut metrics = Vec::new();
    let mut steps = 0;
    for epoch in 0..cfg.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, epoch as u64));
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut rng);
        let (mut loss_sum, mut correct) = (0.0, 0usize);
        for batch in train.batches_in_order(&order, cfg.batch_size)? {
            let (loss, logits, grads) = match act.as_mut() {
                Some(a) => step_gradient(model, &params, &plan, &batch, a, cfg.compute),
                None => step_gradient(model, &params, &plan, &batch, &mut NoHook, cfg.compute),
            }
            .map_err(|e| diverged(epoch, steps, e))?;
            if !loss.is_finite() {
                return Err(Error::Diverged { epoch, step: steps, loss });
            }
            loss_sum += loss * batch.batch as f64;
            let c = model.cfg.n_classes;
            correct += logits.data().chunks(c).zip(&batch.labels).filter(|(r, &y)| argmax(r) == y).count();
            for p in params.iter_mut().filter(|p| p.trainable) {
                let g = grads.get(&p.name).expect("gradient for every trainable parameter");
                let buf = velocity.get_mut(&p.name).expect("velocity for every trainable parameter");
                for ((w, v), &gi) in p.value.data_mut().iter_mut().zip(buf.iter_mut()).zip(g.data()) {
                    *v = cfg.momentum * *v + gi;
                    *w -= cfg.lr * *v;
                }
            }
            steps += 1;
        }
        let n = train.len() as f64;
        metrics.push(EpochMetrics { epoch, split: Split::Train, loss: loss_sum / n, accuracy: correct as f64 / n, size_mb: size.total_mb });
        if let Some(ev) = eval {
            let p = plan.effective_params(&params)?;
            let mut frozen = act.clone().map(|mut a| {
                a.frozen = true;
                a
            });
            let (loss, accuracy) = match frozen.as_mut() {
                Some(a) => model.score(&p, ev, cfg.batch_size, cfg.compute, a)?,
                None => model.score(&p, ev, cfg.batch_size, cfg.compute, &mut NoHook)?,
            };
            metrics.push(EpochMetrics { epoch, split: Split::Eval, loss, accuracy, size_mb: size.total_mb });
        }
    }
    if let Some(a) = act.as_mut() {
        a.frozen = true;
    }
    Ok(TrainOutcome { params, plan, activations: act, metrics, steps, size })
}

/// Full-precision training from `init`.
pub fn train_baseline(model: &Transformer, init: &ParamSet, train: &Dataset, eval: Option<&Dataset>, cfg: &TrainConfig) -> Result<TrainOutcome> {
    fit(model, init, train, eval, cfg, QuantPlan::none())
}

/// Quantization-aware fine-tuning from a trained baseline.
pub fn qat_finetune(
    model: &Transformer,
    baseline: &ParamSet,
    train: &Dataset,
    eval: Option<&Dataset>,
    cfg: &TrainConfig,
    quant: &QuantConfig,
) -> Result<TrainOutcome> {
    let plan = QuantPlan::new(model, baseline, quant)?;
    fit(model, baseline, train, eval, cfg, plan)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DirectQConfig {
    pub bits: u8,
    pub e_bits: u8,
    pub a_bits: u8,
    /// Quantize once without fine-tuning; activation ranges are calibrated
    /// over one pass of the training data.
    pub post_training: bool,
}

impl Default for DirectQConfig {
    fn default() -> Self {
        Self { bits: 8, e_bits: 8, a_bits: 8, post_training: false }
    }
}

impl DirectQConfig {
    /// Uniform bit-width, one group per tensor.
    pub fn quant_config(&self, model: &Transformer, range_policy: RangePolicy) -> QuantConfig {
        QuantConfig {
            allocation: BitAllocation::uniform(&model.cfg.layer_names(), self.bits, self.e_bits, self.a_bits),
            groups: Grouping::Layerwise,
            embedding_groups: Grouping::Layerwise,
            range_policy,
        }
    }
}

/// Uniform, layer-wise quantization of a trained baseline, fine-tuned on
/// the same budget as [`qat_finetune`] unless `post_training` is set.
pub fn directq(
    model: &Transformer,
    baseline: &ParamSet,
    train: &Dataset,
    eval: Option<&Dataset>,
    cfg: &TrainConfig,
    dq: &DirectQConfig,
    range_policy: RangePolicy,
) -> Result<TrainOutcome> {
    let quant = dq.quant_config(model, range_policy);
    if !dq.post_training {
        return qat_finetune(model, baseline, train, eval, cfg, &quant);
    }
    let plan = QuantPlan::new(model, baseline, &quant)?;
    let size = plan.size(model, baseline)?;
    let p = plan.effective_params(baseline)?;
    let mut act = plan.activation_bits().map(ActivationQuantizer::new).transpose()?;
    if let Some(a) = act.as_mut() {
        for batch in train.batches(cfg.batch_size)? {
            model.logits(&p, &batch, cfg.compute, a)?;
        }
        a.frozen = true;
    }
    let mut metrics = Vec::new();
    for (split, data) in [(Split::Train, Some(train)), (Split::Eval, eval)] {
        let Some(d) = data else { continue };
        let mut hook: Box<dyn ActivationHook> = match &act {
            Some(a) => Box::new(a.clone()),
            None => Box::new(NoHook),
        };
        let (loss, accuracy) = model.score(&p, d, cfg.batch_size, cfg.compute, hook.as_mut())?;
        metrics.push(EpochMetrics { epoch: 0, split, loss, accuracy, size_mb: size.total_mb });
    }
    Ok(TrainOutcome { params: baseline.clone(), plan, activations: act, metrics, steps: 0, size })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::data::synth_dataset;
    use crate::model::transformer::build_model;
    use crate::model::{ModelConfig, Task};

    fn small() -> (Transformer, ParamSet, Dataset) {
        let cfg = ModelConfig { vocab: 16, max_len: 6, d_model: 8, n_heads: 2, n_layers: 1, ffn_dim: 8, ..Default::default() };
        let (m, p) = build_model(&cfg).unwrap();
        let d = synth_dataset(Task::MajorityToken, 40, &cfg, 1, Split::Train).unwrap();
        (m, p, d)
    }

    #[test]
    fn zero_lr_leaves_parameters() {
        let (m, p, d) = small();
        let cfg = TrainConfig { epochs: 2, lr: 0.0, batch_size: 8, ..Default::default() };
        let out = train_baseline(&m, &p, &d, None, &cfg).unwrap();
        assert_eq!(out.params, p);
        assert_eq!(out.steps, 10);
    }

    #[test]
    fn bypassed_quantization_matches_baseline() {
        let (m, p, d) = small();
        let cfg = TrainConfig { epochs: 2, batch_size: 8, ..Default::default() };
        let base = train_baseline(&m, &p, &d, Some(&d), &cfg).unwrap();
        let quant = QuantConfig {
            allocation: BitAllocation::uniform(&m.cfg.layer_names(), 32, 32, 32),
            groups: Grouping::PerHead,
            embedding_groups: Grouping::Layerwise,
            range_policy: RangePolicy::MinMax,
        };
        let q = qat_finetune(&m, &p, &d, Some(&d), &cfg, &quant).unwrap();
        assert!(q.plan.is_empty());
        assert_eq!(q.params, base.params);
        assert_eq!(q.metrics, base.metrics);
    }

    #[test]
    fn embedding_groups_follow_model_width() {
        let (m, p, _) = small();
        let quant = QuantConfig {
            allocation: BitAllocation::uniform(&m.cfg.layer_names(), 4, 8, 8),
            groups: Grouping::PerHead,
            embedding_groups: Grouping::Count(4),
            range_policy: RangePolicy::MinMax,
        };
        let plan = QuantPlan::new(&m, &p, &quant).unwrap();
        let counts = plan.group_counts();
        assert_eq!(counts["embed.word"], 4);
        assert_eq!(counts["layer1.attn.wq"], 2);
        assert_eq!(counts["layer1.attn.wo"], 2);
        assert_eq!(counts["layer1.ffn.w1"], 1);
        assert_eq!(counts["layer1.ln1.gamma"], 1);
        assert!(!counts.contains_key("classifier.w"));
        for (name, q) in plan.quantize(&p).unwrap() {
            let w = p.get(&name).unwrap();
            assert_eq!(q.values.dims(), w.dims());
            for (i, (a, b)) in q.values.data().iter().zip(w.data()).enumerate() {
                let delta = if q.transposed {
                    let (r, c) = (w.dims()[0], w.dims()[1]);
                    q.codes.delta_of((i % c) * r + i / c)
                } else {
                    q.codes.delta_of(i)
                };
                assert!((a - b).abs() <= delta / 2.0 + 1e-12, "{name}[{i}]");
            }
        }
    }

    #[test]
    fn unknown_layer_in_allocation_is_rejected() {
        let (m, p, _) = small();
        let mut alloc = BitAllocation::uniform(&m.cfg.layer_names(), 4, 8, 8);
        alloc.layers.push(crate::allocate::LayerBits { name: "layer9".into(), bits: 4 });
        let quant = QuantConfig { allocation: alloc, groups: Grouping::Layerwise, embedding_groups: Grouping::Layerwise, range_policy: RangePolicy::MinMax };
        assert!(matches!(QuantPlan::new(&m, &p, &quant), Err(Error::UnknownName(_))));
    }

    #[test]
    fn checkpoint_round_trip_restores_effective_weights() {
        let (m, p, _) = small();
        let quant = QuantConfig {
            allocation: BitAllocation::uniform(&m.cfg.layer_names(), 3, 8, 8),
            groups: Grouping::Count(2),
            embedding_groups: Grouping::Count(2),
            range_policy: RangePolicy::MinMax,
        };
        let plan = QuantPlan::new(&m, &p, &quant).unwrap();
        let ck = plan.checkpoint(&p, None).unwrap();
        let back = Checkpoint::from_bytes(&ck.to_bytes().unwrap()).unwrap();
        let restored = params_from_checkpoint(&m, &back).unwrap();
        let eff = plan.effective_params(&p).unwrap();
        for (a, b) in restored.iter().zip(eff.iter()) {
            assert_eq!(a.name, b.name);
            for (x, y) in a.value.data().iter().zip(b.value.data()) {
                assert_eq!(*x as f32, *y as f32);
            }
        }
        // Stored bits equal the accounted size.
        let size = plan.size(&m, &p).unwrap();
        let stored: u128 = ck
            .entries
            .iter()
            .map(|(_, e)| match e {
                Entry::Codes(q) => q.codes.len() as u128 * q.bits as u128,
                Entry::F32(t) | Entry::F64(t) => t.numel() as u128 * 32,
            })
            .sum();
        assert_eq!(stored, size.total_bits);
    }

    #[test]
    fn activation_ema() {
        let mut a = ActivationQuantizer::new(8).unwrap();
        a.apply("s", &[0.0, 1.0]).unwrap();
        assert_eq!(a.ranges["s"], (0.0, 1.0));
        a.apply("s", &[-1.0, 3.0]).unwrap();
        let (lo, hi) = a.ranges["s"];
        assert!((lo + 0.1).abs() < 1e-15 && (hi - 1.2).abs() < 1e-15);
        a.frozen = true;
        a.apply("s", &[100.0]).unwrap();
        assert_eq!(a.ranges["s"], (lo, hi));
        assert!(a.apply("t", &[0.0]).is_err());
    }

    #[test]
    fn grouping_parse() {
        assert_eq!("per-head".parse::<Grouping>().unwrap(), Grouping::PerHead);
        assert_eq!("4".parse::<Grouping>().unwrap(), Grouping::Count(4));
        assert_eq!("layerwise".parse::<Grouping>().unwrap(), Grouping::Layerwise);
        assert!("0".parse::<Grouping>().is_err());
        assert_eq!(Grouping::Count(6).mode(32).unwrap(), GroupMode::Bucketed(6));
    }
}
