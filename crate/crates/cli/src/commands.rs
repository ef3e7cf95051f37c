use hessquant::allocate::{allocate_bands, allocate_bits, reverse_allocation, AllocationDoc, BitAllocation, SizeReport};
use hessquant::analysis::{
    attention_kl, emit_report, read_table, reference_size_table, write_landscape, write_table, AccuracyRow,
    AllocationRow, KlReport, KlRow, ProbeRow, ReportTables, SensitivityRow, Side, SizeRow, KL_FLOOR,
};
use hessquant::checkpoint::{Checkpoint, DType};
use hessquant::hessian::{
    eig_distribution, landscape_grid, power_iteration, power_iteration_deflated, LayerSensitivity, SensitivityReport,
};
use hessquant::model::data::{synth_dataset, Split};
use hessquant::model::transformer::{build_model, ActivationHook, DatasetLoss, NoHook};
use hessquant::model::{Dataset, Transformer};
use hessquant::train::{
    activations_from_checkpoint, directq, params_from_checkpoint, qat_finetune, train_baseline, ActivationQuantizer,
    DirectQConfig, QuantConfig, QuantPlan, TrainOutcome, ACTIVATION_EMA_DECAY,
};
use hessquant::{derive_seed, ComputeMode, ParamSet};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::artifacts::Artifacts;
use crate::config::{ExperimentConfig, Loaded};
use crate::failure::Failure;

// Seed streams derived from the root seed.
const STREAM_TRAIN_DATA: u64 = 1;
const STREAM_EVAL_DATA: u64 = 2;
const STREAM_PROBE: u64 = 3;
const STREAM_KL: u64 = 4;
const STREAM_LANDSCAPE: u64 = 5;
const STREAM_BASELINE: u64 = 6;
const STREAM_FINETUNE: u64 = 7;

pub const BASELINE_CKPT: &str = "baseline.qbtc";
pub const ALLOCATION: &str = "allocation.json";
pub const ALLOCATION_REVERSED: &str = "allocation_reversed.json";

/// Summary written next to a quantized checkpoint.
#[derive(Debug, Serialize, Deserialize)]
struct QuantSummary {
    run: String,
    steps: usize,
    a_bits: u8,
    allocation: BitAllocation,
    group_counts: std::collections::BTreeMap<String, usize>,
    size: SizeReport,
}

pub struct Session {
    pub cfg: ExperimentConfig,
    loaded: Loaded,
    pub art: Artifacts,
    model: Transformer,
    init: ParamSet,
}

impl Session {
    pub fn open(loaded: Loaded) -> Result<Self, Failure> {
        let art = Artifacts::create(loaded.out_dir.clone(), loaded.hash.clone(), loaded.cfg.seed)?;
        let (model, init) = build_model(&loaded.cfg.model)?;
        Ok(Self { cfg: loaded.cfg.clone(), loaded, art, model, init })
    }

    fn seed(&self, stream: u64) -> u64 {
        derive_seed(self.cfg.seed, stream)
    }

    fn split(&self, split: Split) -> Result<Dataset, Failure> {
        let (csv, size, stream) = match split {
            Split::Train => (&self.cfg.data.train_csv, self.cfg.data.train_size, STREAM_TRAIN_DATA),
            Split::Eval => (&self.cfg.data.eval_csv, self.cfg.data.eval_size, STREAM_EVAL_DATA),
        };
        let data = match csv {
            Some(p) => Dataset::read_csv(&self.loaded.resolve(p), split)?,
            None => synth_dataset(self.cfg.task, size, &self.cfg.model, self.seed(stream), split)?,
        };
        data.check(&self.cfg.model)?;
        Ok(data)
    }

    fn load_params(&self, name: &str, producer: &str) -> Result<(ParamSet, Checkpoint), Failure> {
        let ck = Checkpoint::read(&self.art.require(name, producer)?)?;
        Ok((params_from_checkpoint(&self.model, &ck)?, ck))
    }

    fn baseline(&self) -> Result<ParamSet, Failure> {
        self.load_params(BASELINE_CKPT, "train").map(|r| r.0)
    }

    fn quant_config(&self, allocation: BitAllocation) -> Result<QuantConfig, Failure> {
        Ok(QuantConfig {
            allocation,
            groups: self.cfg.groups.weights.parse()?,
            embedding_groups: self.cfg.groups.embeddings.parse()?,
            range_policy: self.cfg.range_policy,
        })
    }

    fn size_of(&self, qc: &QuantConfig) -> Result<SizeReport, Failure> {
        Ok(QuantPlan::new(&self.model, &self.init, qc)?.size(&self.model, &self.init)?)
    }

    pub fn train(&self) -> Result<(), Failure> {
        let (train, eval) = (self.split(Split::Train)?, self.split(Split::Eval)?);
        let tc = self.cfg.train.train_config(self.seed(STREAM_BASELINE));
        let out = train_baseline(&self.model, &self.init, &train, Some(&eval), &tc)?;
        Checkpoint::from_params(&out.params, DType::F64)?.write(&self.art.path(BASELINE_CKPT))?;
        self.art.write_jsonl("train_metrics.jsonl", &out.metrics)?;
        self.art.write_json(
            "train.json",
            &json!({ "run": "baseline", "steps": out.steps, "param_count": self.cfg.model.param_count(), "size": out.size }),
        )
    }

    pub fn probe(&self) -> Result<(), Failure> {
        let params = self.baseline()?;
        let train = self.split(Split::Train)?;
        let p = &self.cfg.probe;
        let mut layers = Vec::new();
        for (i, layer) in self.cfg.model.layer_names().iter().enumerate() {
            let samples = eig_distribution(
                &params,
                &train,
                layer,
                p.shard_fraction,
                p.runs,
                p.options(),
                derive_seed(self.seed(STREAM_PROBE), i as u64),
                |d| DatasetLoss::new(&self.model, d),
            )?;
            layers.push(LayerSensitivity::from_samples(layer.clone(), samples)?);
        }
        let report = SensitivityReport { task: self.cfg.task.name().to_string(), layers };
        write_table(&self.art.path("probe_runs.csv"), &ProbeRow::from_report(&report))?;
        write_table(&self.art.path("sensitivity.csv"), &SensitivityRow::from_report(&report))?;
        self.art.write_json("probe.json", &report)
    }

    fn allocation(&self) -> Result<(BitAllocation, &'static str), Failure> {
        let a = &self.cfg.allocation;
        let names = self.cfg.model.layer_names();
        let (mut alloc, source) = match &a.bits {
            Some(bits) => (BitAllocation::from_bits(&names, bits, a.e_bits, a.a_bits)?, "explicit"),
            None => {
                let rows: Vec<SensitivityRow> = read_table(&self.art.require("sensitivity.csv", "probe")?)?;
                let omegas = names
                    .iter()
                    .map(|n| {
                        rows.iter()
                            .find(|r| &r.layer == n)
                            .map(|r| (n.clone(), r.omega))
                            .ok_or_else(|| Failure::io(format!("sensitivity.csv has no row for `{n}`")))
                    })
                    .collect::<Result<Vec<_>, _>>()?;
                let alloc = match &a.bands {
                    Some(bands) => allocate_bands(&omegas, &a.menu, bands)?,
                    None => allocate_bits(&omegas, &a.menu, a.high_count.unwrap_or(names.len() / 2))?,
                };
                (alloc, "sensitivity")
            }
        };
        alloc.e_bits.word = a.e_bits;
        alloc.e_bits.position = a.e_bits;
        alloc.a_bits = a.a_bits;
        Ok((alloc, source))
    }

    pub fn allocate(&self, reverse: bool) -> Result<(), Failure> {
        let (mut alloc, source) = self.allocation()?;
        if reverse {
            alloc = reverse_allocation(&alloc)?;
        }
        let qc = self.quant_config(alloc.clone())?;
        let plan = QuantPlan::new(&self.model, &self.init, &qc)?;
        let doc = AllocationDoc::new(&alloc, &plan.shapes(&self.model, &self.init)?)?;
        let mut v = self.art.stamp(&doc)?;
        v["source"] = json!(source);
        v["reversed"] = json!(reverse);
        v["group_counts"] = json!(plan.group_counts());
        let name = if reverse { ALLOCATION_REVERSED } else { ALLOCATION };
        hessquant::analysis::write_json(&self.art.path(name), &v)?;
        Ok(())
    }

    fn finetune_config(&self) -> hessquant::train::TrainConfig {
        self.cfg.finetune.train_config(self.seed(STREAM_FINETUNE))
    }

    fn save_quantized(&self, run: &str, out: &TrainOutcome, a_bits: u8) -> Result<(), Failure> {
        out.checkpoint()?.write(&self.art.path(&format!("{run}.qbtc")))?;
        self.art.write_jsonl(&format!("{run}_metrics.jsonl"), &out.metrics)?;
        let summary = QuantSummary {
            run: run.to_string(),
            steps: out.steps,
            a_bits,
            allocation: out.plan.allocation.clone().expect("quantized run has an allocation"),
            group_counts: out.plan.group_counts(),
            size: out.size,
        };
        self.art.write_json(&format!("{run}.json"), &summary)
    }

    pub fn qat(&self) -> Result<(), Failure> {
        let base = self.baseline()?;
        let doc: AllocationDoc = self.art.read_json(ALLOCATION, "allocate")?;
        let (train, eval) = (self.split(Split::Train)?, self.split(Split::Eval)?);
        let qc = self.quant_config(doc.allocation())?;
        let out = qat_finetune(&self.model, &base, &train, Some(&eval), &self.finetune_config(), &qc)?;
        self.save_quantized("qat", &out, doc.a_bits)
    }

    pub fn directq(&self, bits: Option<u8>) -> Result<(), Failure> {
        let base = self.baseline()?;
        let dq = DirectQConfig { bits: bits.unwrap_or(self.cfg.directq.bits), ..self.cfg.directq };
        let (train, eval) = (self.split(Split::Train)?, self.split(Split::Eval)?);
        let out = directq(&self.model, &base, &train, Some(&eval), &self.finetune_config(), &dq, self.cfg.range_policy)?;
        self.save_quantized("directq", &out, dq.a_bits)
    }

    /// Parameters and activation quantizer of a saved quantized run, if
    /// its checkpoint exists.
    fn quantized_run(&self, run: &str) -> Result<Option<(ParamSet, Option<ActivationQuantizer>, QuantSummary)>, Failure> {
        let name = format!("{run}.qbtc");
        if !self.art.path(&name).is_file() {
            return Ok(None);
        }
        let summary: QuantSummary = self.art.read_json(&format!("{run}.json"), run)?;
        let (params, ck) = self.load_params(&name, run)?;
        let act = activations_from_checkpoint(&ck, summary.a_bits)?;
        Ok(Some((params, act, summary)))
    }

    pub fn evaluate(&self) -> Result<(), Failure> {
        let base = self.baseline()?;
        let splits = [self.split(Split::Train)?, self.split(Split::Eval)?];
        let (bs, mode) = (self.cfg.train.batch_size, self.cfg.train.compute);
        let fp32 = QuantPlan::none().size(&self.model, &self.init)?;
        let mut runs: Vec<(String, ParamSet, Option<ActivationQuantizer>, f64)> =
            vec![("baseline".into(), base, None, fp32.total_mb)];
        for run in ["qat", "directq"] {
            if let Some((p, act, s)) = self.quantized_run(run)? {
                runs.push((run.into(), p, act, s.size.total_mb));
            }
        }
        let mut rows = Vec::new();
        for (run, params, act, size_mb) in &runs {
            for data in &splits {
                let mut hook: Box<dyn ActivationHook> = match act {
                    Some(a) => Box::new(a.clone()),
                    None => Box::new(NoHook),
                };
                let accuracy = self.model.evaluate(params, data, bs, mode, hook.as_mut())?;
                let split = match data.split {
                    Split::Train => "train",
                    Split::Eval => "eval",
                };
                rows.push(AccuracyRow { run: run.clone(), seed: self.cfg.seed, split: split.into(), accuracy, size_mb: *size_mb });
            }
        }
        write_table(&self.art.path("accuracy.csv"), &rows)?;
        self.art.write_json("evaluation.json", &json!({ "rows": rows }))
    }

    pub fn landscape(&self) -> Result<(), Failure> {
        let base = self.baseline()?;
        let layer = &self.cfg.landscape.layer;
        let shard = self.split(Split::Train)?.shard(self.cfg.probe.shard_fraction, self.seed(STREAM_LANDSCAPE))?;
        let obj = DatasetLoss::new(&self.model, &shard)?;
        let opts = self.cfg.probe.options();
        let seed = self.seed(STREAM_LANDSCAPE);
        let v1 = power_iteration(&obj, &base, layer, opts, seed)?;
        let v2 = power_iteration_deflated(&obj, &base, layer, opts, derive_seed(seed, 1), std::slice::from_ref(&v1))?;
        let l = &self.cfg.landscape;
        let grid = landscape_grid(&obj, &base, layer, &v1.eigvec, &v2.eigvec, l.extent, l.resolution, ComputeMode::F64)?;
        let (csv, js) = (format!("landscape_{layer}.csv"), format!("landscape_{layer}.json"));
        write_landscape(&grid, &self.art.path(&csv), &self.art.path(&js))?;
        let mut header: serde_json::Value = self.art.read_json(&js, "landscape")?;
        header["lambda1"] = json!(v1.lambda);
        header["lambda2"] = json!(v2.lambda);
        header["direction_overlap"] = json!(v1.eigvec.iter().zip(&v2.eigvec).map(|(a, b)| a * b).sum::<f64>().abs());
        header["shard_size"] = json!(shard.len());
        self.art.write_json(&js, &header)
    }

    pub fn kl(&self) -> Result<(), Failure> {
        let base = self.baseline()?;
        let train = self.split(Split::Train)?;
        let mut rows = Vec::new();
        let mut summary = serde_json::Map::new();
        for run in ["qat", "directq"] {
            let Some((params, mut act, _)) = self.quantized_run(run)? else { continue };
            let report: KlReport = attention_kl(
                &self.model,
                Side { params: &params, hook: act.as_mut().map(|a| a as &mut dyn ActivationHook) },
                Side { params: &base, hook: None },
                &train,
                self.cfg.kl.fraction,
                self.seed(STREAM_KL),
                self.cfg.train.batch_size,
            )?;
            rows.extend(KlRow::from_report(run, self.cfg.seed, &report));
            summary.insert(run.into(), json!({ "mean": report.mean(), "per_layer": report.per_layer }));
        }
        if summary.is_empty() {
            return Err(Failure::io("no quantized checkpoint found; run `qat` or `directq` first"));
        }
        write_table(&self.art.path("kl.csv"), &rows)?;
        self.art.write_json("kl.json", &json!({ "direction": "KL(quantized || baseline)", "runs": summary }))
    }

    fn table_or_empty<R: hessquant::analysis::Table>(&self, name: &str) -> Result<Vec<R>, Failure> {
        let p = self.art.path(name);
        if p.is_file() {
            Ok(read_table(&p)?)
        } else {
            Ok(Vec::new())
        }
    }

    pub fn report(&self) -> Result<(), Failure> {
        let mut allocations = Vec::new();
        let mut sizes: Vec<SizeRow> = reference_size_table()?;
        let toy = format!("toy-{}x{}", self.cfg.model.n_layers, self.cfg.model.d_model);
        let size_row = |setting: &str, s: SizeReport| SizeRow {
            model: toy.clone(),
            setting: setting.into(),
            total_mb: s.total_mb,
            no_embedding_mb: s.no_embedding_mb,
            metadata_mb: s.metadata_mb,
            compression: s.compression_ratio(),
        };
        sizes.push(size_row("fp32", QuantPlan::none().size(&self.model, &self.init)?));
        for (file, setting) in [(ALLOCATION, "mixed"), (ALLOCATION_REVERSED, "mixed-reversed")] {
            if !self.art.path(file).is_file() {
                continue;
            }
            let doc: AllocationDoc = self.art.read_json(file, "allocate")?;
            let alloc = doc.allocation();
            allocations.extend(alloc.layers.iter().map(|l| AllocationRow { setting: setting.into(), layer: l.name.clone(), bits: l.bits }));
            allocations.push(AllocationRow { setting: setting.into(), layer: "embed.word".into(), bits: alloc.e_bits.word });
            allocations.push(AllocationRow { setting: setting.into(), layer: "embed.position".into(), bits: alloc.e_bits.position });
            allocations.push(AllocationRow { setting: setting.into(), layer: "activations".into(), bits: alloc.a_bits });
            sizes.push(size_row(setting, self.size_of(&self.quant_config(alloc)?)?));
        }
        let dq = self.cfg.directq;
        sizes.push(size_row(&format!("directq-w{}", dq.bits), self.size_of(&dq.quant_config(&self.model, self.cfg.range_policy))?));
        let tables = ReportTables {
            probe_runs: self.table_or_empty("probe_runs.csv")?,
            sensitivity: self.table_or_empty("sensitivity.csv")?,
            allocations,
            sizes,
            accuracy: self.table_or_empty("accuracy.csv")?,
            kl: self.table_or_empty("kl.csv")?,
        };
        let metadata = self.art.stamp(&json!({
            "config": self.cfg,
            "task": self.cfg.task.name(),
            "flags": {
                "attention_scale": self.cfg.model.attention_scale,
                "pooling": "first_token",
                "norm_placement": "post_norm",
                "ste": "clipped",
                "rounding": "half_to_even",
                "optimizer": "sgd_momentum",
                "weight_requantization": "every_step",
                "activation_range": { "tracking": "ema_min_max", "decay": ACTIVATION_EMA_DECAY },
                "directq_mode": if dq.post_training { "post_training" } else { "finetune" },
                "range_policy": self.cfg.range_policy,
                "probe_precision": "f64",
                "kl": { "direction": "KL(quantized || baseline)", "log": "natural", "floor": KL_FLOOR },
                "size_units": "MiB",
            },
        }))?;
        emit_report(&tables, &metadata, &self.art.dir)?;
        Ok(())
    }

    pub fn pipeline(&self) -> Result<(), Failure> {
        self.train()?;
        self.probe()?;
        self.allocate(false)?;
        self.allocate(true)?;
        self.qat()?;
        self.directq(None)?;
        self.evaluate()?;
        self.landscape()?;
        self.kl()?;
        self.report()
    }
}

