//! Attention-distribution KL between two parameterizations of one model,
//! and the CSV/JSON tables a run produces.

use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::allocate::{bert_base_layer_names, bert_base_shapes, model_size, published_bits, BitAllocation};
use crate::error::{Error, Result};
use crate::hessian::{LandscapeGrid, SensitivityReport};
use crate::model::transformer::{ActivationHook, NoHook};
use crate::model::{Dataset, Transformer};
use crate::params::ParamSet;

/// Probabilities are floored here before taking logs.
pub const KL_FLOOR: f64 = 1e-12;

/// `KL(p‖q) = Σ p_i (ln p̃_i − ln q̃_i)` with `p̃ = max(p, floor)`.
pub fn kl(p: &[f64], q: &[f64]) -> f64 {
    p.iter()
        .zip(q)
        .map(|(&a, &b)| {
            let (fa, fb) = (a.max(KL_FLOOR), b.max(KL_FLOOR));
            a * (fa.ln() - fb.ln())
        })
        .sum()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KlReport {
    /// `per_head[l][h]`: mean KL of head `h` in layer `l + 1`.
    pub per_head: Vec<Vec<f64>>,
    pub per_layer: Vec<f64>,
}

impl KlReport {
    pub fn mean(&self) -> f64 {
        let all: Vec<f64> = self.per_head.iter().flatten().copied().collect();
        all.iter().sum::<f64>() / all.len().max(1) as f64
    }
}

/// One side of the comparison: effective parameters plus the activation
/// hook they run with.
pub struct Side<'a> {
    pub params: &'a ParamSet,
    pub hook: Option<&'a mut dyn ActivationHook>,
}

/// Mean `KL(p_a‖p_b)` of attention rows per layer and head, over every
/// query position of a `fraction` shard of `data`.
pub fn attention_kl(
    model: &Transformer,
    a: Side<'_>,
    b: Side<'_>,
    data: &Dataset,
    fraction: f64,
    seed: u64,
    batch_size: usize,
) -> Result<KlReport> {
    let same = a.params.len() == b.params.len()
        && a.params.iter().zip(b.params.iter()).all(|(x, y)| x.name == y.name && x.value.dims() == y.value.dims());
    if !same {
        return Err(Error::invalid("attention_kl needs two parameter sets of the same architecture"));
    }
    let shard = data.shard(fraction, seed)?;
    let (layers, heads) = (model.cfg.n_layers, model.cfg.n_heads);
    let mut sums = vec![vec![0.0; heads]; layers];
    let mut rows = 0usize;
    let mut no_a = NoHook;
    let mut no_b = NoHook;
    let hook_a: &mut dyn ActivationHook = match a.hook {
        Some(h) => h,
        None => &mut no_a,
    };
    let hook_b: &mut dyn ActivationHook = match b.hook {
        Some(h) => h,
        None => &mut no_b,
    };
    for batch in shard.batches(batch_size)? {
        let ta = model.attention(a.params, &batch, hook_a)?;
        let tb = model.attention(b.params, &batch, hook_b)?;
        let n = batch.seq_len;
        for l in 0..layers {
            for h in 0..heads {
                for (pa, pb) in ta[l][h].data().chunks(n).zip(tb[l][h].data().chunks(n)) {
                    sums[l][h] += kl(pa, pb);
                }
            }
        }
        rows += batch.batch * n;
    }
    let per_head: Vec<Vec<f64>> = sums.iter().map(|l| l.iter().map(|s| s / rows as f64).collect()).collect();
    let per_layer = per_head.iter().map(|l| l.iter().sum::<f64>() / heads as f64).collect();
    Ok(KlReport { per_head, per_layer })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeRow {
    pub task: String,
    pub layer: String,
    pub run: usize,
    pub lambda: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SensitivityRow {
    pub task: String,
    pub layer: String,
    pub mean: f64,
    pub std: f64,
    pub omega: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AllocationRow {
    pub setting: String,
    pub layer: String,
    pub bits: u8,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SizeRow {
    pub model: String,
    pub setting: String,
    pub total_mb: f64,
    pub no_embedding_mb: f64,
    pub metadata_mb: f64,
    pub compression: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AccuracyRow {
    pub run: String,
    pub seed: u64,
    pub split: String,
    pub accuracy: f64,
    pub size_mb: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KlRow {
    pub run: String,
    pub seed: u64,
    pub layer: String,
    /// Head index, or `mean` for the layer average.
    pub head: String,
    pub kl: f64,
}

impl KlRow {
    pub fn from_report(run: &str, seed: u64, r: &KlReport) -> Vec<Self> {
        let mut out = Vec::new();
        for (l, heads) in r.per_head.iter().enumerate() {
            let layer = format!("layer{}", l + 1);
            for (h, &v) in heads.iter().enumerate() {
                out.push(KlRow { run: run.into(), seed, layer: layer.clone(), head: h.to_string(), kl: v });
            }
            out.push(KlRow { run: run.into(), seed, layer, head: "mean".into(), kl: r.per_layer[l] });
        }
        out
    }
}

impl ProbeRow {
    pub fn from_report(r: &SensitivityReport) -> Vec<Self> {
        r.layers
            .iter()
            .flat_map(|l| {
                l.samples.iter().enumerate().map(move |(run, &lambda)| ProbeRow { task: r.task.clone(), layer: l.layer.clone(), run, lambda })
            })
            .collect()
    }
}

impl SensitivityRow {
    pub fn from_report(r: &SensitivityReport) -> Vec<Self> {
        r.layers
            .iter()
            .map(|l| SensitivityRow { task: r.task.clone(), layer: l.layer.clone(), mean: l.mean, std: l.std, omega: l.omega })
            .collect()
    }
}

/// Column names of a row type, taken from its serialized field order.
pub trait Table: Serialize + DeserializeOwned {
    const HEADERS: &'static [&'static str];
}

impl Table for ProbeRow {
    const HEADERS: &'static [&'static str] = &["task", "layer", "run", "lambda"];
}
impl Table for SensitivityRow {
    const HEADERS: &'static [&'static str] = &["task", "layer", "mean", "std", "omega"];
}
impl Table for AllocationRow {
    const HEADERS: &'static [&'static str] = &["setting", "layer", "bits"];
}
impl Table for SizeRow {
    const HEADERS: &'static [&'static str] = &["model", "setting", "total_mb", "no_embedding_mb", "metadata_mb", "compression"];
}
impl Table for AccuracyRow {
    const HEADERS: &'static [&'static str] = &["run", "seed", "split", "accuracy", "size_mb"];
}
impl Table for KlRow {
    const HEADERS: &'static [&'static str] = &["run", "seed", "layer", "head", "kl"];
}

/// Writes a header line and one record per row. An empty slice yields a
/// header-only file.
pub fn write_table<R: Table>(path: &Path, rows: &[R]) -> Result<()> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_path(path)?;
    w.write_record(R::HEADERS)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_table<R: Table>(path: &Path) -> Result<Vec<R>> {
    let mut rdr = csv::Reader::from_path(path)?;
    let headers = rdr.headers()?.clone();
    if !headers.iter().eq(R::HEADERS.iter().copied()) {
        return Err(Error::Format(format!("{}: unexpected columns {:?}", path.display(), headers)));
    }
    rdr.deserialize().map(|r| r.map_err(Error::from)).collect()
}

/// Everything `emit_report` writes.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ReportTables {
    pub probe_runs: Vec<ProbeRow>,
    pub sensitivity: Vec<SensitivityRow>,
    pub allocations: Vec<AllocationRow>,
    pub sizes: Vec<SizeRow>,
    pub accuracy: Vec<AccuracyRow>,
    pub kl: Vec<KlRow>,
}

pub const REPORT_FILES: [&str; 6] = ["probe_runs.csv", "sensitivity.csv", "allocations.csv", "sizes.csv", "accuracy.csv", "kl.csv"];

/// Writes every table plus `metadata.json` into `out_dir`, overwriting
/// earlier output.
pub fn emit_report(tables: &ReportTables, metadata: &serde_json::Value, out_dir: &Path) -> Result<()> {
    fs::create_dir_all(out_dir)?;
    write_table(&out_dir.join(REPORT_FILES[0]), &tables.probe_runs)?;
    write_table(&out_dir.join(REPORT_FILES[1]), &tables.sensitivity)?;
    write_table(&out_dir.join(REPORT_FILES[2]), &tables.allocations)?;
    write_table(&out_dir.join(REPORT_FILES[3]), &tables.sizes)?;
    write_table(&out_dir.join(REPORT_FILES[4]), &tables.accuracy)?;
    write_table(&out_dir.join(REPORT_FILES[5]), &tables.kl)?;
    write_json(&out_dir.join("metadata.json"), metadata)
}

pub fn read_report(out_dir: &Path) -> Result<ReportTables> {
    Ok(ReportTables {
        probe_runs: read_table(&out_dir.join(REPORT_FILES[0]))?,
        sensitivity: read_table(&out_dir.join(REPORT_FILES[1]))?,
        allocations: read_table(&out_dir.join(REPORT_FILES[2]))?,
        sizes: read_table(&out_dir.join(REPORT_FILES[3]))?,
        accuracy: read_table(&out_dir.join(REPORT_FILES[4]))?,
        kl: read_table(&out_dir.join(REPORT_FILES[5]))?,
    })
}

/// Pretty JSON with a trailing newline.
pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    fs::write(path, s)?;
    Ok(())
}

/// Loss grid as a headerless CSV matrix (rows: first direction, columns:
/// second) plus a JSON description.
pub fn write_landscape(grid: &LandscapeGrid, csv_path: &Path, json_path: &Path) -> Result<()> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_path(csv_path)?;
    for row in &grid.losses {
        w.write_record(row.iter().map(|v| v.to_string()))?;
    }
    w.flush()?;
    let header = serde_json::json!({
        "layer": grid.layer,
        "extent": grid.extent,
        "resolution": grid.resolution,
        "center_loss": grid.center(),
        "coords": grid.coords,
    });
    write_json(json_path, &header)
}

/// Size rows for the reference 12-layer encoder at the uniform and
/// published mixed-precision settings, all with 8-bit embeddings.
pub fn reference_size_table() -> Result<Vec<SizeRow>> {
    let shapes = bert_base_shapes();
    let names = bert_base_layer_names();
    let mut settings: Vec<(String, BitAllocation)> = vec![("fp32".into(), BitAllocation::uniform(&names, 32, 32, 32))];
    for bits in [8u8, 4, 3, 2] {
        settings.push((format!("w{bits}e8"), BitAllocation::uniform(&names, bits, 8, 8)));
    }
    for setting in ["2/3", "2/4"] {
        for task in ["sst2", "mnli", "conll", "squad"] {
            let bits = published_bits(task, setting).expect("published setting");
            settings.push((format!("{setting}-mp-{task}"), BitAllocation::from_bits(&names, &bits, 8, 8)?));
        }
    }
    settings
        .into_iter()
        .map(|(setting, a)| {
            let s = model_size(&a, &shapes)?;
            Ok(SizeRow {
                model: "reference-12x768".into(),
                setting,
                total_mb: s.total_mb,
                no_embedding_mb: s.no_embedding_mb,
                metadata_mb: s.metadata_mb,
                compression: s.compression_ratio(),
            })
        })
        .collect()
}
