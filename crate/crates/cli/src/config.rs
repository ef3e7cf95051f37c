//! Experiment configuration file.
//!
//! Every field has a default, so `{}` is a valid config. Relative paths
//! resolve against the directory holding the config file.

use std::path::{Path, PathBuf};

use hessquant::hessian::PowerOptions;
use hessquant::model::{ModelConfig, Task};
use hessquant::quant::RangePolicy;
use hessquant::train::{DirectQConfig, Grouping, TrainConfig};
use hessquant::ComputeMode;
use serde::{Deserialize, Serialize};

use crate::failure::Failure;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Root seed. Model init, data, shuffling, probing and sampling all
    /// derive their streams from it; `model.seed` is replaced by it.
    pub seed: u64,
    pub task: Task,
    pub model: ModelConfig,
    pub data: DataConfig,
    pub train: StageConfig,
    pub finetune: StageConfig,
    pub probe: ProbeConfig,
    pub allocation: AllocationConfig,
    pub groups: GroupsConfig,
    pub range_policy: RangePolicy,
    pub directq: DirectQConfig,
    pub landscape: LandscapeConfig,
    pub kl: KlConfig,
    pub outputs: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            task: Task::MajorityToken,
            model: ModelConfig::default(),
            data: DataConfig::default(),
            train: StageConfig::default(),
            finetune: StageConfig { epochs: 5, batch_size: 32, lr: 0.001, ..StageConfig::default() },
            probe: ProbeConfig::default(),
            allocation: AllocationConfig::default(),
            groups: GroupsConfig::default(),
            range_policy: RangePolicy::MinMax,
            directq: DirectQConfig { bits: 2, ..DirectQConfig::default() },
            landscape: LandscapeConfig::default(),
            kl: KlConfig::default(),
            outputs: PathBuf::from("runs/default"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub train_size: usize,
    pub eval_size: usize,
    /// Optional CSV files (token ids then label per row) replacing the
    /// synthetic splits.
    pub train_csv: Option<PathBuf>,
    pub eval_csv: Option<PathBuf>,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self { train_size: 512, eval_size: 512, train_csv: None, eval_csv: None }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StageConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub compute: ComputeMode,
}

impl Default for StageConfig {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self { epochs: t.epochs, batch_size: t.batch_size, lr: t.lr, momentum: t.momentum, compute: t.compute }
    }
}

impl StageConfig {
    pub fn train_config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            lr: self.lr,
            momentum: self.momentum,
            seed,
            compute: self.compute,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProbeConfig {
    pub shard_fraction: f64,
    pub runs: usize,
    pub tol: f64,
    pub max_iters: usize,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        let p = PowerOptions::default();
        Self { shard_fraction: 0.1, runs: 10, tol: p.tol, max_iters: p.max_iters }
    }
}

impl ProbeConfig {
    pub fn options(&self) -> PowerOptions {
        PowerOptions { max_iters: self.max_iters, tol: self.tol }
    }
}

/// Encoder bit assignment. Explicit `bits` wins; otherwise the Ω ranking
/// from `probe` is cut into `bands` (one size per menu entry, highest
/// bit-width first) or, without bands, into `high_count` layers at the
/// top of the menu and the rest at the bottom.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AllocationConfig {
    pub bits: Option<Vec<u8>>,
    pub menu: Vec<u8>,
    pub bands: Option<Vec<usize>>,
    /// Defaults to half the layers, rounded down.
    pub high_count: Option<usize>,
    pub e_bits: u8,
    pub a_bits: u8,
}

impl Default for AllocationConfig {
    fn default() -> Self {
        Self { bits: None, menu: vec![2, 3], bands: None, high_count: None, e_bits: 8, a_bits: 8 }
    }
}

/// A grouping written either as a count (`4`) or as a string (`"4"`,
/// `"per-head"`, `"layerwise"`).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum GroupArg {
    Count(usize),
    Name(String),
}

impl GroupArg {
    pub fn parse(&self) -> Result<Grouping, Failure> {
        match self {
            GroupArg::Count(n) => n.to_string().parse(),
            GroupArg::Name(s) => s.parse(),
        }
        .map_err(|e: hessquant::Error| Failure::config(e.to_string()))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GroupsConfig {
    pub weights: GroupArg,
    pub embeddings: GroupArg,
}

impl Default for GroupsConfig {
    fn default() -> Self {
        Self { weights: GroupArg::Name("per-head".into()), embeddings: GroupArg::Name("layerwise".into()) }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LandscapeConfig {
    pub layer: String,
    pub extent: f64,
    pub resolution: usize,
}

impl Default for LandscapeConfig {
    fn default() -> Self {
        Self { layer: "layer1".into(), extent: 1.0, resolution: 11 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct KlConfig {
    /// Share of the training split whose attention is compared.
    pub fraction: f64,
}

impl Default for KlConfig {
    fn default() -> Self {
        Self { fraction: 0.1 }
    }
}

/// Command-line overrides of single config fields.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub groups: Option<String>,
    pub bits: Option<Vec<u8>>,
    pub compute: Option<ComputeMode>,
}

/// A parsed config together with the hash of its file bytes.
#[derive(Clone, Debug)]
pub struct Loaded {
    pub cfg: ExperimentConfig,
    pub hash: String,
    pub out_dir: PathBuf,
    base_dir: PathBuf,
}

impl Loaded {
    pub fn read(path: &Path, ov: &Overrides) -> Result<Self, Failure> {
        let bytes = std::fs::read(path).map_err(|e| Failure::io(format!("reading config {}: {e}", path.display())))?;
        let hash = crate::artifacts::sha256_hex(&bytes);
        let mut cfg: ExperimentConfig =
            serde_json::from_slice(&bytes).map_err(|e| Failure::config(format!("config {}: {e}", path.display())))?;
        if let Some(s) = ov.seed {
            cfg.seed = s;
        }
        if let Some(g) = &ov.groups {
            cfg.groups.weights = GroupArg::Name(g.clone());
        }
        if let Some(b) = &ov.bits {
            cfg.allocation.bits = Some(b.clone());
        }
        if let Some(c) = ov.compute {
            cfg.train.compute = c;
            cfg.finetune.compute = c;
        }
        cfg.model.seed = cfg.seed;
        let base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        // `--out` resolves against the working directory and leaves the
        // recorded `outputs` field untouched.
        let out_dir = match &ov.out {
            Some(o) => o.clone(),
            None => base_dir.join(&cfg.outputs),
        };
        let loaded = Self { cfg, hash, out_dir, base_dir };
        loaded.validate()?;
        Ok(loaded)
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        self.base_dir.join(p)
    }

    fn validate(&self) -> Result<(), Failure> {
        let c = &self.cfg;
        let bad = |m: String| Err(Failure::config(m));
        c.model.validate().map_err(Failure::from)?;
        for (name, s) in [("train", &c.train), ("finetune", &c.finetune)] {
            s.train_config(c.seed).validate().map_err(|e| Failure::config(format!("{name}: {e}")))?;
        }
        if c.data.train_csv.is_none() && c.data.train_size == 0 || c.data.eval_csv.is_none() && c.data.eval_size == 0 {
            return bad("data sizes must be positive".into());
        }
        for p in [&c.data.train_csv, &c.data.eval_csv].into_iter().flatten() {
            if !self.resolve(p).is_file() {
                return bad(format!("data file {} does not exist", self.resolve(p).display()));
            }
        }
        let p = &c.probe;
        if !(p.shard_fraction > 0.0 && p.shard_fraction <= 1.0) || p.runs == 0 || p.max_iters == 0 || p.tol.is_nan() || p.tol <= 0.0 {
            return bad("probe needs shard_fraction in (0, 1], runs ≥ 1, max_iters ≥ 1 and tol > 0".into());
        }
        if !(c.kl.fraction > 0.0 && c.kl.fraction <= 1.0) {
            return bad(format!("kl.fraction {} outside (0, 1]", c.kl.fraction));
        }
        if let Some(b) = &c.allocation.bits {
            if b.len() != c.model.n_layers {
                return bad(format!("allocation.bits has {} entries for {} layers", b.len(), c.model.n_layers));
            }
        }
        if !c.model.layer_names().contains(&c.landscape.layer) {
            return bad(format!("landscape.layer `{}` is not an encoder layer", c.landscape.layer));
        }
        if c.landscape.resolution.is_multiple_of(2) {
            return bad(format!("landscape.resolution {} must be odd", c.landscape.resolution));
        }
        self.cfg.groups.weights.parse()?;
        self.cfg.groups.embeddings.parse()?;
        Ok(())
    }
}
