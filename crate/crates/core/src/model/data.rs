//! Synthetic sequence-classification tasks and CSV ingestion.
//!
//! Every synthetic sequence starts with token 0 (the pooled position),
//! followed by `max_len − 1` content tokens drawn from `1..vocab`. The label
//! is drawn first with probability ½ and the content is then resampled
//! until the task rule agrees with it.
//!
//! * `majority_token`: each content token is 3 with probability ¼, 4 with
//!   probability ¼, otherwise uniform over the remaining ids. Label 1 iff
//!   token 3 occurs strictly more often than token 4.
//! * `contains_pattern`: uniform content. Label 1 iff the bigram `5 6`
//!   occurs somewhere in the content.
//! * `sorted_order`: uniform content, sorted ascending for label 1. Label 1
//!   iff the content is non-decreasing.

use std::path::Path;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::transformer::{Batch, ModelConfig};

/// Token id that every synthetic sequence starts with.
pub const CLS: usize = 0;
const MAX_REJECTIONS: usize = 100_000;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    MajorityToken,
    ContainsPattern,
    SortedOrder,
}

impl Task {
    pub fn name(self) -> &'static str {
        match self {
            Task::MajorityToken => "majority_token",
            Task::ContainsPattern => "contains_pattern",
            Task::SortedOrder => "sorted_order",
        }
    }

    /// Label assigned by the task rule to a full sequence (pooled token
    /// included).
    pub fn label(self, seq: &[usize]) -> usize {
        let content = &seq[1.min(seq.len())..];
        let hit = match self {
            Task::MajorityToken => {
                content.iter().filter(|&&t| t == 3).count() > content.iter().filter(|&&t| t == 4).count()
            }
            Task::ContainsPattern => content.windows(2).any(|w| w == [5, 6]),
            Task::SortedOrder => content.windows(2).all(|w| w[0] <= w[1]),
        };
        usize::from(hit)
    }
}

impl std::str::FromStr for Task {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "majority_token" => Ok(Task::MajorityToken),
            "contains_pattern" => Ok(Task::ContainsPattern),
            "sorted_order" => Ok(Task::SortedOrder),
            other => Err(Error::invalid(format!("unknown task `{other}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Eval,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub sequences: Vec<Vec<usize>>,
    pub labels: Vec<usize>,
    pub split: Split,
}

impl Dataset {
    pub fn new(sequences: Vec<Vec<usize>>, labels: Vec<usize>, split: Split) -> Result<Self> {
        if sequences.len() != labels.len() {
            return Err(Error::shape("dataset", format!("{} sequences, {} labels", sequences.len(), labels.len())));
        }
        if let Some(first) = sequences.first() {
            if first.is_empty() || sequences.iter().any(|s| s.len() != first.len()) {
                return Err(Error::invalid("all sequences must be non-empty and share one length"));
            }
        }
        Ok(Self { sequences, labels, split })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn seq_len(&self) -> usize {
        self.sequences.first().map_or(0, Vec::len)
    }

    /// Checks token ids, lengths and labels against a model.
    pub fn check(&self, cfg: &ModelConfig) -> Result<()> {
        if self.seq_len() > cfg.max_len {
            return Err(Error::invalid(format!("sequence length {} exceeds max_len {}", self.seq_len(), cfg.max_len)));
        }
        if self.sequences.iter().flatten().any(|&t| t >= cfg.vocab) {
            return Err(Error::invalid(format!("token id outside vocab {}", cfg.vocab)));
        }
        if self.labels.iter().any(|&l| l >= cfg.n_classes) {
            return Err(Error::invalid(format!("label outside {} classes", cfg.n_classes)));
        }
        Ok(())
    }

    pub fn subset(&self, indices: &[usize]) -> Self {
        Self {
            sequences: indices.iter().map(|&i| self.sequences[i].clone()).collect(),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            split: self.split,
        }
    }

    /// `round(fraction · len)` samples drawn without replacement, in
    /// ascending index order.
    pub fn shard(&self, fraction: f64, seed: u64) -> Result<Self> {
        if !(fraction > 0.0 && fraction <= 1.0) {
            return Err(Error::invalid(format!("shard fraction {fraction} outside (0, 1]")));
        }
        let k = (fraction * self.len() as f64).round() as usize;
        if k == 0 {
            return Err(Error::invalid(format!("a {fraction} shard of {} samples is empty", self.len())));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut idx = sample(&mut rng, self.len(), k).into_vec();
        idx.sort_unstable();
        Ok(self.subset(&idx))
    }

    /// Consecutive batches of at most `size` samples.
    pub fn batches(&self, size: usize) -> Result<Vec<Batch>> {
        self.batches_in_order(&(0..self.len()).collect::<Vec<_>>(), size)
    }

    pub fn batches_in_order(&self, order: &[usize], size: usize) -> Result<Vec<Batch>> {
        if size == 0 {
            return Err(Error::invalid("batch size must be positive"));
        }
        order
            .chunks(size)
            .map(|ix| {
                let seqs: Vec<&[usize]> = ix.iter().map(|&i| self.sequences[i].as_slice()).collect();
                let labels: Vec<usize> = ix.iter().map(|&i| self.labels[i]).collect();
                Batch::new(&seqs, &labels)
            })
            .collect()
    }

    /// Fraction of samples with label 1.
    pub fn positive_rate(&self) -> f64 {
        self.labels.iter().filter(|&&l| l == 1).count() as f64 / self.len().max(1) as f64
    }

    /// Reads one sample per row: token ids followed by the label. No header.
    pub fn read_csv(path: &Path, split: Split) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().has_headers(false).flexible(true).from_path(path)?;
        let mut sequences = Vec::new();
        let mut labels = Vec::new();
        for (line, rec) in rdr.records().enumerate() {
            let rec = rec?;
            let nums = rec
                .iter()
                .map(|f| f.trim().parse::<usize>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|e| Error::invalid(format!("{}:{}: {e}", path.display(), line + 1)))?;
            let Some((&label, tokens)) = nums.split_last() else { continue };
            if tokens.is_empty() {
                return Err(Error::invalid(format!("{}:{}: row has no tokens", path.display(), line + 1)));
            }
            sequences.push(tokens.to_vec());
            labels.push(label);
        }
        Self::new(sequences, labels, split)
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::WriterBuilder::new().has_headers(false).flexible(true).from_path(path)?;
        for (s, &l) in self.sequences.iter().zip(&self.labels) {
            w.write_record(s.iter().chain(std::iter::once(&l)).map(|v| v.to_string()))?;
        }
        w.flush()?;
        Ok(())
    }
}

/// `size` seeded samples of `task` with sequences of length `cfg.max_len`.
pub fn synth_dataset(task: Task, size: usize, cfg: &ModelConfig, seed: u64, split: Split) -> Result<Dataset> {
    if size == 0 {
        return Err(Error::invalid("dataset size must be positive"));
    }
    if cfg.vocab < 7 || cfg.max_len < 3 {
        return Err(Error::invalid("synthetic tasks need vocab ≥ 7 and max_len ≥ 3"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let content_len = cfg.max_len - 1;
    let mut sequences = Vec::with_capacity(size);
    let mut labels = Vec::with_capacity(size);
    for _ in 0..size {
        let label = usize::from(rng.gen_bool(0.5));
        let mut attempts = 0;
        let seq = loop {
            let mut seq = Vec::with_capacity(cfg.max_len);
            seq.push(CLS);
            match task {
                Task::MajorityToken => seq.extend((0..content_len).map(|_| {
                    let u: f64 = rng.gen();
                    if u < 0.25 {
                        3
                    } else if u < 0.5 {
                        4
                    } else {
                        let t = rng.gen_range(1..cfg.vocab - 2);
                        if t >= 3 { t + 2 } else { t }
                    }
                })),
                Task::ContainsPattern => {
                    seq.extend((0..content_len).map(|_| rng.gen_range(1..cfg.vocab)));
                    if label == 1 {
                        let at = rng.gen_range(1..cfg.max_len - 1);
                        seq[at] = 5;
                        seq[at + 1] = 6;
                    }
                }
                Task::SortedOrder => {
                    seq.extend((0..content_len).map(|_| rng.gen_range(1..cfg.vocab)));
                    if label == 1 {
                        seq[1..].sort_unstable();
                    }
                }
            }
            if task.label(&seq) == label {
                break seq;
            }
            attempts += 1;
            if attempts == MAX_REJECTIONS {
                return Err(Error::invalid(format!("could not sample label {label} for {}", task.name())));
            }
        };
        sequences.push(seq);
        labels.push(label);
    }
    Dataset::new(sequences, labels, split)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn majority_rule() {
        assert_eq!(Task::MajorityToken.label(&[0, 3, 3, 3, 3]), 1);
        assert_eq!(Task::MajorityToken.label(&[0, 3, 4, 1, 2]), 0);
        assert_eq!(Task::ContainsPattern.label(&[0, 1, 5, 6, 2]), 1);
        assert_eq!(Task::ContainsPattern.label(&[0, 6, 5, 1]), 0);
        assert_eq!(Task::SortedOrder.label(&[0, 1, 1, 7]), 1);
        assert_eq!(Task::SortedOrder.label(&[0, 2, 1]), 0);
    }

    #[test]
    fn labels_follow_rule_and_balance() {
        let cfg = ModelConfig::default();
        for task in [Task::MajorityToken, Task::ContainsPattern, Task::SortedOrder] {
            let d = synth_dataset(task, 10_000, &cfg, 5, Split::Train).unwrap();
            assert!(d.sequences.iter().zip(&d.labels).all(|(s, &l)| task.label(s) == l && s[0] == CLS));
            let rate = d.positive_rate();
            assert!((0.45..=0.55).contains(&rate), "{task:?}: {rate}");
            d.check(&cfg).unwrap();
        }
    }

    #[test]
    fn same_seed_same_data() {
        let cfg = ModelConfig::default();
        let a = synth_dataset(Task::SortedOrder, 50, &cfg, 9, Split::Eval).unwrap();
        let b = synth_dataset(Task::SortedOrder, 50, &cfg, 9, Split::Eval).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn csv_round_trip() {
        let cfg = ModelConfig::default();
        let d = synth_dataset(Task::ContainsPattern, 20, &cfg, 1, Split::Train).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.csv");
        d.write_csv(&path).unwrap();
        assert_eq!(Dataset::read_csv(&path, Split::Train).unwrap(), d);
    }

    #[test]
    fn ragged_csv_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.csv");
        std::fs::write(&path, "0,1,2,1\n0,1,0\n").unwrap();
        assert!(Dataset::read_csv(&path, Split::Train).is_err());
        std::fs::write(&path, "0,x,1\n").unwrap();
        assert!(Dataset::read_csv(&path, Split::Train).is_err());
    }

    #[test]
    fn shard_sizes() {
        let cfg = ModelConfig::default();
        let d = synth_dataset(Task::MajorityToken, 100, &cfg, 1, Split::Train).unwrap();
        assert_eq!(d.shard(0.1, 3).unwrap().len(), 10);
        assert_eq!(d.shard(1.0, 3).unwrap(), d);
        assert!(d.shard(0.001, 3).is_err());
        assert!(d.shard(0.0, 3).is_err());
        assert_ne!(d.shard(0.1, 3).unwrap(), d.shard(0.1, 4).unwrap());
    }
}
