//! Group-wise quantization: each group of consecutive output-neuron rows
//! gets its own quantization range.
//!
//! A weight tensor is viewed as `[out_neurons, row_len]`. For attention
//! projections stored per head (`[n_heads, rows_per_head, cols]`) the
//! leading two axes flatten into the output-neuron axis, so "per head"
//! means one group per head matrix.

use std::ops::Range;

use serde::{Deserialize, Serialize};

use super::{decode, encode, select_range, QuantRange, QuantSpec};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "mode", content = "bucket_size")]
pub enum GroupMode {
    Layerwise,
    PerHead,
    /// Consecutive runs of `bucket_size` output neurons; the last bucket
    /// may be shorter.
    Bucketed(usize),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupSpec {
    pub mode: GroupMode,
    pub n_heads: usize,
    pub out_neurons: usize,
    /// Disjoint, exhaustive row ranges in ascending order.
    pub groups: Vec<Range<usize>>,
}

impl GroupSpec {
    pub fn len(&self) -> usize {
        self.groups.len()
    }

    pub fn is_empty(&self) -> bool {
        self.groups.is_empty()
    }

    /// Group index owning `row`.
    pub fn group_of_row(&self, row: usize) -> Option<usize> {
        self.groups.iter().position(|g| g.contains(&row))
    }
}

pub fn build_group_spec(out_neurons: usize, n_heads: usize, mode: GroupMode) -> Result<GroupSpec> {
    if out_neurons == 0 || n_heads == 0 {
        return Err(Error::invalid("out_neurons and n_heads must be positive"));
    }
    let groups = match mode {
        GroupMode::Layerwise => std::iter::once(0..out_neurons).collect(),
        GroupMode::PerHead | GroupMode::Bucketed(_) if !out_neurons.is_multiple_of(n_heads) => {
            return Err(Error::invalid(format!("{out_neurons} output neurons do not split into {n_heads} heads")));
        }
        GroupMode::PerHead => {
            let per = out_neurons / n_heads;
            (0..n_heads).map(|h| h * per..(h + 1) * per).collect()
        }
        GroupMode::Bucketed(0) => return Err(Error::invalid("bucket size must be positive")),
        GroupMode::Bucketed(size) => (0..out_neurons)
            .step_by(size)
            .map(|start| start..(start + size).min(out_neurons))
            .collect(),
    };
    Ok(GroupSpec { mode, n_heads, out_neurons, groups })
}

#[derive(Clone, Debug, PartialEq)]
pub struct GroupQuantizedTensor {
    pub dims: Vec<usize>,
    pub codes: Vec<u16>,
    pub ranges: Vec<QuantRange>,
    pub spec: GroupSpec,
    pub bits: u8,
}

impl GroupQuantizedTensor {
    pub fn row_len(&self) -> usize {
        self.codes.len() / self.spec.out_neurons
    }

    /// Grid spacing that applies to flat element `i`.
    pub fn delta_of(&self, i: usize) -> f64 {
        let row = i / self.row_len();
        self.ranges[self.spec.group_of_row(row).expect("spec covers every row")].delta
    }

    pub fn dequantize(&self) -> Tensor<f64> {
        let row_len = self.row_len();
        let mut data = Vec::with_capacity(self.codes.len());
        for (g, range) in self.spec.groups.iter().zip(&self.ranges) {
            for &c in &self.codes[g.start * row_len..g.end * row_len] {
                data.push(decode(c, range));
            }
        }
        Tensor::new(self.dims.clone(), data).expect("codes match dims")
    }

    /// Straight-through mask for the original values `x`.
    pub fn pass_mask(&self, x: &Tensor<f64>) -> Vec<bool> {
        let row_len = self.row_len();
        let mut mask = Vec::with_capacity(x.numel());
        for (g, range) in self.spec.groups.iter().zip(&self.ranges) {
            for &v in &x.data()[g.start * row_len..g.end * row_len] {
                mask.push(range.contains(v));
            }
        }
        mask
    }
}

pub fn groupwise_quantize(x: &Tensor<f64>, spec: &GroupSpec, qspec: &QuantSpec) -> Result<GroupQuantizedTensor> {
    let n = x.numel();
    let leading_rows: Vec<usize> = std::iter::once(1)
        .chain(x.dims().iter().scan(1, |acc, &d| {
            *acc *= d;
            Some(*acc)
        }))
        .collect();
    if !leading_rows.contains(&spec.out_neurons) {
        return Err(Error::shape(
            "groupwise_quantize",
            format!("tensor {:?} does not have {} output-neuron rows", x.dims(), spec.out_neurons),
        ));
    }
    if !x.all_finite() {
        return Err(Error::NonFinite("groupwise_quantize input".into()));
    }
    let row_len = n / spec.out_neurons;
    let mut codes = Vec::with_capacity(n);
    let mut ranges = Vec::with_capacity(spec.groups.len());
    for g in &spec.groups {
        let slice = &x.data()[g.start * row_len..g.end * row_len];
        let range = select_range(slice, qspec)?;
        codes.extend(slice.iter().map(|&v| encode(v, &range, qspec.bits)));
        ranges.push(range);
    }
    Ok(GroupQuantizedTensor { dims: x.dims().to_vec(), codes, ranges, spec: spec.clone(), bits: qspec.bits })
}
