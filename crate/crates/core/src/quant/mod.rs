//! Uniform affine quantization.
//!
//! A tensor is clamped to `[q0, q_max]`, mapped to integer codes
//! `round((x' - q0) / Δ)` in `0..=2^k-1` with `Δ = (q_max - q0) / (2^k - 1)`,
//! and decoded as `Δ·code + q0`. Rounding is half-to-even. Gradients pass
//! straight through inside the range and are zeroed where clamping was
//! active.

pub mod group;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAX_BITS: u8 = 16;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RangePolicy {
    MinMax,
    /// Keep the central fraction `p` of the sorted values.
    Percentile(f64),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuantSpec {
    pub bits: u8,
    pub range_policy: RangePolicy,
}

impl QuantSpec {
    pub fn new(bits: u8, range_policy: RangePolicy) -> Result<Self> {
        check_bits(bits)?;
        if let RangePolicy::Percentile(p) = range_policy {
            if !(p > 0.0 && p <= 1.0) {
                return Err(Error::invalid(format!("percentile {p} outside (0, 1]")));
            }
        }
        Ok(Self { bits, range_policy })
    }

    pub fn minmax(bits: u8) -> Result<Self> {
        Self::new(bits, RangePolicy::MinMax)
    }
}

fn check_bits(bits: u8) -> Result<()> {
    if !(1..=MAX_BITS).contains(&bits) {
        return Err(Error::invalid(format!("bit-width {bits} outside [1, {MAX_BITS}]")));
    }
    Ok(())
}

/// `[q0, q_max]` together with the grid spacing for a given bit-width.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuantRange {
    pub q0: f64,
    pub q_max: f64,
    pub delta: f64,
}

impl QuantRange {
    pub fn new(q0: f64, q_max: f64, bits: u8) -> Result<Self> {
        check_bits(bits)?;
        if !q0.is_finite() || !q_max.is_finite() {
            return Err(Error::invalid(format!("non-finite range [{q0}, {q_max}]")));
        }
        if q_max < q0 {
            return Err(Error::invalid(format!("q_max {q_max} below q0 {q0}")));
        }
        let delta = if q_max > q0 { (q_max - q0) / max_code(bits) as f64 } else { 0.0 };
        Ok(Self { q0, q_max, delta })
    }

    pub fn contains(&self, x: f64) -> bool {
        self.q0 <= x && x <= self.q_max
    }
}

pub fn max_code(bits: u8) -> u32 {
    (1u32 << bits) - 1
}

/// Integer codes plus the range they decode against.
#[derive(Clone, Debug, PartialEq)]
pub struct QuantizedTensor {
    pub dims: Vec<usize>,
    pub codes: Vec<u16>,
    pub range: QuantRange,
    pub bits: u8,
}

fn round_half_up(x: f64) -> usize {
    (x + 0.5).floor() as usize
}

/// Picks `[q0, q_max]` for `values` under `spec`.
pub fn select_range(values: &[f64], spec: &QuantSpec) -> Result<QuantRange> {
    if values.is_empty() {
        return Err(Error::invalid("cannot select a range for an empty tensor"));
    }
    if values.iter().any(|v| v.is_nan()) {
        return Err(Error::invalid("NaN in tensor"));
    }
    let (lo, hi) = match spec.range_policy {
        RangePolicy::MinMax => values.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
            (lo.min(v), hi.max(v))
        }),
        RangePolicy::Percentile(p) => {
            let mut sorted = values.to_vec();
            sorted.sort_by(f64::total_cmp);
            let last = (sorted.len() - 1) as f64;
            let trim = (1.0 - p) / 2.0;
            let lo_i = round_half_up(trim * last);
            let hi_i = round_half_up((1.0 - trim) * last).max(lo_i);
            (sorted[lo_i], sorted[hi_i])
        }
    };
    QuantRange::new(lo, hi, spec.bits)
}

#[inline]
pub(crate) fn encode(x: f64, range: &QuantRange, bits: u8) -> u16 {
    if range.delta == 0.0 {
        return 0;
    }
    let clamped = x.clamp(range.q0, range.q_max);
    let code = ((clamped - range.q0) / range.delta).round_ties_even();
    code.min(max_code(bits) as f64) as u16
}

#[inline]
pub(crate) fn decode(code: u16, range: &QuantRange) -> f64 {
    range.delta * code as f64 + range.q0
}

pub fn quantize_forward(x: &Tensor<f64>, range: &QuantRange, bits: u8) -> Result<QuantizedTensor> {
    let range = QuantRange::new(range.q0, range.q_max, bits)?;
    if !x.all_finite() {
        return Err(Error::NonFinite("quantize_forward input".into()));
    }
    let codes = x.data().iter().map(|&v| encode(v, &range, bits)).collect();
    Ok(QuantizedTensor { dims: x.dims().to_vec(), codes, range, bits })
}

pub fn dequantize(q: &QuantizedTensor) -> Tensor<f64> {
    let data = q.codes.iter().map(|&c| decode(c, &q.range)).collect();
    Tensor::new(q.dims.clone(), data).expect("quantized tensor dims match its codes")
}

/// Quantize-dequantize in one pass. Returns the reconstructed values and
/// the straight-through mask (`true` where the input was inside the range).
pub fn fake_quantize(values: &[f64], range: &QuantRange, bits: u8) -> (Vec<f64>, Vec<bool>) {
    let recon = values.iter().map(|&v| decode(encode(v, range, bits), range)).collect();
    let pass = values.iter().map(|&v| range.contains(v)).collect();
    (recon, pass)
}

/// Clipped straight-through gradient: `upstream` where `q0 <= x <= q_max`,
/// zero elsewhere.
pub fn ste_backward(upstream: &Tensor<f64>, x: &Tensor<f64>, range: &QuantRange) -> Result<Tensor<f64>> {
    if upstream.dims() != x.dims() {
        return Err(Error::shape("ste_backward", format!("{:?} vs {:?}", upstream.dims(), x.dims())));
    }
    let data = upstream
        .data()
        .iter()
        .zip(x.data())
        .map(|(&g, &v)| if range.contains(v) { g } else { 0.0 })
        .collect();
    Tensor::new(x.dims().to_vec(), data)
}

/// `dequantize(a) · dequantize(b)` evaluated from integer code products.
///
/// With `a = Δa·A + qa` and `b = Δb·B + qb`, each output element is
/// `ΔaΔb·Σ A·B + Δa·qb·Σ A + qa·Δb·Σ B + K·qa·qb`; every sum is exact
/// integer arithmetic and only the final affine expansion is floating point.
pub fn integer_matmul_sim(a: &QuantizedTensor, b: &QuantizedTensor) -> Result<Tensor<f64>> {
    integer_matmul_with_accumulator(a, b, 64)
}

/// [`integer_matmul_sim`] with a signed accumulator of `acc_bits` bits
/// (2..=64). Any partial sum leaving that range is reported as overflow.
pub fn integer_matmul_with_accumulator(a: &QuantizedTensor, b: &QuantizedTensor, acc_bits: u32) -> Result<Tensor<f64>> {
    if !(2..=64).contains(&acc_bits) {
        return Err(Error::invalid(format!("accumulator width {acc_bits} outside [2, 64]")));
    }
    let limit: i64 = if acc_bits == 64 { i64::MAX } else { (1i64 << (acc_bits - 1)) - 1 };
    let (m, k) = match a.dims.as_slice() {
        [m, k] => (*m, *k),
        d => return Err(Error::shape("integer_matmul", format!("lhs dims {d:?}"))),
    };
    let (kb, n) = match b.dims.as_slice() {
        [r, c] => (*r, *c),
        d => return Err(Error::shape("integer_matmul", format!("rhs dims {d:?}"))),
    };
    if k != kb {
        return Err(Error::shape("integer_matmul", format!("{:?} x {:?}", a.dims, b.dims)));
    }
    let row_sums: Vec<i64> = (0..m)
        .map(|i| a.codes[i * k..(i + 1) * k].iter().map(|&c| c as i64).sum())
        .collect();
    let col_sums: Vec<i64> = (0..n).map(|j| (0..k).map(|p| b.codes[p * n + j] as i64).sum()).collect();

    let (da, qa, db, qb) = (a.range.delta, a.range.q0, b.range.delta, b.range.q0);
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            let mut acc: i64 = 0;
            for p in 0..k {
                let prod = (a.codes[i * k + p] as i64) * (b.codes[p * n + j] as i64);
                acc = acc.checked_add(prod).filter(|&v| v <= limit).ok_or(Error::Overflow("integer_matmul"))?;
            }
            out[i * n + j] = da * db * acc as f64
                + da * qb * row_sums[i] as f64
                + qa * db * col_sums[j] as f64
                + k as f64 * qa * qb;
        }
    }
    Tensor::new(vec![m, n], out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(data: &[f64]) -> Tensor<f64> {
        Tensor::new(vec![data.len()], data.to_vec()).unwrap()
    }

    #[test]
    fn minmax_range() {
        let r = select_range(&[-2.0, 0.0, 3.0], &QuantSpec::minmax(8).unwrap()).unwrap();
        assert_eq!((r.q0, r.q_max), (-2.0, 3.0));
    }

    #[test]
    fn percentile_range_by_rank() {
        let v: Vec<f64> = (0..10).map(|i| i as f64).collect();
        let spec = QuantSpec::new(8, RangePolicy::Percentile(0.8)).unwrap();
        let r = select_range(&v, &spec).unwrap();
        assert_eq!((r.q0, r.q_max), (1.0, 8.0));
        let full = select_range(&v, &QuantSpec::new(8, RangePolicy::Percentile(1.0)).unwrap()).unwrap();
        assert_eq!((full.q0, full.q_max), (0.0, 9.0));
    }

    #[test]
    fn constant_tensor_is_degenerate() {
        let r = select_range(&[5.0, 5.0, 5.0], &QuantSpec::minmax(4).unwrap()).unwrap();
        assert_eq!((r.q0, r.q_max, r.delta), (5.0, 5.0, 0.0));
        let q = quantize_forward(&t(&[5.0, 5.0, 5.0]), &r, 4).unwrap();
        assert_eq!(q.codes, vec![0, 0, 0]);
        assert_eq!(dequantize(&q).data(), &[5.0, 5.0, 5.0]);
    }

    #[test]
    fn range_errors() {
        assert!(select_range(&[], &QuantSpec::minmax(2).unwrap()).is_err());
        assert!(select_range(&[1.0, f64::NAN], &QuantSpec::minmax(2).unwrap()).is_err());
        assert!(QuantRange::new(1.0, 0.0, 2).is_err());
        assert!(QuantSpec::minmax(0).is_err());
        assert!(QuantSpec::minmax(17).is_err());
        assert!(QuantSpec::new(4, RangePolicy::Percentile(0.0)).is_err());
        assert!(QuantSpec::new(4, RangePolicy::Percentile(1.5)).is_err());
    }

    #[test]
    fn two_bit_hand_example() {
        let r = QuantRange::new(0.0, 1.0, 2).unwrap();
        let q = quantize_forward(&t(&[-1.0, 0.25, 0.9, 2.0]), &r, 2).unwrap();
        assert_eq!(q.codes, vec![0, 1, 3, 3]);
        assert_eq!(dequantize(&q).data(), &[0.0, 1.0 / 3.0, 1.0, 1.0]);
    }

    #[test]
    fn dequantize_examples() {
        let r = QuantRange::new(0.0, 1.0, 2).unwrap();
        let q = QuantizedTensor { dims: vec![2], codes: vec![0, 3], range: r, bits: 2 };
        assert_eq!(dequantize(&q).data(), &[0.0, 1.0]);
        let q = QuantizedTensor { dims: vec![1], codes: vec![1], range: r, bits: 2 };
        assert_eq!(dequantize(&q).data(), &[1.0 / 3.0]);
        let r = QuantRange::new(-2.0, 2.0, 3).unwrap();
        let q = QuantizedTensor { dims: vec![3], codes: vec![0, 0, 0], range: r, bits: 3 };
        assert_eq!(dequantize(&q).data(), &[-2.0, -2.0, -2.0]);
    }

    #[test]
    fn grid_points_are_fixed() {
        let r = QuantRange::new(-1.0, 2.0, 3).unwrap();
        let grid: Vec<f64> = (0..8).map(|j| decode(j, &r)).collect();
        let q = quantize_forward(&t(&grid), &r, 3).unwrap();
        assert_eq!(dequantize(&q).data(), grid.as_slice());
    }

    #[test]
    fn ties_round_to_even() {
        // (x - 0) / 1 = 0.5 and 1.5 with Δ = 1 at k = 2 over [0, 3]
        let r = QuantRange::new(0.0, 3.0, 2).unwrap();
        let q = quantize_forward(&t(&[0.5, 1.5, 2.5]), &r, 2).unwrap();
        assert_eq!(q.codes, vec![0, 2, 2]);
    }

    #[test]
    fn clipped_ste() {
        let r = QuantRange::new(0.0, 1.0, 2).unwrap();
        let g = ste_backward(&t(&[1.0, 1.0, 1.0]), &t(&[-2.0, 0.5, 2.0]), &r).unwrap();
        assert_eq!(g.data(), &[0.0, 1.0, 0.0]);
        let g = ste_backward(&t(&[0.3, -0.2]), &t(&[0.0, 1.0]), &r).unwrap();
        assert_eq!(g.data(), &[0.3, -0.2]);
        let g = ste_backward(&t(&[0.0, 0.0]), &t(&[0.1, 5.0]), &r).unwrap();
        assert_eq!(g.data(), &[0.0, 0.0]);
        assert!(ste_backward(&t(&[0.0]), &t(&[0.1, 5.0]), &r).is_err());
    }

    #[test]
    fn integer_matmul_small_cases() {
        let unit = QuantRange { q0: 0.0, q_max: 3.0, delta: 1.0 };
        let a = QuantizedTensor { dims: vec![1, 1], codes: vec![2], range: unit, bits: 2 };
        let b = QuantizedTensor { dims: vec![1, 1], codes: vec![3], range: unit, bits: 2 };
        assert_eq!(integer_matmul_sim(&a, &b).unwrap().data(), &[6.0]);

        let zero = QuantizedTensor { dims: vec![2, 2], codes: vec![0; 4], range: unit, bits: 2 };
        let other = QuantizedTensor { dims: vec![2, 3], codes: vec![1, 2, 3, 0, 1, 2], range: unit, bits: 2 };
        assert!(integer_matmul_sim(&zero, &other).unwrap().data().iter().all(|&v| v == 0.0));
        assert!(integer_matmul_sim(&other, &zero).is_err());
    }

    #[test]
    fn narrow_accumulator_overflow_is_reported() {
        let r = QuantRange::new(0.0, 255.0, 8).unwrap();
        let a = QuantizedTensor { dims: vec![1, 2], codes: vec![255, 255], range: r, bits: 8 };
        let b = QuantizedTensor { dims: vec![2, 1], codes: vec![255, 255], range: r, bits: 8 };
        assert!(matches!(integer_matmul_with_accumulator(&a, &b, 16), Err(Error::Overflow(_))));
        assert!(integer_matmul_with_accumulator(&a, &b, 32).is_ok());
    }
}
