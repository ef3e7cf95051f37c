//! Bit-width assignment from layer sensitivities, and model-size accounting.
//!
//! Sizes are reported in MiB (2²⁰ bytes). The headline size counts weight
//! code bits only; the per-group `(q0, Δ)` pairs, two 32-bit floats per
//! group, are reported separately as metadata.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MIB: f64 = 1024.0 * 1024.0;
pub const FULL_PRECISION_BITS: u8 = 32;
/// Bits stored per quantization group: `q0` and `Δ` as 32-bit floats.
pub const METADATA_BITS_PER_GROUP: u64 = 64;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Category {
    EmbeddingWord,
    EmbeddingPosition,
    Encoder,
    Output,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerShape {
    pub name: String,
    pub params: u64,
    pub category: Category,
    /// Quantization groups in this layer (for the metadata line).
    #[serde(default = "one")]
    pub groups: u64,
}

fn one() -> u64 {
    1
}

impl LayerShape {
    pub fn new(name: impl Into<String>, params: u64, category: Category) -> Self {
        Self { name: name.into(), params, category, groups: 1 }
    }

    pub fn with_groups(mut self, groups: u64) -> Self {
        self.groups = groups;
        self
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EmbeddingBits {
    pub word: u8,
    pub position: u8,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerBits {
    pub name: String,
    pub bits: u8,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BitAllocation {
    /// Encoder layers in model order.
    pub layers: Vec<LayerBits>,
    pub e_bits: EmbeddingBits,
    pub a_bits: u8,
}

impl BitAllocation {
    pub fn uniform(names: &[String], bits: u8, e_bits: u8, a_bits: u8) -> Self {
        Self {
            layers: names.iter().map(|n| LayerBits { name: n.clone(), bits }).collect(),
            e_bits: EmbeddingBits { word: e_bits, position: e_bits },
            a_bits,
        }
    }

    pub fn from_bits(names: &[String], bits: &[u8], e_bits: u8, a_bits: u8) -> Result<Self> {
        if names.len() != bits.len() {
            return Err(Error::invalid(format!("{} layers but {} bit-widths", names.len(), bits.len())));
        }
        Ok(Self {
            layers: names.iter().zip(bits).map(|(n, &b)| LayerBits { name: n.clone(), bits: b }).collect(),
            e_bits: EmbeddingBits { word: e_bits, position: e_bits },
            a_bits,
        })
    }

    pub fn bits_of(&self, layer: &str) -> Option<u8> {
        self.layers.iter().find(|l| l.name == layer).map(|l| l.bits)
    }

    pub fn bit_list(&self) -> Vec<u8> {
        self.layers.iter().map(|l| l.bits).collect()
    }

    /// Distinct encoder bit-widths, ascending.
    pub fn levels(&self) -> Vec<u8> {
        let mut v = self.bit_list();
        v.sort_unstable();
        v.dedup();
        v
    }
}

/// Two-level assignment: the `high_count` layers with the largest Ω get
/// the highest bit-width of `menu`, the rest the lowest.
pub fn allocate_bits(omegas: &[(String, f64)], menu: &[u8], high_count: usize) -> Result<BitAllocation> {
    let n = omegas.len();
    if high_count > n {
        return Err(Error::invalid(format!("high_count {high_count} exceeds {n} layers")));
    }
    let menu = sorted_menu(menu)?;
    let two = [*menu.first().unwrap(), *menu.last().unwrap()];
    allocate_bands(omegas, &two, &[high_count, n - high_count])
}

/// Rank bands: layers sorted by Ω descending (ties by position in
/// `omegas`) are cut into contiguous bands of `bands[0]`, `bands[1]`, …
/// layers, which receive the menu's bit-widths from highest to lowest.
pub fn allocate_bands(omegas: &[(String, f64)], menu: &[u8], bands: &[usize]) -> Result<BitAllocation> {
    let menu = sorted_menu(menu)?;
    if bands.len() != menu.len() {
        return Err(Error::invalid(format!("{} bands for a {}-level menu", bands.len(), menu.len())));
    }
    if bands.iter().sum::<usize>() != omegas.len() {
        return Err(Error::invalid(format!("band sizes {bands:?} do not sum to {} layers", omegas.len())));
    }
    if let Some((name, _)) = omegas.iter().find(|(_, o)| !o.is_finite()) {
        return Err(Error::NonFinite(format!("Ω of `{name}`")));
    }
    let mut order: Vec<usize> = (0..omegas.len()).collect();
    order.sort_by(|&a, &b| omegas[b].1.total_cmp(&omegas[a].1));
    let mut bits = vec![0u8; omegas.len()];
    let mut rank = 0;
    for (band, &size) in bands.iter().enumerate() {
        let level = menu[menu.len() - 1 - band];
        for &i in &order[rank..rank + size] {
            bits[i] = level;
        }
        rank += size;
    }
    let names: Vec<String> = omegas.iter().map(|(n, _)| n.clone()).collect();
    BitAllocation::from_bits(&names, &bits, 8, 8)
}

fn sorted_menu(menu: &[u8]) -> Result<Vec<u8>> {
    let mut m = menu.to_vec();
    m.sort_unstable();
    m.dedup();
    if m.len() < 2 || m.len() != menu.len() {
        return Err(Error::invalid(format!("bit menu {menu:?} needs at least two distinct entries")));
    }
    if m[0] == 0 || *m.last().unwrap() > FULL_PRECISION_BITS {
        return Err(Error::invalid(format!("bit menu {menu:?} outside 1..=32")));
    }
    Ok(m)
}

/// Reverses the sensitivity order of a two-level allocation while keeping
/// the number of layers at each level, so the model size is unchanged.
///
/// The allocation's implied ranking (high-bit layers first, ties by
/// ascending position) is inverted and the high level goes to as many
/// layers as before, taken from the bottom of the original ranking. When
/// the two levels hold equally many layers this swaps every layer's bits.
/// Embeddings and activations are kept.
pub fn reverse_allocation(alloc: &BitAllocation) -> Result<BitAllocation> {
    let levels = alloc.levels();
    if levels.len() > 2 {
        return Err(Error::invalid(format!("cannot reverse {} bit levels {levels:?}", levels.len())));
    }
    let mut out = alloc.clone();
    let [lo, hi] = levels[..] else { return Ok(out) };
    let n = alloc.layers.len();
    let high = alloc.layers.iter().filter(|l| l.bits == hi).count();
    let at = |level: u8| (0..n).rev().filter(move |&i| alloc.layers[i].bits == level);
    for (rank, i) in at(lo).chain(at(hi)).enumerate() {
        out.layers[i].bits = if rank < high { hi } else { lo };
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SizeReport {
    pub total_bits: u128,
    pub no_embedding_bits: u128,
    pub metadata_bits: u128,
    pub fp32_bits: u128,
    pub total_mb: f64,
    pub no_embedding_mb: f64,
    pub metadata_mb: f64,
}

impl SizeReport {
    pub fn compression_ratio(&self) -> f64 {
        self.fp32_bits as f64 / self.total_bits as f64
    }
}

fn bits_to_mb(bits: u128) -> f64 {
    bits as f64 / 8.0 / MIB
}

/// Code-bit size of a model under `alloc`. Every encoder layer in
/// `shapes` needs an entry in `alloc` and vice versa; output layers are
/// kept at 32 bits.
pub fn model_size(alloc: &BitAllocation, shapes: &[LayerShape]) -> Result<SizeReport> {
    let mut by_name: BTreeMap<&str, u8> = BTreeMap::new();
    for l in &alloc.layers {
        if by_name.insert(&l.name, l.bits).is_some() {
            return Err(Error::invalid(format!("layer `{}` allocated twice", l.name)));
        }
    }
    let encoders: Vec<&str> = shapes.iter().filter(|s| s.category == Category::Encoder).map(|s| s.name.as_str()).collect();
    if let Some(missing) = by_name.keys().find(|n| !encoders.contains(n)) {
        return Err(Error::UnknownName(format!("{missing} (no shape)")));
    }
    if shapes.iter().filter(|s| s.category == Category::Output).count() != 1 {
        return Err(Error::invalid("exactly one output layer is required"));
    }
    let (mut total, mut no_emb, mut meta, mut fp32) = (0u128, 0u128, 0u128, 0u128);
    for s in shapes {
        let bits = match s.category {
            Category::EmbeddingWord => alloc.e_bits.word,
            Category::EmbeddingPosition => alloc.e_bits.position,
            Category::Output => FULL_PRECISION_BITS,
            Category::Encoder => *by_name.get(s.name.as_str()).ok_or_else(|| Error::UnknownName(format!("{} (no bits)", s.name)))?,
        };
        let b = s.params as u128 * bits as u128;
        total += b;
        fp32 += s.params as u128 * FULL_PRECISION_BITS as u128;
        if matches!(s.category, Category::Encoder | Category::Output) {
            no_emb += b;
        }
        if bits < FULL_PRECISION_BITS {
            meta += s.groups as u128 * METADATA_BITS_PER_GROUP as u128;
        }
    }
    Ok(SizeReport {
        total_bits: total,
        no_embedding_bits: no_emb,
        metadata_bits: meta,
        fp32_bits: fp32,
        total_mb: bits_to_mb(total),
        no_embedding_mb: bits_to_mb(no_emb),
        metadata_mb: bits_to_mb(meta),
    })
}

/// Serialized allocation with its sizes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AllocationDoc {
    pub layers: Vec<LayerBits>,
    pub e_bits: EmbeddingBits,
    pub a_bits: u8,
    pub sizes: SizesMb,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SizesMb {
    pub total_mb: f64,
    pub no_embedding_mb: f64,
    pub metadata_mb: f64,
}

impl AllocationDoc {
    pub fn new(alloc: &BitAllocation, shapes: &[LayerShape]) -> Result<Self> {
        let s = model_size(alloc, shapes)?;
        Ok(Self {
            layers: alloc.layers.clone(),
            e_bits: alloc.e_bits,
            a_bits: alloc.a_bits,
            sizes: SizesMb { total_mb: s.total_mb, no_embedding_mb: s.no_embedding_mb, metadata_mb: s.metadata_mb },
        })
    }

    pub fn allocation(&self) -> BitAllocation {
        BitAllocation { layers: self.layers.clone(), e_bits: self.e_bits, a_bits: self.a_bits }
    }
}

/// Reference shapes of a 12-layer, 768-wide encoder: 23.8M embedding
/// parameters (23.44M word, 0.36M position), 7.1M per encoder layer and a
/// 0.01M output layer.
pub fn bert_base_shapes() -> Vec<LayerShape> {
    let mut v = vec![
        LayerShape::new("embed.word", 23_440_000, Category::EmbeddingWord),
        LayerShape::new("embed.position", 360_000, Category::EmbeddingPosition),
    ];
    v.extend((1..=12).map(|i| LayerShape::new(format!("layer{i}"), 7_100_000, Category::Encoder)));
    v.push(LayerShape::new("classifier", 10_000, Category::Output));
    v
}

pub fn bert_base_layer_names() -> Vec<String> {
    (1..=12).map(|i| format!("layer{i}")).collect()
}

/// Published per-layer bit settings (layers 1–12) for two-level
/// mixed-precision runs. `setting` is `"2/3"` or `"2/4"`; `task` one of
/// `sst2`, `mnli`, `conll`, `squad`.
pub fn published_bits(task: &str, setting: &str) -> Option<[u8; 12]> {
    Some(match (setting, task) {
        ("2/3", "sst2") | ("2/3", "squad") => [2, 2, 2, 3, 3, 3, 3, 3, 3, 2, 2, 2],
        ("2/3", "mnli") => [2, 2, 2, 2, 3, 3, 3, 3, 2, 2, 2, 2],
        ("2/3", "conll") => [2, 3, 3, 3, 3, 2, 2, 2, 2, 2, 2, 2],
        ("2/4", "sst2") => [2, 2, 4, 4, 4, 2, 4, 4, 4, 2, 2, 2],
        ("2/4", "mnli") | ("2/4", "conll") | ("2/4", "squad") => [2, 2, 2, 4, 4, 4, 4, 4, 2, 2, 2, 2],
        _ => return None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn om(v: &[f64]) -> Vec<(String, f64)> {
        v.iter().enumerate().map(|(i, &o)| (format!("L{}", i + 1), o)).collect()
    }

    #[test]
    fn two_level_example() {
        let a = allocate_bits(&om(&[5.0, 4.0, 1.0, 0.5]), &[2, 3], 2).unwrap();
        assert_eq!(a.bit_list(), vec![3, 3, 2, 2]);
        let a = allocate_bits(&om(&[5.0, 4.0, 1.0, 0.5]), &[2, 3], 0).unwrap();
        assert_eq!(a.bit_list(), vec![2; 4]);
    }

    #[test]
    fn ties_go_to_earlier_layers() {
        let a = allocate_bits(&om(&[1.0, 2.0, 2.0, 2.0]), &[2, 4], 2).unwrap();
        assert_eq!(a.bit_list(), vec![2, 4, 4, 2]);
    }

    #[test]
    fn three_level_bands() {
        let a = allocate_bands(&om(&[0.1, 9.0, 3.0, 4.0, 0.2]), &[2, 3, 4], &[1, 2, 2]).unwrap();
        assert_eq!(a.bit_list(), vec![2, 4, 3, 3, 2]);
        assert!(allocate_bands(&om(&[1.0, 2.0]), &[2, 3], &[1, 2]).is_err());
        assert!(allocate_bands(&om(&[1.0, 2.0]), &[2], &[2]).is_err());
    }

    #[test]
    fn reverse_swaps_levels() {
        let names = vec!["L1".to_string(), "L2".to_string()];
        let a = BitAllocation::from_bits(&names, &[3, 2], 8, 8).unwrap();
        assert_eq!(reverse_allocation(&a).unwrap().bit_list(), vec![2, 3]);
        let u = BitAllocation::uniform(&names, 4, 8, 8);
        assert_eq!(reverse_allocation(&u).unwrap(), u);
        let three = BitAllocation::from_bits(&["a".into(), "b".into(), "c".into()], &[2, 3, 4], 8, 8).unwrap();
        assert!(reverse_allocation(&three).is_err());
    }

    #[test]
    fn reverse_of_published_sst2_setting() {
        let bits = published_bits("sst2", "2/3").unwrap();
        let a = BitAllocation::from_bits(&bert_base_layer_names(), &bits, 8, 8).unwrap();
        let r = reverse_allocation(&a).unwrap().bit_list();
        let expected: Vec<u8> = (1..=12).map(|i| if (4..=9).contains(&i) { 2 } else { 3 }).collect();
        assert_eq!(r, expected);
    }

    #[test]
    fn unbalanced_reverse_keeps_level_counts() {
        let names: Vec<String> = (1..=4).map(|i| format!("L{i}")).collect();
        let a = BitAllocation::from_bits(&names, &[3, 2, 2, 2], 8, 8).unwrap();
        assert_eq!(reverse_allocation(&a).unwrap().bit_list(), vec![2, 2, 2, 3]);
        let b = BitAllocation::from_bits(&names, &[3, 3, 3, 2], 8, 8).unwrap();
        assert_eq!(reverse_allocation(&b).unwrap().bit_list(), vec![2, 3, 3, 3]);
    }

    #[test]
    fn encoder_only_sizes() {
        let shapes = bert_base_shapes();
        let names = bert_base_layer_names();
        let s8 = model_size(&BitAllocation::uniform(&names, 8, 8, 8), &shapes).unwrap();
        assert!((s8.no_embedding_mb - 81.2).abs() / 81.2 < 0.02);
        let s4 = model_size(&BitAllocation::uniform(&names, 4, 8, 8), &shapes).unwrap();
        assert!((s4.no_embedding_mb - 40.6).abs() / 40.6 < 0.02);
        let s32 = model_size(&BitAllocation::uniform(&names, 32, 32, 32), &shapes).unwrap();
        assert_eq!(s32.total_bits, s32.fp32_bits);
        assert_eq!(s32.compression_ratio(), 1.0);
    }

    #[test]
    fn size_errors() {
        let shapes = bert_base_shapes();
        let mut names = bert_base_layer_names();
        names.push("layer13".into());
        assert!(model_size(&BitAllocation::uniform(&names, 8, 8, 8), &shapes).is_err());
        names.truncate(11);
        assert!(model_size(&BitAllocation::uniform(&names, 8, 8, 8), &shapes).is_err());
    }

    #[test]
    fn json_round_trip() {
        let names = bert_base_layer_names();
        let a = BitAllocation::from_bits(&names, &published_bits("sst2", "2/3").unwrap(), 8, 8).unwrap();
        let doc = AllocationDoc::new(&a, &bert_base_shapes()).unwrap();
        let s = serde_json::to_string(&doc).unwrap();
        let back: AllocationDoc = serde_json::from_str(&s).unwrap();
        assert_eq!(back, doc);
        assert_eq!(back.allocation(), a);
        let v: serde_json::Value = serde_json::from_str(&s).unwrap();
        assert!(v["sizes"]["total_mb"].is_number());
        assert_eq!(v["layers"][3]["bits"], 3);
        assert_eq!(v["e_bits"]["word"], 8);
    }
}
