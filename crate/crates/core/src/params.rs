//! Named parameter storage and the gradient maps that mirror it.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Tensor<f64>,
    pub trainable: bool,
}

/// Ordered, named parameter slots. Master copies are always `f64`; the
/// compute mode decides what precision they are cast to on the tape.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    params: Vec<Param>,
    index: BTreeMap<String, usize>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<f64>, trainable: bool) -> Result<()> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::invalid(format!("duplicate parameter `{name}`")));
        }
        self.index.insert(name.clone(), self.params.len());
        self.params.push(Param { name, value, trainable });
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param> {
        self.params.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.iter().map(|p| p.name.as_str())
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<f64>> {
        self.index
            .get(name)
            .map(|&i| &self.params[i].value)
            .ok_or_else(|| Error::UnknownName(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor<f64>> {
        match self.index.get(name) {
            Some(&i) => Ok(&mut self.params[i].value),
            None => Err(Error::UnknownName(name.to_string())),
        }
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    pub fn total_elements(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    /// Names of the parameters belonging to `group`: the parameter named
    /// exactly `group`, or every parameter under the `group.` prefix.
    pub fn group_members(&self, group: &str) -> Result<Vec<&str>> {
        let prefix = format!("{group}.");
        let names: Vec<&str> = self
            .params
            .iter()
            .filter(|p| p.name == group || p.name.starts_with(&prefix))
            .map(|p| p.name.as_str())
            .collect();
        if names.is_empty() {
            return Err(Error::UnknownName(group.to_string()));
        }
        Ok(names)
    }

    pub fn group_len(&self, group: &str) -> Result<usize> {
        let names = self.group_members(group)?;
        Ok(names.iter().map(|n| self.get(n).map(|t| t.numel()).unwrap_or(0)).sum())
    }

    /// Concatenation of a group's parameters in storage order.
    pub fn flatten_group(&self, group: &str) -> Result<Vec<f64>> {
        let mut out = Vec::new();
        for name in self.group_members(group)? {
            out.extend_from_slice(self.get(name)?.data());
        }
        Ok(out)
    }

    /// Overwrites a group's parameters from a flat vector.
    pub fn set_group(&mut self, group: &str, flat: &[f64]) -> Result<()> {
        let names: Vec<String> = self.group_members(group)?.into_iter().map(String::from).collect();
        let total: usize = names.iter().map(|n| self.get(n).map(|t| t.numel()).unwrap_or(0)).sum();
        if total != flat.len() {
            return Err(Error::shape("set_group", format!("group `{group}` has {total} elements, got {}", flat.len())));
        }
        let mut off = 0;
        for n in names {
            let t = self.get_mut(&n)?;
            let k = t.numel();
            t.data_mut().copy_from_slice(&flat[off..off + k]);
            off += k;
        }
        Ok(())
    }

    /// `self += alpha · direction` on one group.
    pub fn axpy_group(&mut self, group: &str, alpha: f64, direction: &[f64]) -> Result<()> {
        let mut flat = self.flatten_group(group)?;
        if flat.len() != direction.len() {
            return Err(Error::shape("axpy_group", format!("{} vs {}", flat.len(), direction.len())));
        }
        for (w, d) in flat.iter_mut().zip(direction) {
            *w += alpha * d;
        }
        self.set_group(group, &flat)
    }
}

/// Gradient per trainable parameter, same dims as the parameter.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct GradientSet {
    pub grads: BTreeMap<String, Tensor<f64>>,
}

impl GradientSet {
    pub fn get(&self, name: &str) -> Option<&Tensor<f64>> {
        self.grads.get(name)
    }

    pub fn flatten_group(&self, params: &ParamSet, group: &str) -> Result<Vec<f64>> {
        let mut out = Vec::new();
        for name in params.group_members(group)? {
            match self.grads.get(name) {
                Some(g) => out.extend_from_slice(g.data()),
                None => out.extend(std::iter::repeat_n(0.0, params.get(name)?.numel())),
            }
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn set() -> ParamSet {
        let mut p = ParamSet::new();
        p.insert("layer1.w", Tensor::new(vec![2], vec![1.0, 2.0]).unwrap(), true).unwrap();
        p.insert("layer1.b", Tensor::new(vec![1], vec![3.0]).unwrap(), true).unwrap();
        p.insert("layer10.w", Tensor::new(vec![1], vec![4.0]).unwrap(), true).unwrap();
        p
    }

    #[test]
    fn group_prefix_is_exact() {
        let p = set();
        assert_eq!(p.group_members("layer1").unwrap(), vec!["layer1.w", "layer1.b"]);
        assert_eq!(p.flatten_group("layer1").unwrap(), vec![1.0, 2.0, 3.0]);
        assert!(p.group_members("layer2").is_err());
    }

    #[test]
    fn set_and_axpy() {
        let mut p = set();
        p.axpy_group("layer1", 2.0, &[1.0, 1.0, 1.0]).unwrap();
        assert_eq!(p.flatten_group("layer1").unwrap(), vec![3.0, 4.0, 5.0]);
        assert!(p.set_group("layer1", &[0.0]).is_err());
        assert!(p.insert("layer1.w", Tensor::zeros(&[1]), true).is_err());
    }
}
