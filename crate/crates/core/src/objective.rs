//! Scalar objectives over a [`ParamSet`]: evaluation, gradients, and
//! block Hessian-vector products.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{GradientSet, ParamSet};
use crate::tensor::tape::{NodeId, Tape};
use crate::tensor::{Dual, Scalar, Tensor};

/// Element precision used on the tape.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ComputeMode {
    #[default]
    F32,
    F64,
}

impl std::str::FromStr for ComputeMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "f32" => Ok(ComputeMode::F32),
            "f64" => Ok(ComputeMode::F64),
            other => Err(Error::invalid(format!("unknown compute mode `{other}`"))),
        }
    }
}

/// Tape handles for every parameter.
#[derive(Clone, Debug, Default)]
pub struct ParamVars {
    ids: BTreeMap<String, NodeId>,
}

impl ParamVars {
    /// Binds `name` to a tape node, replacing any earlier binding.
    pub fn insert(&mut self, name: impl Into<String>, id: NodeId) {
        self.ids.insert(name.into(), id);
    }

    pub fn get(&self, name: &str) -> Result<NodeId> {
        self.ids.get(name).copied().ok_or_else(|| Error::UnknownName(name.to_string()))
    }
}

/// A scalar loss built on the tape from the parameters. Any data the loss
/// depends on (inputs, labels) is owned by the implementor.
pub trait Objective: Sync {
    fn loss<T: Scalar>(&self, tape: &mut Tape<T>, vars: &ParamVars) -> Result<NodeId>;
}

pub fn load_params<T: Scalar>(tape: &mut Tape<T>, params: &ParamSet) -> Result<ParamVars> {
    let mut ids = BTreeMap::new();
    for p in params.iter() {
        let v = Tensor::<T>::from_f64(&p.value);
        let id = if p.trainable { tape.leaf(v)? } else { tape.constant(v)? };
        ids.insert(p.name.clone(), id);
    }
    Ok(ParamVars { ids })
}

/// Everything the backward sweep needs.
pub struct ForwardCache<T> {
    pub tape: Tape<T>,
    pub loss: NodeId,
    pub vars: ParamVars,
    trainable: Vec<String>,
}

pub fn forward<T: Scalar, O: Objective + ?Sized>(obj: &O, params: &ParamSet) -> Result<(f64, ForwardCache<T>)> {
    let mut tape = Tape::<T>::new();
    let vars = load_params(&mut tape, params)?;
    let loss = obj.loss(&mut tape, &vars)?;
    if tape.value(loss).numel() != 1 {
        return Err(Error::shape("forward", format!("loss has dims {:?}", tape.dims(loss))));
    }
    let value = tape.value(loss).item()?.value();
    let trainable = params.iter().filter(|p| p.trainable).map(|p| p.name.clone()).collect();
    Ok((value, ForwardCache { tape, loss, vars, trainable }))
}

pub fn backward<T: Scalar>(cache: &ForwardCache<T>) -> Result<GradientSet> {
    let grads = cache.tape.backward(cache.loss)?;
    let mut out = BTreeMap::new();
    for name in &cache.trainable {
        let id = cache.vars.get(name)?;
        let g = match grads.get(id) {
            Some(g) => g.to_f64(),
            None => Tensor::zeros(cache.tape.dims(id)),
        };
        out.insert(name.clone(), g);
    }
    Ok(GradientSet { grads: out })
}

/// Loss value only, in the requested mode.
pub fn evaluate_loss<O: Objective + ?Sized>(obj: &O, params: &ParamSet, mode: ComputeMode) -> Result<f64> {
    match mode {
        ComputeMode::F32 => forward::<f32, O>(obj, params).map(|r| r.0),
        ComputeMode::F64 => forward::<f64, O>(obj, params).map(|r| r.0),
    }
}

pub fn gradient<O: Objective + ?Sized>(obj: &O, params: &ParamSet, mode: ComputeMode) -> Result<(f64, GradientSet)> {
    match mode {
        ComputeMode::F32 => {
            let (l, c) = forward::<f32, O>(obj, params)?;
            Ok((l, backward(&c)?))
        }
        ComputeMode::F64 => {
            let (l, c) = forward::<f64, O>(obj, params)?;
            Ok((l, backward(&c)?))
        }
    }
}

/// Gradient of the loss with respect to one parameter group, flattened,
/// in 64-bit mode.
pub fn group_gradient<O: Objective + ?Sized>(obj: &O, params: &ParamSet, group: &str) -> Result<Vec<f64>> {
    params.group_members(group)?;
    let (_, grads) = gradient(obj, params, ComputeMode::F64)?;
    grads.flatten_group(params, group)
}

/// `H_group · v`, where `H_group` is the Hessian block of `group` with
/// itself. Computed as the derivative of `g_groupᵀv` with respect to the
/// group's parameters: the tangent `v` is seeded on that group only, and
/// the reverse sweep over dual numbers carries `∂(g)/∂w · v` back into the
/// group's adjoints. Always runs in 64-bit.
pub fn hvp<O: Objective + ?Sized>(obj: &O, params: &ParamSet, group: &str, v: &[f64]) -> Result<Vec<f64>> {
    let members = params.group_members(group)?;
    let n = params.group_len(group)?;
    if v.len() != n {
        return Err(Error::shape("hvp", format!("group `{group}` has {n} parameters, v has {}", v.len())));
    }
    let mut tape = Tape::<Dual>::new();
    let mut ids = BTreeMap::new();
    let mut offsets = BTreeMap::new();
    let mut off = 0;
    for name in &members {
        offsets.insert(*name, off);
        off += params.get(name)?.numel();
    }
    for p in params.iter() {
        let data: Vec<Dual> = match offsets.get(p.name.as_str()) {
            Some(&o) => p.value.data().iter().zip(&v[o..]).map(|(&w, &t)| Dual::new(w, t)).collect(),
            None => p.value.data().iter().map(|&w| Dual::new(w, 0.0)).collect(),
        };
        let t = Tensor::new(p.value.dims().to_vec(), data)?;
        let id = if p.trainable { tape.leaf(t)? } else { tape.constant(t)? };
        ids.insert(p.name.clone(), id);
    }
    let vars = ParamVars { ids };
    let loss = obj.loss(&mut tape, &vars)?;
    let grads = tape.backward(loss)?;
    let mut out = Vec::with_capacity(n);
    for name in members {
        let id = vars.get(name)?;
        match grads.get(id) {
            Some(g) => out.extend(g.data().iter().map(|d| d.du)),
            None => out.extend(std::iter::repeat_n(0.0, tape.dims(id).iter().product())),
        }
    }
    if out.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("hvp".into()));
    }
    Ok(out)
}

/// `c · L`, for scale-covariance checks and for turning a minimum into a
/// maximum (negative curvature fixtures).
pub struct Scaled<'a, O: ?Sized> {
    pub inner: &'a O,
    pub factor: f64,
}

impl<O: Objective + ?Sized> Objective for Scaled<'_, O> {
    fn loss<T: Scalar>(&self, tape: &mut Tape<T>, vars: &ParamVars) -> Result<NodeId> {
        let l = self.inner.loss(tape, vars)?;
        tape.scale(l, self.factor)
    }
}

/// `0.5 · wᵀ A w` over a single parameter `w` with a fixed symmetric `A`.
#[derive(Clone, Debug)]
pub struct Quadratic {
    pub name: String,
    pub matrix: Tensor<f64>,
}

impl Quadratic {
    pub fn new(name: impl Into<String>, matrix: Tensor<f64>) -> Result<Self> {
        let (r, c) = matrix.rows_cols("quadratic")?;
        if r != c {
            return Err(Error::shape("quadratic", format!("matrix is {r}x{c}")));
        }
        Ok(Self { name: name.into(), matrix })
    }

    pub fn diagonal(name: impl Into<String>, diag: &[f64]) -> Result<Self> {
        let n = diag.len();
        let m = Tensor::from_fn(&[n, n], |i| if i / n == i % n { diag[i / n] } else { 0.0 });
        Self::new(name, m)
    }

    /// Parameter set holding `w` as an `[n, 1]` column.
    pub fn params(&self, w: &[f64]) -> Result<ParamSet> {
        let mut p = ParamSet::new();
        p.insert(self.name.clone(), Tensor::new(vec![w.len(), 1], w.to_vec())?, true)?;
        Ok(p)
    }
}

impl Objective for Quadratic {
    fn loss<T: Scalar>(&self, tape: &mut Tape<T>, vars: &ParamVars) -> Result<NodeId> {
        let w = vars.get(&self.name)?;
        let a = tape.constant(Tensor::from_f64(&self.matrix))?;
        let aw = tape.matmul(a, w, false)?;
        let prod = tape.mul(w, aw)?;
        let s = tape.sum(prod)?;
        tape.scale(s, 0.5)
    }
}
