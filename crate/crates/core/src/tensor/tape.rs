//! Define-by-run reverse-mode differentiation.
//!
//! Every op appends a node holding its value and whatever it needs for the
//! backward sweep. Nodes are only ever appended, so the tape is always in
//! topological order and acyclic.

use super::{gemm_nn, gemm_nt, gemm_tn, Scalar, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op<T> {
    Leaf,
    MatMul { a: NodeId, b: NodeId, trans_b: bool },
    BatchMatMul { a: NodeId, b: NodeId, trans_b: bool },
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    AddBias { x: NodeId, bias: NodeId },
    Scale(NodeId, f64),
    Sum(NodeId),
    Mean(NodeId),
    SoftmaxRows(NodeId),
    Relu(NodeId),
    Gelu(NodeId),
    Tanh(NodeId),
    LayerNorm { x: NodeId, gamma: NodeId, beta: NodeId, xhat: Vec<T>, rstd: Vec<T> },
    GatherRows { table: NodeId, rows: Vec<usize> },
    Select { a: NodeId, index: usize },
    Reshape(NodeId),
    Transpose(NodeId),
    SoftmaxCrossEntropy { logits: NodeId, labels: Vec<usize>, probs: Vec<T> },
    StraightThrough { x: NodeId, pass: Vec<bool> },
}

impl<T> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul { .. } => "matmul",
            Op::BatchMatMul { .. } => "batch_matmul",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::AddBias { .. } => "add_bias",
            Op::Scale(..) => "scale",
            Op::Sum(_) => "sum",
            Op::Mean(_) => "mean",
            Op::SoftmaxRows(_) => "softmax_rows",
            Op::Relu(_) => "relu",
            Op::Gelu(_) => "gelu",
            Op::Tanh(_) => "tanh",
            Op::LayerNorm { .. } => "layer_norm",
            Op::GatherRows { .. } => "gather_rows",
            Op::Select { .. } => "select",
            Op::Reshape(_) => "reshape",
            Op::Transpose(_) => "transpose",
            Op::SoftmaxCrossEntropy { .. } => "softmax_cross_entropy",
            Op::StraightThrough { .. } => "straight_through",
        }
    }
}

#[derive(Clone, Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

#[derive(Clone, Debug, Default)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

/// Adjoints produced by [`Tape::backward`], indexed by node.
#[derive(Clone, Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, id: NodeId) -> Option<&Tensor<T>> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, id: NodeId) -> Option<Tensor<T>> {
        self.grads.get_mut(id.0).and_then(|g| g.take())
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

fn gelu<T: Scalar>(x: T) -> T {
    let half = T::from_f64(0.5);
    let inner = T::from_f64(GELU_C) * (x + T::from_f64(GELU_A) * x * x * x);
    half * x * (T::one() + inner.tanh())
}

fn gelu_grad<T: Scalar>(x: T) -> T {
    let half = T::from_f64(0.5);
    let c = T::from_f64(GELU_C);
    let a = T::from_f64(GELU_A);
    let t = (c * (x + a * x * x * x)).tanh();
    half * (T::one() + t)
        + half * x * (T::one() - t * t) * c * (T::one() + T::from_f64(3.0) * a * x * x)
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    pub fn dims(&self, id: NodeId) -> &[usize] {
        self.nodes[id.0].value.dims()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Result<NodeId> {
        if !value.all_finite() {
            return Err(Error::NonFinite(op.name().to_string()));
        }
        self.nodes.push(Node { value, op, requires_grad });
        Ok(NodeId(self.nodes.len() - 1))
    }

    fn rg(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    /// Differentiable input (a parameter).
    pub fn leaf(&mut self, value: Tensor<T>) -> Result<NodeId> {
        self.push(value, Op::Leaf, true)
    }

    /// Input that receives no gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Result<NodeId> {
        self.push(value, Op::Leaf, false)
    }

    /// `a[m,k] · b[k,n]`, or `a[m,k] · b[n,k]ᵀ` when `trans_b`.
    pub fn matmul(&mut self, a: NodeId, b: NodeId, trans_b: bool) -> Result<NodeId> {
        let (m, k) = self.value(a).rows_cols("matmul")?;
        let (br, bc) = self.value(b).rows_cols("matmul")?;
        let (kb, n) = if trans_b { (bc, br) } else { (br, bc) };
        if k != kb {
            return Err(Error::shape(
                "matmul",
                format!("{:?} x {:?} (trans_b={trans_b})", self.dims(a), self.dims(b)),
            ));
        }
        let mut out = vec![T::zero(); m * n];
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        if trans_b {
            gemm_nt(av, bv, &mut out, m, k, n);
        } else {
            gemm_nn(av, bv, &mut out, m, k, n);
        }
        let rg = self.rg(a) || self.rg(b);
        self.push(Tensor::new(vec![m, n], out)?, Op::MatMul { a, b, trans_b }, rg)
    }

    /// Batched `a[B,m,k] · b[B,k,n]` (or `b[B,n,k]ᵀ`).
    pub fn batch_matmul(&mut self, a: NodeId, b: NodeId, trans_b: bool) -> Result<NodeId> {
        let (ad, bd) = (self.dims(a).to_vec(), self.dims(b).to_vec());
        let bad = || Error::shape("batch_matmul", format!("{ad:?} x {bd:?} (trans_b={trans_b})"));
        if ad.len() != 3 || bd.len() != 3 || ad[0] != bd[0] {
            return Err(bad());
        }
        let (batch, m, k) = (ad[0], ad[1], ad[2]);
        let (kb, n) = if trans_b { (bd[2], bd[1]) } else { (bd[1], bd[2]) };
        if k != kb {
            return Err(bad());
        }
        let mut out = vec![T::zero(); batch * m * n];
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        for s in 0..batch {
            let (ab, bb) = (&av[s * m * k..(s + 1) * m * k], &bv[s * k * n..(s + 1) * k * n]);
            let cb = &mut out[s * m * n..(s + 1) * m * n];
            if trans_b {
                gemm_nt(ab, bb, cb, m, k, n);
            } else {
                gemm_nn(ab, bb, cb, m, k, n);
            }
        }
        let rg = self.rg(a) || self.rg(b);
        self.push(Tensor::new(vec![batch, m, n], out)?, Op::BatchMatMul { a, b, trans_b }, rg)
    }

    fn same_dims(&self, op: &'static str, a: NodeId, b: NodeId) -> Result<()> {
        if self.dims(a) != self.dims(b) {
            return Err(Error::shape(op, format!("{:?} vs {:?}", self.dims(a), self.dims(b))));
        }
        Ok(())
    }

    fn zip(&self, a: NodeId, b: NodeId, f: impl Fn(T, T) -> T) -> Tensor<T> {
        let (x, y) = (self.value(a), self.value(b));
        let data = x.data().iter().zip(y.data()).map(|(&p, &q)| f(p, q)).collect();
        Tensor { dims: x.dims().to_vec(), data }
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_dims("add", a, b)?;
        let v = self.zip(a, b, |p, q| p + q);
        let rg = self.rg(a) || self.rg(b);
        self.push(v, Op::Add(a, b), rg)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_dims("sub", a, b)?;
        let v = self.zip(a, b, |p, q| p - q);
        let rg = self.rg(a) || self.rg(b);
        self.push(v, Op::Sub(a, b), rg)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_dims("mul", a, b)?;
        let v = self.zip(a, b, |p, q| p * q);
        let rg = self.rg(a) || self.rg(b);
        self.push(v, Op::Mul(a, b), rg)
    }

    /// Adds a length-`n` bias to every row of `x[..., n]`. The only broadcast.
    pub fn add_bias(&mut self, x: NodeId, bias: NodeId) -> Result<NodeId> {
        let n = self.value(x).last_dim();
        if self.dims(bias) != [n] {
            return Err(Error::shape("add_bias", format!("{:?} + {:?}", self.dims(x), self.dims(bias))));
        }
        let b = self.value(bias).data().to_vec();
        let xv = self.value(x);
        let data = xv.data().iter().enumerate().map(|(i, &v)| v + b[i % n]).collect();
        let v = Tensor { dims: xv.dims().to_vec(), data };
        let rg = self.rg(x) || self.rg(bias);
        self.push(v, Op::AddBias { x, bias }, rg)
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> Result<NodeId> {
        let cs = T::from_f64(c);
        let v = self.value(a).map(|x| x * cs);
        let rg = self.rg(a);
        self.push(v, Op::Scale(a, c), rg)
    }

    pub fn sum(&mut self, a: NodeId) -> Result<NodeId> {
        let mut s = T::zero();
        for &x in self.value(a).data() {
            s += x;
        }
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: NodeId) -> Result<NodeId> {
        let n = self.value(a).numel();
        let mut s = T::zero();
        for &x in self.value(a).data() {
            s += x;
        }
        let rg = self.rg(a);
        self.push(Tensor::scalar(s / T::from_f64(n as f64)), Op::Mean(a), rg)
    }

    /// Softmax over the last dimension, shifted by the row max.
    pub fn softmax_rows(&mut self, a: NodeId) -> Result<NodeId> {
        let xv = self.value(a);
        let n = xv.last_dim();
        let mut data = Vec::with_capacity(xv.numel());
        for row in xv.data().chunks(n) {
            softmax_into(row, &mut data);
        }
        let v = Tensor { dims: xv.dims().to_vec(), data };
        let rg = self.rg(a);
        self.push(v, Op::SoftmaxRows(a), rg)
    }

    pub fn relu(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self.value(a).map(|x| if x.value() > 0.0 { x } else { T::zero() });
        let rg = self.rg(a);
        self.push(v, Op::Relu(a), rg)
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self.value(a).map(gelu);
        let rg = self.rg(a);
        self.push(v, Op::Gelu(a), rg)
    }

    pub fn tanh(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self.value(a).map(|x| x.tanh());
        let rg = self.rg(a);
        self.push(v, Op::Tanh(a), rg)
    }

    /// Layer norm over the last dimension with affine `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId, eps: f64) -> Result<NodeId> {
        let n = self.value(x).last_dim();
        if self.dims(gamma) != [n] || self.dims(beta) != [n] {
            return Err(Error::shape(
                "layer_norm",
                format!("x {:?}, gamma {:?}, beta {:?}", self.dims(x), self.dims(gamma), self.dims(beta)),
            ));
        }
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let xv = self.value(x);
        let inv_n = T::from_f64(1.0 / n as f64);
        let mut xhat = Vec::with_capacity(xv.numel());
        let mut rstd = Vec::with_capacity(xv.numel() / n);
        let mut out = Vec::with_capacity(xv.numel());
        for row in xv.data().chunks(n) {
            let mut mu = T::zero();
            for &v in row {
                mu += v;
            }
            mu = mu * inv_n;
            let mut var = T::zero();
            for &v in row {
                var += (v - mu) * (v - mu);
            }
            let r = T::one() / (var * inv_n + T::from_f64(eps)).sqrt();
            rstd.push(r);
            for (j, &v) in row.iter().enumerate() {
                let h = (v - mu) * r;
                xhat.push(h);
                out.push(h * g[j] + b[j]);
            }
        }
        let v = Tensor { dims: xv.dims().to_vec(), data: out };
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        self.push(v, Op::LayerNorm { x, gamma, beta, xhat, rstd }, rg)
    }

    /// Picks rows of a `[V, d]` table: embedding lookup.
    pub fn gather_rows(&mut self, table: NodeId, rows: &[usize]) -> Result<NodeId> {
        let (v, d) = self.value(table).rows_cols("gather_rows")?;
        if rows.is_empty() {
            return Err(Error::shape("gather_rows", "no rows requested"));
        }
        if let Some(&bad) = rows.iter().find(|&&r| r >= v) {
            return Err(Error::shape("gather_rows", format!("row {bad} out of range for {v} rows")));
        }
        let t = self.value(table).data();
        let mut data = Vec::with_capacity(rows.len() * d);
        for &r in rows {
            data.extend_from_slice(&t[r * d..(r + 1) * d]);
        }
        let out = Tensor { dims: vec![rows.len(), d], data };
        let rg = self.rg(table);
        self.push(out, Op::GatherRows { table, rows: rows.to_vec() }, rg)
    }

    /// `a[index]` along the leading axis.
    pub fn select(&mut self, a: NodeId, index: usize) -> Result<NodeId> {
        let dims = self.dims(a).to_vec();
        if dims.len() < 2 || index >= dims[0] {
            return Err(Error::shape("select", format!("index {index} into {dims:?}")));
        }
        let inner: usize = dims[1..].iter().product();
        let data = self.value(a).data()[index * inner..(index + 1) * inner].to_vec();
        let rg = self.rg(a);
        self.push(Tensor { dims: dims[1..].to_vec(), data }, Op::Select { a, index }, rg)
    }

    pub fn reshape(&mut self, a: NodeId, dims: &[usize]) -> Result<NodeId> {
        let v = self.value(a).clone().reshape(dims)?;
        let rg = self.rg(a);
        self.push(v, Op::Reshape(a), rg)
    }

    pub fn transpose(&mut self, a: NodeId) -> Result<NodeId> {
        let (r, c) = self.value(a).rows_cols("transpose")?;
        let src = self.value(a).data();
        let mut data = vec![T::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                data[j * r + i] = src[i * c + j];
            }
        }
        let rg = self.rg(a);
        self.push(Tensor { dims: vec![c, r], data }, Op::Transpose(a), rg)
    }

    /// Mean over rows of `CE(softmax(logits_b), label_b)`.
    pub fn softmax_cross_entropy(&mut self, logits: NodeId, labels: &[usize]) -> Result<NodeId> {
        let (b, c) = self.value(logits).rows_cols("softmax_cross_entropy")?;
        if labels.len() != b {
            return Err(Error::shape("softmax_cross_entropy", format!("{b} rows, {} labels", labels.len())));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
            return Err(Error::shape("softmax_cross_entropy", format!("label {bad} with {c} classes")));
        }
        let z = self.value(logits).data();
        let mut probs = Vec::with_capacity(b * c);
        let mut total = T::zero();
        for (row, &y) in z.chunks(c).zip(labels) {
            let mut m = row[0];
            for &v in &row[1..] {
                if v.value() > m.value() {
                    m = v;
                }
            }
            let mut s = T::zero();
            for &v in row {
                s += (v - m).exp();
            }
            let lse = m + s.ln();
            total += lse - row[y];
            for &v in row {
                probs.push((v - m).exp() / s);
            }
        }
        let loss = total / T::from_f64(b as f64);
        let rg = self.rg(logits);
        self.push(
            Tensor::scalar(loss),
            Op::SoftmaxCrossEntropy { logits, labels: labels.to_vec(), probs },
            rg,
        )
    }

    /// Substitutes `value` for `x` in the forward pass; the backward pass
    /// copies the upstream gradient where `pass` is set and zeroes it
    /// elsewhere (clipped straight-through estimator).
    pub fn straight_through(&mut self, x: NodeId, value: Tensor<T>, pass: Vec<bool>) -> Result<NodeId> {
        if value.dims() != self.dims(x) || pass.len() != value.numel() {
            return Err(Error::shape("straight_through", format!("{:?} vs {:?}", value.dims(), self.dims(x))));
        }
        let rg = self.rg(x);
        self.push(value, Op::StraightThrough { x, pass }, rg)
    }

    /// Reverse sweep from the scalar node `root`.
    pub fn backward(&self, root: NodeId) -> Result<Gradients<T>> {
        if self.value(root).numel() != 1 {
            return Err(Error::shape("backward", format!("root has dims {:?}", self.dims(root))));
        }
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(Tensor::from_fn(self.dims(root), |_| T::one()));

        for idx in (0..=root.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(node, &g, &mut grads)?;
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<T>>], id: NodeId, f: impl FnOnce(&mut [T])) {
        if !self.rg(id) {
            return;
        }
        let slot = &mut grads[id.0];
        if slot.is_none() {
            *slot = Some(Tensor::zeros(self.dims(id)));
        }
        f(slot.as_mut().unwrap().data_mut());
    }

    fn propagate(&self, node: &Node<T>, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) -> Result<()> {
        let gd = g.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b, trans_b } => {
                let (m, k) = self.value(*a).rows_cols("matmul")?;
                let n = g.last_dim();
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                // dA = G · B (trans_b) or G · Bᵀ
                self.accumulate(grads, *a, |da| {
                    if *trans_b {
                        gemm_nn(gd, bv, da, m, n, k);
                    } else {
                        gemm_nt(gd, bv, da, m, n, k);
                    }
                });
                // dB = Aᵀ · G, or (Aᵀ · G)ᵀ = Gᵀ · A when trans_b
                self.accumulate(grads, *b, |db| {
                    if *trans_b {
                        gemm_tn(gd, av, db, m, n, k);
                    } else {
                        gemm_tn(av, gd, db, m, k, n);
                    }
                });
            }
            Op::BatchMatMul { a, b, trans_b } => {
                let ad = self.dims(*a);
                let (batch, m, k) = (ad[0], ad[1], ad[2]);
                let n = g.last_dim();
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                self.accumulate(grads, *a, |da| {
                    for s in 0..batch {
                        let gs = &gd[s * m * n..(s + 1) * m * n];
                        let bs = &bv[s * k * n..(s + 1) * k * n];
                        let das = &mut da[s * m * k..(s + 1) * m * k];
                        if *trans_b {
                            gemm_nn(gs, bs, das, m, n, k);
                        } else {
                            gemm_nt(gs, bs, das, m, n, k);
                        }
                    }
                });
                self.accumulate(grads, *b, |db| {
                    for s in 0..batch {
                        let gs = &gd[s * m * n..(s + 1) * m * n];
                        let as_ = &av[s * m * k..(s + 1) * m * k];
                        let dbs = &mut db[s * k * n..(s + 1) * k * n];
                        if *trans_b {
                            gemm_tn(gs, as_, dbs, m, n, k);
                        } else {
                            gemm_tn(as_, gs, dbs, m, k, n);
                        }
                    }
                });
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, |d| add_into(d, gd));
                self.accumulate(grads, *b, |d| add_into(d, gd));
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, |d| add_into(d, gd));
                self.accumulate(grads, *b, |d| {
                    for (x, &y) in d.iter_mut().zip(gd) {
                        *x += -y;
                    }
                });
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                self.accumulate(grads, *a, |d| {
                    for ((x, &y), &w) in d.iter_mut().zip(gd).zip(bv) {
                        *x += y * w;
                    }
                });
                self.accumulate(grads, *b, |d| {
                    for ((x, &y), &w) in d.iter_mut().zip(gd).zip(av) {
                        *x += y * w;
                    }
                });
            }
            Op::AddBias { x, bias } => {
                self.accumulate(grads, *x, |d| add_into(d, gd));
                let n = g.last_dim();
                self.accumulate(grads, *bias, |d| {
                    for row in gd.chunks(n) {
                        add_into(d, row);
                    }
                });
            }
            Op::Scale(a, c) => {
                let cs = T::from_f64(*c);
                self.accumulate(grads, *a, |d| {
                    for (x, &y) in d.iter_mut().zip(gd) {
                        *x += y * cs;
                    }
                });
            }
            Op::Sum(a) => {
                let g0 = gd[0];
                self.accumulate(grads, *a, |d| d.iter_mut().for_each(|x| *x += g0));
            }
            Op::Mean(a) => {
                let g0 = gd[0] / T::from_f64(self.value(*a).numel() as f64);
                self.accumulate(grads, *a, |d| d.iter_mut().for_each(|x| *x += g0));
            }
            Op::SoftmaxRows(a) => {
                let y = node.value.data();
                let n = node.value.last_dim();
                self.accumulate(grads, *a, |d| {
                    for ((drow, yrow), grow) in d.chunks_mut(n).zip(y.chunks(n)).zip(gd.chunks(n)) {
                        let mut dot = T::zero();
                        for (&yy, &gg) in yrow.iter().zip(grow) {
                            dot += yy * gg;
                        }
                        for ((dx, &yy), &gg) in drow.iter_mut().zip(yrow).zip(grow) {
                            *dx += yy * (gg - dot);
                        }
                    }
                });
            }
            Op::Relu(a) => {
                let xv = self.value(*a).data();
                self.accumulate(grads, *a, |d| {
                    for ((dx, &x), &gg) in d.iter_mut().zip(xv).zip(gd) {
                        if x.value() > 0.0 {
                            *dx += gg;
                        }
                    }
                });
            }
            Op::Gelu(a) => {
                let xv = self.value(*a).data();
                self.accumulate(grads, *a, |d| {
                    for ((dx, &x), &gg) in d.iter_mut().zip(xv).zip(gd) {
                        *dx += gg * gelu_grad(x);
                    }
                });
            }
            Op::Tanh(a) => {
                let y = node.value.data();
                self.accumulate(grads, *a, |d| {
                    for ((dx, &t), &gg) in d.iter_mut().zip(y).zip(gd) {
                        *dx += gg * (T::one() - t * t);
                    }
                });
            }
            Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
                let n = g.last_dim();
                let gam = self.value(*gamma).data();
                self.accumulate(grads, *x, |d| {
                    let inv_n = T::from_f64(1.0 / n as f64);
                    for (r, ((drow, grow), hrow)) in
                        d.chunks_mut(n).zip(gd.chunks(n)).zip(xhat.chunks(n)).enumerate()
                    {
                        let mut m1 = T::zero();
                        let mut m2 = T::zero();
                        for j in 0..n {
                            let dh = grow[j] * gam[j];
                            m1 += dh;
                            m2 += dh * hrow[j];
                        }
                        m1 = m1 * inv_n;
                        m2 = m2 * inv_n;
                        for j in 0..n {
                            let dh = grow[j] * gam[j];
                            drow[j] += rstd[r] * (dh - m1 - hrow[j] * m2);
                        }
                    }
                });
                self.accumulate(grads, *gamma, |d| {
                    for (grow, hrow) in gd.chunks(n).zip(xhat.chunks(n)) {
                        for j in 0..n {
                            d[j] += grow[j] * hrow[j];
                        }
                    }
                });
                self.accumulate(grads, *beta, |d| {
                    for grow in gd.chunks(n) {
                        add_into(d, grow);
                    }
                });
            }
            Op::GatherRows { table, rows } => {
                let d_model = g.last_dim();
                self.accumulate(grads, *table, |d| {
                    for (i, &r) in rows.iter().enumerate() {
                        add_into(&mut d[r * d_model..(r + 1) * d_model], &gd[i * d_model..(i + 1) * d_model]);
                    }
                });
            }
            Op::Select { a, index } => {
                let inner = g.numel();
                self.accumulate(grads, *a, |d| add_into(&mut d[index * inner..(index + 1) * inner], gd));
            }
            Op::Reshape(a) => {
                self.accumulate(grads, *a, |d| add_into(d, gd));
            }
            Op::StraightThrough { x, pass } => {
                self.accumulate(grads, *x, |d| {
                    for ((dx, &gg), &p) in d.iter_mut().zip(gd).zip(pass) {
                        if p {
                            *dx += gg;
                        }
                    }
                });
            }
            Op::Transpose(a) => {
                let (r, c) = self.value(*a).rows_cols("transpose")?;
                self.accumulate(grads, *a, |d| {
                    for i in 0..r {
                        for j in 0..c {
                            d[i * c + j] += gd[j * r + i];
                        }
                    }
                });
            }
            Op::SoftmaxCrossEntropy { logits, labels, probs } => {
                let c = self.value(*logits).last_dim();
                let scale = gd[0] / T::from_f64(labels.len() as f64);
                self.accumulate(grads, *logits, |d| {
                    for (b, &y) in labels.iter().enumerate() {
                        for j in 0..c {
                            let mut p = probs[b * c + j];
                            if j == y {
                                p = p - T::one();
                            }
                            d[b * c + j] += p * scale;
                        }
                    }
                });
            }
        }
        Ok(())
    }
}

fn add_into<T: Scalar>(d: &mut [T], g: &[T]) {
    for (x, &y) in d.iter_mut().zip(g) {
        *x += y;
    }
}

/// Appends `softmax(row)` to `out`.
pub(crate) fn softmax_into<T: Scalar>(row: &[T], out: &mut Vec<T>) {
    let mut m = row[0];
    for &v in &row[1..] {
        if v.value() > m.value() {
            m = v;
        }
    }
    let start = out.len();
    let mut s = T::zero();
    for &v in row {
        let e = (v - m).exp();
        s += e;
        out.push(e);
    }
    for e in &mut out[start..] {
        *e = *e / s;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(dims: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(dims.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn quadratic_gradient() {
        // L = 0.5 w², w = 3 -> dL/dw = 3
        let mut tape = Tape::<f64>::new();
        let w = tape.leaf(t(&[1], &[3.0])).unwrap();
        let sq = tape.mul(w, w).unwrap();
        let s = tape.sum(sq).unwrap();
        let l = tape.scale(s, 0.5).unwrap();
        assert_eq!(tape.value(l).item().unwrap(), 4.5);
        let g = tape.backward(l).unwrap();
        assert_eq!(g.get(w).unwrap().data(), &[3.0]);
    }

    #[test]
    fn uniform_logits_cross_entropy() {
        let mut tape = Tape::<f64>::new();
        let z = tape.leaf(t(&[1, 2], &[0.7, 0.7])).unwrap();
        let l = tape.softmax_cross_entropy(z, &[1]).unwrap();
        assert!((tape.value(l).item().unwrap() - std::f64::consts::LN_2).abs() < 1e-15);
        let g = tape.backward(l).unwrap();
        // 1/C - 1[j = c]
        assert_eq!(g.get(z).unwrap().data(), &[0.5, -0.5]);
    }

    #[test]
    fn uniform_logits_cross_entropy_many_classes() {
        let c = 5;
        let mut tape = Tape::<f64>::new();
        let z = tape.leaf(Tensor::zeros(&[1, c])).unwrap();
        let l = tape.softmax_cross_entropy(z, &[3]).unwrap();
        let g = tape.backward(l).unwrap();
        for (j, &v) in g.get(z).unwrap().data().iter().enumerate() {
            let want = 0.2 - if j == 3 { 1.0 } else { 0.0 };
            assert!((v - want).abs() < 1e-15);
        }
    }

    #[test]
    fn shape_errors() {
        let mut tape = Tape::<f64>::new();
        let a = tape.leaf(Tensor::zeros(&[2, 3])).unwrap();
        let b = tape.leaf(Tensor::zeros(&[2, 3])).unwrap();
        assert!(tape.matmul(a, b, false).is_err());
        assert!(tape.matmul(a, b, true).is_ok());
        let c = tape.leaf(Tensor::zeros(&[3])).unwrap();
        assert!(tape.add(a, c).is_err());
        assert!(tape.add_bias(a, c).is_ok());
        assert!(tape.softmax_cross_entropy(a, &[0, 3]).is_err());
        assert!(tape.gather_rows(a, &[2]).is_err());
    }

    #[test]
    fn non_finite_is_an_error() {
        let mut tape = Tape::<f64>::new();
        let a = tape.leaf(t(&[1], &[1e300])).unwrap();
        let e = tape.mul(a, a);
        assert!(matches!(e, Err(Error::NonFinite(_))));
    }

    #[test]
    fn constants_get_no_gradient() {
        let mut tape = Tape::<f64>::new();
        let a = tape.leaf(t(&[2], &[1.0, 2.0])).unwrap();
        let c = tape.constant(t(&[2], &[3.0, 4.0])).unwrap();
        let p = tape.mul(a, c).unwrap();
        let s = tape.sum(p).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(a).unwrap().data(), &[3.0, 4.0]);
        assert!(g.get(c).is_none());
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut tape = Tape::<f64>::new();
        let a = tape.leaf(t(&[2, 3], &[1.0, 2.0, 3.0, -5.0, 0.0, 700.0])).unwrap();
        let s = tape.softmax_rows(a).unwrap();
        for row in tape.value(s).data().chunks(3) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }
}
