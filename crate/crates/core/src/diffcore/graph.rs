//! Reverse-mode tape.
//!
//! Every forward op appends a node holding its output value. Nodes whose
//! inputs all lack `requires_grad` are stored as constants, so inference-only
//! passes keep no backward state. `backward` walks the tape in reverse
//! insertion order, which is a valid reverse topological order because inputs
//! always precede their consumers.

use std::collections::{BTreeMap, HashMap};

use super::params::ParamStore;
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    id: usize,
    generation: u32,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    AddBroadcast(usize, usize),
    Scale(usize, f64),
    Shift(usize),
    Matmul { a: usize, b: usize, rows: usize, k: usize, n: usize },
    Bmm { a: usize, b: usize, batch: usize, m: usize, k: usize, n: usize },
    Permute { x: usize, axes: Vec<usize> },
    Reshape(usize),
    Embedding { table: usize, indices: Vec<usize> },
    Softmax(usize),
    Relu(usize),
    Tanh(usize),
    Softplus(usize),
    Abs(usize),
    LayerNorm { x: usize, gamma: usize, beta: usize, xhat: Vec<f64>, inv_std: Vec<f64> },
    BatchNorm { x: usize, gamma: usize, beta: usize, xhat: Vec<f64>, inv_std: Vec<f64>, train: bool },
    Conv1d { x: usize, w: usize, b: usize, batch: usize, len: usize, cin: usize, cout: usize, kernel: usize },
    Sum(usize),
    Mean(usize),
    SumLast(usize),
    Concat { xs: Vec<usize>, outer: usize, chunks: Vec<usize> },
    Slice { x: usize, outer: usize, in_chunk: usize, offset: usize, out_chunk: usize },
    L2Norm(usize),
    CrossEntropy { logits: usize, targets: Vec<usize>, weights: Vec<f64>, probs: Vec<f64>, total_weight: f64 },
    SquaredError { pred: usize, target: usize },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Gradients produced by one [`Graph::backward`] call.
#[derive(Debug)]
pub struct Gradients {
    generation: u32,
    by_node: Vec<Option<Tensor>>,
    named: BTreeMap<String, Tensor>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        if var.generation != self.generation {
            return None;
        }
        self.by_node.get(var.id).and_then(Option::as_ref)
    }

    /// Gradients of parameters bound through [`Graph::param`], keyed by name.
    pub fn named(&self) -> &BTreeMap<String, Tensor> {
        &self.named
    }

    pub fn into_named(self) -> BTreeMap<String, Tensor> {
        self.named
    }
}

/// A single forward/backward tape.
pub struct Graph {
    nodes: Vec<Node>,
    generation: u32,
    consumed: bool,
    track_params: bool,
    params: HashMap<String, Var>,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    /// A tape whose bound parameters require gradients.
    pub fn new() -> Self {
        Self { nodes: Vec::new(), generation: 0, consumed: false, track_params: true, params: HashMap::new() }
    }

    /// A tape whose parameters are constants (inference or latent-gradient passes).
    pub fn frozen() -> Self {
        Self { track_params: false, ..Self::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn idx(&self, v: Var) -> Result<usize> {
        if v.generation != self.generation || v.id >= self.nodes.len() {
            return Err(Error::StaleVar);
        }
        Ok(v.id)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        assert_eq!(v.generation, self.generation, "stale Var used after backward");
        &self.nodes[v.id].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.id].requires_grad
    }

    fn push(&mut self, op_name: &'static str, mut value: Tensor, op: Op, inputs: &[usize]) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: op_name });
        }
        if self.consumed {
            self.consumed = false;
        }
        let requires_grad = inputs.iter().any(|&i| self.nodes[i].requires_grad);
        value.requires_grad = requires_grad;
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node { value, op, requires_grad });
        Ok(Var { id: self.nodes.len() - 1, generation: self.generation })
    }

    /// Adds an input tensor. It takes part in differentiation iff `tensor.requires_grad`.
    pub fn leaf(&mut self, tensor: Tensor) -> Var {
        self.consumed = false;
        let requires_grad = tensor.requires_grad;
        self.nodes.push(Node { value: tensor, op: Op::Leaf, requires_grad });
        Var { id: self.nodes.len() - 1, generation: self.generation }
    }

    pub fn constant(&mut self, mut tensor: Tensor) -> Var {
        tensor.requires_grad = false;
        self.leaf(tensor)
    }

    /// Binds a named parameter from `store`; repeated calls return the same node.
    pub fn param(&mut self, store: &ParamStore, name: &str) -> Result<Var> {
        if let Some(&v) = self.params.get(name) {
            return Ok(v);
        }
        let mut t = store.get(name)?.clone();
        t.requires_grad = self.track_params;
        let v = self.leaf(t);
        self.params.insert(name.to_string(), v);
        Ok(v)
    }

    // ---- elementwise ------------------------------------------------------

    fn same_shape(&self, op: &'static str, a: usize, b: usize) -> Result<()> {
        let (sa, sb) = (self.nodes[a].value.shape(), self.nodes[b].value.shape());
        if sa != sb {
            return Err(Error::shape(op, format!("{sa:?} vs {sb:?}")));
        }
        Ok(())
    }

    fn zip_with(&self, a: usize, b: usize, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (ta, tb) = (&self.nodes[a].value, &self.nodes[b].value);
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(ta.shape().to_vec(), data).expect("same shape")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (a, b) = (self.idx(a)?, self.idx(b)?);
        self.same_shape("add", a, b)?;
        let out = self.zip_with(a, b, |x, y| x + y);
        self.push("add", out, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (a, b) = (self.idx(a)?, self.idx(b)?);
        self.same_shape("sub", a, b)?;
        let out = self.zip_with(a, b, |x, y| x - y);
        self.push("sub", out, Op::Sub(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (a, b) = (self.idx(a)?, self.idx(b)?);
        self.same_shape("mul", a, b)?;
        let out = self.zip_with(a, b, |x, y| x * y);
        self.push("mul", out, Op::Mul(a, b), &[a, b])
    }

    /// `x + b` where `b`'s shape is a suffix of `x`'s (biases, positional tables).
    pub fn add_broadcast(&mut self, x: Var, b: Var) -> Result<Var> {
        let (xi, bi) = (self.idx(x)?, self.idx(b)?);
        let (xs, bs) = (self.nodes[xi].value.shape(), self.nodes[bi].value.shape());
        if bs.len() > xs.len() || xs[xs.len() - bs.len()..] != *bs {
            return Err(Error::shape("add_broadcast", format!("{bs:?} is not a suffix of {xs:?}")));
        }
        let bd = self.nodes[bi].value.data();
        let mut out = self.nodes[xi].value.clone();
        for chunk in out.data_mut().chunks_mut(bd.len()) {
            for (o, v) in chunk.iter_mut().zip(bd) {
                *o += v;
            }
        }
        self.push("add_broadcast", out, Op::AddBroadcast(xi, bi), &[xi, bi])
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        let xi = self.idx(x)?;
        let out = self.nodes[xi].value.map(|v| v * c);
        self.push("scale", out, Op::Scale(xi, c), &[xi])
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Result<Var> {
        let xi = self.idx(x)?;
        let out = self.nodes[xi].value.map(|v| v + c);
        self.push("add_scalar", out, Op::Shift(xi), &[xi])
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let xi = self.idx(x)?;
        let out = self.nodes[xi].value.map(|v| v.max(0.0));
        self.push("relu", out, Op::Relu(xi), &[xi])
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        let xi = self.idx(x)?;
        let out = self.nodes[xi].value.map(f64::tanh);
        self.push("tanh", out, Op::Tanh(xi), &[xi])
    }

    pub fn softplus(&mut self, x: Var) -> Result<Var> {
        let xi = self.idx(x)?;
        let out = self.nodes[xi].value.map(softplus);
        self.push("softplus", out, Op::Softplus(xi), &[xi])
    }

    pub fn abs(&mut self, x: Var) -> Result<Var> {
        let xi = self.idx(x)?;
        let out = self.nodes[xi].value.map(f64::abs);
        self.push("abs", out, Op::Abs(xi), &[xi])
    }

    // ---- linear algebra ---------------------------------------------------

    /// `a @ b` with `a: [..., m, k]` and `b: [k, n]`; leading axes of `a` are batch.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ai, bi) = (self.idx(a)?, self.idx(b)?);
        let (ta, tb) = (&self.nodes[ai].value, &self.nodes[bi].value);
        if tb.shape().len() != 2 || ta.last_dim() != tb.shape()[0] {
            return Err(Error::shape("matmul", format!("{:?} @ {:?}", ta.shape(), tb.shape())));
        }
        let (rows, k, n) = (ta.rows(), ta.last_dim(), tb.shape()[1]);
        let mut out = vec![0.0; rows * n];
        matmul_into(ta.data(), tb.data(), &mut out, rows, k, n);
        let mut shape = ta.shape().to_vec();
        *shape.last_mut().unwrap() = n;
        let out = Tensor::new(shape, out)?;
        self.push("matmul", out, Op::Matmul { a: ai, b: bi, rows, k, n }, &[ai, bi])
    }

    /// Batched matmul: `[B, m, k] @ [B, k, n] -> [B, m, n]`.
    pub fn bmm(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ai, bi) = (self.idx(a)?, self.idx(b)?);
        let (sa, sb) = (self.nodes[ai].value.shape(), self.nodes[bi].value.shape());
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[1] {
            return Err(Error::shape("bmm", format!("{sa:?} @ {sb:?}")));
        }
        let (batch, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
        let mut out = vec![0.0; batch * m * n];
        let (da, db) = (self.nodes[ai].value.data(), self.nodes[bi].value.data());
        for bt in 0..batch {
            matmul_into(
                &da[bt * m * k..(bt + 1) * m * k],
                &db[bt * k * n..(bt + 1) * k * n],
                &mut out[bt * m * n..(bt + 1) * m * n],
                m,
                k,
                n,
            );
        }
        let out = Tensor::new(vec![batch, m, n], out)?;
        self.push("bmm", out, Op::Bmm { a: ai, b: bi, batch, m, k, n }, &[ai, bi])
    }

    pub fn permute(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let xi = self.idx(x)?;
        let shape = self.nodes[xi].value.shape();
        let mut seen = vec![false; shape.len()];
        if axes.len() != shape.len() || axes.iter().any(|&a| a >= shape.len() || std::mem::replace(&mut seen[a], true)) {
            return Err(Error::shape("permute", format!("axes {axes:?} for shape {shape:?}")));
        }
        let out = permute_tensor(&self.nodes[xi].value, axes);
        self.push("permute", out, Op::Permute { x: xi, axes: axes.to_vec() }, &[xi])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let xi = self.idx(x)?;
        let out = self.nodes[xi].value.clone().reshape(shape)?;
        self.push("reshape", out, Op::Reshape(xi), &[xi])
    }

    /// Row gather from `table: [V, D]`; output shape is `out_shape ++ [D]`.
    pub fn embedding(&mut self, table: Var, indices: &[usize], out_shape: &[usize]) -> Result<Var> {
        let ti = self.idx(table)?;
        let t = &self.nodes[ti].value;
        if t.shape().len() != 2 {
            return Err(Error::shape("embedding", format!("table must be 2-D, got {:?}", t.shape())));
        }
        let (vocab, d) = (t.shape()[0], t.shape()[1]);
        if out_shape.iter().product::<usize>() != indices.len() {
            return Err(Error::shape("embedding", format!("{} indices for shape {out_shape:?}", indices.len())));
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= vocab) {
            return Err(Error::shape("embedding", format!("index {bad} out of range for vocab {vocab}")));
        }
        let mut data = Vec::with_capacity(indices.len() * d);
        for &i in indices {
            data.extend_from_slice(t.row(i));
        }
        let mut shape = out_shape.to_vec();
        shape.push(d);
        let out = Tensor::new(shape, data)?;
        self.push("embedding", out, Op::Embedding { table: ti, indices: indices.to_vec() }, &[ti])
    }

    // ---- normalization ----------------------------------------------------

    /// Softmax over the last axis. Entries with `mask[i] == false` get exactly zero weight.
    pub fn softmax(&mut self, x: Var, mask: Option<&[bool]>) -> Result<Var> {
        let xi = self.idx(x)?;
        let t = &self.nodes[xi].value;
        if let Some(m) = mask {
            if m.len() != t.len() {
                return Err(Error::shape("softmax", format!("mask of {} for {} values", m.len(), t.len())));
            }
        }
        let d = t.last_dim();
        let mut out = vec![0.0; t.len()];
        for r in 0..t.rows() {
            let row = t.row(r);
            let keep = |j: usize| mask.is_none_or(|m| m[r * d + j]);
            let max = (0..d).filter(|&j| keep(j)).map(|j| row[j]).fold(f64::NEG_INFINITY, f64::max);
            if max == f64::NEG_INFINITY {
                return Err(Error::shape("softmax", format!("row {r} is fully masked")));
            }
            let mut z = 0.0;
            for j in (0..d).filter(|&j| keep(j)) {
                let e = (row[j] - max).exp();
                out[r * d + j] = e;
                z += e;
            }
            for v in &mut out[r * d..(r + 1) * d] {
                *v /= z;
            }
        }
        let out = Tensor::new(t.shape().to_vec(), out)?;
        self.push("softmax", out, Op::Softmax(xi), &[xi])
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (xi, gi, bi) = (self.idx(x)?, self.idx(gamma)?, self.idx(beta)?);
        let t = &self.nodes[xi].value;
        let d = t.last_dim();
        let (g, b) = (self.nodes[gi].value.data(), self.nodes[bi].value.data());
        if g.len() != d || b.len() != d {
            return Err(Error::shape("layer_norm", format!("affine params of {} / {} for width {d}", g.len(), b.len())));
        }
        let rows = t.rows();
        let mut xhat = vec![0.0; t.len()];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; t.len()];
        for r in 0..rows {
            let row = t.row(r);
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            for j in 0..d {
                let h = (row[j] - mean) * is;
                xhat[r * d + j] = h;
                out[r * d + j] = h * g[j] + b[j];
            }
        }
        let out = Tensor::new(t.shape().to_vec(), out)?;
        self.push("layer_norm", out, Op::LayerNorm { x: xi, gamma: gi, beta: bi, xhat, inv_std }, &[xi, gi, bi])
    }

    /// Batch normalization over every axis but the last (channels).
    ///
    /// Returns the output together with the batch mean and the unbiased batch
    /// variance so the caller can update running statistics.
    pub fn batch_norm_train(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<(Var, Vec<f64>, Vec<f64>)> {
        let (xi, gi, bi) = (self.idx(x)?, self.idx(gamma)?, self.idx(beta)?);
        let t = &self.nodes[xi].value;
        let c = t.last_dim();
        let rows = t.rows();
        if rows < 2 {
            return Err(Error::shape("batch_norm", "training mode needs at least two rows"));
        }
        let (g, b) = (self.nodes[gi].value.data(), self.nodes[bi].value.data());
        if g.len() != c || b.len() != c {
            return Err(Error::shape("batch_norm", format!("affine params for {c} channels")));
        }
        let mut mean = vec![0.0; c];
        for r in 0..rows {
            for (m, v) in mean.iter_mut().zip(t.row(r)) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= rows as f64);
        let mut var = vec![0.0; c];
        for r in 0..rows {
            for ((s, v), m) in var.iter_mut().zip(t.row(r)).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        let unbiased: Vec<f64> = var.iter().map(|s| s / (rows - 1) as f64).collect();
        let inv_std: Vec<f64> = var.iter().map(|s| 1.0 / (s / rows as f64 + eps).sqrt()).collect();
        let mut xhat = vec![0.0; t.len()];
        let mut out = vec![0.0; t.len()];
        for r in 0..rows {
            for (j, v) in t.row(r).iter().enumerate() {
                let h = (v - mean[j]) * inv_std[j];
                xhat[r * c + j] = h;
                out[r * c + j] = h * g[j] + b[j];
            }
        }
        let out = Tensor::new(t.shape().to_vec(), out)?;
        let v = self.push(
            "batch_norm",
            out,
            Op::BatchNorm { x: xi, gamma: gi, beta: bi, xhat, inv_std, train: true },
            &[xi, gi, bi],
        )?;
        Ok((v, mean, unbiased))
    }

    /// Batch normalization using fixed (running) statistics.
    pub fn batch_norm_eval(&mut self, x: Var, gamma: Var, beta: Var, mean: &[f64], var: &[f64], eps: f64) -> Result<Var> {
        let (xi, gi, bi) = (self.idx(x)?, self.idx(gamma)?, self.idx(beta)?);
        let t = &self.nodes[xi].value;
        let c = t.last_dim();
        let (g, b) = (self.nodes[gi].value.data(), self.nodes[bi].value.data());
        if g.len() != c || b.len() != c || mean.len() != c || var.len() != c {
            return Err(Error::shape("batch_norm", format!("statistics for {c} channels")));
        }
        let inv_std: Vec<f64> = var.iter().map(|s| 1.0 / (s + eps).sqrt()).collect();
        let mut xhat = vec![0.0; t.len()];
        let mut out = vec![0.0; t.len()];
        for r in 0..t.rows() {
            for (j, v) in t.row(r).iter().enumerate() {
                let h = (v - mean[j]) * inv_std[j];
                xhat[r * c + j] = h;
                out[r * c + j] = h * g[j] + b[j];
            }
        }
        let out = Tensor::new(t.shape().to_vec(), out)?;
        self.push(
            "batch_norm",
            out,
            Op::BatchNorm { x: xi, gamma: gi, beta: bi, xhat, inv_std, train: false },
            &[xi, gi, bi],
        )
    }

    /// 1-D convolution, stride 1, same padding, channels last.
    ///
    /// `x: [B, T, Cin]`, `w: [K, Cin, Cout]` with odd `K`, `b: [Cout]`.
    pub fn conv1d(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (xi, wi, bi) = (self.idx(x)?, self.idx(w)?, self.idx(b)?);
        let (xs, ws) = (self.nodes[xi].value.shape(), self.nodes[wi].value.shape());
        if xs.len() != 3 || ws.len() != 3 || ws[1] != xs[2] || ws[0] % 2 == 0 || self.nodes[bi].value.len() != ws[2] {
            return Err(Error::shape("conv1d", format!("input {xs:?}, kernel {ws:?}")));
        }
        let (batch, len, cin) = (xs[0], xs[1], xs[2]);
        let (kernel, cout) = (ws[0], ws[2]);
        let pad = kernel / 2;
        let (xd, wd, bd) = (self.nodes[xi].value.data(), self.nodes[wi].value.data(), self.nodes[bi].value.data());
        let mut out = vec![0.0; batch * len * cout];
        for bt in 0..batch {
            for t in 0..len {
                let o = &mut out[(bt * len + t) * cout..(bt * len + t + 1) * cout];
                o.copy_from_slice(bd);
                for k in 0..kernel {
                    let Some(src) = (t + k).checked_sub(pad).filter(|&s| s < len) else { continue };
                    let xrow = &xd[(bt * len + src) * cin..(bt * len + src + 1) * cin];
                    for (c, &xv) in xrow.iter().enumerate() {
                        let wrow = &wd[(k * cin + c) * cout..(k * cin + c + 1) * cout];
                        for (ov, wv) in o.iter_mut().zip(wrow) {
                            *ov += xv * wv;
                        }
                    }
                }
            }
        }
        let out = Tensor::new(vec![batch, len, cout], out)?;
        self.push(
            "conv1d",
            out,
            Op::Conv1d { x: xi, w: wi, b: bi, batch, len, cin, cout, kernel },
            &[xi, wi, bi],
        )
    }

    // ---- reductions & structure -------------------------------------------

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let xi = self.idx(x)?;
        let out = Tensor::scalar(self.nodes[xi].value.sum());
        self.push("sum", out, Op::Sum(xi), &[xi])
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let xi = self.idx(x)?;
        let t = &self.nodes[xi].value;
        let out = Tensor::scalar(t.sum() / t.len() as f64);
        self.push("mean", out, Op::Mean(xi), &[xi])
    }

    /// Sums out the last axis.
    pub fn sum_last(&mut self, x: Var) -> Result<Var> {
        let xi = self.idx(x)?;
        let t = &self.nodes[xi].value;
        let data: Vec<f64> = (0..t.rows()).map(|r| t.row(r).iter().sum()).collect();
        let out = Tensor::new(reduced_shape(t.shape()), data)?;
        self.push("sum_last", out, Op::SumLast(xi), &[xi])
    }

    /// Euclidean norm over the last axis.
    pub fn l2_norm(&mut self, x: Var) -> Result<Var> {
        let xi = self.idx(x)?;
        let t = &self.nodes[xi].value;
        let data: Vec<f64> = (0..t.rows()).map(|r| t.row(r).iter().map(|v| v * v).sum::<f64>().sqrt()).collect();
        let out = Tensor::new(reduced_shape(t.shape()), data)?;
        self.push("l2_norm", out, Op::L2Norm(xi), &[xi])
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let ids = xs.iter().map(|&v| self.idx(v)).collect::<Result<Vec<_>>>()?;
        let first = self.nodes[*ids.first().ok_or_else(|| Error::shape("concat", "no inputs"))?].value.shape().to_vec();
        if axis >= first.len() {
            return Err(Error::shape("concat", format!("axis {axis} for shape {first:?}")));
        }
        let mut shape = first.clone();
        shape[axis] = 0;
        for &i in &ids {
            let s = self.nodes[i].value.shape();
            let compatible = s.len() == first.len()
                && s.iter().zip(&first).enumerate().all(|(ax, (a, b))| ax == axis || a == b);
            if !compatible {
                return Err(Error::shape("concat", format!("{s:?} vs {first:?} along axis {axis}")));
            }
            shape[axis] += s[axis];
        }
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let chunks: Vec<usize> = ids.iter().map(|&i| self.nodes[i].value.shape()[axis] * inner).collect();
        let mut data = Vec::with_capacity(shape.iter().product());
        for o in 0..outer {
            for (&i, &c) in ids.iter().zip(&chunks) {
                data.extend_from_slice(&self.nodes[i].value.data()[o * c..(o + 1) * c]);
            }
        }
        let out = Tensor::new(shape, data)?;
        self.push("concat", out, Op::Concat { xs: ids.clone(), outer, chunks }, &ids)
    }

    /// `x[.., start..start+len, ..]` along `axis`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let xi = self.idx(x)?;
        let s = self.nodes[xi].value.shape().to_vec();
        if axis >= s.len() || len == 0 || start + len > s[axis] {
            return Err(Error::shape("slice", format!("[{start}, {}) on axis {axis} of {s:?}", start + len)));
        }
        let outer: usize = s[..axis].iter().product();
        let inner: usize = s[axis + 1..].iter().product();
        let (in_chunk, out_chunk, offset) = (s[axis] * inner, len * inner, start * inner);
        let src = self.nodes[xi].value.data();
        let mut data = Vec::with_capacity(outer * out_chunk);
        for o in 0..outer {
            data.extend_from_slice(&src[o * in_chunk + offset..o * in_chunk + offset + out_chunk]);
        }
        let mut shape = s;
        shape[axis] = len;
        let out = Tensor::new(shape, data)?;
        self.push("slice", out, Op::Slice { x: xi, outer, in_chunk, offset, out_chunk }, &[xi])
    }

    // ---- losses -----------------------------------------------------------

    /// Weighted mean token cross-entropy. `logits: [..., V]` viewed as rows.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], weights: &[f64]) -> Result<Var> {
        let li = self.idx(logits)?;
        let t = &self.nodes[li].value;
        let (rows, v) = (t.rows(), t.last_dim());
        if targets.len() != rows || weights.len() != rows {
            return Err(Error::shape("cross_entropy", format!("{rows} rows, {} targets, {} weights", targets.len(), weights.len())));
        }
        if targets.iter().any(|&c| c >= v) {
            return Err(Error::shape("cross_entropy", "target class out of range"));
        }
        let total_weight: f64 = weights.iter().sum();
        if total_weight <= 0.0 {
            return Err(Error::shape("cross_entropy", "empty mask"));
        }
        let mut probs = vec![0.0; t.len()];
        let mut loss = 0.0;
        for r in 0..rows {
            let row = t.row(r);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|x| (x - max).exp()).sum();
            for j in 0..v {
                probs[r * v + j] = (row[j] - max).exp() / z;
            }
            loss += weights[r] * (max + z.ln() - row[targets[r]]);
        }
        let out = Tensor::scalar(loss / total_weight);
        let op = Op::CrossEntropy { logits: li, targets: targets.to_vec(), weights: weights.to_vec(), probs, total_weight };
        self.push("cross_entropy", out, op, &[li])
    }

    /// Mean squared error between equally shaped tensors.
    pub fn squared_error(&mut self, pred: Var, target: Var) -> Result<Var> {
        let (pi, ti) = (self.idx(pred)?, self.idx(target)?);
        self.same_shape("squared_error", pi, ti)?;
        let (p, t) = (&self.nodes[pi].value, &self.nodes[ti].value);
        let se: f64 = p.data().iter().zip(t.data()).map(|(a, b)| (a - b) * (a - b)).sum();
        let out = Tensor::scalar(se / p.len() as f64);
        self.push("squared_error", out, Op::SquaredError { pred: pi, target: ti }, &[pi, ti])
    }

    // ---- backward ---------------------------------------------------------

    /// Accumulates gradients of the scalar `loss` into every node that requires
    /// them, then clears the tape.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        if self.consumed || self.nodes.is_empty() {
            return Err(Error::TapeConsumed);
        }
        let li = self.idx(loss)?;
        if self.nodes[li].value.len() != 1 {
            return Err(Error::NonScalarLoss(self.nodes[li].value.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        if self.nodes[li].requires_grad {
            grads[li] = Some(Tensor::full(self.nodes[li].value.shape(), 1.0));
        }
        for id in (0..=li).rev() {
            let Some(g) = grads[id].take() else { continue };
            self.backward_node(id, &g, &mut grads)?;
            grads[id] = Some(g);
        }

        let mut named = BTreeMap::new();
        for (name, v) in &self.params {
            let node = &self.nodes[v.id];
            if node.requires_grad {
                let g = grads[v.id].clone().unwrap_or_else(|| Tensor::zeros(node.value.shape()));
                named.insert(name.clone(), g);
            }
        }
        let out = Gradients { generation: self.generation, by_node: grads, named };

        self.nodes.clear();
        self.params.clear();
        self.generation = self.generation.wrapping_add(1);
        self.consumed = true;
        Ok(out)
    }

    fn backward_node(&self, id: usize, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let node = &self.nodes[id];
        let gd = g.data();
        let val = |i: usize| &self.nodes[i].value;
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.acc(grads, *a, gd.to_vec());
                self.acc(grads, *b, gd.to_vec());
            }
            Op::Sub(a, b) => {
                self.acc(grads, *a, gd.to_vec());
                self.acc(grads, *b, gd.iter().map(|v| -v).collect());
            }
            Op::Mul(a, b) => {
                let (va, vb) = (val(*a).data(), val(*b).data());
                if self.nodes[*a].requires_grad {
                    self.acc(grads, *a, gd.iter().zip(vb).map(|(g, y)| g * y).collect());
                }
                if self.nodes[*b].requires_grad {
                    self.acc(grads, *b, gd.iter().zip(va).map(|(g, x)| g * x).collect());
                }
            }
            Op::AddBroadcast(x, b) => {
                self.acc(grads, *x, gd.to_vec());
                if self.nodes[*b].requires_grad {
                    let n = val(*b).len();
                    let mut gb = vec![0.0; n];
                    for chunk in gd.chunks(n) {
                        for (s, v) in gb.iter_mut().zip(chunk) {
                            *s += v;
                        }
                    }
                    self.acc(grads, *b, gb);
                }
            }
            Op::Scale(x, c) => self.acc(grads, *x, gd.iter().map(|v| v * c).collect()),
            Op::Shift(x) | Op::Reshape(x) => self.acc(grads, *x, gd.to_vec()),
            Op::Matmul { a, b, rows, k, n } => {
                let (va, vb) = (val(*a).data(), val(*b).data());
                if self.nodes[*a].requires_grad {
                    let mut ga = vec![0.0; rows * k];
                    matmul_nt_into(gd, vb, &mut ga, *rows, *n, *k);
                    self.acc(grads, *a, ga);
                }
                if self.nodes[*b].requires_grad {
                    let mut gb = vec![0.0; k * n];
                    matmul_tn_into(va, gd, &mut gb, *rows, *k, *n);
                    self.acc(grads, *b, gb);
                }
            }
            Op::Bmm { a, b, batch, m, k, n } => {
                let (va, vb) = (val(*a).data(), val(*b).data());
                let (m, k, n) = (*m, *k, *n);
                if self.nodes[*a].requires_grad {
                    let mut ga = vec![0.0; batch * m * k];
                    for bt in 0..*batch {
                        matmul_nt_into(
                            &gd[bt * m * n..(bt + 1) * m * n],
                            &vb[bt * k * n..(bt + 1) * k * n],
                            &mut ga[bt * m * k..(bt + 1) * m * k],
                            m,
                            n,
                            k,
                        );
                    }
                    self.acc(grads, *a, ga);
                }
                if self.nodes[*b].requires_grad {
                    let mut gb = vec![0.0; batch * k * n];
                    for bt in 0..*batch {
                        matmul_tn_into(
                            &va[bt * m * k..(bt + 1) * m * k],
                            &gd[bt * m * n..(bt + 1) * m * n],
                            &mut gb[bt * k * n..(bt + 1) * k * n],
                            m,
                            k,
                            n,
                        );
                    }
                    self.acc(grads, *b, gb);
                }
            }
            Op::Permute { x, axes } => {
                let mut inverse = vec![0; axes.len()];
                for (i, &a) in axes.iter().enumerate() {
                    inverse[a] = i;
                }
                self.acc(grads, *x, permute_tensor(g, &inverse).into_data());
            }
            Op::Embedding { table, indices } => {
                let t = val(*table);
                let d = t.last_dim();
                let mut gt = vec![0.0; t.len()];
                for (r, &i) in indices.iter().enumerate() {
                    for (s, v) in gt[i * d..(i + 1) * d].iter_mut().zip(&gd[r * d..(r + 1) * d]) {
                        *s += v;
                    }
                }
                self.acc(grads, *table, gt);
            }
            Op::Softmax(x) => {
                let y = &node.value;
                let d = y.last_dim();
                let mut gx = vec![0.0; y.len()];
                for r in 0..y.rows() {
                    let (yr, gr) = (y.row(r), &gd[r * d..(r + 1) * d]);
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..d {
                        gx[r * d + j] = yr[j] * (gr[j] - dot);
                    }
                }
                self.acc(grads, *x, gx);
            }
            Op::Relu(x) => {
                let vx = val(*x).data();
                self.acc(grads, *x, gd.iter().zip(vx).map(|(g, &v)| if v > 0.0 { *g } else { 0.0 }).collect());
            }
            Op::Tanh(x) => {
                let y = node.value.data();
                self.acc(grads, *x, gd.iter().zip(y).map(|(g, y)| g * (1.0 - y * y)).collect());
            }
            Op::Softplus(x) => {
                let vx = val(*x).data();
                self.acc(grads, *x, gd.iter().zip(vx).map(|(g, &v)| g * sigmoid(v)).collect());
            }
            Op::Abs(x) => {
                let vx = val(*x).data();
                self.acc(grads, *x, gd.iter().zip(vx).map(|(g, &v)| g * sign(v)).collect());
            }
            Op::LayerNorm { x, gamma, beta, xhat, inv_std } => {
                let d = node.value.last_dim();
                let gam = val(*gamma).data();
                let rows = inv_std.len();
                let mut gg = vec![0.0; d];
                let mut gb = vec![0.0; d];
                let mut gx = vec![0.0; rows * d];
                for r in 0..rows {
                    let (gr, hr) = (&gd[r * d..(r + 1) * d], &xhat[r * d..(r + 1) * d]);
                    let mut sum_dh = 0.0;
                    let mut sum_dh_h = 0.0;
                    for j in 0..d {
                        gg[j] += gr[j] * hr[j];
                        gb[j] += gr[j];
                        let dh = gr[j] * gam[j];
                        sum_dh += dh;
                        sum_dh_h += dh * hr[j];
                    }
                    let s = inv_std[r] / d as f64;
                    for j in 0..d {
                        let dh = gr[j] * gam[j];
                        gx[r * d + j] = s * (d as f64 * dh - sum_dh - hr[j] * sum_dh_h);
                    }
                }
                self.acc(grads, *x, gx);
                self.acc(grads, *gamma, gg);
                self.acc(grads, *beta, gb);
            }
            Op::BatchNorm { x, gamma, beta, xhat, inv_std, train } => {
                let c = node.value.last_dim();
                let rows = node.value.rows();
                let gam = val(*gamma).data();
                let mut gg = vec![0.0; c];
                let mut gb = vec![0.0; c];
                for r in 0..rows {
                    for j in 0..c {
                        gg[j] += gd[r * c + j] * xhat[r * c + j];
                        gb[j] += gd[r * c + j];
                    }
                }
                let mut gx = vec![0.0; rows * c];
                for r in 0..rows {
                    for j in 0..c {
                        let dh = gd[r * c + j] * gam[j];
                        gx[r * c + j] = if *train {
                            // d/dx of batch statistics folded in.
                            inv_std[j] / rows as f64
                                * (rows as f64 * dh - gb[j] * gam[j] - xhat[r * c + j] * gg[j] * gam[j])
                        } else {
                            dh * inv_std[j]
                        };
                    }
                }
                self.acc(grads, *x, gx);
                self.acc(grads, *gamma, gg);
                self.acc(grads, *beta, gb);
            }
            Op::Conv1d { x, w, b, batch, len, cin, cout, kernel } => {
                let (xd, wd) = (val(*x).data(), val(*w).data());
                let (len, cin, cout, kernel) = (*len, *cin, *cout, *kernel);
                let pad = kernel / 2;
                let need_x = self.nodes[*x].requires_grad;
                let need_w = self.nodes[*w].requires_grad;
                let mut gx = vec![0.0; if need_x { xd.len() } else { 0 }];
                let mut gw = vec![0.0; if need_w { wd.len() } else { 0 }];
                let mut gbias = vec![0.0; cout];
                for bt in 0..*batch {
                    for t in 0..len {
                        let go = &gd[(bt * len + t) * cout..(bt * len + t + 1) * cout];
                        for (s, v) in gbias.iter_mut().zip(go) {
                            *s += v;
                        }
                        for k in 0..kernel {
                            let Some(src) = (t + k).checked_sub(pad).filter(|&s| s < len) else { continue };
                            let base = (bt * len + src) * cin;
                            for c in 0..cin {
                                let wrow = &wd[(k * cin + c) * cout..(k * cin + c + 1) * cout];
                                if need_x {
                                    gx[base + c] += wrow.iter().zip(go).map(|(a, b)| a * b).sum::<f64>();
                                }
                                if need_w {
                                    let xv = xd[base + c];
                                    let gwrow = &mut gw[(k * cin + c) * cout..(k * cin + c + 1) * cout];
                                    for (s, v) in gwrow.iter_mut().zip(go) {
                                        *s += xv * v;
                                    }
                                }
                            }
                        }
                    }
                }
                if need_x {
                    self.acc(grads, *x, gx);
                }
                if need_w {
                    self.acc(grads, *w, gw);
                }
                self.acc(grads, *b, gbias);
            }
            Op::Sum(x) => self.acc(grads, *x, vec![gd[0]; val(*x).len()]),
            Op::Mean(x) => {
                let n = val(*x).len();
                self.acc(grads, *x, vec![gd[0] / n as f64; n]);
            }
            Op::SumLast(x) => {
                let d = val(*x).last_dim();
                self.acc(grads, *x, gd.iter().flat_map(|&v| std::iter::repeat_n(v, d)).collect());
            }
            Op::L2Norm(x) => {
                let t = val(*x);
                let d = t.last_dim();
                let norms = node.value.data();
                let mut gx = vec![0.0; t.len()];
                for r in 0..t.rows() {
                    if norms[r] > 0.0 {
                        for j in 0..d {
                            gx[r * d + j] = gd[r] * t.data()[r * d + j] / norms[r];
                        }
                    }
                }
                self.acc(grads, *x, gx);
            }
            Op::Concat { xs, outer, chunks } => {
                let total: usize = chunks.iter().sum();
                let mut offset = 0;
                for (&i, &c) in xs.iter().zip(chunks) {
                    if self.nodes[i].requires_grad {
                        let mut gi = Vec::with_capacity(outer * c);
                        for o in 0..*outer {
                            gi.extend_from_slice(&gd[o * total + offset..o * total + offset + c]);
                        }
                        self.acc(grads, i, gi);
                    }
                    offset += c;
                }
            }
            Op::Slice { x, outer, in_chunk, offset, out_chunk } => {
                let mut gx = vec![0.0; outer * in_chunk];
                for o in 0..*outer {
                    gx[o * in_chunk + offset..o * in_chunk + offset + out_chunk]
                        .copy_from_slice(&gd[o * out_chunk..(o + 1) * out_chunk]);
                }
                self.acc(grads, *x, gx);
            }
            Op::CrossEntropy { logits, targets, weights, probs, total_weight } => {
                let v = val(*logits).last_dim();
                let mut gl = vec![0.0; probs.len()];
                for (r, (&t, &w)) in targets.iter().zip(weights).enumerate() {
                    let s = gd[0] * w / total_weight;
                    for j in 0..v {
                        gl[r * v + j] = s * (probs[r * v + j] - if j == t { 1.0 } else { 0.0 });
                    }
                }
                self.acc(grads, *logits, gl);
            }
            Op::SquaredError { pred, target } => {
                let (p, t) = (val(*pred).data(), val(*target).data());
                let s = 2.0 * gd[0] / p.len() as f64;
                let diff: Vec<f64> = p.iter().zip(t).map(|(a, b)| s * (a - b)).collect();
                if self.nodes[*target].requires_grad {
                    self.acc(grads, *target, diff.iter().map(|v| -v).collect());
                }
                self.acc(grads, *pred, diff);
            }
        }
        Ok(())
    }

    fn acc(&self, grads: &mut [Option<Tensor>], id: usize, data: Vec<f64>) {
        let node = &self.nodes[id];
        if !node.requires_grad {
            return;
        }
        let t = Tensor::new(node.value.shape().to_vec(), data).expect("gradient matches value shape");
        match &mut grads[id] {
            Some(existing) => existing.add_assign(&t),
            slot @ None => *slot = Some(t),
        }
    }
}

fn reduced_shape(shape: &[usize]) -> Vec<usize> {
    if shape.len() == 1 {
        vec![1]
    } else {
        shape[..shape.len() - 1].to_vec()
    }
}

pub(crate) fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// `out[m,n] += a[m,k] @ b[k,n]`
fn matmul_into(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            for (o, bv) in orow.iter_mut().zip(&b[p * n..(p + 1) * n]) {
                *o += av * bv;
            }
        }
    }
}

/// `out[m,k] += g[m,n] @ b[k,n]^T`
fn matmul_nt_into(g: &[f64], b: &[f64], out: &mut [f64], m: usize, n: usize, k: usize) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            out[i * k + p] += grow.iter().zip(&b[p * n..(p + 1) * n]).map(|(x, y)| x * y).sum::<f64>();
        }
    }
}

/// `out[k,n] += a[m,k]^T @ g[m,n]`
fn matmul_tn_into(a: &[f64], g: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            for (o, gv) in out[p * n..(p + 1) * n].iter_mut().zip(grow) {
                *o += av * gv;
            }
        }
    }
}

fn permute_tensor(t: &Tensor, axes: &[usize]) -> Tensor {
    let shape = t.shape();
    let nd = shape.len();
    let mut in_strides = vec![1; nd];
    for i in (0..nd - 1).rev() {
        in_strides[i] = in_strides[i + 1] * shape[i + 1];
    }
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let src = t.data();
    let mut data = Vec::with_capacity(src.len());
    let mut counter = vec![0usize; nd];
    let mut offset = 0usize;
    for _ in 0..src.len() {
        data.push(src[offset]);
        for ax in (0..nd).rev() {
            counter[ax] += 1;
            offset += strides[ax];
            if counter[ax] < out_shape[ax] {
                break;
            }
            offset -= strides[ax] * out_shape[ax];
            counter[ax] = 0;
        }
    }
    Tensor::new(out_shape, data).expect("permutation preserves size")
}
