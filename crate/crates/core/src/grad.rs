//! Reverse-mode differentiation over a recorded graph of coarse ops.
//!
//! Ops execute eagerly and append a node holding their output plus whatever
//! the backward pass needs. Node ids are creation order, which is a
//! topological order, so backward is a single reverse sweep. Leaves created
//! with `trainable = false` never receive gradients, but activation
//! gradients still flow through ops that consume them.

use crate::attention::{attend, attend_backward, AttnProbs, Heads, SparsePattern};
use crate::error::{FluxError, Result};
use crate::tensor::{
    gelu_grad_scalar, gemm, layer_norm_stats, softmax_in_place, Scalar, Tensor,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    AddBias(Var, Var),
    Add(Var, Var),
    Mul(Var, Var),
    Affine(Var, T),
    Gelu(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        mean: Vec<T>,
        rstd: Vec<T>,
    },
    Softmax(Var),
    Embed {
        table: Var,
        ids: Vec<u32>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: Heads,
        pattern: SparsePattern,
        saved: Option<AttnProbs<T>>,
    },
    Blend {
        r: Var,
        a: Var,
        b: Var,
    },
    PoolPrefixSuffix {
        x: Var,
        pool: usize,
    },
    GumbelGate {
        logits: Var,
        tau: T,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<(usize, u32)>,
    },
    Sum(Var),
    Stack(Vec<Var>),
    Square(Var),
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

pub struct Graph<T: Scalar> {
    nodes: Vec<Node<T>>,
    record: bool,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients of the leaves reached by a backward pass.
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            record: true,
        }
    }

    /// A graph that evaluates ops without keeping backward state.
    pub fn inference() -> Self {
        Self {
            nodes: Vec::new(),
            record: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let requires_grad = self.record && inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, value: Tensor<T>, trainable: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: trainable && self.record,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.param(value, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if bv.rank() != 2 || av.cols() != bv.shape()[0] {
            return Err(FluxError::dim(
                "matmul",
                format!("{:?}·{:?}", av.shape(), bv.shape()),
            ));
        }
        let (m, k, n) = (av.rows(), av.cols(), bv.shape()[1]);
        let mut out = vec![T::zero(); m * n];
        gemm(m, k, n, av.data(), false, bv.data(), false, &mut out, false);
        let value = Tensor::new(vec![m, n], out)?;
        Ok(self.push(value, Op::MatMul(a, b), &[a, b]))
    }

    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (xv, bv) = (self.value(x), self.value(b));
        let n = xv.cols();
        if bv.len() != n {
            return Err(FluxError::dim(
                "add_bias",
                format!("{:?} + {:?}", xv.shape(), bv.shape()),
            ));
        }
        let mut value = xv.clone();
        for row in value.data_mut().chunks_mut(n) {
            for (o, bb) in row.iter_mut().zip(bv.data()) {
                *o += *bb;
            }
        }
        Ok(self.push(value, Op::AddBias(x, b), &[x, b]))
    }

    /// `x·w + b`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let h = self.matmul(x, w)?;
        self.add_bias(h, b)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.len() != bv.len() {
            return Err(FluxError::dim(
                "add",
                format!("{:?} + {:?}", av.shape(), bv.shape()),
            ));
        }
        let mut value = av.clone();
        value.add_assign(bv);
        Ok(self.push(value, Op::Add(a, b), &[a, b]))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.len() != bv.len() {
            return Err(FluxError::dim(
                "mul",
                format!("{:?} * {:?}", av.shape(), bv.shape()),
            ));
        }
        let mut value = av.clone();
        for (o, y) in value.data_mut().iter_mut().zip(bv.data()) {
            *o *= *y;
        }
        Ok(self.push(value, Op::Mul(a, b), &[a, b]))
    }

    /// `scale·x + shift`.
    pub fn affine(&mut self, x: Var, scale: T, shift: T) -> Var {
        let mut value = self.value(x).clone();
        for o in value.data_mut() {
            *o = *o * scale + shift;
        }
        self.push(value, Op::Affine(x, scale), &[x])
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let value = crate::tensor::gelu(self.value(x));
        self.push(value, Op::Gelu(x), &[x])
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let (value, mean, rstd) =
            layer_norm_stats(self.value(x), self.value(gain), self.value(bias))?;
        Ok(self.push(
            value,
            Op::LayerNorm {
                x,
                gain,
                bias,
                mean,
                rstd,
            },
            &[x, gain, bias],
        ))
    }

    pub fn softmax(&mut self, x: Var) -> Var {
        let value = crate::tensor::softmax_lastdim(self.value(x));
        self.push(value, Op::Softmax(x), &[x])
    }

    pub fn embed(&mut self, table: Var, ids: &[u32]) -> Result<Var> {
        let value = crate::tensor::embed(ids, self.value(table))?;
        Ok(self.push(
            value,
            Op::Embed {
                table,
                ids: ids.to_vec(),
            },
            &[table],
        ))
    }

    /// Multi-head attention of `[s, h·d']` operands under `pattern`.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        n_heads: usize,
        pattern: &SparsePattern,
    ) -> Result<Var> {
        let width = self.value(q).cols();
        if n_heads == 0 || width % n_heads != 0 {
            return Err(FluxError::dim(
                "attention",
                format!("width {width} not divisible into {n_heads} heads"),
            ));
        }
        let heads = Heads {
            n_heads,
            head_dim: width / n_heads,
        };
        let (out, saved) = attend(
            self.value(q).data(),
            self.value(k).data(),
            self.value(v).data(),
            heads,
            pattern,
        )?;
        let value = Tensor::new(self.value(q).shape().to_vec(), out)?;
        let keep = self.record;
        Ok(self.push(
            value,
            Op::Attention {
                q,
                k,
                v,
                heads,
                pattern: pattern.clone(),
                saved: keep.then_some(saved),
            },
            &[q, k, v],
        ))
    }

    /// `r·a + (1−r)·b` for a one-element `r`.
    pub fn blend(&mut self, r: Var, a: Var, b: Var) -> Result<Var> {
        let (rv, av, bv) = (self.value(r), self.value(a), self.value(b));
        if rv.len() != 1 || av.len() != bv.len() {
            return Err(FluxError::dim(
                "blend",
                format!("r {:?}, a {:?}, b {:?}", rv.shape(), av.shape(), bv.shape()),
            ));
        }
        let rr = rv.item();
        let mut value = av.clone();
        for (o, y) in value.data_mut().iter_mut().zip(bv.data()) {
            *o = rr * *o + (T::one() - rr) * *y;
        }
        Ok(self.push(value, Op::Blend { r, a, b }, &[r, a, b]))
    }

    /// Concatenate the mean of the first `pool` rows with the mean of the last
    /// `pool` rows (windows clipped to the sequence) into `[1, 2·d]`.
    pub fn pool_prefix_suffix(&mut self, x: Var, pool: usize) -> Result<Var> {
        if pool == 0 {
            return Err(FluxError::contract("pool size must be >= 1"));
        }
        let value = crate::router::pool_prefix_suffix(self.value(x), pool)?;
        Ok(self.push(value, Op::PoolPrefixSuffix { x, pool }, &[x]))
    }

    /// Relaxed FA probability `σ(((π_FA+g_FA) − (π_SA+g_SA))/τ)` from a
    /// `[2]` logit node and fixed noise.
    pub fn gumbel_gate(&mut self, logits: Var, noise: (T, T), tau: T) -> Result<Var> {
        let lv = self.value(logits);
        if lv.len() != 2 {
            return Err(FluxError::dim("gumbel_gate", "expects two logits"));
        }
        if !(tau > T::zero()) {
            return Err(FluxError::contract("temperature must be > 0"));
        }
        let r = crate::router::gumbel_soft(lv.data()[0], lv.data()[1], tau, noise)?;
        Ok(self.push(Tensor::scalar(r), Op::GumbelGate { logits, tau }, &[logits]))
    }

    pub fn cross_entropy(&mut self, logits: Var, targets: &[(usize, u32)]) -> Result<Var> {
        let ce = crate::tensor::cross_entropy(self.value(logits), targets)?;
        Ok(self.push(
            Tensor::scalar(ce),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
            },
            &[logits],
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().copied().sum::<T>();
        self.push(Tensor::scalar(s), Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = T::from_usize(self.value(x).len()).unwrap();
        let s = self.sum(x);
        self.affine(s, T::one() / n, T::zero())
    }

    /// Stack one-element nodes into a `[n]` vector.
    pub fn stack(&mut self, xs: &[Var]) -> Result<Var> {
        if xs.is_empty() {
            return Err(FluxError::contract("stack of zero nodes"));
        }
        let mut data = Vec::with_capacity(xs.len());
        for &x in xs {
            let v = self.value(x);
            if v.len() != 1 {
                return Err(FluxError::dim("stack", "elements must be scalars"));
            }
            data.push(v.item());
        }
        let value = Tensor::new(vec![xs.len()], data)?;
        Ok(self.push(value, Op::Stack(xs.to_vec()), xs))
    }

    pub fn square(&mut self, x: Var) -> Var {
        let mut value = self.value(x).clone();
        for o in value.data_mut() {
            *o = *o * *o;
        }
        self.push(value, Op::Square(x), &[x])
    }

    /// Backpropagate from a scalar loss.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).len() != 1 {
            return Err(FluxError::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        self.backward_seeded(vec![(loss, Tensor::scalar(T::one()))])
    }

    /// Backpropagate from several outputs at once, each seeded with its own
    /// upstream gradient.
    pub fn backward_seeded(&self, seeds: Vec<(Var, Tensor<T>)>) -> Result<Gradients<T>> {
        if !self.record {
            return Err(FluxError::contract("backward on an inference graph"));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        for (v, g) in seeds {
            if g.len() != self.value(v).len() {
                return Err(FluxError::dim("backward", "seed gradient shape"));
            }
            accumulate(&mut grads, v, g);
        }
        for i in (0..self.nodes.len()).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backward_node(node, &g, &mut grads);
        }
        Ok(Gradients { grads })
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn backward_node(&self, node: &Node<T>, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k, n) = (av.rows(), av.cols(), bv.shape()[1]);
                if self.needs(*a) {
                    let mut da = vec![T::zero(); m * k];
                    gemm(m, n, k, g.data(), false, bv.data(), true, &mut da, false);
                    accumulate(grads, *a, Tensor::new(av.shape().to_vec(), da).unwrap());
                }
                if self.needs(*b) {
                    let mut db = vec![T::zero(); k * n];
                    gemm(k, m, n, av.data(), true, g.data(), false, &mut db, false);
                    accumulate(grads, *b, Tensor::new(bv.shape().to_vec(), db).unwrap());
                }
            }
            Op::AddBias(x, b) => {
                if self.needs(*x) {
                    accumulate(grads, *x, g.clone());
                }
                if self.needs(*b) {
                    let bv = self.value(*b);
                    let n = bv.len();
                    let mut db = vec![T::zero(); n];
                    for row in g.data().chunks(n) {
                        for (o, v) in db.iter_mut().zip(row) {
                            *o += *v;
                        }
                    }
                    accumulate(grads, *b, Tensor::new(bv.shape().to_vec(), db).unwrap());
                }
            }
            Op::Add(a, b) => {
                for v in [a, b] {
                    if self.needs(*v) {
                        let shaped = reshape_like(g.clone(), self.value(*v));
                        accumulate(grads, *v, shaped);
                    }
                }
            }
            Op::Mul(a, b) => {
                for (x, y) in [(a, b), (b, a)] {
                    if self.needs(*x) {
                        let mut d = self.value(*y).clone();
                        for (o, gv) in d.data_mut().iter_mut().zip(g.data()) {
                            *o *= *gv;
                        }
                        let shaped = reshape_like(d, self.value(*x));
                        accumulate(grads, *x, shaped);
                    }
                }
            }
            Op::Affine(x, scale) => {
                let mut d = g.clone();
                d.data_mut().iter_mut().for_each(|v| *v *= *scale);
                accumulate(grads, *x, d);
            }
            Op::Gelu(x) => {
                let mut d = g.clone();
                for (o, xv) in d.data_mut().iter_mut().zip(self.value(*x).data()) {
                    *o *= gelu_grad_scalar(*xv);
                }
                accumulate(grads, *x, d);
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                mean,
                rstd,
            } => self.layer_norm_backward(*x, *gain, *bias, mean, rstd, g, grads),
            Op::Softmax(x) => {
                let y = &node.value;
                let c = y.cols();
                let mut d = g.clone();
                for (drow, yrow) in d.data_mut().chunks_mut(c).zip(y.data().chunks(c)) {
                    let dotp: T = drow.iter().zip(yrow).map(|(a, b)| *a * *b).sum();
                    for (dv, yv) in drow.iter_mut().zip(yrow) {
                        *dv = *yv * (*dv - dotp);
                    }
                }
                accumulate(grads, *x, d);
            }
            Op::Embed { table, ids } => {
                if self.needs(*table) {
                    let tv = self.value(*table);
                    let mut dt = Tensor::zeros(tv.shape());
                    for (r, &id) in ids.iter().enumerate() {
                        let src = g.row(r);
                        for (o, v) in dt.row_mut(id as usize).iter_mut().zip(src) {
                            *o += *v;
                        }
                    }
                    accumulate(grads, *table, dt);
                }
            }
            Op::Attention {
                q,
                k,
                v,
                heads,
                pattern,
                saved,
            } => {
                let saved = saved.as_ref().expect("attention probs recorded");
                let (dq, dk, dv) = attend_backward(
                    self.value(*q).data(),
                    self.value(*k).data(),
                    self.value(*v).data(),
                    *heads,
                    pattern,
                    saved,
                    g.data(),
                );
                for (var, d) in [(q, dq), (k, dk), (v, dv)] {
                    if self.needs(*var) {
                        let shape = self.value(*var).shape().to_vec();
                        accumulate(grads, *var, Tensor::new(shape, d).unwrap());
                    }
                }
            }
            Op::Blend { r, a, b } => {
                let rr = self.value(*r).item();
                if self.needs(*r) {
                    let dr: T = g
                        .data()
                        .iter()
                        .zip(self.value(*a).data().iter().zip(self.value(*b).data()))
                        .map(|(gv, (av, bv))| *gv * (*av - *bv))
                        .sum();
                    accumulate(grads, *r, Tensor::scalar(dr));
                }
                for (var, w) in [(a, rr), (b, T::one() - rr)] {
                    if self.needs(*var) {
                        let mut d = g.clone();
                        d.data_mut().iter_mut().for_each(|v| *v *= w);
                        accumulate(grads, *var, d);
                    }
                }
            }
            Op::PoolPrefixSuffix { x, pool } => {
                let xv = self.value(*x);
                let s = xv.shape()[0];
                let d = xv.len() / s;
                let p = (*pool).min(s);
                let inv = T::one() / T::from_usize(p).unwrap();
                let mut dx = Tensor::zeros(xv.shape());
                let (gp, gs) = g.data().split_at(d);
                for r in 0..p {
                    for (o, v) in dx.data_mut()[r * d..(r + 1) * d].iter_mut().zip(gp) {
                        *o += *v * inv;
                    }
                }
                for r in s - p..s {
                    for (o, v) in dx.data_mut()[r * d..(r + 1) * d].iter_mut().zip(gs) {
                        *o += *v * inv;
                    }
                }
                accumulate(grads, *x, dx);
            }
            Op::GumbelGate { logits, tau } => {
                let r = node.value.item();
                let dz = g.item() * r * (T::one() - r) / *tau;
                let shape = self.value(*logits).shape().to_vec();
                accumulate(grads, *logits, Tensor::new(shape, vec![dz, -dz]).unwrap());
            }
            Op::CrossEntropy { logits, targets } => {
                let lv = self.value(*logits);
                let c = lv.cols();
                let scale = g.item() / T::from_usize(targets.len()).unwrap();
                let mut d = Tensor::zeros(lv.shape());
                let mut probs = vec![T::zero(); c];
                for &(r, class) in targets {
                    probs.copy_from_slice(lv.row(r));
                    softmax_in_place(&mut probs);
                    probs[class as usize] -= T::one();
                    for (o, p) in d.row_mut(r).iter_mut().zip(&probs) {
                        *o += *p * scale;
                    }
                }
                accumulate(grads, *logits, d);
            }
            Op::Sum(x) => {
                let shape = self.value(*x).shape().to_vec();
                accumulate(grads, *x, Tensor::full(&shape, g.item()));
            }
            Op::Stack(xs) => {
                for (x, gv) in xs.iter().zip(g.data()) {
                    if self.needs(*x) {
                        let shape = self.value(*x).shape().to_vec();
                        accumulate(grads, *x, Tensor::new(shape, vec![*gv]).unwrap());
                    }
                }
            }
            Op::Square(x) => {
                let mut d = g.clone();
                for (o, xv) in d.data_mut().iter_mut().zip(self.value(*x).data()) {
                    *o *= *xv + *xv;
                }
                accumulate(grads, *x, d);
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn layer_norm_backward(
        &self,
        x: Var,
        gain: Var,
        bias: Var,
        mean: &[T],
        rstd: &[T],
        g: &Tensor<T>,
        grads: &mut [Option<Tensor<T>>],
    ) {
        let xv = self.value(x);
        let gv = self.value(gain);
        let c = xv.cols();
        let n = T::from_usize(c).unwrap();
        let mut dgain = vec![T::zero(); c];
        let mut dbias = vec![T::zero(); c];
        let mut dx = if self.needs(x) {
            Some(Tensor::zeros(xv.shape()))
        } else {
            None
        };
        let mut xhat = vec![T::zero(); c];
        let mut dxhat = vec![T::zero(); c];
        for r in 0..xv.rows() {
            let xr = xv.row(r);
            let gr = g.row(r);
            for j in 0..c {
                xhat[j] = (xr[j] - mean[r]) * rstd[r];
                dgain[j] += gr[j] * xhat[j];
                dbias[j] += gr[j];
                dxhat[j] = gr[j] * gv.data()[j];
            }
            if let Some(dx) = dx.as_mut() {
                let m1: T = dxhat.iter().copied().sum::<T>() / n;
                let m2: T = dxhat.iter().zip(&xhat).map(|(a, b)| *a * *b).sum::<T>() / n;
                for (j, o) in dx.row_mut(r).iter_mut().enumerate() {
                    *o = rstd[r] * (dxhat[j] - m1 - xhat[j] * m2);
                }
            }
        }
        if let Some(dx) = dx {
            accumulate(grads, x, dx);
        }
        if self.needs(gain) {
            accumulate(grads, gain, Tensor::new(gv.shape().to_vec(), dgain).unwrap());
        }
        if self.needs(bias) {
            let shape = self.value(bias).shape().to_vec();
            accumulate(grads, bias, Tensor::new(shape, dbias).unwrap());
        }
    }
}

fn reshape_like<T: Scalar>(g: Tensor<T>, like: &Tensor<T>) -> Tensor<T> {
    if g.shape() == like.shape() {
        g
    } else {
        g.reshape(like.shape()).expect("same element count")
    }
}

fn accumulate<T: Scalar>(grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
    match &mut grads[v.0] {
        Some(acc) => acc.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

/// Outcome of comparing analytic gradients with central differences.
#[derive(Debug, Clone)]
pub struct FdReport {
    pub numeric: Vec<f64>,
    pub max_rel_err: f64,
    pub worst_index: usize,
    pub passed: bool,
}

/// Denominator floor for relative error, so near-zero gradient pairs are
/// judged by absolute error.
pub const FD_REL_FLOOR: f64 = 1e-8;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(FD_REL_FLOOR)
}

/// Central-difference gradient of `f` at `params`, compared to `analytic`.
pub fn finite_diff_check(
    mut f: impl FnMut(&[f64]) -> f64,
    params: &[f64],
    analytic: &[f64],
    h: f64,
    tol: f64,
) -> FdReport {
    compare_numeric(params, analytic, tol, |x, i| {
        let p = x[i];
        x[i] = p + h;
        let up = f(x);
        x[i] = p - h;
        let down = f(x);
        x[i] = p;
        (up - down) / (2.0 * h)
    })
}

/// Like [`finite_diff_check`] with the five-point central stencil, whose
/// truncation error is `O(h⁴)`. A larger `h` then keeps cancellation error
/// small for tiny gradient entries.
pub fn finite_diff_check_5pt(
    mut f: impl FnMut(&[f64]) -> f64,
    params: &[f64],
    analytic: &[f64],
    h: f64,
    tol: f64,
) -> FdReport {
    compare_numeric(params, analytic, tol, |x, i| {
        let p = x[i];
        let mut at = |dx: f64| {
            x[i] = p + dx;
            f(x)
        };
        let (p2, p1, m1, m2) = (at(2.0 * h), at(h), at(-h), at(-2.0 * h));
        x[i] = p;
        (-p2 + 8.0 * p1 - 8.0 * m1 + m2) / (12.0 * h)
    })
}

fn compare_numeric(
    params: &[f64],
    analytic: &[f64],
    tol: f64,
    mut numeric_at: impl FnMut(&mut [f64], usize) -> f64,
) -> FdReport {
    assert_eq!(params.len(), analytic.len(), "one analytic value per parameter");
    let mut x = params.to_vec();
    let mut numeric = Vec::with_capacity(params.len());
    let mut max_rel_err = 0.0;
    let mut worst_index = 0;
    for i in 0..params.len() {
        let n = numeric_at(&mut x, i);
        let err = relative_error(analytic[i], n);
        if err > max_rel_err || n.is_nan() {
            max_rel_err = if n.is_nan() { f64::INFINITY } else { err };
            worst_index = i;
        }
        numeric.push(n);
    }
    FdReport {
        numeric,
        max_rel_err,
        worst_index,
        passed: max_rel_err <= tol,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::make_ssa_pattern;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
        Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
    }

    /// Check every input of a scalar-valued graph builder against central
    /// differences.
    fn check_op(
        inputs: Vec<Tensor<f64>>,
        build: impl Fn(&mut Graph<f64>, &[Var]) -> Var,
        tol: f64,
    ) {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone(), true)).collect();
        let out = build(&mut g, &vars);
        let grads = g.backward(out).unwrap();
        for (idx, t) in inputs.iter().enumerate() {
            let analytic = grads.get(vars[idx]).unwrap().to_f64_vec();
            let report = finite_diff_check(
                |p| {
                    let mut g = Graph::inference();
                    let vars: Vec<Var> = inputs
                        .iter()
                        .enumerate()
                        .map(|(j, t)| {
                            if j == idx {
                                g.constant(Tensor::from_f64(t.shape(), p).unwrap())
                            } else {
                                g.constant(t.clone())
                            }
                        })
                        .collect();
                    let out = build(&mut g, &vars);
                    g.value(out).item()
                },
                &t.to_f64_vec(),
                &analytic,
                1e-5,
                tol,
            );
            assert!(
                report.passed,
                "input {idx}: rel err {} at {}",
                report.max_rel_err, report.worst_index
            );
        }
    }

    /// Random projection to a scalar so every output element contributes.
    fn project(g: &mut Graph<f64>, x: Var, seed: u64) -> Var {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let shape = g.value(x).shape().to_vec();
        let w = g.constant(rand_tensor(&mut rng, &shape));
        let p = g.mul(x, w).unwrap();
        g.sum(p)
    }

    #[test]
    fn quadratic_gradient() {
        let mut g = Graph::new();
        let x = g.param(Tensor::<f64>::from_f64(&[2], &[1.0, 2.0]).unwrap(), true);
        let y = g.square(x);
        let loss = g.sum(y);
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[2.0, 4.0]);
        let report = finite_diff_check(
            |p| p.iter().map(|v| v * v).sum(),
            &[1.0, 2.0],
            &[2.0, 4.0],
            1e-5,
            1e-8,
        );
        assert!(report.passed, "{report:?}");
    }

    #[test]
    fn non_scalar_loss_is_a_contract_error() {
        let mut g = Graph::<f64>::new();
        let x = g.param(Tensor::zeros(&[3]), true);
        assert!(matches!(g.backward(x), Err(FluxError::Contract(_))));
    }

    #[test]
    fn frozen_leaf_gets_no_gradient_but_passes_activation_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut g = Graph::new();
        let x = g.param(rand_tensor(&mut rng, &[3, 4]), true);
        let w = g.param(rand_tensor(&mut rng, &[4, 2]), false);
        let y = g.matmul(x, w).unwrap();
        let loss = project(&mut g, y, 1);
        let grads = g.backward(loss).unwrap();
        assert!(grads.get(w).is_none());
        assert!(grads.get(x).unwrap().data().iter().any(|v| *v != 0.0));
    }

    #[test]
    fn matmul_bias_gelu_layer_norm_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let inputs = vec![
            rand_tensor(&mut rng, &[3, 4]),
            rand_tensor(&mut rng, &[4, 5]),
            rand_tensor(&mut rng, &[5]),
            rand_tensor(&mut rng, &[5]),
            rand_tensor(&mut rng, &[5]),
        ];
        check_op(
            inputs,
            |g, v| {
                let h = g.linear(v[0], v[1], v[2]).unwrap();
                let h = g.gelu(h);
                let h = g.layer_norm(h, v[3], v[4]).unwrap();
                project(g, h, 3)
            },
            1e-6,
        );
    }

    #[test]
    fn softmax_embed_cross_entropy_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let inputs = vec![rand_tensor(&mut rng, &[6, 3]), rand_tensor(&mut rng, &[3, 6])];
        check_op(
            inputs,
            |g, v| {
                let e = g.embed(v[0], &[2, 5, 2, 0]).unwrap();
                let logits = g.matmul(e, v[1]).unwrap();
                let sm = g.softmax(logits);
                let a = project(g, sm, 8);
                let ce = g.cross_entropy(logits, &[(0, 1), (2, 5), (3, 0)]).unwrap();
                g.add(a, ce).unwrap()
            },
            1e-6,
        );
    }

    #[test]
    fn attention_grads_causal_and_ssa() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        for pattern in [
            crate::attention::SparsePattern::causal(7),
            make_ssa_pattern(7, 1, 2).unwrap(),
        ] {
            let inputs = vec![
                rand_tensor(&mut rng, &[7, 8]),
                rand_tensor(&mut rng, &[7, 8]),
                rand_tensor(&mut rng, &[7, 8]),
            ];
            check_op(
                inputs,
                |g, v| {
                    let o = g.attention(v[0], v[1], v[2], 2, &pattern).unwrap();
                    project(g, o, 5)
                },
                1e-6,
            );
        }
    }

    #[test]
    fn blend_pool_gate_stack_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let inputs = vec![
            rand_tensor(&mut rng, &[5, 3]),
            rand_tensor(&mut rng, &[6, 2]),
            rand_tensor(&mut rng, &[5, 3]),
        ];
        check_op(
            inputs,
            |g, v| {
                let pooled = g.pool_prefix_suffix(v[0], 2).unwrap();
                let logits = g.matmul(pooled, v[1]).unwrap();
                let r = g.gumbel_gate(logits, (0.3, -0.2), 0.7).unwrap();
                let mixed = g.blend(r, v[0], v[2]).unwrap();
                let a = project(g, mixed, 2);
                let one_minus = g.affine(r, -1.0, 1.0);
                let st = g.stack(&[r, one_minus, a]).unwrap();
                let sq = g.square(st);
                g.mean(sq)
            },
            1e-6,
        );
    }
}
