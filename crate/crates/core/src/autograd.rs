//! Reverse-mode automatic differentiation on a linear tape.
//!
//! Operations are coarse-grained (a whole dilated convolution or a whole
//! multi-channel attention aggregation is one node) so the tape stays short and
//! every backward rule can be checked against central differences in isolation.
//! A fresh [`Tape`] is built per mini-batch; nodes whose inputs do not require
//! gradients are skipped during the backward sweep, which is how frozen
//! parameters cost nothing.

use std::collections::BTreeMap;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::params::ParamStore;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Relu,
    Tanh,
}

impl Activation {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Tanh => x.tanh(),
        }
    }
}

impl std::str::FromStr for Activation {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "relu" => Ok(Activation::Relu),
            "tanh" => Ok(Activation::Tanh),
            other => Err(format!("unknown activation `{other}` (expected relu|tanh)")),
        }
    }
}

/// Ragged neighbourhoods for attention: `sets[r][0] == r`, followed by the
/// upstream neighbours of `r`.
#[derive(Debug, Clone, PartialEq)]
pub struct Neighborhoods {
    sets: Vec<Vec<usize>>,
    offsets: Vec<usize>,
}

impl Neighborhoods {
    pub fn new(sets: Vec<Vec<usize>>) -> Self {
        let mut offsets = Vec::with_capacity(sets.len() + 1);
        let mut acc = 0;
        for (r, s) in sets.iter().enumerate() {
            assert_eq!(s.first(), Some(&r), "neighbourhood {r} must start with itself");
            offsets.push(acc);
            acc += s.len();
        }
        offsets.push(acc);
        Self { sets, offsets }
    }

    pub fn len(&self) -> usize {
        self.sets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sets.is_empty()
    }

    pub fn set(&self, r: usize) -> &[usize] {
        &self.sets[r]
    }

    pub fn total(&self) -> usize {
        *self.offsets.last().unwrap_or(&0)
    }

    fn offset(&self, r: usize) -> usize {
        self.offsets[r]
    }
}

enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Affine(Var, f64),
    Tanh(Var),
    Sigmoid(Var),
    Relu(Var),
    LeakyRelu(Var, f64),
    Reshape(Var),
    Mask(Var, Arc<Vec<f64>>),
    TemporalConv {
        x: Var,
        w: Var,
        b: Option<Var>,
        dilation: usize,
    },
    GraphMix {
        p: Var,
        x: Var,
    },
    MatMul(Var, Var),
    SoftmaxRows(Var),
    Dense {
        x: Var,
        w: Var,
        b: Var,
    },
    Gather {
        x: Var,
        index: Arc<Vec<usize>>,
    },
    ChannelLinear {
        x: Var,
        w: Var,
    },
    GatAggregate {
        z: Var,
        a: Var,
        hoods: Arc<Neighborhoods>,
        slope: f64,
        /// Attention weights laid out `[batch][hood entry][channel]`.
        alpha: Vec<f64>,
        /// Pre-LeakyReLU scores, same layout.
        pre: Vec<f64>,
    },
    MeanAbsError {
        pred: Var,
        target: Arc<Vec<f64>>,
    },
    WeightedSum {
        x: Var,
        weights: Arc<Vec<f64>>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }
}

/// Parameters placed on a tape, addressable by name.
#[derive(Debug, Clone, Default)]
pub struct Bound {
    vars: BTreeMap<String, Var>,
}

impl Bound {
    pub fn get(&self, name: &str) -> Var {
        *self
            .vars
            .get(name)
            .unwrap_or_else(|| panic!("parameter `{name}` not bound"))
    }

    pub fn scope(&self, prefix: &str) -> Scope<'_> {
        Scope {
            bound: self,
            prefix: prefix.to_string(),
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(k, v)| (k.as_str(), *v))
    }
}

/// Name prefix into a [`Bound`]: `scope("a").get("w")` reads `a.w`.
#[derive(Clone)]
pub struct Scope<'a> {
    bound: &'a Bound,
    prefix: String,
}

impl<'a> Scope<'a> {
    pub fn get(&self, name: &str) -> Var {
        if self.prefix.is_empty() {
            self.bound.get(name)
        } else {
            self.bound.get(&format!("{}.{name}", self.prefix))
        }
    }

    pub fn sub(&self, name: &str) -> Scope<'a> {
        let prefix = if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        };
        Scope {
            bound: self.bound,
            prefix,
        }
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn leaky(x: f64, slope: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        slope * x
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    pub fn param(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Bind every tensor in `store` as a leaf. Frozen stores become constants.
    pub fn bind(&mut self, store: &ParamStore) -> Bound {
        let trainable = !store.is_frozen();
        let vars = store
            .iter()
            .map(|(name, t)| {
                let v = self.push(t.clone(), Op::Leaf, trainable);
                (name.to_string(), v)
            })
            .collect();
        Bound { vars }
    }

    fn unary(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let xv = &self.nodes[x.0].value;
        let data = xv.data().iter().map(|&a| f(a)).collect();
        let t = Tensor::new(xv.shape(), data);
        let rg = self.rg(x);
        self.push(t, op, rg)
    }

    fn binary(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Var {
        let av = &self.nodes[a.0].value;
        let bv = &self.nodes[b.0].value;
        assert_eq!(av.shape(), bv.shape(), "elementwise operands differ in shape");
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect();
        let t = Tensor::new(av.shape(), data);
        let rg = self.rg(a) || self.rg(b);
        self.push(t, op, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x * y, Op::Mul(a, b))
    }

    /// `scale * x + shift` with constant coefficients.
    pub fn affine(&mut self, x: Var, scale: f64, shift: f64) -> Var {
        self.unary(x, |a| scale * a + shift, Op::Affine(x, scale))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, f64::tanh, Op::Tanh(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, sigmoid, Op::Sigmoid(x))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, |a| a.max(0.0), Op::Relu(x))
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Var {
        self.unary(x, |a| leaky(a, slope), Op::LeakyRelu(x, slope))
    }

    pub fn activation(&mut self, x: Var, act: Activation) -> Var {
        match act {
            Activation::Relu => self.relu(x),
            Activation::Tanh => self.tanh(x),
        }
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Var {
        let t = self.nodes[x.0].value.clone().reshaped(shape);
        let rg = self.rg(x);
        self.push(t, Op::Reshape(x), rg)
    }

    /// Elementwise product with a constant mask (dropout).
    pub fn mask(&mut self, x: Var, mask: Vec<f64>) -> Var {
        let mask = Arc::new(mask);
        let m = mask.clone();
        let xv = &self.nodes[x.0].value;
        assert_eq!(xv.len(), m.len());
        let data = xv.data().iter().zip(m.iter()).map(|(a, b)| a * b).collect();
        let t = Tensor::new(xv.shape(), data);
        let rg = self.rg(x);
        self.push(t, Op::Mask(x, mask), rg)
    }

    /// Causal dilated convolution along the last axis.
    ///
    /// `x: [B, V, Cin, T]`, `w: [K, Cout, Cin]`, `b: [Cout]`. Tap `k` reads
    /// `x[.., t - (K-1-k)·dilation]`, zero when that index is negative, so the
    /// output keeps length `T` and never looks ahead.
    pub fn temporal_conv(&mut self, x: Var, w: Var, b: Option<Var>, dilation: usize) -> Var {
        let xv = &self.nodes[x.0].value;
        let wv = &self.nodes[w.0].value;
        let (bsz, nodes, cin, t_len) = dims4(xv.shape());
        let (k_taps, cout, wcin) = dims3(wv.shape());
        assert_eq!(cin, wcin, "conv input channels");
        let mut out = vec![0.0; bsz * nodes * cout * t_len];
        let xd = xv.data();
        let wd = wv.data();
        for bv in 0..bsz * nodes {
            let xin = &xd[bv * cin * t_len..(bv + 1) * cin * t_len];
            let y = &mut out[bv * cout * t_len..(bv + 1) * cout * t_len];
            for k in 0..k_taps {
                let shift = (k_taps - 1 - k) * dilation;
                if shift >= t_len {
                    continue;
                }
                for o in 0..cout {
                    let yo = &mut y[o * t_len + shift..(o + 1) * t_len];
                    for c in 0..cin {
                        let wk = wd[(k * cout + o) * cin + c];
                        let xc = &xin[c * t_len..c * t_len + t_len - shift];
                        for (yy, xx) in yo.iter_mut().zip(xc) {
                            *yy += wk * xx;
                        }
                    }
                }
            }
            if let Some(b) = b {
                let bd = self.nodes[b.0].value.data();
                for o in 0..cout {
                    for yy in &mut y[o * t_len..(o + 1) * t_len] {
                        *yy += bd[o];
                    }
                }
            }
        }
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        let t = Tensor::new(&[bsz, nodes, cout, t_len], out);
        self.push(
            t,
            Op::TemporalConv {
                x,
                w,
                b,
                dilation,
            },
            rg,
        )
    }

    /// Node mixing `y[b, v] = Σ_u p[v, u] · x[b, u]` for `x: [B, V, ...]`.
    pub fn graph_mix(&mut self, p: Var, x: Var) -> Var {
        let pv = &self.nodes[p.0].value;
        let xv = &self.nodes[x.0].value;
        let bsz = xv.shape()[0];
        let nodes = xv.shape()[1];
        assert_eq!(pv.shape(), &[nodes, nodes], "graph support shape");
        let inner: usize = xv.shape()[2..].iter().product();
        let mut out = vec![0.0; xv.len()];
        let pd = pv.data();
        let xd = xv.data();
        for b in 0..bsz {
            let base = b * nodes * inner;
            for v in 0..nodes {
                let yv = &mut out[base + v * inner..base + (v + 1) * inner];
                for u in 0..nodes {
                    let w = pd[v * nodes + u];
                    if w == 0.0 {
                        continue;
                    }
                    let xu = &xd[base + u * inner..base + (u + 1) * inner];
                    for (yy, xx) in yv.iter_mut().zip(xu) {
                        *yy += w * xx;
                    }
                }
            }
        }
        let rg = self.rg(p) || self.rg(x);
        let t = Tensor::new(xv.shape(), out);
        self.push(t, Op::GraphMix { p, x }, rg)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let av = &self.nodes[a.0].value;
        let bv = &self.nodes[b.0].value;
        let (n, k) = dims2(av.shape());
        let (k2, m) = dims2(bv.shape());
        assert_eq!(k, k2, "matmul inner dimension");
        let out = matmul_raw(av.data(), bv.data(), n, k, m);
        let rg = self.rg(a) || self.rg(b);
        self.push(Tensor::new(&[n, m], out), Op::MatMul(a, b), rg)
    }

    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let xv = &self.nodes[x.0].value;
        let (n, m) = dims2(xv.shape());
        let mut out = xv.data().to_vec();
        for row in out.chunks_mut(m) {
            softmax_in_place(row);
        }
        let rg = self.rg(x);
        self.push(Tensor::new(&[n, m], out), Op::SoftmaxRows(x), rg)
    }

    /// `x: [R, in] · w: [in, out] + b`.
    pub fn dense(&mut self, x: Var, w: Var, b: Var) -> Var {
        let xv = &self.nodes[x.0].value;
        let wv = &self.nodes[w.0].value;
        let bv = &self.nodes[b.0].value;
        let (r, k) = dims2(xv.shape());
        let (k2, m) = dims2(wv.shape());
        assert_eq!(k, k2, "dense input width");
        assert_eq!(bv.len(), m);
        let mut out = matmul_raw(xv.data(), wv.data(), r, k, m);
        for row in out.chunks_mut(m) {
            for (y, bb) in row.iter_mut().zip(bv.data()) {
                *y += bb;
            }
        }
        let rg = self.rg(x) || self.rg(w) || self.rg(b);
        self.push(Tensor::new(&[r, m], out), Op::Dense { x, w, b }, rg)
    }

    /// Select entries of axis 1: `x: [B, V, ...] -> [B, index.len(), ...]`.
    pub fn gather(&mut self, x: Var, index: Arc<Vec<usize>>) -> Var {
        let xv = &self.nodes[x.0].value;
        let bsz = xv.shape()[0];
        let nodes = xv.shape()[1];
        let inner: usize = xv.shape()[2..].iter().product();
        let mut out = Vec::with_capacity(bsz * index.len() * inner);
        for b in 0..bsz {
            for &i in index.iter() {
                assert!(i < nodes, "gather index {i} out of range {nodes}");
                let s = (b * nodes + i) * inner;
                out.extend_from_slice(&xv.data()[s..s + inner]);
            }
        }
        let mut shape = xv.shape().to_vec();
        shape[1] = index.len();
        let rg = self.rg(x);
        self.push(Tensor::new(&shape, out), Op::Gather { x, index }, rg)
    }

    /// Per-channel linear map: `x: [B, M, C, D]`, `w: [C, Dout, D]`.
    pub fn channel_linear(&mut self, x: Var, w: Var) -> Var {
        let xv = &self.nodes[x.0].value;
        let wv = &self.nodes[w.0].value;
        let (bsz, m, c, d) = dims4(xv.shape());
        let (wc, dout, wd) = dims3(wv.shape());
        assert_eq!((wc, wd), (c, d), "channel_linear weight shape");
        let xd = xv.data();
        let wdat = wv.data();
        let mut out = vec![0.0; bsz * m * c * dout];
        for bm in 0..bsz * m {
            for ch in 0..c {
                let xs = &xd[(bm * c + ch) * d..(bm * c + ch + 1) * d];
                let ys = &mut out[(bm * c + ch) * dout..(bm * c + ch + 1) * dout];
                for (o, y) in ys.iter_mut().enumerate() {
                    let wrow = &wdat[(ch * dout + o) * d..(ch * dout + o + 1) * d];
                    *y = dot(wrow, xs);
                }
            }
        }
        let rg = self.rg(x) || self.rg(w);
        self.push(Tensor::new(&[bsz, m, c, dout], out), Op::ChannelLinear { x, w }, rg)
    }

    /// Channel-wise graph attention aggregation (pre-activation).
    ///
    /// For every batch entry, route `r` and channel `c` the scores over the
    /// neighbourhood `q ∈ hoods.set(r)` are
    /// `LeakyReLU(a_c[..D]·z[r,c] + a_c[D..]·z[q,c])`; the softmax of those
    /// scores weights `z[q,c]` in the output `Σ_q α_q z[q,c]`.
    pub fn gat_aggregate(&mut self, z: Var, a: Var, hoods: Arc<Neighborhoods>, slope: f64) -> Var {
        let zv = &self.nodes[z.0].value;
        let av = &self.nodes[a.0].value;
        let (bsz, m, c, d) = dims4(zv.shape());
        assert_eq!(av.shape(), &[c, 2 * d], "attention vector shape");
        assert_eq!(hoods.len(), m, "neighbourhood count");
        let zd = zv.data();
        let ad = av.data();
        let total = hoods.total();
        let mut alpha = vec![0.0; bsz * total * c];
        let mut pre = vec![0.0; bsz * total * c];
        let mut out = vec![0.0; zv.len()];
        let zrow = |b: usize, r: usize, ch: usize| &zd[((b * m + r) * c + ch) * d..((b * m + r) * c + ch + 1) * d];
        let mut scores = Vec::new();
        for b in 0..bsz {
            for r in 0..m {
                let set = hoods.set(r);
                let off = hoods.offset(r);
                for ch in 0..c {
                    let a_self = &ad[ch * 2 * d..ch * 2 * d + d];
                    let a_nb = &ad[ch * 2 * d + d..(ch + 1) * 2 * d];
                    let s_self = dot(a_self, zrow(b, r, ch));
                    scores.clear();
                    for (qi, &q) in set.iter().enumerate() {
                        let p = s_self + dot(a_nb, zrow(b, q, ch));
                        pre[(b * total + off + qi) * c + ch] = p;
                        scores.push(leaky(p, slope));
                    }
                    softmax_in_place(&mut scores);
                    let y = &mut out[((b * m + r) * c + ch) * d..((b * m + r) * c + ch + 1) * d];
                    for (qi, &q) in set.iter().enumerate() {
                        let w = scores[qi];
                        alpha[(b * total + off + qi) * c + ch] = w;
                        for (yy, zz) in y.iter_mut().zip(zrow(b, q, ch)) {
                            *yy += w * zz;
                        }
                    }
                }
            }
        }
        let rg = self.rg(z) || self.rg(a);
        let shape = zv.shape().to_vec();
        self.push(
            Tensor::new(&shape, out),
            Op::GatAggregate {
                z,
                a,
                hoods,
                slope,
                alpha,
                pre,
            },
            rg,
        )
    }

    /// Attention weights of a [`Tape::gat_aggregate`] node, `[B][entry][C]`.
    pub fn attention_weights(&self, v: Var) -> Option<&[f64]> {
        match &self.nodes[v.0].op {
            Op::GatAggregate { alpha, .. } => Some(alpha),
            _ => None,
        }
    }

    pub fn mean_abs_error(&mut self, pred: Var, target: Arc<Vec<f64>>) -> Var {
        let pv = &self.nodes[pred.0].value;
        assert_eq!(pv.len(), target.len(), "loss target length");
        let n = pv.len().max(1) as f64;
        let s: f64 = pv.data().iter().zip(target.iter()).map(|(p, t)| (p - t).abs()).sum();
        let rg = self.rg(pred);
        self.push(Tensor::scalar(s / n), Op::MeanAbsError { pred, target }, rg)
    }

    /// `Σ weights · x`; a smooth scalar probe for gradient checks.
    pub fn weighted_sum(&mut self, x: Var, weights: Arc<Vec<f64>>) -> Var {
        let xv = &self.nodes[x.0].value;
        assert_eq!(xv.len(), weights.len());
        let s = dot(xv.data(), &weights);
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::WeightedSum { x, weights }, rg)
    }

    /// Gradients of the scalar `loss` with respect to every node that requires them.
    pub fn backward(&self, loss: Var) -> Gradients {
        assert_eq!(self.nodes[loss.0].value.len(), 1, "loss must be scalar");
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Gradients { grads }
    }

    fn acc<'g>(&self, grads: &'g mut [Option<Vec<f64>>], v: Var) -> Option<&'g mut Vec<f64>> {
        if !self.nodes[v.0].requires_grad {
            return None;
        }
        let n = self.nodes[v.0].value.len();
        Some(grads[v.0].get_or_insert_with(|| vec![0.0; n]))
    }

    fn backprop_node(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let out = &self.nodes[i].value;
        let val = |v: Var| &self.nodes[v.0].value;
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if let Some(d) = self.acc(grads, v) {
                        axpy(d, 1.0, g);
                    }
                }
            }
            Op::Sub(a, b) => {
                if let Some(d) = self.acc(grads, *a) {
                    axpy(d, 1.0, g);
                }
                if let Some(d) = self.acc(grads, *b) {
                    axpy(d, -1.0, g);
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (val(*a).data(), val(*b).data());
                if let Some(d) = self.acc(grads, *a) {
                    for ((dd, gg), bb) in d.iter_mut().zip(g).zip(bv) {
                        *dd += gg * bb;
                    }
                }
                if let Some(d) = self.acc(grads, *b) {
                    for ((dd, gg), aa) in d.iter_mut().zip(g).zip(av) {
                        *dd += gg * aa;
                    }
                }
            }
            Op::Affine(x, scale) => {
                if let Some(d) = self.acc(grads, *x) {
                    axpy(d, *scale, g);
                }
            }
            Op::Tanh(x) => {
                if let Some(d) = self.acc(grads, *x) {
                    for ((dd, gg), y) in d.iter_mut().zip(g).zip(out.data()) {
                        *dd += gg * (1.0 - y * y);
                    }
                }
            }
            Op::Sigmoid(x) => {
                if let Some(d) = self.acc(grads, *x) {
                    for ((dd, gg), y) in d.iter_mut().zip(g).zip(out.data()) {
                        *dd += gg * y * (1.0 - y);
                    }
                }
            }
            Op::Relu(x) => {
                let xv = val(*x).data();
                if let Some(d) = self.acc(grads, *x) {
                    for ((dd, gg), xx) in d.iter_mut().zip(g).zip(xv) {
                        if *xx > 0.0 {
                            *dd += gg;
                        }
                    }
                }
            }
            Op::LeakyRelu(x, slope) => {
                let xv = val(*x).data();
                if let Some(d) = self.acc(grads, *x) {
                    for ((dd, gg), xx) in d.iter_mut().zip(g).zip(xv) {
                        *dd += if *xx > 0.0 { *gg } else { slope * gg };
                    }
                }
            }
            Op::Reshape(x) => {
                if let Some(d) = self.acc(grads, *x) {
                    axpy(d, 1.0, g);
                }
            }
            Op::Mask(x, mask) => {
                if let Some(d) = self.acc(grads, *x) {
                    for ((dd, gg), mm) in d.iter_mut().zip(g).zip(mask.iter()) {
                        *dd += gg * mm;
                    }
                }
            }
            Op::TemporalConv { x, w, b, dilation } => {
                self.backprop_conv(*x, *w, *b, *dilation, g, grads);
            }
            Op::GraphMix { p, x } => {
                let pv = val(*p);
                let xv = val(*x);
                let bsz = xv.shape()[0];
                let nodes = xv.shape()[1];
                let inner: usize = xv.shape()[2..].iter().product();
                if let Some(dx) = self.acc(grads, *x) {
                    for b in 0..bsz {
                        let base = b * nodes * inner;
                        for v in 0..nodes {
                            let gv = &g[base + v * inner..base + (v + 1) * inner];
                            for u in 0..nodes {
                                let w = pv.data()[v * nodes + u];
                                if w == 0.0 {
                                    continue;
                                }
                                axpy(&mut dx[base + u * inner..base + (u + 1) * inner], w, gv);
                            }
                        }
                    }
                }
                if let Some(dp) = self.acc(grads, *p) {
                    let xd = xv.data();
                    for b in 0..bsz {
                        let base = b * nodes * inner;
                        for v in 0..nodes {
                            let gv = &g[base + v * inner..base + (v + 1) * inner];
                            for u in 0..nodes {
                                dp[v * nodes + u] += dot(gv, &xd[base + u * inner..base + (u + 1) * inner]);
                            }
                        }
                    }
                }
            }
            Op::MatMul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                let (n, k) = dims2(av.shape());
                let m = bv.shape()[1];
                if let Some(da) = self.acc(grads, *a) {
                    // dA = G · Bᵀ
                    for r in 0..n {
                        for kk in 0..k {
                            da[r * k + kk] += dot(&g[r * m..(r + 1) * m], &bv.data()[kk * m..(kk + 1) * m]);
                        }
                    }
                }
                if let Some(db) = self.acc(grads, *b) {
                    // dB = Aᵀ · G
                    for r in 0..n {
                        for kk in 0..k {
                            let aval = av.data()[r * k + kk];
                            axpy(&mut db[kk * m..(kk + 1) * m], aval, &g[r * m..(r + 1) * m]);
                        }
                    }
                }
            }
            Op::SoftmaxRows(x) => {
                let m = out.shape()[1];
                if let Some(d) = self.acc(grads, *x) {
                    for ((drow, grow), yrow) in d.chunks_mut(m).zip(g.chunks(m)).zip(out.data().chunks(m)) {
                        let s = dot(grow, yrow);
                        for ((dd, gg), y) in drow.iter_mut().zip(grow).zip(yrow) {
                            *dd += y * (gg - s);
                        }
                    }
                }
            }
            Op::Dense { x, w, b } => {
                let (xv, wv) = (val(*x), val(*w));
                let (r, k) = dims2(xv.shape());
                let m = wv.shape()[1];
                if let Some(dx) = self.acc(grads, *x) {
                    for row in 0..r {
                        let grow = &g[row * m..(row + 1) * m];
                        let dxr = &mut dx[row * k..(row + 1) * k];
                        for (kk, dd) in dxr.iter_mut().enumerate() {
                            *dd += dot(grow, &wv.data()[kk * m..(kk + 1) * m]);
                        }
                    }
                }
                if let Some(dw) = self.acc(grads, *w) {
                    for row in 0..r {
                        let grow = &g[row * m..(row + 1) * m];
                        let xr = &xv.data()[row * k..(row + 1) * k];
                        for (kk, &xx) in xr.iter().enumerate() {
                            if xx != 0.0 {
                                axpy(&mut dw[kk * m..(kk + 1) * m], xx, grow);
                            }
                        }
                    }
                }
                if let Some(db) = self.acc(grads, *b) {
                    for grow in g.chunks(m) {
                        axpy(db, 1.0, grow);
                    }
                }
            }
            Op::Gather { x, index } => {
                let xv = val(*x);
                let bsz = xv.shape()[0];
                let nodes = xv.shape()[1];
                let inner: usize = xv.shape()[2..].iter().product();
                if let Some(dx) = self.acc(grads, *x) {
                    for b in 0..bsz {
                        for (j, &i) in index.iter().enumerate() {
                            let src = &g[(b * index.len() + j) * inner..(b * index.len() + j + 1) * inner];
                            let s = (b * nodes + i) * inner;
                            axpy(&mut dx[s..s + inner], 1.0, src);
                        }
                    }
                }
            }
            Op::ChannelLinear { x, w } => {
                let (xv, wv) = (val(*x), val(*w));
                let (bsz, m, c, d) = dims4(xv.shape());
                let dout = wv.shape()[1];
                if let Some(dx) = self.acc(grads, *x) {
                    for bm in 0..bsz * m {
                        for ch in 0..c {
                            let gy = &g[(bm * c + ch) * dout..(bm * c + ch + 1) * dout];
                            let dxs = &mut dx[(bm * c + ch) * d..(bm * c + ch + 1) * d];
                            for (o, gg) in gy.iter().enumerate() {
                                axpy(dxs, *gg, &wv.data()[(ch * dout + o) * d..(ch * dout + o + 1) * d]);
                            }
                        }
                    }
                }
                if let Some(dw) = self.acc(grads, *w) {
                    for bm in 0..bsz * m {
                        for ch in 0..c {
                            let gy = &g[(bm * c + ch) * dout..(bm * c + ch + 1) * dout];
                            let xs = &xv.data()[(bm * c + ch) * d..(bm * c + ch + 1) * d];
                            for (o, gg) in gy.iter().enumerate() {
                                axpy(&mut dw[(ch * dout + o) * d..(ch * dout + o + 1) * d], *gg, xs);
                            }
                        }
                    }
                }
            }
            Op::GatAggregate {
                z,
                a,
                hoods,
                slope,
                alpha,
                pre,
            } => {
                self.backprop_gat(*z, *a, hoods, *slope, alpha, pre, g, grads);
            }
            Op::MeanAbsError { pred, target } => {
                let pv = val(*pred).data();
                let scale = g[0] / pv.len().max(1) as f64;
                if let Some(d) = self.acc(grads, *pred) {
                    for ((dd, p), t) in d.iter_mut().zip(pv).zip(target.iter()) {
                        let diff = p - t;
                        if diff > 0.0 {
                            *dd += scale;
                        } else if diff < 0.0 {
                            *dd -= scale;
                        }
                    }
                }
            }
            Op::WeightedSum { x, weights } => {
                if let Some(d) = self.acc(grads, *x) {
                    axpy(d, g[0], weights);
                }
            }
        }
    }

    fn backprop_conv(
        &self,
        x: Var,
        w: Var,
        b: Option<Var>,
        dilation: usize,
        g: &[f64],
        grads: &mut [Option<Vec<f64>>],
    ) {
        let xv = &self.nodes[x.0].value;
        let wv = &self.nodes[w.0].value;
        let (bsz, nodes, cin, t_len) = dims4(xv.shape());
        let (k_taps, cout, _) = dims3(wv.shape());
        let xd = xv.data();
        let wd = wv.data();
        if let Some(dx) = self.acc(grads, x) {
            for bv in 0..bsz * nodes {
                let gy = &g[bv * cout * t_len..(bv + 1) * cout * t_len];
                let dxb = &mut dx[bv * cin * t_len..(bv + 1) * cin * t_len];
                for k in 0..k_taps {
                    let shift = (k_taps - 1 - k) * dilation;
                    if shift >= t_len {
                        continue;
                    }
                    for o in 0..cout {
                        let go = &gy[o * t_len + shift..(o + 1) * t_len];
                        for c in 0..cin {
                            let wk = wd[(k * cout + o) * cin + c];
                            axpy(&mut dxb[c * t_len..c * t_len + t_len - shift], wk, go);
                        }
                    }
                }
            }
        }
        if let Some(dw) = self.acc(grads, w) {
            for bv in 0..bsz * nodes {
                let gy = &g[bv * cout * t_len..(bv + 1) * cout * t_len];
                let xin = &xd[bv * cin * t_len..(bv + 1) * cin * t_len];
                for k in 0..k_taps {
                    let shift = (k_taps - 1 - k) * dilation;
                    if shift >= t_len {
                        continue;
                    }
                    for o in 0..cout {
                        let go = &gy[o * t_len + shift..(o + 1) * t_len];
                        for c in 0..cin {
                            dw[(k * cout + o) * cin + c] += dot(go, &xin[c * t_len..c * t_len + t_len - shift]);
                        }
                    }
                }
            }
        }
        if let Some(b) = b {
            if let Some(db) = self.acc(grads, b) {
                for bv in 0..bsz * nodes {
                    let gy = &g[bv * cout * t_len..(bv + 1) * cout * t_len];
                    for (o, dd) in db.iter_mut().enumerate() {
                        *dd += gy[o * t_len..(o + 1) * t_len].iter().sum::<f64>();
                    }
                }
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn backprop_gat(
        &self,
        z: Var,
        a: Var,
        hoods: &Neighborhoods,
        slope: f64,
        alpha: &[f64],
        pre: &[f64],
        g: &[f64],
        grads: &mut [Option<Vec<f64>>],
    ) {
        let zv = &self.nodes[z.0].value;
        let av = &self.nodes[a.0].value;
        let (bsz, m, c, d) = dims4(zv.shape());
        let zd = zv.data();
        let ad = av.data();
        let total = hoods.total();
        let zoff = |b: usize, r: usize, ch: usize| ((b * m + r) * c + ch) * d;

        let mut dz = vec![0.0; zv.len()];
        let mut da = vec![0.0; av.len()];
        let mut dalpha = Vec::new();
        for b in 0..bsz {
            for r in 0..m {
                let set = hoods.set(r);
                let off = hoods.offset(r);
                for ch in 0..c {
                    let gy = &g[zoff(b, r, ch)..zoff(b, r, ch) + d];
                    let idx = |qi: usize| (b * total + off + qi) * c + ch;
                    dalpha.clear();
                    for (qi, &q) in set.iter().enumerate() {
                        let zq = &zd[zoff(b, q, ch)..zoff(b, q, ch) + d];
                        dalpha.push(dot(gy, zq));
                        axpy(&mut dz[zoff(b, q, ch)..zoff(b, q, ch) + d], alpha[idx(qi)], gy);
                    }
                    let weighted: f64 = set.iter().enumerate().map(|(qi, _)| alpha[idx(qi)] * dalpha[qi]).sum();
                    let a_self = &ad[ch * 2 * d..ch * 2 * d + d];
                    let a_nb = &ad[ch * 2 * d + d..(ch + 1) * 2 * d];
                    let mut ds_self = 0.0;
                    for (qi, &q) in set.iter().enumerate() {
                        let de = alpha[idx(qi)] * (dalpha[qi] - weighted);
                        let dp = if pre[idx(qi)] > 0.0 { de } else { slope * de };
                        ds_self += dp;
                        let zq_off = zoff(b, q, ch);
                        for j in 0..d {
                            da[ch * 2 * d + d + j] += dp * zd[zq_off + j];
                        }
                        axpy(&mut dz[zq_off..zq_off + d], dp, a_nb);
                    }
                    let zr_off = zoff(b, r, ch);
                    for j in 0..d {
                        da[ch * 2 * d + j] += ds_self * zd[zr_off + j];
                    }
                    axpy(&mut dz[zr_off..zr_off + d], ds_self, a_self);
                }
            }
        }
        if let Some(acc) = self.acc(grads, z) {
            axpy(acc, 1.0, &dz);
        }
        if let Some(acc) = self.acc(grads, a) {
            axpy(acc, 1.0, &da);
        }
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn axpy(y: &mut [f64], alpha: f64, x: &[f64]) {
    for (yy, xx) in y.iter_mut().zip(x) {
        *yy += alpha * xx;
    }
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

fn matmul_raw(a: &[f64], b: &[f64], n: usize, k: usize, m: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * m];
    for r in 0..n {
        let orow = &mut out[r * m..(r + 1) * m];
        for kk in 0..k {
            let av = a[r * k + kk];
            if av == 0.0 {
                continue;
            }
            axpy(orow, av, &b[kk * m..(kk + 1) * m]);
        }
    }
    out
}

fn dims2(s: &[usize]) -> (usize, usize) {
    assert_eq!(s.len(), 2, "expected rank-2 tensor, got {s:?}");
    (s[0], s[1])
}

fn dims3(s: &[usize]) -> (usize, usize, usize) {
    assert_eq!(s.len(), 3, "expected rank-3 tensor, got {s:?}");
    (s[0], s[1], s[2])
}

fn dims4(s: &[usize]) -> (usize, usize, usize, usize) {
    assert_eq!(s.len(), 4, "expected rank-4 tensor, got {s:?}");
    (s[0], s[1], s[2], s[3])
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Central-difference check of `d loss / d leaf` for every leaf that
    /// requires a gradient. `build` must reconstruct the same graph.
    fn check_grads(leaves: Vec<Tensor>, build: impl Fn(&mut Tape, &[Var]) -> Var) {
        let mut tape = Tape::new();
        let vars: Vec<Var> = leaves.iter().map(|t| tape.param(t.clone())).collect();
        let loss = build(&mut tape, &vars);
        let grads = tape.backward(loss);
        let h = 1e-5;
        for (li, leaf) in leaves.iter().enumerate() {
            let analytic = grads.get(vars[li]).map(|g| g.to_vec()).unwrap_or(vec![0.0; leaf.len()]);
            for e in 0..leaf.len() {
                let eval = |delta: f64| {
                    let mut t = Tape::new();
                    let vs: Vec<Var> = leaves
                        .iter()
                        .enumerate()
                        .map(|(j, l)| {
                            let mut l = l.clone();
                            if j == li {
                                l.data_mut()[e] += delta;
                            }
                            t.param(l)
                        })
                        .collect();
                    let out = build(&mut t, &vs);
                    t.value(out).data()[0]
                };
                let numeric = (eval(h) - eval(-h)) / (2.0 * h);
                let a = analytic[e];
                let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
                assert!(rel < 1e-4, "leaf {li} entry {e}: analytic {a} vs numeric {numeric}");
            }
        }
    }

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(11)
    }

    fn probe(t: &mut Tape, v: Var, seed: u64) -> Var {
        let n = t.value(v).len();
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let w = Tensor::randn(&[n], 1.0, &mut r).into_data();
        t.weighted_sum(v, Arc::new(w))
    }

    #[test]
    fn temporal_conv_gradients() {
        let mut r = rng();
        let x = Tensor::randn(&[2, 3, 2, 5], 1.0, &mut r);
        let w = Tensor::randn(&[2, 3, 2], 1.0, &mut r);
        let b = Tensor::randn(&[3], 1.0, &mut r);
        check_grads(vec![x, w, b], |t, v| {
            let y = t.temporal_conv(v[0], v[1], Some(v[2]), 2);
            probe(t, y, 1)
        });
    }

    #[test]
    fn temporal_conv_is_causal() {
        let mut r = rng();
        let mut x = Tensor::randn(&[1, 1, 1, 6], 1.0, &mut r);
        let w = Tensor::randn(&[2, 1, 1], 1.0, &mut r);
        let mut t = Tape::new();
        let (xv, wv) = (t.constant(x.clone()), t.constant(w.clone()));
        let y0 = t.temporal_conv(xv, wv, None, 1);
        let before = t.value(y0).data()[..3].to_vec();
        x.data_mut()[4] += 10.0;
        let mut t = Tape::new();
        let (xv, wv) = (t.constant(x), t.constant(w));
        let y1 = t.temporal_conv(xv, wv, None, 1);
        assert_eq!(&t.value(y1).data()[..3], &before[..]);
    }

    #[test]
    fn graph_mix_and_matmul_gradients() {
        let mut r = rng();
        let p = Tensor::randn(&[3, 3], 1.0, &mut r);
        let x = Tensor::randn(&[2, 3, 2, 2], 1.0, &mut r);
        let e1 = Tensor::randn(&[3, 2], 1.0, &mut r);
        let e2 = Tensor::randn(&[2, 3], 1.0, &mut r);
        check_grads(vec![p, x, e1, e2], |t, v| {
            let m = t.matmul(v[2], v[3]);
            let m = t.softmax_rows(m);
            let y = t.graph_mix(v[0], v[1]);
            let y2 = t.graph_mix(m, y);
            probe(t, y2, 2)
        });
    }

    #[test]
    fn dense_and_elementwise_gradients() {
        let mut r = rng();
        let x = Tensor::randn(&[4, 3], 1.0, &mut r);
        let w = Tensor::randn(&[3, 2], 1.0, &mut r);
        let b = Tensor::randn(&[2], 1.0, &mut r);
        let c = Tensor::randn(&[4, 2], 1.0, &mut r);
        check_grads(vec![x, w, b, c], |t, v| {
            let y = t.dense(v[0], v[1], v[2]);
            let a = t.tanh(y);
            let s = t.sigmoid(v[3]);
            let m = t.mul(a, s);
            let d = t.sub(m, v[3]);
            let l = t.leaky_relu(d, 0.2);
            let e = t.affine(l, 1.7, -0.3);
            let f = t.add(e, a);
            probe(t, f, 3)
        });
    }

    #[test]
    fn gather_and_channel_linear_gradients() {
        let mut r = rng();
        let x = Tensor::randn(&[2, 3, 2, 3], 1.0, &mut r);
        let w = Tensor::randn(&[2, 3, 3], 1.0, &mut r);
        check_grads(vec![x, w], |t, v| {
            let g = t.gather(v[0], Arc::new(vec![2, 0, 2, 1]));
            let y = t.channel_linear(g, v[1]);
            probe(t, y, 4)
        });
    }

    #[test]
    fn gat_aggregate_gradients() {
        let mut r = rng();
        let z = Tensor::randn(&[2, 3, 2, 3], 1.0, &mut r);
        let a = Tensor::randn(&[2, 6], 1.0, &mut r);
        let hoods = Arc::new(Neighborhoods::new(vec![vec![0, 2], vec![1, 0, 2], vec![2]]));
        check_grads(vec![z, a], |t, v| {
            let y = t.gat_aggregate(v[0], v[1], hoods.clone(), 0.2);
            probe(t, y, 5)
        });
    }

    #[test]
    fn mae_gradient_away_from_kinks() {
        let pred = Tensor::new(&[4], vec![1.0, -2.0, 0.5, 3.0]);
        let target = Arc::new(vec![0.0, 0.0, 1.0, 1.0]);
        check_grads(vec![pred], |t, v| t.mean_abs_error(v[0], target.clone()));
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut t = Tape::new();
        let c = t.constant(Tensor::full(&[2], 1.0));
        let p = t.param(Tensor::full(&[2], 2.0));
        let y = t.mul(c, p);
        let l = t.weighted_sum(y, Arc::new(vec![1.0, 1.0]));
        let g = t.backward(l);
        assert!(g.get(c).is_none());
        assert_eq!(g.get(p).unwrap(), &[1.0, 1.0]);
    }
}
