//! A small reverse-mode automatic differentiation tape over `[batch,
//! channels, time]` tensors.
//!
//! Ops are fused at the granularity the networks need (reflection-padded
//! convolution, normalization with feature-wise modulation and activation,
//! multi-scale spectral loss) so the tape stays short and memory-light.
//! Gradients are only computed along paths that reach a node requiring them.

use alloc::boxed::Box;
use alloc::collections::BTreeMap;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::losses::SpectralLoss;
use crate::math::{exp, sqrt, tanh};
use crate::{Error, Result};

/// Dense `[batch, channels, time]` tensor. Vectors are `[batch, channels, 1]`,
/// scalars `[1, 1, 1]`, weights use the three axes as their own layout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    pub shape: [usize; 3],
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: [usize; 3], data: Vec<f64>) -> Result<Self> {
        if shape.iter().product::<usize>() != data.len() {
            return Err(Error::ShapeMismatch(alloc::format!("{} values for shape {shape:?}", data.len())));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: [usize; 3]) -> Self {
        Self { shape, data: vec![0.0; shape.iter().product()] }
    }

    pub fn full(shape: [usize; 3], v: f64) -> Self {
        Self { shape, data: vec![v; shape.iter().product()] }
    }

    pub fn scalar(v: f64) -> Self {
        Self { shape: [1, 1, 1], data: vec![v] }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn batch(&self) -> usize {
        self.shape[0]
    }

    pub fn channels(&self) -> usize {
        self.shape[1]
    }

    pub fn time(&self) -> usize {
        self.shape[2]
    }

    /// Row `(b, c)` along time.
    pub fn row(&self, b: usize, c: usize) -> &[f64] {
        let t = self.shape[2];
        let i = (b * self.shape[1] + c) * t;
        &self.data[i..i + t]
    }

    pub fn row_mut(&mut self, b: usize, c: usize) -> &mut [f64] {
        let t = self.shape[2];
        let i = (b * self.shape[1] + c) * t;
        &mut self.data[i..i + t]
    }

    pub fn item(&self) -> f64 {
        self.data[0]
    }

    fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.shape, other.shape);
        self.data.iter_mut().zip(&other.data).for_each(|(a, b)| *a += b);
    }

    pub fn sum_sq(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }
}

/// Identifies a trainable parameter across modules.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ParamKey {
    pub module: u8,
    pub index: u32,
}

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

type BackwardFn = Box<dyn Fn(&Tensor, &[Node], &mut Vec<(usize, Tensor)>)>;

pub struct Node {
    value: Tensor,
    requires_grad: bool,
    backward: Option<BackwardFn>,
}

impl Node {
    pub fn value(&self) -> &Tensor {
        &self.value
    }
}

/// Running statistics of one normalization layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunningStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl RunningStats {
    pub fn new(channels: usize) -> Self {
        Self { mean: vec![0.0; channels], var: vec![1.0; channels] }
    }
}

/// Weight of the previous running statistic in each update.
pub const STATS_MOMENTUM: f64 = 0.9;
pub const NORM_EPS: f64 = 1e-5;

/// Activation applied by fused ops.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Act {
    None,
    Silu,
    Tanh,
}

impl Act {
    fn forward(self, v: f64) -> f64 {
        match self {
            Act::None => v,
            Act::Silu => v * sigmoid(v),
            Act::Tanh => tanh(v),
        }
    }

    /// Derivative given the pre-activation `v` and the output `y`.
    fn derivative(self, v: f64, y: f64) -> f64 {
        match self {
            Act::None => 1.0,
            Act::Silu => {
                let s = sigmoid(v);
                s * (1.0 + v * (1.0 - s))
            }
            Act::Tanh => 1.0 - y * y,
        }
    }
}

fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + exp(-v))
    } else {
        let e = exp(v);
        e / (1.0 + e)
    }
}

/// Index of `i` after reflecting about both ends of a length-`n` axis.
pub fn reflect_index(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let m = i.rem_euclid(period);
    if m < n as isize {
        m as usize
    } else {
        (period - m) as usize
    }
}

/// Parameter gradients collected by [`Tape::backward`].
#[derive(Debug, Clone, Default)]
pub struct Gradients {
    pub params: BTreeMap<ParamKey, Tensor>,
}

impl Gradients {
    pub fn get(&self, key: &ParamKey) -> Option<&Tensor> {
        self.params.get(key)
    }

    /// Sum of squared gradient entries over parameters of `module`.
    pub fn norm_sq(&self, module: u8) -> f64 {
        self.params.iter().filter(|(k, _)| k.module == module).map(|(_, t)| t.sum_sq()).sum()
    }
}

/// Batch statistics observed by a training-mode normalization, to be folded
/// into the layer's running statistics once the step is over.
#[derive(Debug, Clone, PartialEq)]
pub struct StatsUpdate {
    pub key: ParamKey,
    pub mean: Vec<f64>,
    /// Unbiased batch variance.
    pub var: Vec<f64>,
}

impl RunningStats {
    pub fn apply(&mut self, update: &StatsUpdate) {
        for (r, m) in self.mean.iter_mut().zip(&update.mean) {
            *r = STATS_MOMENTUM * *r + (1.0 - STATS_MOMENTUM) * m;
        }
        for (r, v) in self.var.iter_mut().zip(&update.var) {
            *r = STATS_MOMENTUM * *r + (1.0 - STATS_MOMENTUM) * v;
        }
    }
}

/// Records operations for reverse-mode differentiation.
pub struct Tape {
    nodes: Vec<Node>,
    params: BTreeMap<ParamKey, Var>,
    stats_updates: Vec<StatsUpdate>,
    training: bool,
    grad_enabled: bool,
}

impl Tape {
    pub fn new(training: bool) -> Self {
        Self { nodes: Vec::new(), params: BTreeMap::new(), stats_updates: Vec::new(), training, grad_enabled: true }
    }

    /// Eval-mode tape that records no gradient paths at all.
    pub fn inference() -> Self {
        Self { grad_enabled: false, ..Self::new(false) }
    }

    /// Batch statistics gathered by training-mode normalizations, in order.
    pub fn stats_updates(&self) -> &[StatsUpdate] {
        &self.stats_updates
    }

    pub fn training(&self) -> bool {
        self.training
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> [usize; 3] {
        self.nodes[v.0].value.shape
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, requires_grad: bool, backward: Option<BackwardFn>) -> Var {
        self.nodes.push(Node { value, requires_grad, backward: if requires_grad { backward } else { None } });
        Var(self.nodes.len() - 1)
    }

    /// A value that never receives gradients.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, false, None)
    }

    /// A leaf that receives gradients but is not a registered parameter.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        let rg = self.grad_enabled;
        self.push(value, rg, None)
    }

    /// A trainable parameter; repeated calls with the same key share one node.
    pub fn param(&mut self, key: ParamKey, value: &Tensor) -> Var {
        if let Some(&v) = self.params.get(&key) {
            return v;
        }
        let rg = self.grad_enabled;
        let v = self.push(value.clone(), rg, None);
        self.params.insert(key, v);
        v
    }

    /// Copy of `x` with no gradient path back to it.
    pub fn detach(&mut self, x: Var) -> Var {
        let value = self.value(x).clone();
        self.constant(value)
    }

    fn needs(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Backpropagates from scalar `root` and returns the gradients of every
    /// parameter that lies on a path to it. Leaf gradients are available via
    /// [`Tape::backward_full`].
    pub fn backward(&self, root: Var) -> Gradients {
        let grads = self.backward_full(root);
        let mut out = Gradients::default();
        for (key, v) in &self.params {
            if let Some(g) = &grads[v.0] {
                out.params.insert(*key, g.clone());
            }
        }
        out
    }

    /// Gradient of scalar `root` with respect to every node, `None` where no
    /// path exists.
    pub fn backward_full(&self, root: Var) -> Vec<Option<Tensor>> {
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        let rs = self.nodes[root.0].value.shape;
        grads[root.0] = Some(Tensor::full(rs, 1.0));
        let mut emitted = Vec::new();
        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if let Some(f) = &self.nodes[i].backward {
                emitted.clear();
                f(&g, &self.nodes, &mut emitted);
                for (p, pg) in emitted.drain(..) {
                    if !self.nodes[p].requires_grad {
                        continue;
                    }
                    match &mut grads[p] {
                        Some(acc) => acc.add_assign(&pg),
                        slot => *slot = Some(pg),
                    }
                }
            }
            grads[i] = Some(g);
        }
        grads
    }

    // ---- elementwise -----------------------------------------------------

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::ShapeMismatch(alloc::format!("add {:?} + {:?}", self.shape(a), self.shape(b))));
        }
        let mut v = self.value(a).clone();
        v.add_assign(self.value(b));
        let rg = self.needs(&[a, b]);
        Ok(self.push(
            v,
            rg,
            Some(Box::new(move |g, _, out| {
                out.push((a.0, g.clone()));
                out.push((b.0, g.clone()));
            })),
        ))
    }

    /// Elementwise product of equal shapes.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::ShapeMismatch(alloc::format!("mul {:?} * {:?}", self.shape(a), self.shape(b))));
        }
        let (av, bv) = (self.value(a), self.value(b));
        let v = Tensor { shape: av.shape, data: av.data.iter().zip(&bv.data).map(|(x, y)| x * y).collect() };
        let rg = self.needs(&[a, b]);
        Ok(self.push(
            v,
            rg,
            Some(Box::new(move |g, nodes, out| {
                let (av, bv) = (&nodes[a.0].value.data, &nodes[b.0].value.data);
                let ga = g.data.iter().zip(bv).map(|(e, y)| e * y).collect();
                let gb = g.data.iter().zip(av).map(|(e, x)| e * x).collect();
                out.push((a.0, Tensor { shape: g.shape, data: ga }));
                out.push((b.0, Tensor { shape: g.shape, data: gb }));
            })),
        ))
    }

    /// `s * x + o` with constant `s` and `o`.
    pub fn affine(&mut self, x: Var, s: f64, o: f64) -> Var {
        let xv = self.value(x);
        let v = Tensor { shape: xv.shape, data: xv.data.iter().map(|e| s * e + o).collect() };
        let rg = self.needs(&[x]);
        self.push(
            v,
            rg,
            Some(Box::new(move |g, _, out| {
                out.push((x.0, Tensor { shape: g.shape, data: g.data.iter().map(|e| s * e).collect() }));
            })),
        )
    }

    pub fn activation(&mut self, x: Var, act: Act) -> Var {
        let xv = self.value(x);
        let v = Tensor { shape: xv.shape, data: xv.data.iter().map(|&e| act.forward(e)).collect() };
        let rg = self.needs(&[x]);
        let out_id = self.nodes.len();
        self.push(
            v,
            rg,
            Some(Box::new(move |g, nodes, out| {
                let (xi, yi) = (&nodes[x.0].value.data, &nodes[out_id].value.data);
                let data = g.data.iter().enumerate().map(|(i, e)| e * act.derivative(xi[i], yi[i])).collect();
                out.push((x.0, Tensor { shape: g.shape, data }));
            })),
        )
    }

    /// `wa * a + wb * b` for scalars.
    pub fn weighted_sum(&mut self, a: Var, wa: f64, b: Var, wb: f64) -> Result<Var> {
        if self.shape(a) != [1, 1, 1] || self.shape(b) != [1, 1, 1] {
            return Err(Error::ShapeMismatch("weighted_sum expects scalars".into()));
        }
        let v = Tensor::scalar(wa * self.value(a).item() + wb * self.value(b).item());
        let rg = self.needs(&[a, b]);
        Ok(self.push(
            v,
            rg,
            Some(Box::new(move |g, _, out| {
                out.push((a.0, Tensor::scalar(wa * g.item())));
                out.push((b.0, Tensor::scalar(wb * g.item())));
            })),
        ))
    }

    // ---- shape ---------------------------------------------------------------

    /// Concatenation along channels.
    pub fn concat(&mut self, a: Var, b: Var) -> Result<Var> {
        let ([ba, ca, ta], [bb, cb, tb]) = (self.shape(a), self.shape(b));
        if ba != bb || ta != tb {
            return Err(Error::ShapeMismatch(alloc::format!("concat {:?} with {:?}", self.shape(a), self.shape(b))));
        }
        let mut v = Tensor::zeros([ba, ca + cb, ta]);
        for bi in 0..ba {
            for c in 0..ca {
                v.row_mut(bi, c).copy_from_slice(self.value(a).row(bi, c));
            }
            for c in 0..cb {
                v.row_mut(bi, ca + c).copy_from_slice(self.value(b).row(bi, c));
            }
        }
        let rg = self.needs(&[a, b]);
        Ok(self.push(
            v,
            rg,
            Some(Box::new(move |g, _, out| {
                let mut ga = Tensor::zeros([ba, ca, ta]);
                let mut gb = Tensor::zeros([ba, cb, ta]);
                for bi in 0..ba {
                    for c in 0..ca {
                        ga.row_mut(bi, c).copy_from_slice(g.row(bi, c));
                    }
                    for c in 0..cb {
                        gb.row_mut(bi, c).copy_from_slice(g.row(bi, ca + c));
                    }
                }
                out.push((a.0, ga));
                out.push((b.0, gb));
            })),
        ))
    }

    /// Builds a new time axis by gathering `indices` from the old one; the
    /// backward pass scatters. Covers slicing and reflection padding.
    pub fn gather_time(&mut self, x: Var, indices: Vec<usize>) -> Result<Var> {
        let [b, c, t] = self.shape(x);
        if let Some(&bad) = indices.iter().find(|&&i| i >= t) {
            return Err(Error::ShapeMismatch(alloc::format!("time index {bad} out of range {t}")));
        }
        let n = indices.len();
        let mut v = Tensor::zeros([b, c, n]);
        for bi in 0..b {
            for ci in 0..c {
                let src = self.value(x).row(bi, ci);
                for (o, &i) in v.row_mut(bi, ci).iter_mut().zip(&indices) {
                    *o = src[i];
                }
            }
        }
        let rg = self.needs(&[x]);
        Ok(self.push(
            v,
            rg,
            Some(Box::new(move |g, _, out| {
                let mut gx = Tensor::zeros([b, c, t]);
                for bi in 0..b {
                    for ci in 0..c {
                        let src = g.row(bi, ci);
                        let dst = gx.row_mut(bi, ci);
                        for (j, &i) in indices.iter().enumerate() {
                            dst[i] += src[j];
                        }
                    }
                }
                out.push((x.0, gx));
            })),
        ))
    }

    pub fn slice_time(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        self.gather_time(x, (start..start + len).collect())
    }

    /// Reflection-pads the end of the time axis by `extra` samples.
    pub fn pad_reflect_end(&mut self, x: Var, extra: usize) -> Result<Var> {
        if extra == 0 {
            return Ok(x);
        }
        let t = self.shape(x)[2];
        self.gather_time(x, (0..t + extra).map(|i| reflect_index(i as isize, t)).collect())
    }

    /// Mean over time: `[b, c, t] -> [b, c, 1]`.
    pub fn mean_time(&mut self, x: Var) -> Var {
        let [b, c, t] = self.shape(x);
        let mut v = Tensor::zeros([b, c, 1]);
        for bi in 0..b {
            for ci in 0..c {
                v.data[bi * c + ci] = self.value(x).row(bi, ci).iter().sum::<f64>() / t as f64;
            }
        }
        let rg = self.needs(&[x]);
        self.push(
            v,
            rg,
            Some(Box::new(move |g, _, out| {
                let mut gx = Tensor::zeros([b, c, t]);
                for bi in 0..b {
                    for ci in 0..c {
                        let e = g.data[bi * c + ci] / t as f64;
                        gx.row_mut(bi, ci).iter_mut().for_each(|v| *v = e);
                    }
                }
                out.push((x.0, gx));
            })),
        )
    }

    /// Non-overlapping average pooling by two along time (a trailing odd
    /// sample is dropped).
    pub fn avg_pool2(&mut self, x: Var) -> Var {
        let [b, c, t] = self.shape(x);
        let n = t / 2;
        let mut v = Tensor::zeros([b, c, n]);
        for bi in 0..b {
            for ci in 0..c {
                let src = self.value(x).row(bi, ci);
                for (j, o) in v.row_mut(bi, ci).iter_mut().enumerate() {
                    *o = 0.5 * (src[2 * j] + src[2 * j + 1]);
                }
            }
        }
        let rg = self.needs(&[x]);
        self.push(
            v,
            rg,
            Some(Box::new(move |g, _, out| {
                let mut gx = Tensor::zeros([b, c, t]);
                for bi in 0..b {
                    for ci in 0..c {
                        let src = g.row(bi, ci);
                        let dst = gx.row_mut(bi, ci);
                        for j in 0..n {
                            dst[2 * j] = 0.5 * src[j];
                            dst[2 * j + 1] = 0.5 * src[j];
                        }
                    }
                }
                out.push((x.0, gx));
            })),
        )
    }

    // ---- layers --------------------------------------------------------------

    /// `[b, cin, 1] -> [b, cout, 1]` with weight `[cout, cin, 1]` and bias `[cout, 1, 1]`.
    pub fn linear(&mut self, x: Var, w: Var, bias: Var) -> Result<Var> {
        let [b, cin, t] = self.shape(x);
        let [cout, wcin, _] = self.shape(w);
        if t != 1 || wcin != cin || self.value(bias).len() != cout {
            return Err(Error::ShapeMismatch(alloc::format!(
                "linear input {:?} weight {:?}",
                self.shape(x),
                self.shape(w)
            )));
        }
        let mut v = Tensor::zeros([b, cout, 1]);
        {
            let (xv, wv, bv) = (self.value(x), self.value(w), self.value(bias));
            for bi in 0..b {
                let xr = &xv.data[bi * cin..(bi + 1) * cin];
                for o in 0..cout {
                    let wr = &wv.data[o * cin..(o + 1) * cin];
                    v.data[bi * cout + o] = bv.data[o] + dot(wr, xr);
                }
            }
        }
        let rg = self.needs(&[x, w, bias]);
        Ok(self.push(
            v,
            rg,
            Some(Box::new(move |g, nodes, out| {
                let (xv, wv) = (&nodes[x.0].value, &nodes[w.0].value);
                if nodes[x.0].requires_grad {
                    let mut gx = Tensor::zeros([b, cin, 1]);
                    for bi in 0..b {
                        for o in 0..cout {
                            axpy(&mut gx.data[bi * cin..(bi + 1) * cin], g.data[bi * cout + o], &wv.data[o * cin..(o + 1) * cin]);
                        }
                    }
                    out.push((x.0, gx));
                }
                if nodes[w.0].requires_grad || nodes[bias.0].requires_grad {
                    let mut gw = Tensor::zeros([cout, cin, 1]);
                    let mut gb = Tensor::zeros(nodes[bias.0].value.shape);
                    for bi in 0..b {
                        for o in 0..cout {
                            let e = g.data[bi * cout + o];
                            axpy(&mut gw.data[o * cin..(o + 1) * cin], e, &xv.data[bi * cin..(bi + 1) * cin]);
                            gb.data[o] += e;
                        }
                    }
                    out.push((w.0, gw));
                    out.push((bias.0, gb));
                }
            })),
        ))
    }

    /// Stride-1 convolution with odd kernel `[cout, cin, k]`, bias `[cout, 1, 1]`
    /// and reflection padding that preserves length.
    pub fn conv1d(&mut self, x: Var, w: Var, bias: Var) -> Result<Var> {
        let [b, cin, t] = self.shape(x);
        let [cout, wcin, k] = self.shape(w);
        if wcin != cin || k % 2 == 0 || self.value(bias).len() != cout {
            return Err(Error::ShapeMismatch(alloc::format!(
                "conv1d input {:?} weight {:?}",
                self.shape(x),
                self.shape(w)
            )));
        }
        let p = k / 2;
        let pad_index: Vec<usize> = (0..t + 2 * p).map(|i| reflect_index(i as isize - p as isize, t)).collect();
        let mut v = Tensor::zeros([b, cout, t]);
        {
            let (xv, wv, bv) = (self.value(x), self.value(w), self.value(bias));
            let mut xpad = vec![0.0; cin * (t + 2 * p)];
            for bi in 0..b {
                pad_rows(xv, bi, &pad_index, &mut xpad);
                for o in 0..cout {
                    let row = v.row_mut(bi, o);
                    row.iter_mut().for_each(|e| *e = bv.data[o]);
                    for ci in 0..cin {
                        let xr = &xpad[ci * (t + 2 * p)..(ci + 1) * (t + 2 * p)];
                        for kk in 0..k {
                            axpy(row, wv.data[(o * cin + ci) * k + kk], &xr[kk..kk + t]);
                        }
                    }
                }
            }
        }
        let rg = self.needs(&[x, w, bias]);
        Ok(self.push(
            v,
            rg,
            Some(Box::new(move |g, nodes, out| {
                let (xv, wv) = (&nodes[x.0].value, &nodes[w.0].value);
                let want_x = nodes[x.0].requires_grad;
                let want_w = nodes[w.0].requires_grad || nodes[bias.0].requires_grad;
                let tp = t + 2 * p;
                let mut gx = if want_x { Some(Tensor::zeros([b, cin, t])) } else { None };
                let mut gw = Tensor::zeros([cout, cin, k]);
                let mut gb = Tensor::zeros(nodes[bias.0].value.shape);
                let mut xpad = vec![0.0; cin * tp];
                let mut gpad = vec![0.0; cin * tp];
                for bi in 0..b {
                    if want_w {
                        pad_rows(xv, bi, &pad_index, &mut xpad);
                    }
                    gpad.iter_mut().for_each(|e| *e = 0.0);
                    for o in 0..cout {
                        let gr = g.row(bi, o);
                        if want_w {
                            gb.data[o] += gr.iter().sum::<f64>();
                        }
                        for ci in 0..cin {
                            for kk in 0..k {
                                let wi = (o * cin + ci) * k + kk;
                                if want_w {
                                    gw.data[wi] += dot(gr, &xpad[ci * tp + kk..ci * tp + kk + t]);
                                }
                                if want_x {
                                    axpy(&mut gpad[ci * tp + kk..ci * tp + kk + t], wv.data[wi], gr);
                                }
                            }
                        }
                    }
                    if let Some(gx) = gx.as_mut() {
                        for ci in 0..cin {
                            let dst = gx.row_mut(bi, ci);
                            for (j, &src) in pad_index.iter().enumerate() {
                                dst[src] += gpad[ci * tp + j];
                            }
                        }
                    }
                }
                if let Some(gx) = gx {
                    out.push((x.0, gx));
                }
                if want_w {
                    out.push((w.0, gw));
                    out.push((bias.0, gb));
                }
            })),
        ))
    }

    /// Transposed convolution with weight `[cin, cout, k]`: output length
    /// `(t - 1) * stride - 2 * pad + k`.
    pub fn conv_transpose1d(&mut self, x: Var, w: Var, bias: Var, stride: usize, pad: usize) -> Result<Var> {
        let [b, cin, t] = self.shape(x);
        let [wcin, cout, k] = self.shape(w);
        if wcin != cin || self.value(bias).len() != cout || stride == 0 || (t - 1) * stride + k < 2 * pad + 1 {
            return Err(Error::ShapeMismatch(alloc::format!(
                "conv_transpose1d input {:?} weight {:?}",
                self.shape(x),
                self.shape(w)
            )));
        }
        let tout = (t - 1) * stride + k - 2 * pad;
        // valid input range for each kernel tap: 0 <= i*stride + kk - pad < tout
        let ranges: Vec<(usize, usize)> = (0..k)
            .map(|kk| {
                let lo = pad.saturating_sub(kk).div_ceil(stride);
                let hi = ((tout + pad - kk) as isize - 1).div_euclid(stride as isize) + 1;
                (lo, (hi.max(0) as usize).min(t))
            })
            .collect();
        let mut v = Tensor::zeros([b, cout, tout]);
        {
            let (xv, wv, bv) = (self.value(x), self.value(w), self.value(bias));
            for bi in 0..b {
                for o in 0..cout {
                    v.row_mut(bi, o).iter_mut().for_each(|e| *e = bv.data[o]);
                }
                for ci in 0..cin {
                    let xr = xv.row(bi, ci);
                    for o in 0..cout {
                        let row = v.row_mut(bi, o);
                        for (kk, &(lo, hi)) in ranges.iter().enumerate() {
                            let wk = wv.data[(ci * cout + o) * k + kk];
                            for i in lo..hi {
                                row[i * stride + kk - pad] += wk * xr[i];
                            }
                        }
                    }
                }
            }
        }
        let rg = self.needs(&[x, w, bias]);
        Ok(self.push(
            v,
            rg,
            Some(Box::new(move |g, nodes, out| {
                let (xv, wv) = (&nodes[x.0].value, &nodes[w.0].value);
                let want_x = nodes[x.0].requires_grad;
                let want_w = nodes[w.0].requires_grad || nodes[bias.0].requires_grad;
                let mut gx = Tensor::zeros([b, cin, t]);
                let mut gw = Tensor::zeros([cin, cout, k]);
                let mut gb = Tensor::zeros(nodes[bias.0].value.shape);
                for bi in 0..b {
                    if want_w {
                        for o in 0..cout {
                            gb.data[o] += g.row(bi, o).iter().sum::<f64>();
                        }
                    }
                    for ci in 0..cin {
                        let xr = xv.row(bi, ci);
                        for o in 0..cout {
                            let gr = g.row(bi, o);
                            for (kk, &(lo, hi)) in ranges.iter().enumerate() {
                                let wi = (ci * cout + o) * k + kk;
                                if want_w {
                                    let mut acc = 0.0;
                                    for i in lo..hi {
                                        acc += xr[i] * gr[i * stride + kk - pad];
                                    }
                                    gw.data[wi] += acc;
                                }
                                if want_x {
                                    let wk = wv.data[wi];
                                    let gxr = &mut gx.data[(bi * cin + ci) * t..(bi * cin + ci + 1) * t];
                                    for i in lo..hi {
                                        gxr[i] += wk * gr[i * stride + kk - pad];
                                    }
                                }
                            }
                        }
                    }
                }
                if want_x {
                    out.push((x.0, gx));
                }
                if want_w {
                    out.push((w.0, gw));
                    out.push((bias.0, gb));
                }
            })),
        ))
    }

    /// Fused batch normalization, affine transform, feature-wise modulation
    /// and activation:
    /// `y = act((gamma * xhat + beta) * (1 + scale) + shift)`.
    ///
    /// `gamma`/`beta` are `[c, 1, 1]`; the optional `film = (scale, shift)`
    /// pair is `[b, c, 1]` each. Training mode normalizes with batch
    /// statistics and records them under `stats_key`; eval mode uses `stats`.
    #[allow(clippy::too_many_arguments)]
    pub fn norm_mod(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        film: Option<(Var, Var)>,
        act: Act,
        stats: &RunningStats,
        stats_key: ParamKey,
    ) -> Result<Var> {
        let [b, c, t] = self.shape(x);
        if self.value(gamma).len() != c || self.value(beta).len() != c || stats.mean.len() != c {
            return Err(Error::ShapeMismatch(alloc::format!("norm over {c} channels")));
        }
        if let Some((s, h)) = film {
            if self.shape(s) != [b, c, 1] || self.shape(h) != [b, c, 1] {
                return Err(Error::ShapeMismatch(alloc::format!(
                    "modulation {:?}/{:?} for input {:?}",
                    self.shape(s),
                    self.shape(h),
                    [b, c, t]
                )));
            }
        }
        let training = self.training;
        let n = (b * t) as f64;
        let mut mean = vec![0.0; c];
        let mut inv_std = vec![0.0; c];
        let mut batch_var = vec![0.0; c];
        {
            let xv = self.value(x);
            for ci in 0..c {
                let (m, var) = if training {
                    let m = (0..b).map(|bi| xv.row(bi, ci).iter().sum::<f64>()).sum::<f64>() / n;
                    let var = (0..b).map(|bi| xv.row(bi, ci).iter().map(|v| (v - m) * (v - m)).sum::<f64>()).sum::<f64>() / n;
                    batch_var[ci] = if n > 1.0 { var * n / (n - 1.0) } else { var };
                    (m, var)
                } else {
                    (stats.mean[ci], stats.var[ci])
                };
                mean[ci] = m;
                inv_std[ci] = 1.0 / sqrt(var + NORM_EPS);
            }
        }
        if training {
            self.stats_updates.push(StatsUpdate { key: stats_key, mean: mean.clone(), var: batch_var });
        }
        let mut xhat = Tensor::zeros([b, c, t]);
        let mut pre = Tensor::zeros([b, c, t]);
        let mut y = Tensor::zeros([b, c, t]);
        {
            let (xv, gv, bv) = (self.value(x), self.value(gamma), self.value(beta));
            let film_v = film.map(|(s, h)| (self.value(s).data.clone(), self.value(h).data.clone()));
            for bi in 0..b {
                for ci in 0..c {
                    let (sc, sh) = match &film_v {
                        Some((s, h)) => (1.0 + s[bi * c + ci], h[bi * c + ci]),
                        None => (1.0, 0.0),
                    };
                    let (g0, b0) = (gv.data[ci], bv.data[ci]);
                    let xr = xv.row(bi, ci);
                    let base = (bi * c + ci) * t;
                    for j in 0..t {
                        let xh = (xr[j] - mean[ci]) * inv_std[ci];
                        let v = (g0 * xh + b0) * sc + sh;
                        xhat.data[base + j] = xh;
                        pre.data[base + j] = v;
                        y.data[base + j] = act.forward(v);
                    }
                }
            }
        }
        let mut parents = vec![x, gamma, beta];
        if let Some((s, h)) = film {
            parents.push(s);
            parents.push(h);
        }
        let rg = self.needs(&parents);
        let out_id = self.nodes.len();
        Ok(self.push(
            y,
            rg,
            Some(Box::new(move |g, nodes, out| {
                let yv = &nodes[out_id].value;
                let (gv, bv) = (&nodes[gamma.0].value, &nodes[beta.0].value);
                let film_v = film.map(|(s, _)| &nodes[s.0].value);
                let mut dgamma = Tensor::zeros(gv.shape);
                let mut dbeta = Tensor::zeros(bv.shape);
                let mut dscale = Tensor::zeros([b, c, 1]);
                let mut dshift = Tensor::zeros([b, c, 1]);
                let mut dxhat = Tensor::zeros([b, c, t]);
                for bi in 0..b {
                    for ci in 0..c {
                        let sc = film_v.map_or(1.0, |s| 1.0 + s.data[bi * c + ci]);
                        let (g0, b0) = (gv.data[ci], bv.data[ci]);
                        let base = (bi * c + ci) * t;
                        let (mut ds, mut dh, mut dgm, mut dbt) = (0.0, 0.0, 0.0, 0.0);
                        for j in 0..t {
                            let dv = g.data[base + j] * act.derivative(pre.data[base + j], yv.data[base + j]);
                            let xh = xhat.data[base + j];
                            let u = g0 * xh + b0;
                            ds += dv * u;
                            dh += dv;
                            let du = dv * sc;
                            dgm += du * xh;
                            dbt += du;
                            dxhat.data[base + j] = du * g0;
                        }
                        dscale.data[bi * c + ci] = ds;
                        dshift.data[bi * c + ci] = dh;
                        dgamma.data[ci] += dgm;
                        dbeta.data[ci] += dbt;
                    }
                }
                if nodes[x.0].requires_grad {
                    let mut dx = Tensor::zeros([b, c, t]);
                    for ci in 0..c {
                        let (mut m1, mut m2) = (0.0, 0.0);
                        if training {
                            for bi in 0..b {
                                let base = (bi * c + ci) * t;
                                for j in 0..t {
                                    m1 += dxhat.data[base + j];
                                    m2 += dxhat.data[base + j] * xhat.data[base + j];
                                }
                            }
                            m1 /= n;
                            m2 /= n;
                        }
                        for bi in 0..b {
                            let base = (bi * c + ci) * t;
                            for j in 0..t {
                                dx.data[base + j] =
                                    inv_std[ci] * (dxhat.data[base + j] - m1 - xhat.data[base + j] * m2);
                            }
                        }
                    }
                    out.push((x.0, dx));
                }
                out.push((gamma.0, dgamma));
                out.push((beta.0, dbeta));
                if let Some((s, h)) = film {
                    out.push((s.0, dscale));
                    out.push((h.0, dshift));
                }
            })),
        ))
    }

    // ---- losses --------------------------------------------------------------

    /// Mean squared error against a constant target of the same shape.
    pub fn mse(&mut self, x: Var, target: &Tensor) -> Result<Var> {
        if self.shape(x) != target.shape {
            return Err(Error::ShapeMismatch(alloc::format!("mse {:?} vs {:?}", self.shape(x), target.shape)));
        }
        let n = target.len() as f64;
        let diff: Vec<f64> = self.value(x).data.iter().zip(&target.data).map(|(a, b)| a - b).collect();
        let v = diff.iter().map(|d| d * d).sum::<f64>() / n;
        let shape = target.shape;
        let rg = self.needs(&[x]);
        Ok(self.push(
            Tensor::scalar(v),
            rg,
            Some(Box::new(move |g, _, out| {
                let s = 2.0 * g.item() / n;
                out.push((x.0, Tensor { shape, data: diff.iter().map(|d| s * d).collect() }));
            })),
        ))
    }

    /// Batch mean of the multi-scale spectral loss between each `[b, 1, t]`
    /// row of `x_hat` and the matching constant target row.
    pub fn spectral_loss(&mut self, loss: &SpectralLoss, targets: &[&[f64]], x_hat: Var) -> Result<Var> {
        let [b, c, t] = self.shape(x_hat);
        if c != 1 || targets.len() != b {
            return Err(Error::ShapeMismatch(alloc::format!("spectral loss over {:?} with {} targets", [b, c, t], targets.len())));
        }
        let mut total = 0.0;
        let mut grad = Tensor::zeros([b, 1, t]);
        let want = self.requires_grad(x_hat);
        for (bi, target) in targets.iter().enumerate() {
            let pred = self.value(x_hat).row(bi, 0);
            let (v, gr) = if want { loss.value_and_grad(target, pred)? } else { (loss.value(target, pred)?, Vec::new()) };
            total += v;
            if want {
                grad.row_mut(bi, 0).copy_from_slice(&gr);
            }
        }
        let inv_b = 1.0 / b as f64;
        Ok(self.push(
            Tensor::scalar(total * inv_b),
            want,
            Some(Box::new(move |g, _, out| {
                let s = g.item() * inv_b;
                out.push((x_hat.0, Tensor { shape: grad.shape, data: grad.data.iter().map(|e| s * e).collect() }));
            })),
        ))
    }
}

fn pad_rows(x: &Tensor, b: usize, index: &[usize], out: &mut [f64]) {
    let tp = index.len();
    for ci in 0..x.shape[1] {
        let src = x.row(b, ci);
        for (o, &i) in out[ci * tp..(ci + 1) * tp].iter_mut().zip(index) {
            *o = src[i];
        }
    }
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0; 4];
    let chunks = a.len() / 4;
    for i in 0..chunks {
        for l in 0..4 {
            acc[l] += a[4 * i + l] * b[4 * i + l];
        }
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for i in 4 * chunks..a.len() {
        s += a[i] * b[i];
    }
    s
}

#[inline]
pub(crate) fn axpy(y: &mut [f64], a: f64, x: &[f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}
