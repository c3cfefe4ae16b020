//! Parameter storage and the layer building blocks shared by the networks.

use alloc::string::String;
use alloc::vec::Vec;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::autograd::{Act, ParamKey, RunningStats, StatsUpdate, Tape, Tensor, Var};
use crate::math::sqrt;
use crate::{Error, Result};

/// The parameters and normalization statistics of one module.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSet {
    module: u8,
    trainable: bool,
    names: Vec<String>,
    tensors: Vec<Tensor>,
    stats: Vec<RunningStats>,
}

impl ParamSet {
    pub fn new(module: u8) -> Self {
        Self { module, trainable: true, names: Vec::new(), tensors: Vec::new(), stats: Vec::new() }
    }

    pub fn module(&self) -> u8 {
        self.module
    }

    pub fn trainable(&self) -> bool {
        self.trainable
    }

    /// Frozen parameters enter the tape as constants and never receive
    /// gradients.
    pub fn set_trainable(&mut self, trainable: bool) {
        self.trainable = trainable;
    }

    pub fn key(&self, index: usize) -> ParamKey {
        ParamKey { module: self.module, index: index as u32 }
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor) -> usize {
        self.names.push(name.into());
        self.tensors.push(tensor);
        self.tensors.len() - 1
    }

    pub fn add_stats(&mut self, channels: usize) -> usize {
        self.stats.push(RunningStats::new(channels));
        self.stats.len() - 1
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn stats(&self) -> &[RunningStats] {
        &self.stats
    }

    /// Number of scalar parameters.
    pub fn count(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Puts parameter `index` on the tape.
    pub fn var(&self, tape: &mut Tape, index: usize) -> Var {
        if self.trainable {
            tape.param(self.key(index), &self.tensors[index])
        } else {
            tape.constant(self.tensors[index].clone())
        }
    }

    /// Folds the batch statistics recorded for this module into its running
    /// statistics.
    pub fn apply_stats(&mut self, updates: &[StatsUpdate]) {
        for u in updates.iter().filter(|u| u.key.module == self.module) {
            self.stats[u.key.index as usize].apply(u);
        }
    }

    /// Parameters followed by running means and variances, in a fixed order.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.flat_len());
        for t in &self.tensors {
            out.extend_from_slice(&t.data);
        }
        for s in &self.stats {
            out.extend_from_slice(&s.mean);
            out.extend_from_slice(&s.var);
        }
        out
    }

    pub fn flat_len(&self) -> usize {
        self.count() + self.stats.iter().map(|s| 2 * s.mean.len()).sum::<usize>()
    }

    /// Inverse of [`ParamSet::flatten`] for a set of identical structure.
    pub fn load_flat(&mut self, values: &[f64]) -> Result<()> {
        if values.len() != self.flat_len() {
            return Err(Error::Checkpoint(alloc::format!(
                "module {} expects {} values, found {}",
                self.module,
                self.flat_len(),
                values.len()
            )));
        }
        let mut pos = 0;
        let mut take = |dst: &mut [f64]| {
            dst.copy_from_slice(&values[pos..pos + dst.len()]);
            pos += dst.len();
        };
        for t in &mut self.tensors {
            take(&mut t.data);
        }
        for s in &mut self.stats {
            take(&mut s.mean);
            take(&mut s.var);
        }
        Ok(())
    }

    /// SHA-256 over the little-endian bytes of every parameter and statistic.
    pub fn checksum(&self) -> [u8; 32] {
        let mut h = Sha256::new();
        for v in self.flatten() {
            h.update(v.to_le_bytes());
        }
        h.finalize().into()
    }
}

fn uniform(rng: &mut ChaCha8Rng, shape: [usize; 3], bound: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor { shape, data: (0..n).map(|_| rng.random_range(-bound..bound)).collect() }
}

/// Stride-1, length-preserving convolution.
#[derive(Debug, Clone, Copy)]
pub struct Conv {
    w: usize,
    b: usize,
}

impl Conv {
    pub fn new(ps: &mut ParamSet, rng: &mut ChaCha8Rng, name: &str, cin: usize, cout: usize, k: usize) -> Self {
        Self::with_gain(ps, rng, name, cin, cout, k, 1.0)
    }

    /// Uniform init with bound `gain * sqrt(3 / fan_in)`.
    pub fn with_gain(ps: &mut ParamSet, rng: &mut ChaCha8Rng, name: &str, cin: usize, cout: usize, k: usize, gain: f64) -> Self {
        let bound = gain * sqrt(3.0 / (cin * k) as f64);
        let w = ps.add(alloc::format!("{name}.weight"), uniform(rng, [cout, cin, k], bound));
        let b = ps.add(alloc::format!("{name}.bias"), Tensor::zeros([cout, 1, 1]));
        Self { w, b }
    }

    pub fn forward(&self, ps: &ParamSet, tape: &mut Tape, x: Var) -> Result<Var> {
        let (w, b) = (ps.var(tape, self.w), ps.var(tape, self.b));
        tape.conv1d(x, w, b)
    }
}

/// Transposed convolution that multiplies the time axis by `stride`.
#[derive(Debug, Clone, Copy)]
pub struct Upsample {
    w: usize,
    b: usize,
    stride: usize,
    pad: usize,
}

impl Upsample {
    /// Kernel `2 * stride`, padding `stride / 2`: output length is exactly
    /// `stride * input`.
    pub fn new(ps: &mut ParamSet, rng: &mut ChaCha8Rng, name: &str, cin: usize, cout: usize, stride: usize) -> Self {
        let k = 2 * stride;
        let bound = sqrt(3.0 / (cin * 2) as f64);
        let w = ps.add(alloc::format!("{name}.weight"), uniform(rng, [cin, cout, k], bound));
        let b = ps.add(alloc::format!("{name}.bias"), Tensor::zeros([cout, 1, 1]));
        Self { w, b, stride, pad: stride / 2 }
    }

    pub fn forward(&self, ps: &ParamSet, tape: &mut Tape, x: Var) -> Result<Var> {
        let (w, b) = (ps.var(tape, self.w), ps.var(tape, self.b));
        tape.conv_transpose1d(x, w, b, self.stride, self.pad)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct Linear {
    w: usize,
    b: usize,
}

impl Linear {
    pub fn new(ps: &mut ParamSet, rng: &mut ChaCha8Rng, name: &str, cin: usize, cout: usize, gain: f64) -> Self {
        let bound = gain * sqrt(3.0 / cin as f64);
        let w = ps.add(alloc::format!("{name}.weight"), uniform(rng, [cout, cin, 1], bound));
        let b = ps.add(alloc::format!("{name}.bias"), Tensor::zeros([cout, 1, 1]));
        Self { w, b }
    }

    pub fn forward(&self, ps: &ParamSet, tape: &mut Tape, x: Var) -> Result<Var> {
        let (w, b) = (ps.var(tape, self.w), ps.var(tape, self.b));
        tape.linear(x, w, b)
    }
}

/// Batch normalization with a learned affine transform.
#[derive(Debug, Clone, Copy)]
pub struct Norm {
    gamma: usize,
    beta: usize,
    stats: usize,
}

impl Norm {
    pub fn new(ps: &mut ParamSet, name: &str, channels: usize) -> Self {
        let gamma = ps.add(alloc::format!("{name}.gamma"), Tensor::full([channels, 1, 1], 1.0));
        let beta = ps.add(alloc::format!("{name}.beta"), Tensor::zeros([channels, 1, 1]));
        let stats = ps.add_stats(channels);
        Self { gamma, beta, stats }
    }

    pub fn forward(&self, ps: &ParamSet, tape: &mut Tape, x: Var, film: Option<(Var, Var)>, act: Act) -> Result<Var> {
        let (g, b) = (ps.var(tape, self.gamma), ps.var(tape, self.beta));
        let key = ParamKey { module: ps.module(), index: self.stats as u32 };
        tape.norm_mod(x, g, b, film, act, &ps.stats()[self.stats], key)
    }
}

/// `x + norm(conv(act(norm(conv(x)))))`, with optional feature-wise
/// modulation after both normalizations.
#[derive(Debug, Clone, Copy)]
pub struct ResBlock {
    conv1: Conv,
    norm1: Norm,
    conv2: Conv,
    norm2: Norm,
}

impl ResBlock {
    pub fn new(ps: &mut ParamSet, rng: &mut ChaCha8Rng, name: &str, channels: usize, k: usize) -> Self {
        Self {
            conv1: Conv::new(ps, rng, &alloc::format!("{name}.conv1"), channels, channels, k),
            norm1: Norm::new(ps, &alloc::format!("{name}.norm1"), channels),
            conv2: Conv::new(ps, rng, &alloc::format!("{name}.conv2"), channels, channels, k),
            norm2: Norm::new(ps, &alloc::format!("{name}.norm2"), channels),
        }
    }

    pub fn forward(&self, ps: &ParamSet, tape: &mut Tape, x: Var, film: Option<(Var, Var)>) -> Result<Var> {
        let h = self.conv1.forward(ps, tape, x)?;
        let h = self.norm1.forward(ps, tape, h, film, Act::Silu)?;
        let h = self.conv2.forward(ps, tape, h)?;
        let h = self.norm2.forward(ps, tape, h, film, Act::None)?;
        tape.add(x, h)
    }
}
