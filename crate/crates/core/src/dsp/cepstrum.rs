use alloc::vec;
use alloc::vec::Vec;

use super::MelSpectrogram;
use crate::math::{cos, ln, sqrt, PI};
use crate::{Error, Result};

/// Highest retained cepstral index; coefficients c0..=c24 are kept.
pub const CEPSTRUM_ORDER: usize = 24;

/// Per-frame mel cepstra, frames-major `frames x (order + 1)`.
#[derive(Debug, Clone, PartialEq)]
pub struct MelCepstrum {
    pub frames: usize,
    /// Dimension excluding c0.
    pub order: usize,
    pub coefficients: Vec<f64>,
}

impl MelCepstrum {
    pub fn frame(&self, t: usize) -> &[f64] {
        let n = self.order + 1;
        &self.coefficients[t * n..(t + 1) * n]
    }
}

fn dct_basis(n_in: usize, n_out: usize) -> Vec<f64> {
    let mut basis = vec![0.0; n_in * n_out];
    for k in 0..n_out {
        let scale = if k == 0 { sqrt(1.0 / n_in as f64) } else { sqrt(2.0 / n_in as f64) };
        for n in 0..n_in {
            basis[k * n_in + n] = scale * cos(PI * k as f64 * (n as f64 + 0.5) / n_in as f64);
        }
    }
    basis
}

/// Orthonormal DCT-II truncated to the first `n_out` coefficients.
pub fn dct_ii_orthonormal(x: &[f64], n_out: usize) -> Vec<f64> {
    let basis = dct_basis(x.len(), n_out);
    (0..n_out).map(|k| basis[k * x.len()..(k + 1) * x.len()].iter().zip(x).map(|(b, v)| b * v).sum()).collect()
}

/// Inverse of [`dct_ii_orthonormal`] when all coefficients are retained;
/// missing trailing coefficients are treated as zero.
pub fn dct_iii_orthonormal(coeffs: &[f64], n: usize) -> Vec<f64> {
    let basis = dct_basis(n, coeffs.len());
    (0..n).map(|i| coeffs.iter().enumerate().map(|(k, c)| c * basis[k * n + i]).sum()).collect()
}

/// Mel cepstrum: orthonormal DCT-II of each frame's log-mel values, keeping
/// c0..=c24.
pub fn mel_cepstrum(m: &MelSpectrogram) -> Result<MelCepstrum> {
    mel_cepstrum_order(m, CEPSTRUM_ORDER)
}

pub fn mel_cepstrum_order(m: &MelSpectrogram, order: usize) -> Result<MelCepstrum> {
    if m.n_mels == 0 || m.values.len() != m.frames * m.n_mels {
        return Err(Error::ShapeMismatch("mel spectrogram values do not match frames x bands".into()));
    }
    if order + 1 > m.n_mels {
        return Err(Error::param("cepstrum order", "exceeds the number of mel bands"));
    }
    if m.values.iter().any(|v| !(*v > 0.0) || !v.is_finite()) {
        return Err(Error::InvalidParameter { name: "mel values", reason: "must be positive and finite".into() });
    }
    let n_out = order + 1;
    let basis = dct_basis(m.n_mels, n_out);
    let mut coefficients = vec![0.0; m.frames * n_out];
    let mut logs = vec![0.0; m.n_mels];
    for t in 0..m.frames {
        for (l, v) in logs.iter_mut().zip(m.frame(t)) {
            *l = ln(*v);
        }
        for k in 0..n_out {
            coefficients[t * n_out + k] =
                basis[k * m.n_mels..(k + 1) * m.n_mels].iter().zip(&logs).map(|(b, v)| b * v).sum();
        }
    }
    Ok(MelCepstrum { frames: m.frames, order, coefficients })
}
