use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use super::Waveform;
use crate::math::{bessel_i0, gcd, round, sin, sqrt, PI};
use crate::{Error, Result};

/// Kaiser-windowed sinc resampler settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ResamplerConfig {
    pub zero_crossings: usize,
    pub kaiser_beta: f64,
    /// Cutoff as a fraction of the lower of the two Nyquist frequencies.
    pub rolloff: f64,
}

impl Default for ResamplerConfig {
    fn default() -> Self {
        Self { zero_crossings: 64, kaiser_beta: 12.9846, rolloff: 0.95 }
    }
}

impl ResamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.zero_crossings == 0 {
            return Err(Error::param("dsp.resampler.zero_crossings", "must be positive"));
        }
        if !(self.kaiser_beta >= 0.0) {
            return Err(Error::param("dsp.resampler.kaiser_beta", "must be non-negative"));
        }
        if !(self.rolloff > 0.0 && self.rolloff <= 1.0) {
            return Err(Error::param("dsp.resampler.rolloff", "must be in (0, 1]"));
        }
        Ok(())
    }
}

/// Resamples with the default Kaiser-sinc settings.
pub fn resample(w: &Waveform, target_rate: u32) -> Result<Waveform> {
    resample_with(w, target_rate, &ResamplerConfig::default())
}

/// Polyphase Kaiser-windowed sinc resampling for any rational rate ratio.
/// Output length is `round(len * target / source)`.
pub fn resample_with(w: &Waveform, target_rate: u32, cfg: &ResamplerConfig) -> Result<Waveform> {
    if target_rate == 0 {
        return Err(Error::param("target_rate", "must be positive"));
    }
    cfg.validate()?;
    let source = w.sample_rate() as u64;
    let target = target_rate as u64;
    if source == target {
        return Ok(w.clone());
    }
    let g = gcd(source, target);
    let up = (target / g) as usize;
    let down = (source / g) as usize;
    let x = w.samples();
    let out_len = (round(x.len() as f64 * target as f64 / source as f64) as usize).max(1);

    // cutoff in cycles per input sample, relative to the input Nyquist
    let cutoff = cfg.rolloff * (target as f64 / source as f64).min(1.0);
    let half_width = cfg.zero_crossings as f64 / cutoff;
    let taps = half_width.ceil() as isize;
    let i0_beta = bessel_i0(cfg.kaiser_beta);
    let kernel = |tau: f64| -> f64 {
        let r = tau / half_width;
        if r.abs() >= 1.0 {
            return 0.0;
        }
        let window = bessel_i0(cfg.kaiser_beta * sqrt(1.0 - r * r)) / i0_beta;
        let arg = cutoff * tau;
        let sinc = if arg == 0.0 { 1.0 } else { sin(PI * arg) / (PI * arg) };
        cutoff * sinc * window
    };

    // one tap table per output phase; tap j of phase p weights input sample base + j - taps + 1
    let span = (2 * taps) as usize;
    let mut table = vec![0.0; up * span];
    for p in 0..up {
        let frac = p as f64 / up as f64;
        for j in 0..span {
            let offset = j as isize - taps + 1;
            table[p * span + j] = kernel(frac - offset as f64);
        }
    }

    let mut out = Vec::with_capacity(out_len);
    for n in 0..out_len {
        let pos = n * down;
        let base = (pos / up) as isize;
        let phase = pos % up;
        let row = &table[phase * span..(phase + 1) * span];
        let first = base - taps + 1;
        let lo = (-first).max(0) as usize;
        let hi = ((x.len() as isize - first).min(span as isize)).max(0) as usize;
        let mut acc = 0.0;
        for j in lo..hi {
            acc += row[j] * x[(first + j as isize) as usize];
        }
        out.push(acc);
    }
    Waveform::new(out, target_rate)
}
