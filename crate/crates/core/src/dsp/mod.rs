//! Deterministic signal-processing primitives: waveform and spectrogram value
//! types, STFT, mel analysis, mel cepstra, resampling and the reference
//! mel-to-waveform inverter.

mod cepstrum;
mod invert;
mod mel;
mod resample;
mod stft;

use alloc::format;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

pub use cepstrum::{dct_ii_orthonormal, dct_iii_orthonormal, mel_cepstrum, MelCepstrum, CEPSTRUM_ORDER};
pub use invert::{griffin_lim, mel_invert_reference, mel_invert_with, nnls_lift, GriffinLim};
pub use mel::{hz_to_mel, mel_spectrogram, mel_to_hz, MelAnalyzer, MelFilterbank, MelSpectrogram};
pub use resample::{resample, resample_with, ResamplerConfig};
pub use stft::{stft_magnitude, stft_magnitude_with, ComplexSpectrogram, Spectrogram, Stft, WindowKind};

use crate::{Error, Result, SAMPLE_RATE};

/// Analysis parameters shared by every feature path.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DspConfig {
    pub sample_rate: u32,
    pub frame_size: usize,
    pub hop: usize,
    pub n_mels: usize,
    pub f_min: f64,
    pub f_max: f64,
    /// Clamp applied to mel values before any logarithm.
    pub floor: f64,
    pub resampler: ResamplerConfig,
}

impl Default for DspConfig {
    fn default() -> Self {
        Self {
            sample_rate: SAMPLE_RATE,
            frame_size: 1024,
            hop: 256,
            n_mels: 80,
            f_min: 0.0,
            f_max: SAMPLE_RATE as f64 / 2.0,
            floor: 1e-5,
            resampler: ResamplerConfig::default(),
        }
    }
}

impl DspConfig {
    pub fn validate(&self) -> Result<()> {
        if self.sample_rate == 0 {
            return Err(Error::param("dsp.sample_rate", "must be positive"));
        }
        if !self.frame_size.is_power_of_two() || self.frame_size < 64 {
            return Err(Error::param("dsp.frame_size", "must be a power of two >= 64"));
        }
        if self.hop == 0 || self.hop > self.frame_size {
            return Err(Error::param("dsp.hop", "must be in 1..=frame_size"));
        }
        if self.n_mels == 0 {
            return Err(Error::param("dsp.n_mels", "must be positive"));
        }
        if !(self.f_min >= 0.0 && self.f_max > self.f_min && self.f_max <= self.sample_rate as f64 / 2.0) {
            return Err(Error::param("dsp.f_max", "need 0 <= f_min < f_max <= nyquist"));
        }
        if !(self.floor > 0.0) {
            return Err(Error::param("dsp.floor", "must be positive"));
        }
        self.resampler.validate()
    }
}

/// Mono audio at a fixed sample rate.
#[derive(Debug, Clone, PartialEq)]
pub struct Waveform {
    samples: Vec<f64>,
    sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::InvalidWaveform("zero-length audio".into()));
        }
        if sample_rate == 0 {
            return Err(Error::InvalidWaveform("sample rate must be positive".into()));
        }
        if let Some(i) = samples.iter().position(|s| !s.is_finite()) {
            return Err(Error::InvalidWaveform(format!("non-finite sample at index {i}")));
        }
        Ok(Self { samples, sample_rate })
    }

    /// All-zero waveform.
    pub fn silence(len: usize, sample_rate: u32) -> Result<Self> {
        Self::new(alloc::vec![0.0; len], sample_rate)
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn into_samples(self) -> Vec<f64> {
        self.samples
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_seconds(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    pub fn rms(&self) -> f64 {
        rms(&self.samples)
    }

    pub fn peak(&self) -> f64 {
        self.samples.iter().fold(0.0f64, |m, s| m.max(s.abs()))
    }

    /// Same samples, scaled so that the peak magnitude does not exceed one.
    pub fn normalized(&self) -> Self {
        let peak = self.peak();
        if peak <= 1.0 {
            return self.clone();
        }
        let samples = self.samples.iter().map(|s| s / peak).collect();
        Self { samples, sample_rate: self.sample_rate }
    }

    /// Truncates or zero-pads at the end to exactly `len` samples.
    pub fn fit_length(&self, len: usize) -> Result<Self> {
        let mut samples = self.samples.clone();
        samples.resize(len, 0.0);
        Self::new(samples, self.sample_rate)
    }

    /// Removes samples symmetrically (front first) until `len` remain, or pads
    /// zeros symmetrically when shorter.
    pub fn center_fit(&self, len: usize) -> Result<Self> {
        let cur = self.samples.len();
        if cur >= len {
            let start = (cur - len) / 2;
            Self::new(self.samples[start..start + len].to_vec(), self.sample_rate)
        } else {
            let front = (len - cur) / 2;
            let mut samples = alloc::vec![0.0; len];
            samples[front..front + cur].copy_from_slice(&self.samples);
            Self::new(samples, self.sample_rate)
        }
    }

    pub fn slice(&self, start: usize, len: usize) -> Result<Self> {
        let end = (start + len).min(self.samples.len());
        Self::new(self.samples[start.min(end)..end].to_vec(), self.sample_rate)
    }
}

pub fn rms(x: &[f64]) -> f64 {
    if x.is_empty() {
        return 0.0;
    }
    crate::math::sqrt(x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64)
}

pub(crate) fn require_rate(w: &Waveform, rate: u32) -> Result<()> {
    if w.sample_rate() != rate {
        return Err(Error::InvalidWaveform(format!(
            "expected sample rate {rate} Hz, got {} Hz",
            w.sample_rate()
        )));
    }
    Ok(())
}
