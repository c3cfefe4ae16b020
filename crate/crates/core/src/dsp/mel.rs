use alloc::vec;
use alloc::vec::Vec;

use super::{require_rate, DspConfig, Spectrogram, Stft, Waveform};
use crate::math::{ln, log10, pow};
use crate::{Error, Result};

/// HTK mel scale.
pub fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * log10(1.0 + hz / 700.0)
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (pow(10.0, mel / 2595.0) - 1.0)
}

/// Triangular, area-normalized mel filters stored sparsely per band.
#[derive(Debug, Clone)]
pub struct MelFilterbank {
    n_mels: usize,
    bins: usize,
    rows: Vec<(usize, Vec<f64>)>,
}

impl MelFilterbank {
    pub fn new(n_mels: usize, n_fft: usize, sample_rate: u32, f_min: f64, f_max: f64) -> Self {
        let bins = n_fft / 2 + 1;
        let lo = hz_to_mel(f_min);
        let hi = hz_to_mel(f_max);
        let edges: Vec<f64> = (0..n_mels + 2)
            .map(|i| mel_to_hz(lo + (hi - lo) * i as f64 / (n_mels + 1) as f64))
            .collect();
        let bin_hz = |k: usize| k as f64 * sample_rate as f64 / n_fft as f64;
        let rows = (0..n_mels)
            .map(|m| {
                let (left, centre, right) = (edges[m], edges[m + 1], edges[m + 2]);
                let norm = 2.0 / (right - left);
                let mut start = None;
                let mut weights = Vec::new();
                for k in 0..bins {
                    let f = bin_hz(k);
                    let w = if f > left && f < right {
                        if f <= centre {
                            (f - left) / (centre - left)
                        } else {
                            (right - f) / (right - centre)
                        }
                    } else {
                        0.0
                    };
                    if w > 0.0 {
                        if start.is_none() {
                            start = Some(k);
                        }
                        weights.push(w * norm);
                    } else if start.is_some() {
                        break;
                    }
                }
                (start.unwrap_or(0), weights)
            })
            .collect();
        Self { n_mels, bins, rows }
    }

    pub fn n_mels(&self) -> usize {
        self.n_mels
    }

    pub fn bins(&self) -> usize {
        self.bins
    }

    /// `(first bin, weights)` of band `m`.
    pub fn row(&self, m: usize) -> (usize, &[f64]) {
        (self.rows[m].0, &self.rows[m].1)
    }

    pub fn apply(&self, spectrum: &[f64], out: &mut [f64]) {
        for (o, (start, w)) in out.iter_mut().zip(&self.rows) {
            *o = w.iter().zip(&spectrum[*start..]).map(|(a, b)| a * b).sum();
        }
    }

    /// Transpose product: `out[k] = sum_m F[m, k] * mel[m]`.
    pub fn apply_transpose(&self, mel: &[f64], out: &mut [f64]) {
        out.iter_mut().for_each(|v| *v = 0.0);
        for (v, (start, w)) in mel.iter().zip(&self.rows) {
            for (o, wk) in out[*start..].iter_mut().zip(w) {
                *o += wk * v;
            }
        }
    }

    /// Dense `n_mels x bins` matrix, mostly for tests.
    pub fn dense(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.n_mels * self.bins];
        for (m, (start, w)) in self.rows.iter().enumerate() {
            out[m * self.bins + start..m * self.bins + start + w.len()].copy_from_slice(w);
        }
        out
    }
}

/// Mel spectrogram: frames-major `frames x n_mels`, linear magnitudes clamped
/// from below at the floor.
#[derive(Debug, Clone, PartialEq)]
pub struct MelSpectrogram {
    pub frames: usize,
    pub n_mels: usize,
    pub frame_size: usize,
    pub hop: usize,
    pub sample_rate: u32,
    pub floor: f64,
    pub values: Vec<f64>,
}

impl MelSpectrogram {
    pub fn frame(&self, t: usize) -> &[f64] {
        &self.values[t * self.n_mels..(t + 1) * self.n_mels]
    }

    /// Natural log of every value, frames-major.
    pub fn log_values(&self) -> Vec<f64> {
        self.values.iter().map(|&v| ln(v)).collect()
    }

    /// Builds a mel spectrogram from log values (frames-major), applying the floor.
    pub fn from_log(log_values: &[f64], frames: usize, template: &MelSpectrogram) -> Result<Self> {
        if log_values.len() != frames * template.n_mels {
            return Err(Error::ShapeMismatch(alloc::format!(
                "{} log values for {frames} frames of {} bands",
                log_values.len(),
                template.n_mels
            )));
        }
        Ok(Self {
            frames,
            values: log_values.iter().map(|&v| crate::math::exp(v).max(template.floor)).collect(),
            ..template.clone()
        })
    }
}

/// Reusable mel analysis (STFT plan plus filterbank).
#[derive(Debug, Clone)]
pub struct MelAnalyzer {
    config: DspConfig,
    stft: Stft,
    filterbank: MelFilterbank,
}

impl MelAnalyzer {
    pub fn new(config: &DspConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config: config.clone(),
            stft: Stft::new(config.frame_size, config.hop, super::WindowKind::Hann)?,
            filterbank: MelFilterbank::new(config.n_mels, config.frame_size, config.sample_rate, config.f_min, config.f_max),
        })
    }

    pub fn config(&self) -> &DspConfig {
        &self.config
    }

    pub fn stft(&self) -> &Stft {
        &self.stft
    }

    pub fn filterbank(&self) -> &MelFilterbank {
        &self.filterbank
    }

    pub fn frames_for(&self, len: usize) -> usize {
        self.stft.frames_for(len)
    }

    pub fn project(&self, spec: &Spectrogram) -> MelSpectrogram {
        let n_mels = self.config.n_mels;
        let mut values = vec![0.0; spec.frames * n_mels];
        for t in 0..spec.frames {
            self.filterbank.apply(spec.frame(t), &mut values[t * n_mels..(t + 1) * n_mels]);
        }
        let floor = self.config.floor;
        values.iter_mut().for_each(|v| *v = v.max(floor));
        MelSpectrogram {
            frames: spec.frames,
            n_mels,
            frame_size: self.config.frame_size,
            hop: self.config.hop,
            sample_rate: self.config.sample_rate,
            floor,
            values,
        }
    }

    pub fn analyze(&self, w: &Waveform) -> Result<MelSpectrogram> {
        require_rate(w, self.config.sample_rate)?;
        Ok(self.project(&self.stft.magnitude(w.samples())?))
    }

    /// Mel spectrogram of raw samples at the configured rate.
    pub fn analyze_samples(&self, x: &[f64]) -> Result<MelSpectrogram> {
        Ok(self.project(&self.stft.magnitude(x)?))
    }

    /// An all-floor spectrogram with `frames` frames.
    pub fn floor_spectrogram(&self, frames: usize) -> MelSpectrogram {
        MelSpectrogram {
            frames,
            n_mels: self.config.n_mels,
            frame_size: self.config.frame_size,
            hop: self.config.hop,
            sample_rate: self.config.sample_rate,
            floor: self.config.floor,
            values: vec![self.config.floor; frames * self.config.n_mels],
        }
    }
}

/// 80-band mel spectrogram with the default analysis settings.
pub fn mel_spectrogram(w: &Waveform) -> Result<MelSpectrogram> {
    MelAnalyzer::new(&DspConfig::default())?.analyze(w)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_waveform_is_all_floor() {
        let m = mel_spectrogram(&Waveform::silence(22050, 22050).unwrap()).unwrap();
        assert_eq!(m.frames, 87);
        assert_eq!(m.n_mels, 80);
        assert!(m.values.iter().all(|&v| v == 1e-5));
    }

    #[test]
    fn white_noise_fills_every_band() {
        for seed in 0..10 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = (0..8000).map(|_| rng.random_range(-0.5..0.5)).collect();
            let m = mel_spectrogram(&Waveform::new(x, 22050).unwrap()).unwrap();
            // every band of every frame strictly above the floor
            assert!(m.values.iter().all(|&v| v > 1e-5), "seed {seed}");
        }
    }

    #[test]
    fn filters_have_unit_area_in_hz() {
        let cfg = DspConfig::default();
        let fb = MelFilterbank::new(80, 1024, 22050, 0.0, 11025.0);
        let bin_hz = 22050.0 / 1024.0;
        // wide high bands integrate to ~1 over Hz with area normalization
        for m in 40..80 {
            let (_, w) = fb.row(m);
            let area: f64 = w.iter().sum::<f64>() * bin_hz;
            assert!((area - 1.0).abs() < 0.05, "band {m}: {area}");
        }
        assert_eq!(fb.bins(), cfg.frame_size / 2 + 1);
    }

    #[test]
    fn rejects_wrong_rate() {
        let w = Waveform::silence(4000, 16000).unwrap();
        assert!(mel_spectrogram(&w).is_err());
    }

    #[test]
    fn transpose_matches_dense() {
        let fb = MelFilterbank::new(80, 1024, 22050, 0.0, 11025.0);
        let dense = fb.dense();
        let mel: Vec<f64> = (0..80).map(|i| (i as f64 * 0.37).sin()).collect();
        let mut out = vec![0.0; 513];
        fb.apply_transpose(&mel, &mut out);
        for k in 0..513 {
            let expect: f64 = (0..80).map(|m| dense[m * 513 + k] * mel[m]).sum();
            assert!((out[k] - expect).abs() < 1e-12);
        }
    }

    proptest::proptest! {
        #[test]
        fn frame_count_follows_center_padding(len in 600usize..40_000) {
            let w = Waveform::new(vec![0.01; len], 22050).unwrap();
            let m = mel_spectrogram(&w).unwrap();
            proptest::prop_assert_eq!(m.frames, len / 256 + 1);
        }
    }
}
