use alloc::vec;
use alloc::vec::Vec;

use num_complex::Complex64;

use super::Waveform;
use crate::fft::RealFft;
use crate::math::{cos, sqrt, PI};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WindowKind {
    /// Periodic Hann window.
    Hann,
    Rectangular,
}

impl WindowKind {
    pub fn build(self, len: usize) -> Vec<f64> {
        match self {
            WindowKind::Hann => (0..len).map(|n| 0.5 - 0.5 * cos(2.0 * PI * n as f64 / len as f64)).collect(),
            WindowKind::Rectangular => vec![1.0; len],
        }
    }
}

/// Magnitude spectrogram, frames-major (`frames x bins`).
#[derive(Debug, Clone, PartialEq)]
pub struct Spectrogram {
    pub frames: usize,
    pub bins: usize,
    pub window_length: usize,
    pub hop_length: usize,
    pub magnitudes: Vec<f64>,
}

impl Spectrogram {
    pub fn frame(&self, t: usize) -> &[f64] {
        &self.magnitudes[t * self.bins..(t + 1) * self.bins]
    }
}

/// Complex STFT, frames-major.
#[derive(Debug, Clone)]
pub struct ComplexSpectrogram {
    pub frames: usize,
    pub bins: usize,
    pub data: Vec<Complex64>,
}

/// STFT with center reflection padding: frame `t` is centred on sample
/// `t * hop`, giving `len / hop + 1` frames.
#[derive(Debug, Clone)]
pub struct Stft {
    window_len: usize,
    hop: usize,
    window: Vec<f64>,
    fft: RealFft,
}

impl Stft {
    pub fn new(window_len: usize, hop: usize, kind: WindowKind) -> Result<Self> {
        if !window_len.is_power_of_two() || !(2..=1 << 16).contains(&window_len) {
            return Err(Error::param("window_length", alloc::format!("{window_len} is not a power of two")));
        }
        if hop == 0 || hop > window_len {
            return Err(Error::param("hop", alloc::format!("{hop} must be in 1..={window_len}")));
        }
        Ok(Self { window_len, hop, window: kind.build(window_len), fft: RealFft::new(window_len)? })
    }

    /// Hann window with hop = window / 4, the loss and analysis default.
    pub fn hann(window_len: usize) -> Result<Self> {
        Self::new(window_len, (window_len / 4).max(1), WindowKind::Hann)
    }

    pub fn window_len(&self) -> usize {
        self.window_len
    }

    pub fn hop(&self) -> usize {
        self.hop
    }

    pub fn bins(&self) -> usize {
        self.window_len / 2 + 1
    }

    pub fn window(&self) -> &[f64] {
        &self.window
    }

    pub fn frames_for(&self, len: usize) -> usize {
        len / self.hop + 1
    }

    fn check_len(&self, len: usize) -> Result<()> {
        if len <= self.window_len / 2 {
            return Err(Error::TooShort { len, window: self.window_len });
        }
        Ok(())
    }

    fn pad_reflect(&self, x: &[f64]) -> Vec<f64> {
        let p = self.window_len / 2;
        let n = x.len();
        let mut out = Vec::with_capacity(n + 2 * p);
        out.extend((0..p).map(|i| x[p - i]));
        out.extend_from_slice(x);
        out.extend((0..p).map(|j| x[n - 2 - j]));
        out
    }

    /// Complex STFT of `x`.
    pub fn complex(&self, x: &[f64]) -> Result<ComplexSpectrogram> {
        self.check_len(x.len())?;
        let padded = self.pad_reflect(x);
        let frames = self.frames_for(x.len());
        let bins = self.bins();
        let mut data = vec![Complex64::new(0.0, 0.0); frames * bins];
        let mut buf = vec![0.0; self.window_len];
        let mut scratch = self.fft.scratch();
        for t in 0..frames {
            let start = t * self.hop;
            for (i, b) in buf.iter_mut().enumerate() {
                *b = padded[start + i] * self.window[i];
            }
            self.fft.forward(&buf, &mut data[t * bins..(t + 1) * bins], &mut scratch);
        }
        Ok(ComplexSpectrogram { frames, bins, data })
    }

    pub fn magnitude(&self, x: &[f64]) -> Result<Spectrogram> {
        let spec = self.complex(x)?;
        Ok(Spectrogram {
            frames: spec.frames,
            bins: spec.bins,
            window_length: self.window_len,
            hop_length: self.hop,
            magnitudes: spec.data.iter().map(|c| sqrt(c.norm_sqr())).collect(),
        })
    }

    /// Vector-Jacobian product of the magnitude map: given `dL/d|X|` for every
    /// cell of `spec = self.complex(x)`, returns `dL/dx` (length `len`).
    /// Cells with zero magnitude contribute nothing.
    pub fn magnitude_backward(&self, spec: &ComplexSpectrogram, grad_mag: &[f64], len: usize) -> Vec<f64> {
        let bins = self.bins();
        let n = self.window_len;
        let p = n / 2;
        let mut grad_padded = vec![0.0; len + 2 * p];
        let mut half = vec![Complex64::new(0.0, 0.0); bins];
        let mut frame = vec![0.0; n];
        let mut scratch = self.fft.scratch();
        for t in 0..spec.frames {
            let mut any = false;
            for k in 0..bins {
                let x = spec.data[t * bins + k];
                let g = grad_mag[t * bins + k];
                let mag = sqrt(x.norm_sqr());
                half[k] = if mag > 0.0 && g != 0.0 {
                    any = true;
                    let y = x * (g / mag);
                    if k == 0 || k == bins - 1 {
                        Complex64::new(y.re, 0.0)
                    } else {
                        y * 0.5
                    }
                } else {
                    Complex64::new(0.0, 0.0)
                };
            }
            if !any {
                continue;
            }
            self.fft.inverse_unnormalized(&half, &mut frame, &mut scratch);
            let start = t * self.hop;
            for i in 0..n {
                grad_padded[start + i] += frame[i] * self.window[i];
            }
        }
        // fold the reflected margins back onto their source samples
        let mut grad = grad_padded[p..p + len].to_vec();
        for i in 0..p {
            grad[p - i] += grad_padded[i];
            grad[len - 2 - i] += grad_padded[p + len + i];
        }
        grad
    }
}

/// Magnitude STFT with a Hann window and center reflection padding.
pub fn stft_magnitude(w: &Waveform, window_length: usize, hop: usize) -> Result<Spectrogram> {
    stft_magnitude_with(w, window_length, hop, WindowKind::Hann)
}

pub fn stft_magnitude_with(w: &Waveform, window_length: usize, hop: usize, kind: WindowKind) -> Result<Spectrogram> {
    Stft::new(window_length, hop, kind)?.magnitude(w.samples())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::math::{sin, TAU};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn wave(samples: Vec<f64>) -> Waveform {
        Waveform::new(samples, 22050).unwrap()
    }

    #[test]
    fn zero_waveform_gives_zero_magnitudes() {
        let s = stft_magnitude(&wave(vec![0.0; 4096]), 1024, 256).unwrap();
        assert!(s.magnitudes.iter().all(|&m| m == 0.0));
        assert_eq!(s.bins, 513);
    }

    #[test]
    fn centred_impulse_with_rectangular_window_is_flat() {
        // frame 4 is centred on sample 4 * 64 = 256
        let mut x = vec![0.0; 1024];
        x[256] = 1.0;
        let s = stft_magnitude_with(&wave(x), 128, 64, WindowKind::Rectangular).unwrap();
        for &m in s.frame(4) {
            assert!((m - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn bin_centred_sine_concentrates_energy() {
        let n = 1024;
        let k = 40;
        let f = k as f64 * 22050.0 / n as f64;
        let x: Vec<f64> = (0..8192).map(|i| sin(TAU * f * i as f64 / 22050.0)).collect();
        let s = stft_magnitude(&wave(x), n, n / 4).unwrap();
        // Hann leakage of a bin-centred tone is confined to k-1..=k+1 with
        // magnitudes (1/4, 1/2, 1/4) of the frame's window sum.
        let frame = s.frame(s.frames / 2);
        let total: f64 = frame.iter().map(|m| m * m).sum();
        let near: f64 = frame[k - 1..=k + 1].iter().map(|m| m * m).sum();
        assert!(near / total > 0.99);
        let peak = n as f64 / 4.0;
        assert!((frame[k] - peak).abs() / peak < 1e-9);
        assert!((frame[k - 1] - peak / 2.0).abs() / peak < 1e-9);
    }

    #[test]
    fn rejects_too_short_input() {
        let err = stft_magnitude(&wave(vec![0.1; 512]), 1024, 256).unwrap_err();
        assert!(matches!(err, Error::TooShort { .. }));
    }

    #[test]
    fn magnitude_is_positively_homogeneous() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x: Vec<f64> = (0..3000).map(|_| rng.random_range(-0.5..0.5)).collect();
        let a = 1.7;
        let s1 = stft_magnitude(&wave(x.clone()), 512, 128).unwrap();
        let s2 = stft_magnitude(&wave(x.iter().map(|v| v * a).collect()), 512, 128).unwrap();
        for (m1, m2) in s1.magnitudes.iter().zip(&s2.magnitudes) {
            assert!((m2 - a * m1).abs() <= 1e-6 * (a * m1).max(1e-12));
        }
    }

    #[test]
    fn magnitude_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let len = 300;
        let x: Vec<f64> = (0..len).map(|_| rng.random_range(-1.0..1.0)).collect();
        let stft = Stft::hann(64).unwrap();
        let spec = stft.complex(&x).unwrap();
        let weights: Vec<f64> = (0..spec.data.len()).map(|_| rng.random_range(-1.0..1.0)).collect();
        let objective = |x: &[f64]| -> f64 {
            let m = stft.magnitude(x).unwrap();
            m.magnitudes.iter().zip(&weights).map(|(a, b)| a * b).sum()
        };
        let grad = stft.magnitude_backward(&spec, &weights, len);
        let h = 1e-6;
        for i in [0usize, 1, 5, 31, 32, 150, 280, 298, 299] {
            let mut xp = x.clone();
            xp[i] += h;
            let mut xm = x.clone();
            xm[i] -= h;
            let fd = (objective(&xp) - objective(&xm)) / (2.0 * h);
            assert!((fd - grad[i]).abs() <= 1e-5 * fd.abs().max(1.0), "i={i} fd={fd} an={}", grad[i]);
        }
    }
}
