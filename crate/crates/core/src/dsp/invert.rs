use alloc::vec;
use alloc::vec::Vec;

use num_complex::Complex64;

use super::{MelFilterbank, MelSpectrogram, WindowKind};
use crate::fft::RealFft;
use crate::math::sqrt;
use crate::Result;

const NNLS_ITERATIONS: usize = 200;

/// Non-negative least-squares lift of one mel frame to a linear magnitude
/// spectrum, `argmin_{s >= 0} |F s - mel|^2`, by multiplicative updates.
pub fn nnls_lift(fb: &MelFilterbank, mel: &[f64], iterations: usize) -> Vec<f64> {
    let bins = fb.bins();
    let mut target = vec![0.0; bins];
    fb.apply_transpose(mel, &mut target);
    // start from the transpose image, which is strictly positive wherever a filter lands
    let mut s = target.clone();
    let mut proj = vec![0.0; fb.n_mels()];
    let mut back = vec![0.0; bins];
    for _ in 0..iterations {
        fb.apply(&s, &mut proj);
        fb.apply_transpose(&proj, &mut back);
        for k in 0..bins {
            if back[k] > 0.0 {
                s[k] *= target[k] / back[k];
            }
        }
    }
    s
}

/// Griffin-Lim phase recovery working on the zero-extended signal domain
/// `[0, (frames - 1) * hop + n)`, so analysis and least-squares synthesis are
/// an exact projection pair.
#[derive(Debug, Clone)]
pub struct GriffinLim {
    n: usize,
    hop: usize,
    window: Vec<f64>,
    fft: RealFft,
}

impl GriffinLim {
    pub fn new(n: usize, hop: usize) -> Result<Self> {
        Ok(Self { n, hop, window: WindowKind::Hann.build(n), fft: RealFft::new(n)? })
    }

    fn extended_len(&self, frames: usize) -> usize {
        (frames - 1) * self.hop + self.n
    }

    fn analyze(&self, x: &[f64], frames: usize) -> Vec<Complex64> {
        let bins = self.n / 2 + 1;
        let mut out = vec![Complex64::new(0.0, 0.0); frames * bins];
        let mut buf = vec![0.0; self.n];
        let mut scratch = self.fft.scratch();
        for t in 0..frames {
            for i in 0..self.n {
                buf[i] = x[t * self.hop + i] * self.window[i];
            }
            self.fft.forward(&buf, &mut out[t * bins..(t + 1) * bins], &mut scratch);
        }
        out
    }

    fn synthesize(&self, spec: &[Complex64], frames: usize) -> Vec<f64> {
        let bins = self.n / 2 + 1;
        let len = self.extended_len(frames);
        let mut out = vec![0.0; len];
        let mut norm = vec![0.0; len];
        let mut buf = vec![0.0; self.n];
        let mut scratch = self.fft.scratch();
        for t in 0..frames {
            self.fft.inverse_unnormalized(&spec[t * bins..(t + 1) * bins], &mut buf, &mut scratch);
            for i in 0..self.n {
                out[t * self.hop + i] += buf[i] / self.n as f64 * self.window[i];
                norm[t * self.hop + i] += self.window[i] * self.window[i];
            }
        }
        for (o, w) in out.iter_mut().zip(&norm) {
            *o = if *w > 1e-10 { *o / w } else { 0.0 };
        }
        out
    }

    /// Runs `iterations` rounds from zero phase. Returns the extended-domain
    /// signal and the spectral convergence `| |STFT(x_i)| - S | / |S|` after
    /// each round.
    pub fn run(&self, magnitudes: &[f64], frames: usize, iterations: usize) -> (Vec<f64>, Vec<f64>) {
        let bins = self.n / 2 + 1;
        let target_norm = sqrt(magnitudes.iter().map(|m| m * m).sum::<f64>()).max(1e-300);
        let mut spec: Vec<Complex64> = magnitudes.iter().map(|&m| Complex64::new(m, 0.0)).collect();
        let mut signal = self.synthesize(&spec, frames);
        let mut convergence = Vec::with_capacity(iterations);
        for _ in 0..iterations {
            let rebuilt = self.analyze(&signal, frames);
            let mut err = 0.0;
            for k in 0..frames * bins {
                let z = rebuilt[k];
                let mag = sqrt(z.norm_sqr());
                err += (mag - magnitudes[k]) * (mag - magnitudes[k]);
                spec[k] = if mag > 0.0 { z * (magnitudes[k] / mag) } else { Complex64::new(magnitudes[k], 0.0) };
            }
            convergence.push(sqrt(err) / target_norm);
            signal = self.synthesize(&spec, frames);
        }
        (signal, convergence)
    }
}

/// Griffin-Lim reconstruction of a linear magnitude spectrogram (`frames x
/// (n/2+1)`), cropped to the center-padded convention: `(frames - 1) * hop`
/// samples. Also returns the per-iteration spectral convergence.
pub fn griffin_lim(magnitudes: &[f64], frames: usize, n: usize, hop: usize, iterations: usize) -> Result<(Vec<f64>, Vec<f64>)> {
    let gl = GriffinLim::new(n, hop)?;
    let (signal, convergence) = gl.run(magnitudes, frames, iterations);
    let start = n / 2;
    let len = ((frames - 1) * hop).max(1);
    Ok((signal[start..start + len].to_vec(), convergence))
}

/// Deterministic reference vocoder: NNLS lift of every mel frame followed by
/// `iterations` rounds of Griffin-Lim from zero phase.
pub fn mel_invert_reference(m: &MelSpectrogram, iterations: usize) -> Result<super::Waveform> {
    let fb = MelFilterbank::new(m.n_mels, m.frame_size, m.sample_rate, 0.0, m.sample_rate as f64 / 2.0);
    mel_invert_with(m, &fb, iterations)
}

pub fn mel_invert_with(m: &MelSpectrogram, fb: &MelFilterbank, iterations: usize) -> Result<super::Waveform> {
    let bins = m.frame_size / 2 + 1;
    let mut lifted = vec![0.0; m.frames * bins];
    for t in 0..m.frames {
        lifted[t * bins..(t + 1) * bins].copy_from_slice(&nnls_lift(fb, m.frame(t), NNLS_ITERATIONS));
    }
    let (samples, _) = griffin_lim(&lifted, m.frames, m.frame_size, m.hop, iterations)?;
    super::Waveform::new(samples, m.sample_rate)
}
