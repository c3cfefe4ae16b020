//! Training objectives: multi-scale spectral reconstruction loss, feature
//! loss and their weighted combination.

use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::dsp::{MelSpectrogram, Stft};
use crate::math::ln;
use crate::{Error, Result};

/// Magnitude floor applied before taking logs.
pub const LOG_FLOOR: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Reduction {
    /// Mean over the time-frequency cells of each scale, summed over scales.
    #[default]
    Mean,
    /// Plain sums.
    Sum,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub windows: Vec<usize>,
    pub alpha: f64,
    pub beta_dual: f64,
    pub beta_pretrain: f64,
    pub reduction: Reduction,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            windows: vec![2048, 1024, 512, 256, 128, 64],
            alpha: 1.0,
            beta_dual: 0.1,
            beta_pretrain: 0.001,
            reduction: Reduction::Mean,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if self.windows.is_empty() {
            return Err(Error::param("loss.windows", "at least one window is required"));
        }
        if let Some(w) = self.windows.iter().find(|w| !w.is_power_of_two() || **w < 4) {
            return Err(Error::param("loss.windows", alloc::format!("{w} is not a power of two >= 4")));
        }
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return Err(Error::param("loss.alpha", alloc::format!("{} must be >= 0", self.alpha)));
        }
        check_beta("loss.beta_dual", self.beta_dual)?;
        check_beta("loss.beta_pretrain", self.beta_pretrain)
    }

    /// A single-window variant, handy for short signals.
    pub fn single(window: usize, alpha: f64) -> Self {
        Self { windows: vec![window], alpha, ..Self::default() }
    }
}

pub(crate) fn check_beta(name: &'static str, beta: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&beta) {
        return Err(Error::param(name, alloc::format!("{beta} outside [0, 1]")));
    }
    Ok(())
}

/// Multi-scale spectral loss with precomputed STFT plans.
#[derive(Debug, Clone)]
pub struct SpectralLoss {
    scales: Vec<Stft>,
    alpha: f64,
    reduction: Reduction,
}

impl SpectralLoss {
    pub fn new(cfg: &LossConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            scales: cfg.windows.iter().map(|&w| Stft::hann(w)).collect::<Result<_>>()?,
            alpha: cfg.alpha,
            reduction: cfg.reduction,
        })
    }

    /// Shortest signal every scale accepts.
    pub fn min_len(&self) -> usize {
        self.scales.iter().map(|s| s.window_len() / 2 + 1).max().unwrap_or(1)
    }

    pub fn value(&self, x: &[f64], x_hat: &[f64]) -> Result<f64> {
        self.eval(x, x_hat, false).map(|(v, _)| v)
    }

    /// Loss and its gradient with respect to `x_hat`.
    pub fn value_and_grad(&self, x: &[f64], x_hat: &[f64]) -> Result<(f64, Vec<f64>)> {
        self.eval(x, x_hat, true)
    }

    fn eval(&self, x: &[f64], x_hat: &[f64], want_grad: bool) -> Result<(f64, Vec<f64>)> {
        if x.len() != x_hat.len() {
            return Err(Error::LengthMismatch { left: x.len(), right: x_hat.len() });
        }
        let mut total = 0.0;
        let mut grad = if want_grad { vec![0.0; x.len()] } else { Vec::new() };
        for stft in &self.scales {
            let s = stft.magnitude(x)?.magnitudes;
            let spec_hat = stft.complex(x_hat)?;
            let s_hat: Vec<f64> = spec_hat.data.iter().map(|c| crate::math::sqrt(c.norm_sqr())).collect();
            let norm = match self.reduction {
                Reduction::Mean => 1.0 / s.len() as f64,
                Reduction::Sum => 1.0,
            };
            let mut lin = 0.0;
            let mut log = 0.0;
            let mut g = if want_grad { vec![0.0; s.len()] } else { Vec::new() };
            for i in 0..s.len() {
                let d = s_hat[i] - s[i];
                lin += d.abs();
                let (la, lb) = (ln(s_hat[i].max(LOG_FLOOR)), ln(s[i].max(LOG_FLOOR)));
                log += (la - lb).abs();
                if want_grad {
                    let mut gi = sign(d);
                    if s_hat[i] > LOG_FLOOR {
                        gi += self.alpha * sign(la - lb) / s_hat[i];
                    }
                    g[i] = gi * norm;
                }
            }
            total += norm * (lin + self.alpha * log);
            if want_grad {
                let gx = stft.magnitude_backward(&spec_hat, &g, x.len());
                grad.iter_mut().zip(gx).for_each(|(a, b)| *a += b);
            }
        }
        Ok((total, grad))
    }
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Multi-scale spectral reconstruction loss between `x` and `x_hat`.
pub fn recons_loss(x: &[f64], x_hat: &[f64], cfg: &LossConfig) -> Result<f64> {
    SpectralLoss::new(cfg)?.value(x, x_hat)
}

/// Mean squared error between raw feature matrices.
pub fn mse(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::LengthMismatch { left: a.len(), right: b.len() });
    }
    if a.is_empty() {
        return Ok(0.0);
    }
    Ok(a.iter().zip(b).map(|(p, q)| (p - q) * (p - q)).sum::<f64>() / a.len() as f64)
}

/// Mean squared error between two mel spectrograms in the log domain, the
/// domain the analysis network predicts in.
pub fn feature_loss(z_high: &MelSpectrogram, z_res_hat: &MelSpectrogram) -> Result<f64> {
    if z_high.frames != z_res_hat.frames || z_high.n_mels != z_res_hat.n_mels {
        return Err(Error::ShapeMismatch(alloc::format!(
            "features {}x{} vs {}x{}",
            z_high.frames,
            z_high.n_mels,
            z_res_hat.frames,
            z_res_hat.n_mels
        )));
    }
    mse(&z_high.log_values(), &z_res_hat.log_values())
}

/// `(1 - beta) * l_recons + beta * l_feature`.
pub fn combined_loss(l_recons: f64, l_feature: f64, beta: f64) -> Result<f64> {
    check_beta("beta", beta)?;
    Ok((1.0 - beta) * l_recons + beta * l_feature)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::math::{cos, sin, sqrt, TAU};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn noise(seed: u64, n: usize) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| rng.random_range(-0.5..0.5)).collect()
    }

    #[test]
    fn identity_and_symmetry() {
        let cfg = LossConfig::default();
        let (x, y) = (noise(1, 4096), noise(2, 4096));
        assert_eq!(recons_loss(&x, &x, &cfg).unwrap(), 0.0);
        let (a, b) = (recons_loss(&x, &y, &cfg).unwrap(), recons_loss(&y, &x, &cfg).unwrap());
        assert!(a > 0.0);
        assert_eq!(a, b);
        assert!(matches!(recons_loss(&x, &y[..4000], &cfg), Err(Error::LengthMismatch { .. })));
    }

    #[test]
    fn sign_flip_invariance() {
        let cfg = LossConfig::default();
        let (x, y) = (noise(3, 4096), noise(4, 4096));
        let neg: Vec<f64> = y.iter().map(|v| -v).collect();
        let (a, b) = (recons_loss(&x, &y, &cfg).unwrap(), recons_loss(&x, &neg, &cfg).unwrap());
        assert!((a - b).abs() <= 1e-12 * a);
    }

    /// Direct O(n^2) DFT of reflection-padded Hann frames.
    fn naive_magnitudes(x: &[f64], n: usize) -> Vec<f64> {
        let hop = n / 4;
        let p = n / 2;
        let len = x.len();
        let reflect = |i: isize| -> f64 {
            let i = if i < 0 { -i } else { i } as usize;
            if i >= len {
                x[2 * (len - 1) - i]
            } else {
                x[i]
            }
        };
        let frames = len / hop + 1;
        let mut out = Vec::new();
        for t in 0..frames {
            for k in 0..=n / 2 {
                let (mut re, mut im) = (0.0, 0.0);
                for j in 0..n {
                    let w = 0.5 - 0.5 * cos(TAU * j as f64 / n as f64);
                    let v = w * reflect((t * hop + j) as isize - p as isize);
                    let a = -TAU * (k * j) as f64 / n as f64;
                    re += v * cos(a);
                    im += v * sin(a);
                }
                out.push(sqrt(re * re + im * im));
            }
        }
        out
    }

    #[test]
    fn single_scale_matches_naive_dft() {
        let (x, y) = (noise(10, 1024), noise(11, 1024));
        let (sx, sy) = (naive_magnitudes(&x, 64), naive_magnitudes(&y, 64));
        let expected = sx.iter().zip(&sy).map(|(a, b)| (a - b).abs()).sum::<f64>() / sx.len() as f64;
        let got = recons_loss(&x, &y, &LossConfig::single(64, 0.0)).unwrap();
        assert!((got - expected).abs() < 1e-6, "{got} vs {expected}");
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let (x, mut y) = (noise(20, 256), noise(21, 256));
        let loss = SpectralLoss::new(&LossConfig::single(64, 1.0)).unwrap();
        let (_, g) = loss.value_and_grad(&x, &y).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let h = 1e-6;
        for _ in 0..20 {
            let i = rng.random_range(0..y.len());
            let orig = y[i];
            y[i] = orig + h;
            let up = loss.value(&x, &y).unwrap();
            y[i] = orig - h;
            let down = loss.value(&x, &y).unwrap();
            y[i] = orig;
            let fd = (up - down) / (2.0 * h);
            let rel = (fd - g[i]).abs() / fd.abs().max(g[i].abs()).max(1e-8);
            assert!(rel < 1e-3, "sample {i}: fd {fd} analytic {}", g[i]);
        }
    }

    #[test]
    fn feature_loss_closed_forms() {
        let analyzer = crate::dsp::MelAnalyzer::new(&Default::default()).unwrap();
        let m = analyzer.analyze_samples(&noise(30, 4096)).unwrap();
        assert_eq!(feature_loss(&m, &m).unwrap(), 0.0);
        let shifted: Vec<f64> = m.log_values().iter().map(|v| v + 0.5).collect();
        let m2 = MelSpectrogram::from_log(&shifted, m.frames, &m).unwrap();
        assert!((feature_loss(&m, &m2).unwrap() - 0.25).abs() < 1e-12);
        let short = analyzer.floor_spectrogram(3);
        assert!(feature_loss(&m, &short).is_err());
    }

    #[test]
    fn mse_matches_two_loop_oracle() {
        let (frames, bands) = (7, 80);
        let (a, b) = (noise(40, frames * bands), noise(41, frames * bands));
        let mut acc = 0.0;
        for t in 0..frames {
            for f in 0..bands {
                let d = a[t * bands + f] - b[t * bands + f];
                acc += d * d;
            }
        }
        assert!((mse(&a, &b).unwrap() - acc / (frames * bands) as f64).abs() < 1e-9);
    }

    #[test]
    fn combined_endpoints() {
        assert_eq!(combined_loss(2.0, 10.0, 0.0).unwrap(), 2.0);
        assert_eq!(combined_loss(2.0, 10.0, 1.0).unwrap(), 10.0);
        assert!((combined_loss(2.0, 10.0, 0.1).unwrap() - 2.8).abs() < 1e-12);
        assert!(combined_loss(2.0, 10.0, 1.5).is_err());
        assert!(combined_loss(2.0, 10.0, -0.1).is_err());
    }

    #[test]
    fn config_validation() {
        assert!(LossConfig::default().validate().is_ok());
        assert!(LossConfig { windows: vec![], ..Default::default() }.validate().is_err());
        assert!(LossConfig { windows: vec![100], ..Default::default() }.validate().is_err());
        assert!(LossConfig { beta_dual: 1.5, ..Default::default() }.validate().is_err());
    }

    proptest::proptest! {
        #[test]
        fn non_negative(seed in 0u64..500) {
            let (x, y) = (noise(seed, 600), noise(seed + 1000, 600));
            let v = recons_loss(&x, &y, &LossConfig { windows: vec![256, 128, 64], ..Default::default() }).unwrap();
            proptest::prop_assert!(v >= 0.0 && v.is_finite());
        }

        #[test]
        fn combined_is_affine(r in 0.0f64..10.0, f in 0.0f64..10.0, beta in 0.0f64..1.0) {
            let v = combined_loss(r, f, beta).unwrap();
            proptest::prop_assert!((v - (r + beta * (f - r))).abs() < 1e-12);
        }
    }
}
