//! Simulated recording distortions and the random pseudo-degradation sampler
//! used for supervised pretraining.
//!
//! Every operation preserves the input length and is a pure function of its
//! arguments, so a recipe plus the clean clip always regenerates the same
//! degraded clip bit for bit.

use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dsp::{resample_with, ResamplerConfig, Waveform};
use crate::math::{cos, db_to_linear, ln1p, pow, sin, PI};
use crate::{Error, Result, SAMPLE_RATE};

/// Bit depths drawn by the pretraining sampler.
pub const PRETRAIN_BITS: core::ops::RangeInclusive<u32> = 6..=10;
/// Intermediate sampling rates drawn by the pretraining sampler.
pub const PRETRAIN_RATES: [u32; 4] = [8000, 11250, 12000, 16000];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DegradationKind {
    BandLimited,
    Clipped,
    QuantizedResampled,
    Overdrive,
    RandomPretrain,
}

impl DegradationKind {
    pub const ALL: [DegradationKind; 5] = [
        DegradationKind::BandLimited,
        DegradationKind::Clipped,
        DegradationKind::QuantizedResampled,
        DegradationKind::Overdrive,
        DegradationKind::RandomPretrain,
    ];

    pub fn name(self) -> &'static str {
        match self {
            DegradationKind::BandLimited => "band_limited",
            DegradationKind::Clipped => "clipped",
            DegradationKind::QuantizedResampled => "quantized_resampled",
            DegradationKind::Overdrive => "overdrive",
            DegradationKind::RandomPretrain => "random_pretrain",
        }
    }
}

impl fmt::Display for DegradationKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for DegradationKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm: String = s.chars().map(|c| if c == '-' { '_' } else { c.to_ascii_lowercase() }).collect();
        Self::ALL
            .into_iter()
            .find(|k| k.name() == norm)
            .ok_or_else(|| Error::param("kind", alloc::format!("unknown degradation kind `{s}`")))
    }
}

/// A fully specified distortion.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DegradationRecipe {
    BandLimited { cutoff_hz: f64 },
    Clipped { clip_threshold: f64 },
    QuantizedResampled { bits: u32, intermediate_rate_hz: u32 },
    Overdrive { gain_db: f64, colour: f64 },
    RandomPretrain { seed: u64 },
}

impl DegradationRecipe {
    /// The simulated conditions with their evaluation-protocol settings:
    /// 4 kHz lowpass, 0.25 clipping, 8-bit mu-law through 8 kHz, and SoX's
    /// default overdrive.
    pub fn standard(kind: DegradationKind) -> Self {
        match kind {
            DegradationKind::BandLimited => DegradationRecipe::BandLimited { cutoff_hz: 4000.0 },
            DegradationKind::Clipped => DegradationRecipe::Clipped { clip_threshold: 0.25 },
            DegradationKind::QuantizedResampled => {
                DegradationRecipe::QuantizedResampled { bits: 8, intermediate_rate_hz: 8000 }
            }
            DegradationKind::Overdrive => DegradationRecipe::Overdrive { gain_db: 20.0, colour: 20.0 },
            DegradationKind::RandomPretrain => DegradationRecipe::RandomPretrain { seed: 0 },
        }
    }

    pub fn kind(&self) -> DegradationKind {
        match self {
            DegradationRecipe::BandLimited { .. } => DegradationKind::BandLimited,
            DegradationRecipe::Clipped { .. } => DegradationKind::Clipped,
            DegradationRecipe::QuantizedResampled { .. } => DegradationKind::QuantizedResampled,
            DegradationRecipe::Overdrive { .. } => DegradationKind::Overdrive,
            DegradationRecipe::RandomPretrain { .. } => DegradationKind::RandomPretrain,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let nyquist = SAMPLE_RATE as f64 / 2.0;
        match *self {
            DegradationRecipe::BandLimited { cutoff_hz } => {
                if !(cutoff_hz > 0.0 && cutoff_hz < nyquist) {
                    return Err(Error::param("cutoff_hz", alloc::format!("{cutoff_hz} outside (0, {nyquist})")));
                }
            }
            DegradationRecipe::Clipped { clip_threshold } => check_threshold(clip_threshold)?,
            DegradationRecipe::QuantizedResampled { bits, intermediate_rate_hz } => {
                check_bits(bits)?;
                if intermediate_rate_hz == 0 || intermediate_rate_hz > SAMPLE_RATE {
                    return Err(Error::param(
                        "intermediate_rate_hz",
                        alloc::format!("{intermediate_rate_hz} outside (0, {SAMPLE_RATE}]"),
                    ));
                }
            }
            DegradationRecipe::Overdrive { gain_db, colour } => {
                if !(gain_db >= 0.0) || !colour.is_finite() {
                    return Err(Error::param("gain_db", "gain must be >= 0 dB and colour finite"));
                }
            }
            DegradationRecipe::RandomPretrain { .. } => {}
        }
        Ok(())
    }
}

fn check_threshold(t: f64) -> Result<()> {
    if !(t > 0.0 && t <= 1.0) {
        return Err(Error::param("clip_threshold", alloc::format!("{t} outside (0, 1]")));
    }
    Ok(())
}

fn check_bits(bits: u32) -> Result<()> {
    if !(2..=16).contains(&bits) {
        return Err(Error::param("bits", alloc::format!("{bits} outside [2, 16]")));
    }
    Ok(())
}

/// RBJ-cookbook lowpass biquad coefficients `(b0, b1, b2, a1, a2)`, normalized by `a0`.
pub fn lowpass_coefficients(cutoff_hz: f64, sample_rate: f64, q: f64) -> [f64; 5] {
    let w0 = 2.0 * PI * cutoff_hz / sample_rate;
    let (sw, cw) = (sin(w0), cos(w0));
    let alpha = sw / (2.0 * q);
    let a0 = 1.0 + alpha;
    [(1.0 - cw) / 2.0 / a0, (1.0 - cw) / a0, (1.0 - cw) / 2.0 / a0, -2.0 * cw / a0, (1.0 - alpha) / a0]
}

/// Single forward pass of a Butterworth-Q (1/sqrt 2) lowpass biquad.
pub fn band_limit(w: &Waveform, cutoff_hz: f64) -> Result<Waveform> {
    let nyquist = w.sample_rate() as f64 / 2.0;
    if !(cutoff_hz > 0.0 && cutoff_hz < nyquist) {
        return Err(Error::param("cutoff_hz", alloc::format!("{cutoff_hz} outside (0, {nyquist})")));
    }
    let [b0, b1, b2, a1, a2] = lowpass_coefficients(cutoff_hz, w.sample_rate() as f64, core::f64::consts::FRAC_1_SQRT_2);
    let (mut x1, mut x2, mut y1, mut y2) = (0.0, 0.0, 0.0, 0.0);
    let out = w
        .samples()
        .iter()
        .map(|&x| {
            let y = b0 * x + b1 * x1 + b2 * x2 - a1 * y1 - a2 * y2;
            x2 = x1;
            x1 = x;
            y2 = y1;
            y1 = y;
            y
        })
        .collect();
    Waveform::new(out, w.sample_rate())
}

/// Hard clipping at `+-threshold`.
pub fn clip(w: &Waveform, threshold: f64) -> Result<Waveform> {
    check_threshold(threshold)?;
    Waveform::new(w.samples().iter().map(|&x| x.clamp(-threshold, threshold)).collect(), w.sample_rate())
}

/// mu-law compressor with `mu = 2^bits - 1`, mapping [-1, 1] onto [-1, 1].
pub fn mu_law_compress(x: f64, bits: u32) -> f64 {
    let mu = ((1u64 << bits) - 1) as f64;
    let x = x.clamp(-1.0, 1.0);
    x.signum() * ln1p(mu * x.abs()) / ln1p(mu)
}

pub fn mu_law_expand(y: f64, bits: u32) -> f64 {
    let mu = ((1u64 << bits) - 1) as f64;
    y.signum() * (pow(1.0 + mu, y.abs()) - 1.0) / mu
}

/// Integer code in `0..2^bits` of a sample.
pub fn mu_law_encode(x: f64, bits: u32) -> u32 {
    let mu = ((1u64 << bits) - 1) as f64;
    let y = mu_law_compress(x, bits);
    let q = crate::math::floor((y + 1.0) / 2.0 * mu + 0.5);
    q.clamp(0.0, mu) as u32
}

pub fn mu_law_decode(code: u32, bits: u32) -> f64 {
    let mu = ((1u64 << bits) - 1) as f64;
    mu_law_expand(2.0 * code as f64 / mu - 1.0, bits)
}

/// mu-law quantization: compand, quantize uniformly to `2^bits` levels spanning
/// [-1, 1] in the companded domain, and expand back.
pub fn mu_law_quantize(w: &Waveform, bits: u32) -> Result<Waveform> {
    check_bits(bits)?;
    Waveform::new(w.samples().iter().map(|&x| mu_law_decode(mu_law_encode(x, bits), bits)).collect(), w.sample_rate())
}

/// mu-law quantization, resampling to `intermediate_rate` and back to the
/// original rate, trimmed or zero-padded to the input length.
pub fn quantize_and_resample(w: &Waveform, bits: u32, intermediate_rate: u32) -> Result<Waveform> {
    quantize_and_resample_with(w, bits, intermediate_rate, &ResamplerConfig::default())
}

pub fn quantize_and_resample_with(w: &Waveform, bits: u32, intermediate_rate: u32, cfg: &ResamplerConfig) -> Result<Waveform> {
    if intermediate_rate == 0 {
        return Err(Error::param("intermediate_rate_hz", "must be positive"));
    }
    let q = mu_law_quantize(w, bits)?;
    let down = resample_with(&q, intermediate_rate, cfg)?;
    resample_with(&down, w.sample_rate(), cfg)?.fit_length(w.len())
}

/// SoX `overdrive`: gain, colour offset, cubic soft clip, DC blocker and a
/// 0.5 dry / 0.75 wet mix, with the output clipped to full scale as SoX does
/// when converting back to samples.
pub fn overdrive(w: &Waveform, gain_db: f64, colour: f64) -> Result<Waveform> {
    if !(gain_db >= 0.0) {
        return Err(Error::param("gain_db", "must be >= 0"));
    }
    let gain = db_to_linear(gain_db);
    let offset = colour / 200.0;
    let (mut last_in, mut last_out) = (0.0, 0.0);
    let out = w
        .samples()
        .iter()
        .map(|&x| {
            let d = soft_clip(x * gain + offset);
            last_out = d - last_in + 0.995 * last_out;
            last_in = d;
            (x * 0.5 + last_out * 0.75).clamp(-1.0, 1.0)
        })
        .collect();
    Waveform::new(out, w.sample_rate())
}

/// Cubic soft clip `z - z^3/3`, saturating at +-2/3 outside [-1, 1].
pub fn soft_clip(z: f64) -> f64 {
    if z < -1.0 {
        -2.0 / 3.0
    } else if z > 1.0 {
        2.0 / 3.0
    } else {
        z - z * z * z / 3.0
    }
}

/// Random quantize-and-resample recipe: bits uniform on 6..=10 and rate
/// uniform on {8, 11.25, 12, 16} kHz, determined by `seed`.
pub fn sample_pretrain_recipe(seed: u64) -> DegradationRecipe {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let bits = rng.random_range(PRETRAIN_BITS);
    let intermediate_rate_hz = PRETRAIN_RATES[rng.random_range(0..PRETRAIN_RATES.len())];
    DegradationRecipe::QuantizedResampled { bits, intermediate_rate_hz }
}

/// Applies a recipe. Output length always equals input length.
pub fn apply(recipe: &DegradationRecipe, w: &Waveform) -> Result<Waveform> {
    apply_with(recipe, w, &ResamplerConfig::default())
}

pub fn apply_with(recipe: &DegradationRecipe, w: &Waveform, cfg: &ResamplerConfig) -> Result<Waveform> {
    recipe.validate()?;
    match *recipe {
        DegradationRecipe::BandLimited { cutoff_hz } => band_limit(w, cutoff_hz),
        DegradationRecipe::Clipped { clip_threshold } => clip(w, clip_threshold),
        DegradationRecipe::QuantizedResampled { bits, intermediate_rate_hz } => {
            quantize_and_resample_with(w, bits, intermediate_rate_hz, cfg)
        }
        DegradationRecipe::Overdrive { gain_db, colour } => overdrive(w, gain_db, colour),
        DegradationRecipe::RandomPretrain { seed } => apply_with(&sample_pretrain_recipe(seed), w, cfg),
    }
}

/// Number of distinct sample values, compared bitwise.
pub fn distinct_values(x: &[f64]) -> usize {
    let mut bits: Vec<u64> = x.iter().map(|v| v.to_bits()).collect();
    bits.sort_unstable();
    bits.dedup();
    bits.len()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dsp::rms;
    use crate::math::{linear_to_db, sqrt, TAU};
    use alloc::vec;
    use num_complex::Complex64;

    fn sine(freq: f64, amp: f64, len: usize) -> Waveform {
        Waveform::new((0..len).map(|i| amp * sin(TAU * freq * i as f64 / 22050.0)).collect(), 22050).unwrap()
    }

    fn speech() -> Waveform {
        crate::synth::SpeechSynth::new(crate::synth::Voice::default()).utterance(3, 1.0)
    }

    /// |H(e^{jw})| of the biquad from its coefficients.
    fn biquad_gain(c: [f64; 5], freq: f64) -> f64 {
        let w = TAU * freq / 22050.0;
        let z1 = Complex64::new(cos(w), -sin(w));
        let z2 = z1 * z1;
        let num = Complex64::new(c[0], 0.0) + z1 * c[1] + z2 * c[2];
        let den = Complex64::new(1.0, 0.0) + z1 * c[3] + z2 * c[4];
        sqrt((num / den).norm_sqr())
    }

    fn steady_gain_db(input: &Waveform, output: &Waveform) -> f64 {
        let skip = 2000;
        linear_to_db(rms(&output.samples()[skip..]) / rms(&input.samples()[skip..]))
    }

    #[test]
    fn band_limit_matches_transfer_function() {
        let c = lowpass_coefficients(4000.0, 22050.0, core::f64::consts::FRAC_1_SQRT_2);
        for freq in [1000.0, 6000.0, 8000.0] {
            let x = sine(freq, 0.5, 22050);
            let y = band_limit(&x, 4000.0).unwrap();
            let measured = steady_gain_db(&x, &y);
            let analytic = linear_to_db(biquad_gain(c, freq));
            assert!((measured - analytic).abs() < 1.0, "{freq} Hz: {measured} vs {analytic}");
        }
        let x = sine(1000.0, 0.5, 22050);
        assert!(steady_gain_db(&x, &band_limit(&x, 4000.0).unwrap()).abs() < 0.2);
    }

    #[test]
    fn band_limit_of_silence_is_silence() {
        let y = band_limit(&Waveform::silence(1000, 22050).unwrap(), 4000.0).unwrap();
        assert!(y.samples().iter().all(|&v| v == 0.0));
        assert!(band_limit(&sine(100.0, 0.1, 100), 11025.0).is_err());
        assert!(band_limit(&sine(100.0, 0.1, 100), 0.0).is_err());
    }

    #[test]
    fn clip_examples() {
        let w = Waveform::new(vec![0.5, -0.9, 0.1], 22050).unwrap();
        let c = clip(&w, 0.25).unwrap();
        assert_eq!(c.samples(), &[0.25, -0.25, 0.1]);
        let quiet = sine(300.0, 0.2, 500);
        assert_eq!(clip(&quiet, 0.25).unwrap(), quiet);
        assert!(clip(&w, 0.0).is_err());
        assert!(clip(&w, 1.5).is_err());
    }

    #[test]
    fn mu_law_bounds() {
        for bits in 2..=16 {
            let mu = ((1u64 << bits) - 1) as f64;
            let w = Waveform::new(vec![0.0, 1.0, -1.0], 22050).unwrap();
            let q = mu_law_quantize(&w, bits).unwrap();
            // zero lands on the nearest level, half a step away in the companded domain
            assert!(q.samples()[0].abs() <= mu_law_expand(1.0 / mu, bits) + 1e-15);
            assert!((q.samples()[1] - 1.0).abs() < 1e-6);
            assert!((q.samples()[2] + 1.0).abs() < 1e-6);
        }
        assert!(mu_law_quantize(&sine(1.0, 0.1, 10), 1).is_err());
        assert!(mu_law_quantize(&sine(1.0, 0.1, 10), 17).is_err());
    }

    #[test]
    fn eight_bit_mu_law_has_at_most_256_values() {
        let q = mu_law_quantize(&speech(), 8).unwrap();
        let n = distinct_values(q.samples());
        assert!(n <= 256, "{n}");
        assert!(n > 50);
    }

    #[test]
    fn quantize_and_resample_removes_high_band() {
        let x = sine(6000.0, 0.5, 22050);
        let y = quantize_and_resample(&x, 8, 8000).unwrap();
        assert_eq!(y.len(), x.len());
        let mid = &y.samples()[3000..19000];
        assert!(linear_to_db(rms(mid) / rms(&x.samples()[3000..19000])) < -40.0);
    }

    #[test]
    fn quantize_and_resample_near_identity_limit() {
        let x = speech();
        let y = quantize_and_resample(&x, 16, 22050).unwrap();
        let max = x.samples().iter().zip(y.samples()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(max < 1e-3, "{max}");
    }

    #[test]
    fn quantize_and_resample_preserves_length() {
        for len in [22049usize, 22050, 22051, 12345] {
            let x = speech().fit_length(len).unwrap();
            assert_eq!(quantize_and_resample(&x, 8, 8000).unwrap().len(), len);
        }
    }

    #[test]
    fn overdrive_zero_input_zero_colour() {
        let y = overdrive(&Waveform::silence(500, 22050).unwrap(), 20.0, 0.0).unwrap();
        assert!(y.samples().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn overdrive_saturates() {
        assert_eq!(soft_clip(3.0), 2.0 / 3.0);
        assert_eq!(soft_clip(-3.0), -2.0 / 3.0);
        let y = overdrive(&Waveform::new(vec![0.9; 10], 22050).unwrap(), 20.0, 0.0).unwrap();
        // dry 0.45 plus a DC-blocked wet term bounded by 0.75 * 2 * 2/3
        assert!(y.samples().iter().all(|v| v.abs() <= 1.0));
    }

    #[test]
    fn overdrive_creates_third_harmonic() {
        let x = sine(440.0, 0.1, 22050);
        let y = overdrive(&x, 20.0, 20.0).unwrap();
        let h3 = |w: &Waveform| -> f64 {
            let s = &w.samples()[4096..4096 + 16384];
            let mut acc = Complex64::new(0.0, 0.0);
            for (i, v) in s.iter().enumerate() {
                let win = 0.5 - 0.5 * cos(TAU * i as f64 / s.len() as f64);
                let a = -TAU * 1320.0 * i as f64 / 22050.0;
                acc += Complex64::new(cos(a), sin(a)) * (v * win);
            }
            acc.norm_sqr() + 1e-30
        };
        let gain_db = 10.0 * libm::log10(h3(&y) / h3(&x));
        assert!(gain_db > 20.0, "{gain_db}");
    }

    #[test]
    fn pretrain_sampler_is_deterministic_and_uniform() {
        assert_eq!(sample_pretrain_recipe(42), sample_pretrain_recipe(42));
        let mut bits = [0usize; 11];
        let mut rates = [0usize; 4];
        let n = 10_000;
        for seed in 0..n as u64 {
            match sample_pretrain_recipe(seed) {
                DegradationRecipe::QuantizedResampled { bits: b, intermediate_rate_hz: r } => {
                    bits[b as usize] += 1;
                    rates[PRETRAIN_RATES.iter().position(|&x| x == r).unwrap()] += 1;
                }
                other => panic!("unexpected {other:?}"),
            }
        }
        for b in PRETRAIN_BITS {
            let f = bits[b as usize] as f64 / n as f64;
            assert!((f - 0.2).abs() <= 0.02, "bits {b}: {f}");
        }
        for (i, &c) in rates.iter().enumerate() {
            let f = c as f64 / n as f64;
            assert!((f - 0.25).abs() <= 0.02, "rate {}: {f}", PRETRAIN_RATES[i]);
        }
    }

    #[test]
    fn apply_dispatches() {
        let x = sine(8000.0, 0.5, 4000);
        let recipe = DegradationRecipe::BandLimited { cutoff_hz: 4000.0 };
        assert_eq!(apply(&recipe, &x).unwrap(), band_limit(&x, 4000.0).unwrap());
        let s = speech();
        let (bits, rate) = match sample_pretrain_recipe(7) {
            DegradationRecipe::QuantizedResampled { bits, intermediate_rate_hz } => (bits, intermediate_rate_hz),
            _ => unreachable!(),
        };
        assert_eq!(
            apply(&DegradationRecipe::RandomPretrain { seed: 7 }, &s).unwrap(),
            quantize_and_resample(&s, bits, rate).unwrap()
        );
        for kind in DegradationKind::ALL {
            assert_eq!(apply(&DegradationRecipe::standard(kind), &s).unwrap().len(), s.len());
        }
    }

    #[test]
    fn kind_parsing() {
        assert_eq!("band-limited".parse::<DegradationKind>().unwrap(), DegradationKind::BandLimited);
        assert_eq!("overdrive".parse::<DegradationKind>().unwrap(), DegradationKind::Overdrive);
        assert!("reverb".parse::<DegradationKind>().is_err());
    }

    proptest::proptest! {
        #[test]
        fn clip_is_idempotent(samples in proptest::collection::vec(-1.0f64..1.0, 1..300), t in 0.01f64..1.0) {
            let w = Waveform::new(samples, 22050).unwrap();
            let once = clip(&w, t).unwrap();
            proptest::prop_assert_eq!(clip(&once, t).unwrap(), once.clone());
            proptest::prop_assert!(once.rms() <= w.rms() + 1e-9);
        }

        #[test]
        fn mu_law_is_idempotent(samples in proptest::collection::vec(-1.0f64..1.0, 1..300), bits in 2u32..=16) {
            let w = Waveform::new(samples, 22050).unwrap();
            let once = mu_law_quantize(&w, bits).unwrap();
            proptest::prop_assert_eq!(mu_law_quantize(&once, bits).unwrap(), once);
        }

        #[test]
        fn band_limit_does_not_add_energy(seed in 0u64..1000) {
            // broadband noise: the lowpass only removes energy
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let w = Waveform::new((0..4000).map(|_| rng.random_range(-0.5..0.5)).collect(), 22050).unwrap();
            let y = band_limit(&w, 4000.0).unwrap();
            proptest::prop_assert!(y.rms() <= w.rms() + 1e-9);
        }

        #[test]
        fn apply_is_deterministic_and_length_preserving(seed in 0u64..50, len in 1200usize..5000) {
            let w = crate::synth::SpeechSynth::new(crate::synth::Voice::default()).utterance(seed, 0.3).fit_length(len).unwrap();
            for kind in DegradationKind::ALL {
                let recipe = match kind {
                    DegradationKind::RandomPretrain => DegradationRecipe::RandomPretrain { seed },
                    k => DegradationRecipe::standard(k),
                };
                let a = apply(&recipe, &w).unwrap();
                proptest::prop_assert_eq!(a.len(), len);
                proptest::prop_assert_eq!(a, apply(&recipe, &w).unwrap());
            }
        }
    }
}
