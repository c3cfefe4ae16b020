//! Deterministic speech-like signal generator.
//!
//! Produces syllable sequences of harmonic, formant-filtered voiced segments,
//! high-passed fricative noise and short pauses. It stands in for a recorded
//! corpus in tests, benchmarks and the `make-corpus` subcommand: the signals
//! have the spectral tilt, harmonic structure and broadband fricative energy
//! that the degradations act on, and every clip is a pure function of
//! `(voice, seed, seconds)`.

use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dsp::Waveform;
use crate::math::{cos, exp, sin, PI, TAU};
use crate::SAMPLE_RATE;

/// First three formants (Hz) of a handful of vowels.
const VOWELS: [[f64; 3]; 6] = [
    [730.0, 1090.0, 2440.0],
    [270.0, 2290.0, 3010.0],
    [300.0, 870.0, 2240.0],
    [530.0, 1840.0, 2480.0],
    [570.0, 840.0, 2410.0],
    [660.0, 1720.0, 2410.0],
];
const BANDWIDTHS: [f64; 3] = [80.0, 100.0, 140.0];

/// Speaker characteristics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Voice {
    /// Lowest and highest fundamental frequency (Hz).
    pub f0_range: (f64, f64),
    /// Multiplier on the vowel formant table (vocal-tract length).
    pub formant_scale: f64,
    /// Level of aspiration noise mixed into voiced segments.
    pub breathiness: f64,
    /// Level of fricative bursts relative to vowels.
    pub frication: f64,
    /// Peak level of the finished clip.
    pub peak: f64,
    /// RMS of the stationary background noise, relative to full scale.
    pub noise_floor: f64,
}

impl Default for Voice {
    fn default() -> Self {
        Self { f0_range: (100.0, 180.0), formant_scale: 1.0, breathiness: 0.03, frication: 0.35, peak: 0.9, noise_floor: 1e-3 }
    }
}

impl Voice {
    /// A reproducible speaker variant; different indices give different pitch
    /// ranges and vocal-tract scales.
    pub fn speaker(index: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(0x5eed_0000 ^ index.wrapping_mul(0x9e37_79b9_7f4a_7c15));
        let low = rng.random_range(95.0..170.0);
        Self {
            f0_range: (low, low * rng.random_range(1.4..1.8)),
            formant_scale: rng.random_range(0.9..1.15),
            breathiness: rng.random_range(0.02..0.05),
            frication: rng.random_range(0.25..0.45),
            peak: 0.9,
            noise_floor: 1e-3,
        }
    }
}

/// Generator bound to one voice.
#[derive(Debug, Clone)]
pub struct SpeechSynth {
    voice: Voice,
    sample_rate: u32,
}

impl SpeechSynth {
    pub fn new(voice: Voice) -> Self {
        Self { voice, sample_rate: SAMPLE_RATE }
    }

    pub fn voice(&self) -> &Voice {
        &self.voice
    }

    /// A clip of `seconds` duration (at least one sample).
    pub fn utterance(&self, seed: u64, seconds: f64) -> Waveform {
        let sr = self.sample_rate as f64;
        let len = ((seconds * sr) as usize).max(1);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut out = vec![0.0; len];
        let mut pos = rng.random_range(0..(0.08 * sr) as usize);
        while pos < len {
            let dur = (rng.random_range(0.12..0.32) * sr) as usize;
            let end = (pos + dur).min(len);
            if rng.random_bool(0.7) {
                self.vowel(&mut rng, &mut out[pos..end]);
            } else {
                self.fricative(&mut rng, &mut out[pos..end]);
            }
            pos = end + (rng.random_range(0.0..0.12) * sr) as usize;
        }
        let peak = out.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        if peak > 0.0 {
            let g = self.voice.peak / peak;
            out.iter_mut().for_each(|v| *v *= g);
        }
        // uniform noise on [-a, a] has RMS a / sqrt(3)
        let a = self.voice.noise_floor * crate::math::sqrt(3.0);
        if a > 0.0 {
            out.iter_mut().for_each(|v| *v = (*v + rng.random_range(-a..a)).clamp(-1.0, 1.0));
        }
        Waveform::new(out, self.sample_rate).expect("synthesized samples are finite")
    }

    fn vowel(&self, rng: &mut ChaCha8Rng, seg: &mut [f64]) {
        let sr = self.sample_rate as f64;
        let (lo, hi) = self.voice.f0_range;
        let f_start = rng.random_range(lo..hi);
        let f_end = (f_start * rng.random_range(0.8..1.25)).clamp(lo, hi);
        let formants = VOWELS[rng.random_range(0..VOWELS.len())];
        let n = seg.len();
        let mut source = vec![0.0; n];
        let mut phase = rng.random_range(0.0..TAU);
        for (i, s) in source.iter_mut().enumerate() {
            let f0 = f_start + (f_end - f_start) * i as f64 / n.max(1) as f64;
            phase = (phase + TAU * f0 / sr) % TAU;
            // sum_k sin(k*phase)/k over harmonics below 0.45 fs, via the
            // Chebyshev recurrence for sin(k*phase)
            let harmonics = ((0.45 * sr) / f0) as usize;
            let c2 = 2.0 * cos(phase);
            let (mut prev, mut cur) = (0.0, sin(phase));
            let mut acc = 0.0;
            for k in 1..=harmonics {
                acc += cur / k as f64;
                let next = c2 * cur - prev;
                prev = cur;
                cur = next;
            }
            *s = acc + self.voice.breathiness * rng.random_range(-1.0..1.0);
        }
        for (f, bw) in formants.iter().zip(BANDWIDTHS) {
            resonate(&mut source, f * self.voice.formant_scale, bw, sr);
        }
        let g = 1.0 / crate::math::sqrt(source.iter().map(|v| v * v).sum::<f64>() / n.max(1) as f64).max(1e-12);
        for (i, (o, s)) in seg.iter_mut().zip(&source).enumerate() {
            *o += 0.3 * g * s * envelope(i, n);
        }
    }

    fn fricative(&self, rng: &mut ChaCha8Rng, seg: &mut [f64]) {
        let sr = self.sample_rate as f64;
        let n = seg.len();
        let mut noise: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        // sibilant colour: resonance between 3.5 and 7 kHz plus a first-difference tilt
        let centre = rng.random_range(3500.0..7000.0);
        resonate(&mut noise, centre, 1500.0, sr);
        let mut last = 0.0;
        for v in noise.iter_mut() {
            let d = *v - last;
            last = *v;
            *v = d;
        }
        let g = 1.0 / crate::math::sqrt(noise.iter().map(|v| v * v).sum::<f64>() / n.max(1) as f64).max(1e-12);
        for (i, (o, s)) in seg.iter_mut().zip(&noise).enumerate() {
            *o += 0.3 * self.voice.frication * g * s * envelope(i, n);
        }
    }
}

/// Two-pole resonator at `freq` with bandwidth `bw`, unit gain at DC-normalized peak.
fn resonate(x: &mut [f64], freq: f64, bw: f64, sr: f64) {
    let r = exp(-PI * bw / sr);
    let theta = TAU * freq.min(0.49 * sr) / sr;
    let (a1, a2) = (2.0 * r * cos(theta), -r * r);
    let b0 = 1.0 - r;
    let (mut y1, mut y2) = (0.0, 0.0);
    for v in x.iter_mut() {
        let y = b0 * *v + a1 * y1 + a2 * y2;
        y2 = y1;
        y1 = y;
        *v = y;
    }
}

/// Raised-cosine attack and release over the first and last 15% of a segment.
fn envelope(i: usize, n: usize) -> f64 {
    let ramp = (n as f64 * 0.15).max(1.0);
    let t = i as f64;
    let up = (t / ramp).min(1.0);
    let down = ((n as f64 - 1.0 - t) / ramp).clamp(0.0, 1.0);
    let e = up.min(down);
    0.5 - 0.5 * cos(PI * e)
}

/// `count` clips of one voice, seeded consecutively from `seed`.
pub fn corpus(voice: &Voice, count: usize, seconds: f64, seed: u64) -> Vec<Waveform> {
    let synth = SpeechSynth::new(voice.clone());
    (0..count as u64).map(|i| synth.utterance(seed.wrapping_add(i), seconds)).collect()
}

/// Clips spread over `speakers` voices, round-robin.
pub fn multi_speaker_corpus(speakers: u64, count: usize, seconds: f64, seed: u64) -> Vec<Waveform> {
    (0..count as u64)
        .map(|i| SpeechSynth::new(Voice::speaker(i % speakers.max(1))).utterance(seed.wrapping_add(i), seconds))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dsp::stft_magnitude;

    #[test]
    fn deterministic_and_bounded() {
        let s = SpeechSynth::new(Voice::default());
        let a = s.utterance(3, 1.0);
        assert_eq!(a, s.utterance(3, 1.0));
        assert_ne!(a, s.utterance(4, 1.0));
        assert_eq!(a.len(), 22050);
        assert!((a.peak() - 0.9).abs() < 0.01 && a.peak() <= 1.0);
    }

    #[test]
    fn has_broadband_energy() {
        let w = SpeechSynth::new(Voice::default()).utterance(1, 2.0);
        let spec = stft_magnitude(&w, 1024, 256).unwrap();
        let bin_hz = 22050.0 / 1024.0;
        let (mut low, mut high) = (0.0, 0.0);
        for t in 0..spec.frames {
            for (b, m) in spec.frame(t).iter().enumerate() {
                if (b as f64) * bin_hz < 4000.0 {
                    low += m * m;
                } else if (b as f64) * bin_hz > 5000.0 {
                    high += m * m;
                }
            }
        }
        let ratio_db = 10.0 * libm::log10(high / low);
        assert!(ratio_db > -30.0 && ratio_db < 0.0, "{ratio_db}");
    }

    #[test]
    fn speakers_differ() {
        assert_ne!(Voice::speaker(0), Voice::speaker(1));
        assert_eq!(Voice::speaker(5), Voice::speaker(5));
        let c = multi_speaker_corpus(3, 4, 0.3, 9);
        assert_eq!(c.len(), 4);
        assert!(c.iter().all(|w| w.len() == 6615));
    }
}
