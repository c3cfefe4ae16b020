//! Objective metrics: mel cepstral distortion and multi-scale spectral distance.

use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::dsp::{mel_cepstrum, MelAnalyzer, MelCepstrum, Waveform};
use crate::losses::{LossConfig, SpectralLoss};
use crate::math::{sqrt, LN_10, SQRT_2};
use crate::{Error, Result};

/// `10 sqrt(2) / ln 10`, the dB scale of mel cepstral distortion.
pub const MCD_SCALE: f64 = 10.0 * SQRT_2 / LN_10;

/// Mean per-frame Euclidean distance over c1..c24, in dB.
pub fn mcd_cepstra(a: &MelCepstrum, b: &MelCepstrum) -> Result<f64> {
    if a.frames != b.frames || a.order != b.order {
        return Err(Error::ShapeMismatch(alloc::format!(
            "cepstra {}x{} vs {}x{}",
            a.frames,
            a.order + 1,
            b.frames,
            b.order + 1
        )));
    }
    if a.frames == 0 {
        return Err(Error::EmptyDataset("cepstrum frames"));
    }
    let total: f64 = (0..a.frames)
        .map(|t| {
            let (x, y) = (a.frame(t), b.frame(t));
            sqrt(x[1..].iter().zip(&y[1..]).map(|(p, q)| (p - q) * (p - q)).sum::<f64>())
        })
        .sum();
    Ok(MCD_SCALE * total / a.frames as f64)
}

/// Brings two clips to a common length: equal lengths pass through, a
/// difference of at most one hop is removed by centre-trimming the longer one.
pub fn align_lengths(reference: &Waveform, hypothesis: &Waveform, hop: usize) -> Result<(Waveform, Waveform)> {
    let (r, h) = (reference.len(), hypothesis.len());
    if r.abs_diff(h) > hop {
        return Err(Error::LengthMismatch { left: r, right: h });
    }
    let n = r.min(h);
    Ok((reference.center_fit(n)?, hypothesis.center_fit(n)?))
}

pub fn mcd_with(analyzer: &MelAnalyzer, reference: &Waveform, hypothesis: &Waveform) -> Result<f64> {
    let (r, h) = align_lengths(reference, hypothesis, analyzer.config().hop)?;
    let cr = mel_cepstrum(&analyzer.analyze(&r)?)?;
    let ch = mel_cepstrum(&analyzer.analyze(&h)?)?;
    mcd_cepstra(&cr, &ch)
}

/// Mel cepstral distortion (dB) between two clips at the default analysis settings.
pub fn mcd(reference: &Waveform, hypothesis: &Waveform) -> Result<f64> {
    mcd_with(&MelAnalyzer::new(&Default::default())?, reference, hypothesis)
}

/// Multi-scale spectral loss used as a metric.
pub fn spectral_distance_with(loss: &SpectralLoss, reference: &Waveform, hypothesis: &Waveform) -> Result<f64> {
    let (r, h) = align_lengths(reference, hypothesis, 256)?;
    loss.value(r.samples(), h.samples())
}

pub fn spectral_distance(reference: &Waveform, hypothesis: &Waveform) -> Result<f64> {
    spectral_distance_with(&SpectralLoss::new(&LossConfig::default())?, reference, hypothesis)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    Mcd,
    Msd,
}

impl core::str::FromStr for Metric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "mcd" => Ok(Metric::Mcd),
            "msd" | "spectral_distance" => Ok(Metric::Msd),
            other => Err(Error::param("metrics", alloc::format!("unknown metric `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ItemMetrics {
    pub id: String,
    pub mcd: Option<f64>,
    pub spectral_distance: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    pub std: f64,
    pub count: usize,
}

impl Summary {
    /// Mean and population standard deviation.
    pub fn of(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        Some(Self { mean, std: sqrt(var), count: values.len() })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub per_item: Vec<ItemMetrics>,
    pub mcd: Option<Summary>,
    pub spectral_distance: Option<Summary>,
}

impl MetricReport {
    pub fn from_items(per_item: Vec<ItemMetrics>) -> Self {
        let mcd: Vec<f64> = per_item.iter().filter_map(|i| i.mcd).collect();
        let msd: Vec<f64> = per_item.iter().filter_map(|i| i.spectral_distance).collect();
        Self { mcd: Summary::of(&mcd), spectral_distance: Summary::of(&msd), per_item }
    }
}

/// Computes the requested metrics of each `(id, reference, hypothesis)` triple.
pub struct Evaluator {
    analyzer: MelAnalyzer,
    loss: SpectralLoss,
    metrics: Vec<Metric>,
}

impl Evaluator {
    pub fn new(analyzer: MelAnalyzer, loss: SpectralLoss, metrics: &[Metric]) -> Self {
        Self { analyzer, loss, metrics: metrics.to_vec() }
    }

    pub fn item(&self, id: &str, reference: &Waveform, hypothesis: &Waveform) -> Result<ItemMetrics> {
        let mcd = if self.metrics.contains(&Metric::Mcd) {
            Some(mcd_with(&self.analyzer, reference, hypothesis)?)
        } else {
            None
        };
        let spectral_distance = if self.metrics.contains(&Metric::Msd) {
            Some(spectral_distance_with(&self.loss, reference, hypothesis)?)
        } else {
            None
        };
        Ok(ItemMetrics { id: id.into(), mcd, spectral_distance })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::degrade::{apply, DegradationKind, DegradationRecipe};
    use crate::synth::{SpeechSynth, Voice};
    use alloc::vec;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn clip(seed: u64) -> Waveform {
        SpeechSynth::new(Voice::default()).utterance(seed, 0.5)
    }

    #[test]
    fn identical_is_zero_and_symmetric() {
        let (a, b) = (clip(1), clip(2));
        assert_eq!(mcd(&a, &a).unwrap(), 0.0);
        assert_eq!(mcd(&a, &b).unwrap(), mcd(&b, &a).unwrap());
        assert_eq!(spectral_distance(&a, &a).unwrap(), 0.0);
        assert!(spectral_distance(&a, &b).unwrap() > 0.0);
    }

    #[test]
    fn two_frame_closed_form() {
        let mut a = MelCepstrum { frames: 2, order: 24, coefficients: vec![0.0; 50] };
        let mut b = a.clone();
        // frame 0 differs by (3, 4) in c1, c2; frame 1 by 1 in c24; c0 ignored
        b.coefficients[1] = 3.0;
        b.coefficients[2] = 4.0;
        b.coefficients[25 + 24] = 1.0;
        a.coefficients[0] = 100.0;
        let expected = MCD_SCALE * (5.0 + 1.0) / 2.0;
        assert!((mcd_cepstra(&a, &b).unwrap() - expected).abs() < 1e-9);
    }

    #[test]
    fn length_alignment() {
        let a = clip(3);
        let b = a.fit_length(a.len() - 100).unwrap();
        assert!(mcd(&a, &b).is_ok());
        let c = a.fit_length(a.len() - 300).unwrap();
        assert!(matches!(mcd(&a, &c), Err(Error::LengthMismatch { .. })));
    }

    #[test]
    fn report_aggregates() {
        let items = vec![
            ItemMetrics { id: "a".into(), mcd: Some(1.0), spectral_distance: Some(2.0) },
            ItemMetrics { id: "b".into(), mcd: Some(3.0), spectral_distance: Some(2.0) },
        ];
        let r = MetricReport::from_items(items);
        let m = r.mcd.unwrap();
        assert!((m.mean - 2.0).abs() < 1e-12 && (m.std - 1.0).abs() < 1e-12);
        assert_eq!(r.spectral_distance.unwrap().std, 0.0);
    }

    #[test]
    fn input_ordering_on_synthetic_speech() {
        let mut totals = [0.0; 4];
        let kinds = [
            DegradationKind::QuantizedResampled,
            DegradationKind::BandLimited,
            DegradationKind::Overdrive,
            DegradationKind::Clipped,
        ];
        for seed in 0..6 {
            let c = SpeechSynth::new(Voice::speaker(seed)).utterance(seed, 1.0);
            for (k, kind) in kinds.iter().enumerate() {
                totals[k] += mcd(&c, &apply(&DegradationRecipe::standard(*kind), &c).unwrap()).unwrap();
            }
        }
        assert!(totals.windows(2).all(|w| w[0] > w[1]), "{totals:?}");
    }

    proptest::proptest! {
        #[test]
        fn triangle_inequality(seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let base = clip(seed % 7);
            let mk = |rng: &mut ChaCha8Rng| {
                let g = rng.random_range(0.2..1.0);
                Waveform::new(base.samples().iter().map(|v| g * v + rng.random_range(-0.05..0.05)).collect(), 22050).unwrap()
            };
            let (a, b, c) = (mk(&mut rng), mk(&mut rng), mk(&mut rng));
            let (ab, bc, ac) = (mcd(&a, &b).unwrap(), mcd(&b, &c).unwrap(), mcd(&a, &c).unwrap());
            proptest::prop_assert!(ac <= ab + bc + 1e-9);
            proptest::prop_assert!(ab >= 0.0);
        }
    }
}
