//! Restoration and audio-effect transfer with a trained bundle.

use alloc::vec;
use alloc::vec::Vec;

use crate::autograd::{Tape, Tensor};
use crate::dsp::Waveform;
use crate::models::{MelVocoder, ModelBundle};
use crate::{Error, Result};

fn check_rate(x: &Waveform, bundle: &ModelBundle) -> Result<()> {
    if x.sample_rate() != bundle.dsp.sample_rate {
        return Err(Error::InvalidWaveform(alloc::format!(
            "expected {} Hz audio, got {} Hz",
            bundle.dsp.sample_rate,
            x.sample_rate()
        )));
    }
    Ok(())
}

/// Zero-pads clips shorter than one analysis window.
fn padded(x: &Waveform, bundle: &ModelBundle) -> Result<Waveform> {
    let min = bundle.dsp.frame_size / 2 + 1;
    if x.len() < min { x.fit_length(min) } else { Ok(x.clone()) }
}

/// Mel analysis → analysis module → vocoder; the output has the input's
/// length.
pub fn restore(x_low: &Waveform, bundle: &ModelBundle, vocoder: &dyn MelVocoder) -> Result<Waveform> {
    check_rate(x_low, bundle)?;
    let x = padded(x_low, bundle)?;
    let mel = bundle.analyzer()?.analyze(&x)?;
    let (features, _) = bundle.analyze(&mel)?;
    let y = vocoder.synthesize(&features)?;
    let diff = y.len().abs_diff(x.len());
    if diff > bundle.dsp.hop {
        return Err(Error::LengthMismatch { left: y.len(), right: x.len() });
    }
    y.fit_length(x_low.len())
}

/// [`restore`] over overlapping chunks of `chunk_seconds`, cross-faded with
/// triangular windows at 50% overlap.
pub fn restore_chunked(x_low: &Waveform, bundle: &ModelBundle, vocoder: &dyn MelVocoder, chunk_seconds: f64) -> Result<Waveform> {
    check_rate(x_low, bundle)?;
    if !(chunk_seconds > 0.0) {
        return Err(Error::InvalidParameter { name: "chunk_seconds", reason: "must be positive".into() });
    }
    let hop = bundle.dsp.hop;
    let step_hops = crate::math::round(chunk_seconds * x_low.sample_rate() as f64 / (2 * hop) as f64) as usize;
    let step = step_hops.max(1) * hop;
    let chunk = 2 * step;
    if x_low.len() <= chunk {
        return restore(x_low, bundle, vocoder);
    }
    let n = x_low.len();
    let mut out = vec![0.0; n];
    let mut weight = vec![0.0; n];
    let mut start = 0;
    loop {
        let len = chunk.min(n - start);
        let piece = restore(&x_low.slice(start, len)?, bundle, vocoder)?;
        for (i, v) in piece.samples().iter().enumerate() {
            // triangle over the full chunk; the small offset keeps edge
            // samples from getting zero total weight
            let w = 1.0 - ((i as f64 + 0.5) / step as f64 - 1.0).abs();
            out[start + i] += w * v;
            weight[start + i] += w;
        }
        if start + len >= n {
            break;
        }
        start += step;
    }
    for (o, w) in out.iter_mut().zip(&weight) {
        *o /= *w;
    }
    Waveform::new(out, x_low.sample_rate())
}

/// Eval-mode channel feature of a degraded clip.
pub fn extract_channel(x_low: &Waveform, bundle: &ModelBundle) -> Result<Vec<f64>> {
    check_rate(x_low, bundle)?;
    let mel = bundle.analyzer()?.analyze(&padded(x_low, bundle)?)?;
    Ok(bundle.analyze(&mel)?.1)
}

/// Distorts clean audio through the channel module conditioned on `c`.
pub fn transfer_effect(x_clean: &Waveform, c: &[f64], bundle: &ModelBundle) -> Result<Waveform> {
    check_rate(x_clean, bundle)?;
    let dim = bundle.channel.channel_dim();
    if c.len() != dim {
        return Err(Error::ShapeMismatch(alloc::format!("channel feature has {} values, expected {dim}", c.len())));
    }
    let mut tape = Tape::inference();
    let x = tape.constant(Tensor::new([1, 1, x_clean.len()], x_clean.samples().to_vec())?);
    let c = tape.constant(Tensor::new([1, dim, 1], c.to_vec())?);
    let y = bundle.channel.forward(&mut tape, x, c)?;
    Waveform::new(tape.value(y).data.clone(), x_clean.sample_rate())
}

/// Extracts `c` from `reference` and applies it to `x_clean`.
pub fn transfer_from(reference: &Waveform, x_clean: &Waveform, bundle: &ModelBundle) -> Result<Waveform> {
    let c = extract_channel(reference, bundle)?;
    transfer_effect(x_clean, &c, bundle)
}

/// Cosine similarity of two channel features.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = crate::math::sqrt(a.iter().map(|x| x * x).sum());
    let nb = crate::math::sqrt(b.iter().map(|x| x * x).sum());
    if na == 0.0 || nb == 0.0 { 0.0 } else { dot / (na * nb) }
}
