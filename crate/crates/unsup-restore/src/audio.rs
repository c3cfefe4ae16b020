//! WAV reading and writing.

use std::path::Path;

use unsup_restore_core::dsp::{resample_with, DspConfig, Waveform};

use crate::error::{Error, Result};

/// Reads a PCM (8–32 bit) or 32-bit float WAV, averages channels to mono,
/// scales integer samples by `1 / 2^(bits-1)` and resamples to the
/// configured rate when needed.
pub fn load_wav(path: impl AsRef<Path>, dsp: &DspConfig) -> Result<Waveform> {
    let path = path.as_ref();
    let wav_err = |source| Error::Wav { path: path.to_path_buf(), source };
    let mut reader = hound::WavReader::open(path).map_err(wav_err)?;
    let spec = reader.spec();
    let interleaved: Vec<f64> = match (spec.sample_format, spec.bits_per_sample) {
        (hound::SampleFormat::Float, 32) => {
            reader.samples::<f32>().map(|s| s.map(f64::from)).collect::<std::result::Result<_, _>>().map_err(wav_err)?
        }
        (hound::SampleFormat::Int, bits @ 8..=32) => {
            let scale = 1.0 / (1u64 << (bits - 1)) as f64;
            reader.samples::<i32>().map(|s| s.map(|v| v as f64 * scale)).collect::<std::result::Result<_, _>>().map_err(wav_err)?
        }
        (format, bits) => {
            return Err(Error::UnsupportedAudio { path: path.to_path_buf(), reason: format!("{bits}-bit {format:?} samples") })
        }
    };
    let channels = spec.channels as usize;
    let mono: Vec<f64> = interleaved.chunks_exact(channels).map(|f| f.iter().sum::<f64>() / channels as f64).collect();
    if mono.is_empty() {
        return Err(Error::UnsupportedAudio { path: path.to_path_buf(), reason: "no samples".into() });
    }
    let w = Waveform::new(mono, spec.sample_rate)?;
    if spec.sample_rate == dsp.sample_rate {
        Ok(w)
    } else {
        Ok(resample_with(&w, dsp.sample_rate, &dsp.resampler)?)
    }
}

/// Writes 16-bit mono PCM; samples are clamped to the representable range.
pub fn save_wav(w: &Waveform, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(Error::io(dir))?;
    }
    let spec = hound::WavSpec { channels: 1, sample_rate: w.sample_rate(), bits_per_sample: 16, sample_format: hound::SampleFormat::Int };
    let wav_err = |source| Error::Wav { path: path.to_path_buf(), source };
    let mut writer = hound::WavWriter::create(path, spec).map_err(wav_err)?;
    for &s in w.samples() {
        writer.write_sample((s * 32768.0).round().clamp(-32768.0, 32767.0) as i16).map_err(wav_err)?;
    }
    writer.finalize().map_err(wav_err)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn roundtrip(x: Vec<f64>) -> Vec<f64> {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.wav");
        save_wav(&Waveform::new(x, 22050).unwrap(), &p).unwrap();
        load_wav(&p, &DspConfig::default()).unwrap().into_samples()
    }

    #[test]
    fn full_scale_pcm_sample() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("max.wav");
        let spec = hound::WavSpec { channels: 1, sample_rate: 22050, bits_per_sample: 16, sample_format: hound::SampleFormat::Int };
        let mut w = hound::WavWriter::create(&p, spec).unwrap();
        w.write_sample(32767i16).unwrap();
        w.write_sample(-32768i16).unwrap();
        w.finalize().unwrap();
        let x = load_wav(&p, &DspConfig::default()).unwrap();
        assert_eq!(x.sample_rate(), 22050);
        assert_eq!(x.samples(), [32767.0 / 32768.0, -1.0]);
    }

    #[test]
    fn zeros_and_ramp_round_trip() {
        assert!(roundtrip(vec![0.0; 100]).iter().all(|&v| v == 0.0));
        let ramp: Vec<f64> = (0..=2000).map(|i| -1.0 + i as f64 / 1000.0).collect();
        let back = roundtrip(ramp.clone());
        let err = ramp.iter().zip(&back).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(err <= 2.0 / 32768.0, "{err}");
    }

    #[test]
    fn half_scale_sine_peak() {
        // 40-sample period, so samples land exactly on the peaks
        let x: Vec<f64> = (0..2205).map(|i| 0.5 * (2.0 * std::f64::consts::PI * i as f64 / 40.0).sin()).collect();
        let back = roundtrip(x);
        let peak = back.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        assert!((peak - 0.5).abs() <= 1.0 / 32768.0);
    }

    #[test]
    fn stereo_float_is_downmixed() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("st.wav");
        let spec = hound::WavSpec { channels: 2, sample_rate: 22050, bits_per_sample: 32, sample_format: hound::SampleFormat::Float };
        let mut w = hound::WavWriter::create(&p, spec).unwrap();
        for s in [0.5f32, -0.25, 1.0, 0.0] {
            w.write_sample(s).unwrap();
        }
        w.finalize().unwrap();
        assert_eq!(load_wav(&p, &DspConfig::default()).unwrap().samples(), [0.125, 0.5]);
    }

    #[test]
    fn resamples_44k_sine_keeping_its_peak() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("44k.wav");
        let x: Vec<f64> = (0..44100).map(|i| 0.5 * (2.0 * std::f64::consts::PI * 1000.0 * i as f64 / 44100.0).sin()).collect();
        save_wav(&Waveform::new(x, 44100).unwrap(), &p).unwrap();
        let y = load_wav(&p, &DspConfig::default()).unwrap();
        assert_eq!(y.sample_rate(), 22050);
        // peak bin of a 4096-point DFT magnitude
        let n = 4096;
        let seg = &y.samples()[8000..8000 + n];
        let mag = |k: usize| {
            let (mut re, mut im) = (0.0, 0.0);
            for (i, v) in seg.iter().enumerate() {
                let a = 2.0 * std::f64::consts::PI * (k * i) as f64 / n as f64;
                re += v * a.cos();
                im -= v * a.sin();
            }
            re.hypot(im)
        };
        let peak = (0..n / 2).max_by(|&a, &b| mag(a).total_cmp(&mag(b))).unwrap();
        let expected = 1000.0 * n as f64 / 22050.0;
        assert!((peak as f64 - expected).abs() <= 1.0, "{peak} vs {expected}");
    }

    #[test]
    fn missing_file_names_the_path() {
        let e = load_wav("/nonexistent/x.wav", &DspConfig::default()).unwrap_err().to_string();
        assert!(e.contains("/nonexistent/x.wav"));
    }
}
