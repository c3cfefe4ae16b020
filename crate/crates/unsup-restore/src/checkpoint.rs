//! Checkpoint container.
//!
//! ```text
//! magic "USRCKPT\n" | version u32 LE | header length u64 LE | JSON header
//! | f64 LE payload | SHA-256 of everything before it
//! ```
//!
//! The header holds the configuration, the fingerprint, the length of every
//! payload section and, for training checkpoints, the scheduler state and
//! history. The payload holds the flattened parameter sets followed by the
//! optimizer moments and the best-epoch parameters.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use unsup_restore_core::dsp::DspConfig;
use unsup_restore_core::models::{fingerprint, ModelBundle, ModelConfig, ToyVocoder, BUNDLE_VERSION};
use unsup_restore_core::train::{AdamState, EpochRecord, Plateau, TrainState};

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"USRCKPT\n";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
enum Kind {
    Bundle,
    Vocoder,
}

#[derive(Debug, Serialize, Deserialize)]
struct TrainHeader {
    epoch: usize,
    scheduler: Plateau,
    best_epoch: usize,
    history: Vec<EpochRecord>,
    adam_steps: Vec<u64>,
    /// Moment lengths per tensor, per optimized set.
    adam_shapes: Vec<Vec<usize>>,
    has_best: bool,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    kind: Kind,
    fingerprint: String,
    model: ModelConfig,
    dsp: DspConfig,
    synthesis_frozen: bool,
    /// Flattened length of each stored parameter set.
    sets: Vec<usize>,
    train: Option<TrainHeader>,
}

fn corrupt(path: &Path, reason: impl Into<String>) -> Error {
    Error::CorruptCheckpoint { path: path.into(), reason: reason.into() }
}

fn write_container(path: &Path, header: &Header, payload: &[f64]) -> Result<()> {
    let json = serde_json::to_vec(header).expect("header serializes");
    let mut bytes = Vec::with_capacity(20 + json.len() + 8 * payload.len() + 32);
    bytes.extend_from_slice(MAGIC);
    bytes.extend_from_slice(&BUNDLE_VERSION.to_le_bytes());
    bytes.extend_from_slice(&(json.len() as u64).to_le_bytes());
    bytes.extend_from_slice(&json);
    payload.iter().for_each(|v| bytes.extend_from_slice(&v.to_le_bytes()));
    let digest = Sha256::digest(&bytes);
    bytes.extend_from_slice(&digest);
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(Error::io(dir))?;
    }
    let tmp = path.with_extension("partial");
    std::fs::write(&tmp, &bytes).map_err(Error::io(&tmp))?;
    std::fs::rename(&tmp, path).map_err(Error::io(path))
}

fn read_container(path: &Path) -> Result<(Header, Vec<f64>)> {
    let bytes = std::fs::read(path).map_err(Error::io(path))?;
    if bytes.len() < 20 + 32 || &bytes[..8] != MAGIC {
        return Err(corrupt(path, "not a checkpoint file"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version > BUNDLE_VERSION {
        return Err(Error::UnsupportedVersion { path: path.into(), found: version, supported: BUNDLE_VERSION });
    }
    let (body, digest) = bytes.split_at(bytes.len() - 32);
    if Sha256::digest(body).as_slice() != digest {
        return Err(corrupt(path, "checksum mismatch"));
    }
    let hlen = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
    let rest = &body[20..];
    if hlen > rest.len() || (rest.len() - hlen) % 8 != 0 {
        return Err(corrupt(path, "truncated header or payload"));
    }
    let header: Header = serde_json::from_slice(&rest[..hlen]).map_err(|e| corrupt(path, format!("header: {e}")))?;
    let payload: Vec<f64> = rest[hlen..].chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
    if header.fingerprint != fingerprint(&header.model, &header.dsp) {
        return Err(corrupt(path, "stored fingerprint does not match the stored configuration"));
    }
    Ok((header, payload))
}

/// Sequential reader over the payload.
struct Cursor<'a> {
    path: &'a Path,
    data: &'a [f64],
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [f64]> {
        if n > self.data.len() {
            return Err(corrupt(self.path, "payload shorter than the header declares"));
        }
        let (head, tail) = self.data.split_at(n);
        self.data = tail;
        Ok(head)
    }
}

/// Writes a bundle, optionally with the state needed to resume training.
pub fn save_bundle(bundle: &ModelBundle, path: impl AsRef<Path>, train: Option<&TrainState>) -> Result<()> {
    let sets = bundle.param_sets();
    let mut payload: Vec<f64> = sets.iter().flat_map(|s| s.flatten()).collect();
    let train = train.map(|st| {
        for a in &st.adam {
            a.m.iter().chain(&a.v).for_each(|t| payload.extend_from_slice(t));
        }
        if let Some((a, c)) = &st.best_params {
            payload.extend_from_slice(a);
            payload.extend_from_slice(c);
        }
        TrainHeader {
            epoch: st.epoch,
            scheduler: st.scheduler.clone(),
            best_epoch: st.best_epoch,
            history: st.history.clone(),
            adam_steps: st.adam.iter().map(|a| a.step).collect(),
            adam_shapes: st.adam.iter().map(|a| a.m.iter().map(Vec::len).collect()).collect(),
            has_best: st.best_params.is_some(),
        }
    });
    let header = Header {
        kind: Kind::Bundle,
        fingerprint: bundle.fingerprint(),
        model: bundle.model.clone(),
        dsp: bundle.dsp.clone(),
        synthesis_frozen: bundle.synthesis_frozen,
        sets: sets.iter().map(|s| s.flat_len()).collect(),
        train,
    };
    write_container(path.as_ref(), &header, &payload)
}

/// A loaded bundle and its training state, if the file has one.
pub struct LoadedBundle {
    pub bundle: ModelBundle,
    pub train: Option<TrainState>,
}

/// Loads a bundle with the configuration stored in the file.
pub fn load_bundle(path: impl AsRef<Path>) -> Result<LoadedBundle> {
    let path = path.as_ref();
    let (header, payload) = read_container(path)?;
    if header.kind != Kind::Bundle {
        return Err(corrupt(path, "file holds a vocoder, not a model bundle"));
    }
    let mut bundle = ModelBundle::new(&header.model, &header.dsp, 0)?;
    if header.sets.len() != 3 {
        return Err(corrupt(path, "expected three parameter sets"));
    }
    let mut cur = Cursor { path, data: &payload };
    for (set, &n) in bundle.param_sets_mut().into_iter().zip(&header.sets) {
        set.load_flat(cur.take(n)?).map_err(|e| corrupt(path, e.to_string()))?;
    }
    bundle.synthesis_frozen = header.synthesis_frozen;
    bundle.synthesis.params.set_trainable(!header.synthesis_frozen);
    let train = match header.train {
        None => None,
        Some(t) => {
            let mut adam = Vec::new();
            for (step, shapes) in t.adam_steps.iter().zip(&t.adam_shapes) {
                let mut read = || shapes.iter().map(|&n| cur.take(n).map(<[f64]>::to_vec)).collect::<Result<Vec<_>>>();
                let m = read()?;
                let v = read()?;
                adam.push(AdamState { step: *step, m, v });
            }
            let best_params = if t.has_best {
                Some((cur.take(header.sets[0])?.to_vec(), cur.take(header.sets[1])?.to_vec()))
            } else {
                None
            };
            Some(TrainState { epoch: t.epoch, scheduler: t.scheduler, best_epoch: t.best_epoch, adam, best_params, history: t.history })
        }
    };
    if !cur.data.is_empty() {
        return Err(corrupt(path, "trailing payload values"));
    }
    Ok(LoadedBundle { bundle, train })
}

/// Loads a bundle for the active configuration, rejecting checkpoints whose
/// architecture fingerprint differs. Inference-only settings (vocoder kind,
/// vocoder checkpoint, Griffin-Lim rounds) are taken from `model`.
pub fn load_bundle_for(path: impl AsRef<Path>, model: &ModelConfig, dsp: &DspConfig) -> Result<LoadedBundle> {
    let path = path.as_ref();
    let mut loaded = load_bundle(path)?;
    let expected = fingerprint(model, dsp);
    let found = loaded.bundle.fingerprint();
    if expected != found {
        return Err(Error::FingerprintMismatch { path: path.into(), expected, found });
    }
    loaded.bundle.model.vocoder = model.vocoder;
    loaded.bundle.model.vocoder_checkpoint = model.vocoder_checkpoint.clone();
    loaded.bundle.model.reference_iterations = model.reference_iterations;
    loaded.bundle.dsp.resampler = dsp.resampler.clone();
    Ok(loaded)
}

pub fn save_vocoder(vocoder: &ToyVocoder, model: &ModelConfig, dsp: &DspConfig, path: impl AsRef<Path>) -> Result<()> {
    let header = Header {
        kind: Kind::Vocoder,
        fingerprint: fingerprint(model, dsp),
        model: model.clone(),
        dsp: dsp.clone(),
        synthesis_frozen: true,
        sets: vec![vocoder.params.flat_len()],
        train: None,
    };
    write_container(path.as_ref(), &header, &vocoder.params.flatten())
}

/// True when two analysis setups produce interchangeable mel features.
pub fn same_features(a: &DspConfig, b: &DspConfig) -> bool {
    (a.sample_rate, a.frame_size, a.hop, a.n_mels, a.f_min.to_bits(), a.f_max.to_bits(), a.floor.to_bits())
        == (b.sample_rate, b.frame_size, b.hop, b.n_mels, b.f_min.to_bits(), b.f_max.to_bits(), b.floor.to_bits())
}

/// Loads a frozen vocoder written by [`save_vocoder`], checking that it was
/// trained on the same mel features as `dsp`.
pub fn load_vocoder(path: impl AsRef<Path>, dsp: &DspConfig) -> Result<(ToyVocoder, ModelConfig)> {
    let path = path.as_ref();
    let (header, payload) = read_container(path)?;
    if header.kind != Kind::Vocoder {
        return Err(corrupt(path, "file holds a model bundle, not a vocoder"));
    }
    if !same_features(&header.dsp, dsp) {
        return Err(Error::FingerprintMismatch {
            path: path.into(),
            expected: fingerprint(&header.model, dsp),
            found: header.fingerprint,
        });
    }
    let mut voc = ToyVocoder::new(&header.model, &header.dsp, 0)?;
    voc.params.load_flat(&payload).map_err(|e| corrupt(path, e.to_string()))?;
    voc.params.set_trainable(false);
    Ok((voc, header.model))
}

/// SHA-256 of a file, hex encoded.
pub fn file_digest(path: impl AsRef<Path>) -> Result<String> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(Error::io(path))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ModelConfig {
        ModelConfig { levels: 2, blocks_per_level: 1, analysis_width: 4, channel_width: 3, channel_dim: 5, channel_head_hidden: 4, vocoder_width: 8, ..ModelConfig::default() }
    }

    #[test]
    fn bundle_round_trip_is_bit_identical() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("ckpt_1");
        let b = ModelBundle::new(&tiny(), &DspConfig::default(), 5).unwrap();
        save_bundle(&b, &p, None).unwrap();
        let l = load_bundle(&p).unwrap();
        assert!(l.train.is_none());
        for (x, y) in b.param_sets().iter().zip(l.bundle.param_sets()) {
            assert_eq!(x.checksum(), y.checksum());
        }
        assert!(!l.bundle.synthesis.params.trainable());
        // same bundle, same bytes
        let q = dir.path().join("again");
        save_bundle(&l.bundle, &q, None).unwrap();
        assert_eq!(file_digest(&p).unwrap(), file_digest(&q).unwrap());
    }

    #[test]
    fn guards() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("ckpt");
        let dsp = DspConfig::default();
        save_bundle(&ModelBundle::new(&tiny(), &dsp, 5).unwrap(), &p, None).unwrap();
        let other = ModelConfig { channel_dim: 6, ..tiny() };
        assert!(matches!(load_bundle_for(&p, &other, &dsp), Err(Error::FingerprintMismatch { .. })));
        assert!(load_bundle_for(&p, &ModelConfig { reference_iterations: 3, ..tiny() }, &dsp).is_ok());

        let mut bytes = std::fs::read(&p).unwrap();
        bytes[8..12].copy_from_slice(&(BUNDLE_VERSION + 1).to_le_bytes());
        std::fs::write(&p, &bytes).unwrap();
        assert!(matches!(load_bundle(&p), Err(Error::UnsupportedVersion { found, .. }) if found == BUNDLE_VERSION + 1));

        bytes[8..12].copy_from_slice(&BUNDLE_VERSION.to_le_bytes());
        let mid = bytes.len() / 2;
        bytes[mid] ^= 1;
        std::fs::write(&p, &bytes).unwrap();
        assert!(matches!(load_bundle(&p), Err(Error::CorruptCheckpoint { .. })));
        std::fs::write(&p, b"hello").unwrap();
        assert!(matches!(load_bundle(&p), Err(Error::CorruptCheckpoint { .. })));
    }

    #[test]
    fn vocoder_files() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("voc");
        let dsp = DspConfig::default();
        let v = ToyVocoder::new(&tiny(), &dsp, 1).unwrap();
        save_vocoder(&v, &tiny(), &dsp, &p).unwrap();
        let (w, _) = load_vocoder(&p, &dsp).unwrap();
        assert_eq!(w.params.checksum(), v.params.checksum());
        assert!(load_bundle(&p).is_err());
        let other = DspConfig { n_mels: 40, ..DspConfig::default() };
        assert!(matches!(load_vocoder(&p, &other), Err(Error::FingerprintMismatch { .. })));
    }
}
