//! Optional on-disk cache of decoded, resampled audio, enabled by pointing
//! `UNSUP_RESTORE_CACHE` at a directory.

use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};
use unsup_restore_core::dsp::{DspConfig, Waveform};

use crate::audio::load_wav;
use crate::error::{Error, Result};

pub const CACHE_ENV: &str = "UNSUP_RESTORE_CACHE";

#[derive(Debug, Clone)]
pub struct AudioCache {
    dir: Option<PathBuf>,
}

impl AudioCache {
    pub fn from_env() -> Self {
        Self { dir: std::env::var_os(CACHE_ENV).filter(|v| !v.is_empty()).map(PathBuf::from) }
    }

    pub fn at(dir: impl Into<PathBuf>) -> Self {
        Self { dir: Some(dir.into()) }
    }

    pub fn disabled() -> Self {
        Self { dir: None }
    }

    pub fn dir(&self) -> Option<&Path> {
        self.dir.as_deref()
    }

    /// Cache key: source path, size and mtime plus every setting that
    /// affects decoding.
    fn key(path: &Path, dsp: &DspConfig) -> Result<String> {
        let meta = std::fs::metadata(path).map_err(Error::io(path))?;
        let mtime = meta.modified().ok().and_then(|t| t.duration_since(std::time::UNIX_EPOCH).ok()).map(|d| d.as_nanos()).unwrap_or(0);
        let abs = std::fs::canonicalize(path).map_err(Error::io(path))?;
        let mut h = Sha256::new();
        h.update(abs.to_string_lossy().as_bytes());
        h.update(meta.len().to_le_bytes());
        h.update(mtime.to_le_bytes());
        h.update(serde_json::to_vec(&(dsp.sample_rate, &dsp.resampler)).expect("config serializes"));
        Ok(hex::encode(h.finalize()))
    }

    pub fn load(&self, path: impl AsRef<Path>, dsp: &DspConfig) -> Result<Waveform> {
        let path = path.as_ref();
        let Some(dir) = &self.dir else { return load_wav(path, dsp) };
        let entry = dir.join("audio").join(format!("{}.f64", Self::key(path, dsp)?));
        if let Ok(bytes) = std::fs::read(&entry) {
            if bytes.len() >= 4 && (bytes.len() - 4) % 8 == 0 {
                let rate = u32::from_le_bytes(bytes[..4].try_into().unwrap());
                let samples = bytes[4..].chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
                if let Ok(w) = Waveform::new(samples, rate) {
                    return Ok(w);
                }
            }
            log::warn!("ignoring unreadable cache entry {}", entry.display());
        }
        let w = load_wav(path, dsp)?;
        let mut bytes = Vec::with_capacity(4 + 8 * w.len());
        bytes.extend_from_slice(&w.sample_rate().to_le_bytes());
        w.samples().iter().for_each(|s| bytes.extend_from_slice(&s.to_le_bytes()));
        let parent = entry.parent().expect("entry has a parent");
        std::fs::create_dir_all(parent).map_err(Error::io(parent))?;
        // write-then-rename so concurrent readers never see partial files
        let tmp = entry.with_extension(format!("tmp{}", std::process::id()));
        std::fs::write(&tmp, &bytes).map_err(Error::io(&tmp))?;
        std::fs::rename(&tmp, &entry).map_err(Error::io(&entry))?;
        Ok(w)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::audio::save_wav;

    #[test]
    fn cached_load_matches_direct_load() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.wav");
        save_wav(&Waveform::new((0..500).map(|i| (i as f64 * 0.01).sin() * 0.3).collect(), 16000).unwrap(), &p).unwrap();
        let dsp = DspConfig::default();
        let cache = AudioCache::at(dir.path().join("cache"));
        let direct = load_wav(&p, &dsp).unwrap();
        assert_eq!(cache.load(&p, &dsp).unwrap(), direct);
        assert_eq!(std::fs::read_dir(dir.path().join("cache/audio")).unwrap().count(), 1);
        assert_eq!(cache.load(&p, &dsp).unwrap(), direct);
        assert_eq!(AudioCache::disabled().load(&p, &dsp).unwrap(), direct);
    }
}
