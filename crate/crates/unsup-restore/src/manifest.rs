//! Dataset manifests: CSV with header
//! `id,clean_path,degraded_path,recipe_json,split,duration`.
//!
//! Relative paths are resolved against the manifest's directory.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use unsup_restore_core::degrade::DegradationRecipe;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "train" => Ok(Split::Train),
            "val" | "valid" | "validation" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(format!("unknown split `{other}`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ManifestItem {
    pub id: String,
    pub clean_path: PathBuf,
    pub degraded_path: Option<PathBuf>,
    pub recipe: Option<DegradationRecipe>,
    pub split: Split,
    pub duration: f64,
}

#[derive(Debug, Serialize, Deserialize)]
struct Row {
    id: String,
    clean_path: String,
    degraded_path: String,
    recipe_json: String,
    split: String,
    duration: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Manifest {
    pub items: Vec<ManifestItem>,
}

impl Manifest {
    pub fn new(items: Vec<ManifestItem>) -> Result<Self> {
        let m = Self { items };
        m.check_ids(Path::new("<manifest>"))?;
        Ok(m)
    }

    fn check_ids(&self, path: &Path) -> Result<()> {
        let mut seen = BTreeSet::new();
        for it in &self.items {
            if !seen.insert(it.id.as_str()) {
                return Err(Error::Manifest { path: path.into(), reason: format!("duplicate id `{}`", it.id) });
            }
        }
        Ok(())
    }

    /// Reads and validates a manifest: unique ids, known splits and
    /// existing audio files.
    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let base = path.parent().unwrap_or(Path::new("."));
        let bad = |reason: String| Error::Manifest { path: path.into(), reason };
        let mut reader = csv::Reader::from_path(path).map_err(|e| bad(e.to_string()))?;
        let mut items = Vec::new();
        for (line, row) in reader.deserialize::<Row>().enumerate() {
            let row = row.map_err(|e| bad(e.to_string()))?;
            let at = |what: String| bad(format!("row {}: {what}", line + 1));
            let resolve = |p: &str| {
                let p = PathBuf::from(p);
                if p.is_absolute() { p } else { base.join(p) }
            };
            let recipe = if row.recipe_json.trim().is_empty() {
                None
            } else {
                let r: DegradationRecipe = serde_json::from_str(&row.recipe_json).map_err(|e| at(format!("recipe_json: {e}")))?;
                r.validate()?;
                Some(r)
            };
            let item = ManifestItem {
                id: row.id,
                clean_path: resolve(&row.clean_path),
                degraded_path: (!row.degraded_path.is_empty()).then(|| resolve(&row.degraded_path)),
                recipe,
                split: row.split.parse().map_err(at)?,
                duration: row.duration,
            };
            for p in std::iter::once(&item.clean_path).chain(item.degraded_path.as_ref()) {
                if !p.is_file() {
                    return Err(at(format!("missing file {}", p.display())));
                }
            }
            items.push(item);
        }
        let m = Self { items };
        m.check_ids(path)?;
        Ok(m)
    }

    /// Writes the manifest; paths below its directory are stored relative,
    /// other relative paths are made absolute so they still resolve on read.
    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let base = path.parent().unwrap_or(Path::new("."));
        if !base.as_os_str().is_empty() {
            std::fs::create_dir_all(base).map_err(Error::io(base))?;
        }
        let rel = |p: &Path| -> Result<String> {
            let stored = match p.strip_prefix(base) {
                Ok(r) => r.to_path_buf(),
                Err(_) if p.is_relative() => std::path::absolute(p).map_err(Error::io(p))?,
                Err(_) => p.to_path_buf(),
            };
            Ok(stored.to_string_lossy().into_owned())
        };
        let bad = |e: csv::Error| Error::Manifest { path: path.into(), reason: e.to_string() };
        let mut w = csv::Writer::from_path(path).map_err(bad)?;
        for it in &self.items {
            w.serialize(Row {
                id: it.id.clone(),
                clean_path: rel(&it.clean_path)?,
                degraded_path: it.degraded_path.as_deref().map(rel).transpose()?.unwrap_or_default(),
                recipe_json: it.recipe.as_ref().map(|r| serde_json::to_string(r).expect("recipes serialize")).unwrap_or_default(),
                split: it.split.name().into(),
                duration: it.duration,
            })
            .map_err(bad)?;
        }
        w.flush().map_err(Error::io(path))
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &ManifestItem> {
        self.items.iter().filter(move |it| it.split == split)
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn touch(dir: &Path, name: &str) -> PathBuf {
        let p = dir.join(name);
        std::fs::write(&p, b"x").unwrap();
        p
    }

    #[test]
    fn round_trip_with_relative_paths() {
        let dir = tempfile::tempdir().unwrap();
        let a = touch(dir.path(), "a.wav");
        let b = touch(dir.path(), "b.wav");
        let m = Manifest::new(vec![
            ManifestItem { id: "a".into(), clean_path: a.clone(), degraded_path: Some(b), recipe: Some(DegradationRecipe::Clipped { clip_threshold: 0.25 }), split: Split::Test, duration: 1.5 },
            ManifestItem { id: "b".into(), clean_path: a, degraded_path: None, recipe: None, split: Split::Train, duration: 2.0 },
        ])
        .unwrap();
        let p = dir.path().join("m.csv");
        m.write(&p).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        assert!(text.starts_with("id,clean_path,degraded_path,recipe_json,split,duration\n"));
        assert!(text.contains("a,a.wav,b.wav,"));
        assert_eq!(Manifest::read(&p).unwrap(), m);
        assert_eq!(m.split(Split::Test).count(), 1);
    }

    #[test]
    fn rejects_duplicates_missing_files_and_bad_splits() {
        let dir = tempfile::tempdir().unwrap();
        touch(dir.path(), "a.wav");
        let p = dir.path().join("m.csv");
        let head = "id,clean_path,degraded_path,recipe_json,split,duration\n";
        std::fs::write(&p, format!("{head}x,a.wav,,,train,1\nx,a.wav,,,test,1\n")).unwrap();
        assert!(Manifest::read(&p).unwrap_err().to_string().contains("duplicate id"));
        std::fs::write(&p, format!("{head}x,gone.wav,,,train,1\n")).unwrap();
        assert!(Manifest::read(&p).unwrap_err().to_string().contains("missing file"));
        std::fs::write(&p, format!("{head}x,a.wav,,,dev,1\n")).unwrap();
        assert!(Manifest::read(&p).unwrap_err().to_string().contains("unknown split"));
        std::fs::write(&p, format!("{head}x,a.wav,,\"{{\"\"kind\"\":\"\"clipped\"\",\"\"clip_threshold\"\":2.0}}\",train,1\n")).unwrap();
        assert!(Manifest::read(&p).is_err());
    }
}
