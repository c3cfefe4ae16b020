//! Run directories: every command that writes an output directory leaves
//! the effective configuration, the command line and the seed next to its
//! artifacts.

use std::path::{Path, PathBuf};

use unsup_restore_core::train::EpochRecord;

use crate::config::RunConfig;
use crate::error::{Error, Result};

pub const CONFIG_FILE: &str = "config.toml";
pub const COMMAND_FILE: &str = "command.txt";
pub const SEED_FILE: &str = "seed";
pub const HISTORY_FILE: &str = "history.csv";
pub const BEST_CHECKPOINT: &str = "ckpt_best";

#[derive(Debug, Clone)]
pub struct RunDir {
    path: PathBuf,
}

fn quote(arg: &str) -> String {
    if !arg.is_empty() && arg.chars().all(|c| c.is_ascii_alphanumeric() || "-_./=:,+@%".contains(c)) {
        arg.to_string()
    } else {
        format!("'{}'", arg.replace('\'', r"'\''"))
    }
}

impl RunDir {
    pub fn create(path: impl Into<PathBuf>, cfg: &RunConfig, argv: &[String]) -> Result<Self> {
        let path = path.into();
        std::fs::create_dir_all(&path).map_err(Error::io(&path))?;
        let dir = Self { path };
        dir.write(CONFIG_FILE, cfg.to_toml())?;
        dir.write(COMMAND_FILE, argv.iter().map(|a| quote(a)).collect::<Vec<_>>().join(" ") + "\n")?;
        dir.write(SEED_FILE, format!("{}\n", cfg.seed))?;
        Ok(dir)
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn file(&self, name: &str) -> PathBuf {
        self.path.join(name)
    }

    pub fn checkpoint(&self, epoch: usize) -> PathBuf {
        self.file(&format!("ckpt_{epoch}"))
    }

    fn write(&self, name: &str, text: String) -> Result<()> {
        let p = self.file(name);
        std::fs::write(&p, text).map_err(Error::io(&p))
    }
}

/// `epoch,train_loss,val_loss,lr` rows.
pub fn write_history(path: impl AsRef<Path>, history: &[EpochRecord]) -> Result<()> {
    let path = path.as_ref();
    let mut text = String::from("epoch,train_loss,val_loss,lr\n");
    for r in history {
        text.push_str(&format!("{},{:.9},{:.9},{:e}\n", r.epoch, r.train_loss, r.val_loss, r.lr));
    }
    std::fs::write(path, text).map_err(Error::io(path))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn snapshot_files() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = RunConfig { seed: 42, ..RunConfig::default() };
        let argv: Vec<String> = ["unsup-restore", "train", "--out-dir", "a b"].map(String::from).to_vec();
        let run = RunDir::create(dir.path().join("r"), &cfg, &argv).unwrap();
        assert_eq!(std::fs::read_to_string(run.file(SEED_FILE)).unwrap(), "42\n");
        assert_eq!(std::fs::read_to_string(run.file(COMMAND_FILE)).unwrap(), "unsup-restore train --out-dir 'a b'\n");
        assert_eq!(RunConfig::load(run.file(CONFIG_FILE)).unwrap(), cfg);
        write_history(run.file(HISTORY_FILE), &[EpochRecord { epoch: 1, train_loss: 2.0, val_loss: 1.5, lr: 1e-3 }]).unwrap();
        assert_eq!(std::fs::read_to_string(run.file(HISTORY_FILE)).unwrap(), "epoch,train_loss,val_loss,lr\n1,2.000000000,1.500000000,1e-3\n");
    }
}
