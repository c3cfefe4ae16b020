//! Run configuration: a strict TOML file with one table per section.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use unsup_restore_core::dsp::DspConfig;
use unsup_restore_core::losses::LossConfig;
use unsup_restore_core::metrics::Metric;
use unsup_restore_core::models::{ModelConfig, VocoderKind};
use unsup_restore_core::train::{TrainConfig, VocoderTrainConfig};

use crate::dataset::SplitSizes;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub metrics: Vec<Metric>,
    /// Vocoder used to render restored features.
    pub vocoder: VocoderKind,
    pub split: SplitSizes,
    /// Restore in overlapping chunks of this length (`None`: whole files).
    pub chunk_seconds: Option<f64>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { metrics: vec![Metric::Mcd, Metric::Msd], vocoder: VocoderKind::ToyNeural, split: SplitSizes::default(), chunk_seconds: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub run_name: String,
    pub output_root: PathBuf,
    pub dsp: DspConfig,
    pub model: ModelConfig,
    pub loss: LossConfig,
    pub train: TrainConfig,
    pub vocoder_train: VocoderTrainConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            run_name: "run".into(),
            output_root: PathBuf::from("runs"),
            dsp: DspConfig::default(),
            model: ModelConfig::default(),
            loss: LossConfig::default(),
            train: TrainConfig::default(),
            vocoder_train: VocoderTrainConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(Error::io(path))?;
        Self::parse(&text).map_err(|reason| Error::Config { path: path.into(), reason })
    }

    pub fn parse(text: &str) -> std::result::Result<Self, String> {
        let cfg: Self = toml::from_str(text).map_err(|e| e.message().to_string())?;
        cfg.validate().map_err(|e| e.to_string())?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.dsp.validate()?;
        self.model.validate()?;
        self.loss.validate()?;
        self.train.validate()?;
        if self.run_name.is_empty() || self.run_name.contains(['/', '\\']) {
            return Err(Error::Usage(format!("invalid run_name `{}`", self.run_name)));
        }
        if self.eval.metrics.is_empty() {
            return Err(Error::Usage("eval.metrics must name at least one metric".into()));
        }
        if self.eval.chunk_seconds.is_some_and(|c| !(c > 0.0)) {
            return Err(Error::Usage("eval.chunk_seconds must be positive".into()));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("run config serializes")
    }

    pub fn run_dir(&self) -> PathBuf {
        self.output_root.join(&self.run_name)
    }
}
