//! Command line: argument parsing, configuration layering (defaults, then
//! the config file, then flags) and dispatch.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use unsup_restore_core::degrade::{DegradationKind, DegradationRecipe};
use unsup_restore_core::infer::{restore, restore_chunked, transfer_from};
use unsup_restore_core::metrics::Metric;
use unsup_restore_core::models::{MelVocoder, ModelBundle, VocoderKind};
use unsup_restore_core::train::{train_vocoder, Task, TrainData, Trainer};

use crate::audio::{load_wav, save_wav};
use crate::cache::AudioCache;
use crate::checkpoint::{load_bundle, load_bundle_for, load_vocoder, save_bundle, save_vocoder, LoadedBundle};
use crate::config::RunConfig;
use crate::dataset::{build_simulated_dataset, degrade_manifest, load_split, make_corpus, SplitSizes};
use crate::evaluate::{evaluate, evaluate_inputs, write_report};
use crate::manifest::{Manifest, Split};
use crate::run::{write_history, RunDir, BEST_CHECKPOINT, HISTORY_FILE};

#[derive(Debug, Parser)]
#[command(name = "unsup-restore", version, about = "Self-supervised speech restoration with analysis, synthesis and channel modules")]
pub struct Cli {
    /// TOML run configuration; flags override its values.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Global seed for every random stream (overrides the config).
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// More log output (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Apply one degradation to every item of a manifest.
    Degrade(DegradeArgs),
    /// Degrade a clean manifest and assign seeded val/test splits.
    BuildDataset(BuildDatasetArgs),
    /// Write a synthetic multi-speaker clean corpus.
    MakeCorpus(MakeCorpusArgs),
    /// Fit the toy vocoder to a clean corpus.
    TrainVocoder(TrainVocoderArgs),
    /// Supervised pretraining on pseudo-degraded clean speech.
    Pretrain(TrainArgs),
    /// Train the analysis and channel modules (forward-only or dual).
    Train(TrainArgs),
    /// Restore a degraded recording.
    Restore(RestoreArgs),
    /// Distort clean audio like a degraded reference.
    Transfer(TransferArgs),
    /// Score restored (or degraded) test items against clean references.
    Evaluate(EvaluateArgs),
}

#[derive(Debug, Args)]
pub struct RecipeArgs {
    #[arg(long, value_parser = parse_kind)]
    pub kind: DegradationKind,
    #[arg(long)]
    pub cutoff_hz: Option<f64>,
    #[arg(long)]
    pub threshold: Option<f64>,
    #[arg(long)]
    pub bits: Option<u32>,
    /// Intermediate sample rate of quantized_resampled.
    #[arg(long)]
    pub rate: Option<u32>,
    #[arg(long)]
    pub gain_db: Option<f64>,
    #[arg(long)]
    pub colour: Option<f64>,
}

fn parse_kind(s: &str) -> Result<DegradationKind, String> {
    s.parse().map_err(|e: unsup_restore_core::Error| e.to_string())
}

impl RecipeArgs {
    fn recipe(&self, seed: u64) -> anyhow::Result<DegradationRecipe> {
        let mut r = DegradationRecipe::standard(self.kind);
        let unused = |flag: &str, given: bool| if given { bail!("--{flag} does not apply to {}", self.kind) } else { Ok(()) };
        match &mut r {
            DegradationRecipe::BandLimited { cutoff_hz } => {
                *cutoff_hz = self.cutoff_hz.unwrap_or(*cutoff_hz);
            }
            DegradationRecipe::Clipped { clip_threshold } => *clip_threshold = self.threshold.unwrap_or(*clip_threshold),
            DegradationRecipe::QuantizedResampled { bits, intermediate_rate_hz } => {
                *bits = self.bits.unwrap_or(*bits);
                *intermediate_rate_hz = self.rate.unwrap_or(*intermediate_rate_hz);
            }
            DegradationRecipe::Overdrive { gain_db, colour } => {
                *gain_db = self.gain_db.unwrap_or(*gain_db);
                *colour = self.colour.unwrap_or(*colour);
            }
            DegradationRecipe::RandomPretrain { seed: s } => *s = seed,
        }
        let k = self.kind;
        unused("cutoff-hz", self.cutoff_hz.is_some() && k != DegradationKind::BandLimited)?;
        unused("threshold", self.threshold.is_some() && k != DegradationKind::Clipped)?;
        unused("bits", self.bits.is_some() && k != DegradationKind::QuantizedResampled)?;
        unused("rate", self.rate.is_some() && k != DegradationKind::QuantizedResampled)?;
        unused("gain-db", self.gain_db.is_some() && k != DegradationKind::Overdrive)?;
        unused("colour", self.colour.is_some() && k != DegradationKind::Overdrive)?;
        r.validate()?;
        Ok(r)
    }
}

#[derive(Debug, Args)]
pub struct DegradeArgs {
    #[command(flatten)]
    pub recipe: RecipeArgs,
    #[arg(long)]
    pub in_manifest: PathBuf,
    #[arg(long)]
    pub out_dir: PathBuf,
}

#[derive(Debug, Args)]
pub struct SplitArgs {
    /// Validation items (default: eval.split.val of the config).
    #[arg(long)]
    pub val_size: Option<usize>,
    #[arg(long)]
    pub test_size: Option<usize>,
}

impl SplitArgs {
    fn sizes(&self, cfg: &RunConfig) -> SplitSizes {
        SplitSizes { val: self.val_size.unwrap_or(cfg.eval.split.val), test: self.test_size.unwrap_or(cfg.eval.split.test) }
    }
}

#[derive(Debug, Args)]
pub struct BuildDatasetArgs {
    #[command(flatten)]
    pub recipe: RecipeArgs,
    #[arg(long)]
    pub clean_manifest: PathBuf,
    #[arg(long)]
    pub out_dir: PathBuf,
    #[command(flatten)]
    pub split: SplitArgs,
}

#[derive(Debug, Args)]
pub struct MakeCorpusArgs {
    #[arg(long)]
    pub out_dir: PathBuf,
    #[arg(long, default_value_t = 60)]
    pub count: usize,
    #[arg(long, default_value_t = 2.0)]
    pub seconds: f64,
    #[arg(long, default_value_t = 6)]
    pub speakers: u64,
    #[command(flatten)]
    pub split: SplitArgs,
}

#[derive(Debug, Args)]
pub struct TrainVocoderArgs {
    /// Clean corpus; its train split (or every item if none) is used.
    #[arg(long)]
    pub clean_manifest: PathBuf,
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
    #[arg(long)]
    pub steps: Option<usize>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// forward_only, dual or pretrain (default: the config's train.task).
    #[arg(long, value_parser = parse_task)]
    pub task: Option<Task>,
    /// Degraded training items (train split).
    #[arg(long)]
    pub train_manifest: Option<PathBuf>,
    /// Validation items (val split); defaults to the training manifest.
    #[arg(long)]
    pub val_manifest: Option<PathBuf>,
    /// Clean corpus for the dual and pretraining tasks.
    #[arg(long)]
    pub clean_manifest: Option<PathBuf>,
    /// Start from the parameters of this checkpoint.
    #[arg(long)]
    pub init_ckpt: Option<PathBuf>,
    /// Continue an interrupted run from one of its epoch checkpoints.
    #[arg(long, conflicts_with = "init_ckpt")]
    pub resume: Option<PathBuf>,
    /// Frozen synthesis module (a `train-vocoder` output).
    #[arg(long)]
    pub vocoder_ckpt: Option<PathBuf>,
    #[arg(long)]
    pub max_epochs: Option<usize>,
    #[arg(long)]
    pub run_name: Option<String>,
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
}

fn parse_task(s: &str) -> Result<Task, String> {
    s.parse().map_err(|e: unsup_restore_core::Error| e.to_string())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum VocoderChoice {
    ToyNeural,
    Reference,
    External,
}

#[derive(Debug, Args)]
pub struct VocoderArgs {
    /// Vocoder rendering restored features (default: eval.vocoder).
    #[arg(long, value_enum)]
    pub vocoder: Option<VocoderChoice>,
    /// Checkpoint of the external vocoder.
    #[arg(long)]
    pub vocoder_ckpt: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct RestoreArgs {
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub ckpt: PathBuf,
    #[command(flatten)]
    pub vocoder: VocoderArgs,
    /// Process in overlapping chunks of this many seconds.
    #[arg(long)]
    pub chunk_seconds: Option<f64>,
}

#[derive(Debug, Args)]
pub struct TransferArgs {
    /// Degraded recording whose distortion is copied.
    #[arg(long)]
    pub reference: PathBuf,
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub ckpt: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// Trained bundle; without it the degraded inputs are scored.
    #[arg(long)]
    pub ckpt: Option<PathBuf>,
    /// Comma-separated: mcd, msd.
    #[arg(long, value_delimiter = ',', value_parser = parse_metric)]
    pub metrics: Option<Vec<Metric>>,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub vocoder: VocoderArgs,
    #[arg(long)]
    pub chunk_seconds: Option<f64>,
}

fn parse_metric(s: &str) -> Result<Metric, String> {
    s.parse().map_err(|e: unsup_restore_core::Error| e.to_string())
}

/// Parses `argv` and runs the command.
pub fn run<I, T>(argv: I) -> anyhow::Result<()>
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let argv: Vec<OsString> = argv.into_iter().map(Into::into).collect();
    let cli = Cli::try_parse_from(&argv)?;
    let words: Vec<String> = argv.iter().map(|a| a.to_string_lossy().into_owned()).collect();
    dispatch(cli, &words)
}

fn load_config(cli: &Cli) -> anyhow::Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

pub fn dispatch(cli: Cli, argv: &[String]) -> anyhow::Result<()> {
    let mut cfg = load_config(&cli)?;
    let cache = AudioCache::from_env();
    match &cli.command {
        Command::Degrade(a) => {
            let recipe = a.recipe.recipe(cfg.seed)?;
            cfg.validate()?;
            let m = Manifest::read(&a.in_manifest)?;
            RunDir::create(&a.out_dir, &cfg, argv)?;
            let out = degrade_manifest(&m, &recipe, &a.out_dir, cfg.seed, &cfg.dsp, &cache)?;
            log::info!("degraded {} items into {}", out.len(), a.out_dir.display());
        }
        Command::BuildDataset(a) => {
            let recipe = a.recipe.recipe(cfg.seed)?;
            cfg.eval.split = a.split.sizes(&cfg);
            cfg.validate()?;
            let m = Manifest::read(&a.clean_manifest)?;
            RunDir::create(&a.out_dir, &cfg, argv)?;
            let out = build_simulated_dataset(&m, &recipe, &a.out_dir, cfg.seed, cfg.eval.split, &cfg.dsp, &cache)?;
            log::info!("built {} items in {}", out.len(), a.out_dir.display());
        }
        Command::MakeCorpus(a) => {
            cfg.eval.split = a.split.sizes(&cfg);
            cfg.validate()?;
            if !(a.seconds > 0.0) || a.count == 0 || a.speakers == 0 {
                bail!("--count, --seconds and --speakers must be positive");
            }
            RunDir::create(&a.out_dir, &cfg, argv)?;
            make_corpus(&a.out_dir, a.speakers, a.count, a.seconds, cfg.seed, cfg.eval.split)?;
        }
        Command::TrainVocoder(a) => {
            if let Some(s) = a.steps {
                cfg.vocoder_train.steps = s;
            }
            cfg.validate()?;
            let m = Manifest::read(&a.clean_manifest)?;
            let clips = train_or_all(&m, &cfg, &cache)?;
            let dir = RunDir::create(a.out_dir.clone().unwrap_or_else(|| cfg.run_dir()), &cfg, argv)?;
            let analyzer = unsup_restore_core::dsp::MelAnalyzer::new(&cfg.dsp)?;
            let mut voc = unsup_restore_core::models::ToyVocoder::new(&cfg.model, &cfg.dsp, cfg.seed)?;
            let losses = train_vocoder(&mut voc, &analyzer, &clips, &cfg.vocoder_train, &cfg.loss, cfg.seed)?;
            voc.params.set_trainable(false);
            save_vocoder(&voc, &cfg.model, &cfg.dsp, dir.file("vocoder.ckpt"))?;
            let text: String = std::iter::once("step,loss\n".to_string())
                .chain(losses.iter().enumerate().map(|(i, l)| format!("{},{l:.9}\n", i + 1)))
                .collect();
            std::fs::write(dir.file("vocoder_history.csv"), text)?;
        }
        Command::Pretrain(a) => train(&mut cfg, a, Some(Task::Pretrain), argv, &cache)?,
        Command::Train(a) => {
            if a.task == Some(Task::Pretrain) {
                log::info!("`train --task pretrain` runs supervised pretraining");
            }
            train(&mut cfg, a, None, argv, &cache)?
        }
        Command::Restore(a) => {
            let bundle = open_bundle(&cli, &cfg, &a.ckpt)?.bundle;
            let x = load_wav(&a.input, &bundle.dsp)?;
            let voc = vocoder(&bundle, &cfg, &a.vocoder)?;
            let y = match a.chunk_seconds {
                Some(c) => restore_chunked(&x, &bundle, voc.as_ref(), c)?,
                None => restore(&x, &bundle, voc.as_ref())?,
            };
            save_wav(&y, &a.out)?;
        }
        Command::Transfer(a) => {
            let bundle = open_bundle(&cli, &cfg, &a.ckpt)?.bundle;
            let reference = load_wav(&a.reference, &bundle.dsp)?;
            let x = load_wav(&a.input, &bundle.dsp)?;
            save_wav(&transfer_from(&reference, &x, &bundle)?, &a.out)?;
        }
        Command::Evaluate(a) => {
            if let Some(m) = &a.metrics {
                cfg.eval.metrics = m.clone();
            }
            if let Some(c) = a.chunk_seconds {
                cfg.eval.chunk_seconds = Some(c);
            }
            cfg.validate()?;
            let m = Manifest::read(&a.manifest)?;
            let report = match &a.ckpt {
                None => evaluate_inputs(&m, &cfg.eval.metrics, &cfg.dsp, &cfg.loss, &cache)?,
                Some(ckpt) => {
                    let bundle = open_bundle(&cli, &cfg, ckpt)?.bundle;
                    let voc = vocoder(&bundle, &cfg, &a.vocoder)?;
                    evaluate(&m, &bundle, voc.as_ref(), &cfg.eval.metrics, &cfg.loss, cfg.eval.chunk_seconds, &cache)?
                }
            };
            write_report(&report, &a.out)?;
            for (name, s) in [("mcd", report.mcd), ("spectral_distance", report.spectral_distance)] {
                if let Some(s) = s {
                    println!("{name}: mean {:.4} std {:.4} over {} items", s.mean, s.std, s.count);
                }
            }
        }
    }
    Ok(())
}

/// Loads a checkpoint; with `--config` the file must match its architecture.
fn open_bundle(cli: &Cli, cfg: &RunConfig, path: &Path) -> anyhow::Result<LoadedBundle> {
    Ok(if cli.config.is_some() { load_bundle_for(path, &cfg.model, &cfg.dsp)? } else { load_bundle(path)? })
}

fn vocoder(bundle: &ModelBundle, cfg: &RunConfig, args: &VocoderArgs) -> anyhow::Result<Box<dyn MelVocoder>> {
    let kind = match args.vocoder {
        Some(VocoderChoice::ToyNeural) => VocoderKind::ToyNeural,
        Some(VocoderChoice::Reference) => VocoderKind::Reference,
        Some(VocoderChoice::External) => VocoderKind::External,
        None => cfg.eval.vocoder,
    };
    Ok(match kind {
        VocoderKind::ToyNeural => Box::new(bundle.synthesis.clone()),
        VocoderKind::Reference => Box::new(bundle.reference_vocoder()),
        VocoderKind::External => {
            let path = args
                .vocoder_ckpt
                .clone()
                .or_else(|| cfg.model.vocoder_checkpoint.as_ref().map(PathBuf::from))
                .context("missing vocoder checkpoint: the external vocoder needs --vocoder-ckpt or model.vocoder_checkpoint")?;
            Box::new(load_vocoder(&path, &bundle.dsp)?.0)
        }
    })
}

/// Clean audio of the train split, or of every item when nothing is
/// marked for training.
fn train_or_all(m: &Manifest, cfg: &RunConfig, cache: &AudioCache) -> anyhow::Result<Vec<unsup_restore_core::dsp::Waveform>> {
    let split = (m.split(Split::Train).count() > 0).then_some(Split::Train);
    Ok(load_split(m, split, false, &cfg.dsp, cache)?)
}

fn train(cfg: &mut RunConfig, a: &TrainArgs, force: Option<Task>, argv: &[String], cache: &AudioCache) -> anyhow::Result<()> {
    if let Some(t) = force.or(a.task) {
        cfg.train.task = t;
    }
    if let Some(e) = a.max_epochs {
        cfg.train.max_epochs = e;
    }
    if let Some(n) = &a.run_name {
        cfg.run_name = n.clone();
    }
    if let Some(v) = &a.vocoder_ckpt {
        cfg.model.vocoder_checkpoint = Some(v.to_string_lossy().into_owned());
    }
    // a vocoder file fixes the synthesis width
    let vocoder = match &cfg.model.vocoder_checkpoint {
        Some(p) => {
            let (voc, vm) = load_vocoder(p, &cfg.dsp)?;
            cfg.model.vocoder_width = vm.vocoder_width;
            Some(voc)
        }
        None => None,
    };
    cfg.validate()?;
    let task = cfg.train.task;

    let (mut bundle, state) = match (&a.resume, &a.init_ckpt) {
        (Some(p), _) => {
            let l = load_bundle_for(p, &cfg.model, &cfg.dsp)?;
            let st = l.train.with_context(|| format!("{} holds no training state to resume", p.display()))?;
            (l.bundle, Some(st))
        }
        (None, Some(p)) => (load_bundle_for(p, &cfg.model, &cfg.dsp)?.bundle, None),
        (None, None) => (ModelBundle::new(&cfg.model, &cfg.dsp, cfg.seed)?, None),
    };
    match vocoder {
        Some(v) => bundle.set_synthesis(v),
        None if task != Task::Pretrain && a.init_ckpt.is_none() && a.resume.is_none() => {
            log::warn!("no vocoder checkpoint given: training against an untrained synthesis module")
        }
        None => {}
    }

    let read = |p: &Option<PathBuf>| p.as_ref().map(Manifest::read).transpose();
    let train_m = read(&a.train_manifest)?;
    let val_m = read(&a.val_manifest)?.or_else(|| train_m.clone());
    let clean_m = read(&a.clean_manifest)?;
    let need = |m: &Option<Manifest>, flag: &str| m.clone().with_context(|| format!("the {task:?} task needs --{flag}"));
    let dsp = &cfg.dsp;
    let data = match task {
        Task::ForwardOnly | Task::Dual => {
            let tm = need(&train_m, "train-manifest")?;
            let vm = need(&val_m, "val-manifest")?;
            let mut d = TrainData {
                train_low: load_split(&tm, Some(Split::Train), true, dsp, cache)?,
                val_low: load_split(&vm, Some(Split::Val), true, dsp, cache)?,
                ..TrainData::default()
            };
            if task == Task::Dual {
                let cm = need(&clean_m, "clean-manifest")?;
                d.train_high = train_or_all(&cm, cfg, cache)?;
                d.val_high = load_split(&cm, Some(Split::Val), false, dsp, cache)?;
                if d.val_high.is_empty() {
                    d.val_high = load_split(&vm, Some(Split::Val), false, dsp, cache)?;
                }
            }
            d
        }
        Task::Pretrain => {
            let cm = clean_m.clone().or_else(|| train_m.clone()).context("pretraining needs --clean-manifest")?;
            let val = val_m.filter(|_| a.val_manifest.is_some()).unwrap_or_else(|| cm.clone());
            TrainData {
                train_high: load_split(&cm, Some(Split::Train), false, dsp, cache)?,
                val_high: load_split(&val, Some(Split::Val), false, dsp, cache)?,
                ..TrainData::default()
            }
        }
    };

    let dir = RunDir::create(a.out_dir.clone().unwrap_or_else(|| cfg.run_dir()), cfg, argv)?;
    let mut trainer = Trainer::new(&mut bundle, &cfg.train, &cfg.loss, cfg.seed)?;
    // the epoch hook speaks the core error type; keep the real cause aside
    let mut hook_error: Option<crate::Error> = None;
    let fitted = trainer.fit(&data, state, &mut |b, st| {
        let saved = save_bundle(b, dir.checkpoint(st.epoch), Some(st)).and_then(|_| write_history(dir.file(HISTORY_FILE), &st.history));
        saved.map_err(|e| {
            let msg = e.to_string();
            hook_error = Some(e);
            unsup_restore_core::Error::Checkpoint(msg)
        })
    });
    if let Some(e) = hook_error {
        return Err(e.into());
    }
    let state = fitted?;
    save_bundle(&bundle, dir.file(BEST_CHECKPOINT), None)?;
    log::info!("best epoch {} of {}; wrote {}", state.best_epoch, state.epoch, dir.file(BEST_CHECKPOINT).display());
    Ok(())
}
