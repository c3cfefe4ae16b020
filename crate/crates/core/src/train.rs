//! Training: the forward, dual and pretraining objectives, Adam, the plateau
//! scheduler, the epoch loop with validation-based model selection, and
//! vocoder pretraining.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Gradients, StatsUpdate, Tape, Tensor, Var};
use crate::degrade::{apply, sample_pretrain_recipe, DegradationRecipe};
use crate::dsp::{MelAnalyzer, Waveform};
use crate::losses::{check_beta, LossConfig, SpectralLoss};
use crate::math::{pow, sqrt};
use crate::models::{mel_batch_tensor, wave_batch_tensor, ModelBundle, ToyVocoder, VocoderKind, LOG_MEL_CENTER, LOG_MEL_SCALE};
use crate::nn::ParamSet;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    /// Reconstruct degraded speech through analysis, synthesis and channel.
    ForwardOnly,
    /// Forward task plus feature recovery from re-degraded clean speech.
    Dual,
    /// Supervised pretraining on pseudo-degraded clean speech.
    Pretrain,
}

impl core::str::FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.replace('-', "_").as_str() {
            "forward_only" | "forward" => Ok(Task::ForwardOnly),
            "dual" => Ok(Task::Dual),
            "pretrain" => Ok(Task::Pretrain),
            other => Err(Error::param("task", alloc::format!("unknown task `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub task: Task,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub lr: f64,
    pub lr_decay: f64,
    pub patience_epochs: usize,
    /// Feature-loss weight; `None` takes the task default from the loss config.
    pub beta: Option<f64>,
    /// Length of the random training crops.
    pub clip_seconds: f64,
    /// Caps the number of optimizer steps per epoch (`None`: one pass).
    pub steps_per_epoch: Option<usize>,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            task: Task::Dual,
            batch_size: 4,
            max_epochs: 50,
            lr: 1e-3,
            lr_decay: 0.5,
            patience_epochs: 3,
            beta: None,
            clip_seconds: 2.0,
            steps_per_epoch: None,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::param("train.batch_size", "must be positive"));
        }
        if self.max_epochs == 0 {
            return Err(Error::param("train.max_epochs", "must be positive"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::param("train.lr", "must be positive"));
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return Err(Error::param("train.lr_decay", "must be in (0, 1]"));
        }
        if self.patience_epochs == 0 {
            return Err(Error::param("train.patience_epochs", "must be positive"));
        }
        if !(self.clip_seconds > 0.0) {
            return Err(Error::param("train.clip_seconds", "must be positive"));
        }
        if let Some(b) = self.beta {
            check_beta("train.beta", b)?;
        }
        Ok(())
    }

    /// Feature-loss weight for the configured task.
    pub fn beta_for(&self, loss: &LossConfig) -> f64 {
        self.beta.unwrap_or(match self.task {
            Task::ForwardOnly => 0.0,
            Task::Dual => loss.beta_dual,
            Task::Pretrain => loss.beta_pretrain,
        })
    }

    /// Crop length in samples, a whole number of hops.
    pub fn crop_len(&self, sample_rate: u32, hop: usize) -> usize {
        let hops = crate::math::round(self.clip_seconds * sample_rate as f64 / hop as f64) as usize;
        hops.max(1) * hop
    }
}

/// Loss values of one evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepLosses {
    pub total: f64,
    pub recons: f64,
    pub feature: Option<f64>,
}

/// One batch of equal-length crops. `low` holds degraded speech (forward and
/// dual tasks), `high` clean speech (dual and pretrain), `recipes` the
/// pseudo-degradation of each `high` item (pretrain).
#[derive(Debug, Clone, Default)]
pub struct Batch {
    pub low: Vec<Vec<f64>>,
    pub high: Vec<Vec<f64>>,
    pub recipes: Vec<DegradationRecipe>,
}

/// The task losses on a training tape, with gradients.
pub struct Evaluation {
    pub losses: StepLosses,
    pub grads: Option<Gradients>,
    pub stats: Vec<StatsUpdate>,
}

/// Computes task losses for a bundle.
pub struct Objective {
    analyzer: MelAnalyzer,
    loss: SpectralLoss,
    beta: f64,
    task: Task,
}

impl Objective {
    pub fn new(bundle: &ModelBundle, loss: &LossConfig, task: Task, beta: f64) -> Result<Self> {
        check_beta("beta", beta)?;
        if task != Task::Pretrain && bundle.model.vocoder == VocoderKind::Reference {
            return Err(Error::NonDifferentiableVocoder);
        }
        Ok(Self { analyzer: bundle.analyzer()?, loss: SpectralLoss::new(loss)?, beta, task })
    }

    pub fn task(&self) -> Task {
        self.task
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    fn mels(&self, clips: &[&[f64]]) -> Result<Tensor> {
        let mels = clips.iter().map(|c| self.analyzer.analyze_samples(c)).collect::<Result<Vec<_>>>()?;
        mel_batch_tensor(&mels.iter().collect::<Vec<_>>())
    }

    /// Log-mel targets in natural-log units.
    fn log_mels(&self, clips: &[&[f64]]) -> Result<Tensor> {
        let mut t = self.mels(clips)?;
        t.data.iter_mut().for_each(|v| *v = *v * LOG_MEL_SCALE + LOG_MEL_CENTER);
        Ok(t)
    }

    /// `(ẑ_res, c)` from degraded speech, decoded and re-distorted: returns
    /// the channel output and the channel feature.
    fn reconstruct(&self, bundle: &ModelBundle, tape: &mut Tape, low: &[&[f64]]) -> Result<(Var, Var)> {
        let len = low[0].len();
        let input = self.mels(low)?;
        let a = bundle.analysis.forward(tape, &input, self.analyzer.config().floor)?;
        let wav = bundle.synthesis.forward(tape, a.features)?;
        let wav = tape.slice_time(wav, 0, len)?;
        let y = bundle.channel.forward(tape, wav, a.channel)?;
        Ok((y, a.channel))
    }

    /// Feature loss of the analysis output for `input` against clean `target`
    /// log-mels.
    fn feature_loss(&self, bundle: &ModelBundle, tape: &mut Tape, input: &Tensor, target: &Tensor) -> Result<(Var, Var)> {
        let a = bundle.analysis.forward(tape, input, self.analyzer.config().floor)?;
        let log = tape.affine(a.features, LOG_MEL_SCALE, LOG_MEL_CENTER);
        Ok((tape.mse(log, target)?, a.channel))
    }

    /// Builds the task loss on `tape`; returns `(total, recons, feature)`.
    pub fn build(&self, bundle: &ModelBundle, tape: &mut Tape, batch: &Batch) -> Result<(Var, Var, Option<Var>)> {
        let low: Vec<&[f64]> = batch.low.iter().map(|v| v.as_slice()).collect();
        let high: Vec<&[f64]> = batch.high.iter().map(|v| v.as_slice()).collect();
        match self.task {
            Task::ForwardOnly => {
                let (y, _) = self.reconstruct(bundle, tape, &low)?;
                let recons = tape.spectral_loss(&self.loss, &low, y)?;
                Ok((recons, recons, None))
            }
            Task::Dual => {
                if high.len() != low.len() {
                    return Err(Error::ShapeMismatch(alloc::format!(
                        "dual batch pairs {} degraded with {} clean clips",
                        low.len(),
                        high.len()
                    )));
                }
                let (y, c) = self.reconstruct(bundle, tape, &low)?;
                let recons = tape.spectral_loss(&self.loss, &low, y)?;
                // backward task: re-degrade clean speech with the same c; the
                // feature loss must not reach the channel module, so its
                // output enters the analysis as a constant
                let x_high = tape.constant(wave_batch_tensor(&high)?);
                let redegraded = bundle.channel.forward(tape, x_high, c)?;
                let redegraded = tape.detach(redegraded);
                let rows: Vec<Vec<f64>> = (0..high.len()).map(|b| tape.value(redegraded).row(b, 0).to_vec()).collect();
                let input = self.mels(&rows.iter().map(|r| r.as_slice()).collect::<Vec<_>>())?;
                let (feature, _) = self.feature_loss(bundle, tape, &input, &self.log_mels(&high)?)?;
                let total = tape.weighted_sum(recons, 1.0 - self.beta, feature, self.beta)?;
                Ok((total, recons, Some(feature)))
            }
            Task::Pretrain => {
                if batch.recipes.len() != high.len() {
                    return Err(Error::ShapeMismatch("one pseudo-degradation recipe per clean clip".into()));
                }
                let pseudo = high
                    .iter()
                    .zip(&batch.recipes)
                    .map(|(h, r)| Ok(apply(r, &Waveform::new(h.to_vec(), self.analyzer.config().sample_rate)?)?.into_samples()))
                    .collect::<Result<Vec<_>>>()?;
                let pseudo: Vec<&[f64]> = pseudo.iter().map(|v| v.as_slice()).collect();
                let (feature, c) = self.feature_loss(bundle, tape, &self.mels(&pseudo)?, &self.log_mels(&high)?)?;
                let x_high = tape.constant(wave_batch_tensor(&high)?);
                let y = bundle.channel.forward(tape, x_high, c)?;
                let recons = tape.spectral_loss(&self.loss, &pseudo, y)?;
                let total = tape.weighted_sum(recons, 1.0 - self.beta, feature, self.beta)?;
                Ok((total, recons, Some(feature)))
            }
        }
    }

    /// Training-mode losses and gradients of every trainable parameter.
    pub fn evaluate(&self, bundle: &ModelBundle, batch: &Batch) -> Result<Evaluation> {
        let mut tape = Tape::new(true);
        let (total, recons, feature) = self.build(bundle, &mut tape, batch)?;
        let losses = read_losses(&tape, total, recons, feature);
        let grads = tape.backward(total);
        Ok(Evaluation { losses, grads: Some(grads), stats: tape.stats_updates().to_vec() })
    }

    /// Eval-mode losses, no gradients.
    pub fn validate(&self, bundle: &ModelBundle, batch: &Batch) -> Result<StepLosses> {
        let mut tape = Tape::inference();
        let (total, recons, feature) = self.build(bundle, &mut tape, batch)?;
        Ok(read_losses(&tape, total, recons, feature))
    }

    /// Gradients of each loss term separately (training mode), for checking
    /// which modules each term reaches.
    pub fn term_gradients(&self, bundle: &ModelBundle, batch: &Batch) -> Result<(Gradients, Option<Gradients>)> {
        let mut tape = Tape::new(true);
        let (_, recons, feature) = self.build(bundle, &mut tape, batch)?;
        Ok((tape.backward(recons), feature.map(|f| tape.backward(f))))
    }
}

fn read_losses(tape: &Tape, total: Var, recons: Var, feature: Option<Var>) -> StepLosses {
    StepLosses {
        total: tape.value(total).item(),
        recons: tape.value(recons).item(),
        feature: feature.map(|f| tape.value(f).item()),
    }
}

/// Adam moments of one parameter set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

/// Adam over the trainable parameter sets it is given.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub state: Vec<AdamState>,
}

impl Adam {
    pub fn new(sets: &[&ParamSet], beta1: f64, beta2: f64, eps: f64) -> Self {
        let state = sets
            .iter()
            .map(|ps| AdamState {
                step: 0,
                m: ps.tensors().iter().map(|t| vec![0.0; t.len()]).collect(),
                v: ps.tensors().iter().map(|t| vec![0.0; t.len()]).collect(),
            })
            .collect();
        Self { beta1, beta2, eps, state }
    }

    /// One update of every set with gradients in `grads`; frozen sets are
    /// never touched.
    pub fn step(&mut self, sets: &mut [&mut ParamSet], grads: &Gradients, lr: f64) {
        for (ps, st) in sets.iter_mut().zip(self.state.iter_mut()) {
            if !ps.trainable() {
                continue;
            }
            st.step += 1;
            let bc1 = 1.0 - pow(self.beta1, st.step as f64);
            let bc2 = 1.0 - pow(self.beta2, st.step as f64);
            for i in 0..ps.tensors().len() {
                let Some(g) = grads.get(&ps.key(i)) else { continue };
                let (m, v) = (&mut st.m[i], &mut st.v[i]);
                let p = &mut ps.tensors_mut()[i].data;
                for j in 0..p.len() {
                    m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g.data[j];
                    v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g.data[j] * g.data[j];
                    p[j] -= lr * (m[j] / bc1) / (sqrt(v[j] / bc2) + self.eps);
                }
            }
        }
    }
}

/// Multiplies the learning rate by `decay` once `patience` consecutive
/// epochs pass without a new best validation loss.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Plateau {
    pub lr: f64,
    pub decay: f64,
    pub patience: usize,
    pub best: f64,
    pub since_improve: usize,
    /// Number of decays applied so far.
    pub decays: u32,
}

impl Plateau {
    pub fn new(lr: f64, decay: f64, patience: usize) -> Self {
        Self { lr, decay, patience, best: f64::INFINITY, since_improve: 0, decays: 0 }
    }

    /// Records one validation loss; returns whether it is a new best.
    pub fn observe(&mut self, val: f64) -> bool {
        if val < self.best {
            self.best = val;
            self.since_improve = 0;
            return true;
        }
        self.since_improve += 1;
        if self.since_improve >= self.patience {
            self.lr *= self.decay;
            self.decays += 1;
            self.since_improve = 0;
        }
        false
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    /// Learning rate in effect after this epoch's scheduler update.
    pub lr: f64,
}

/// Everything needed to continue a run exactly where it stopped.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    /// Epochs completed.
    pub epoch: usize,
    pub scheduler: Plateau,
    pub best_epoch: usize,
    pub adam: Vec<AdamState>,
    /// Flattened analysis and channel parameters of the best epoch.
    pub best_params: Option<(Vec<f64>, Vec<f64>)>,
    pub history: Vec<EpochRecord>,
}

/// Training and validation data for one task.
#[derive(Debug, Clone, Default)]
pub struct TrainData {
    pub train_low: Vec<Waveform>,
    pub train_high: Vec<Waveform>,
    pub val_low: Vec<Waveform>,
    pub val_high: Vec<Waveform>,
}

impl TrainData {
    fn check(&self, task: Task) -> Result<()> {
        let need = |v: &Vec<Waveform>, what: &'static str| if v.is_empty() { Err(Error::EmptyDataset(what)) } else { Ok(()) };
        match task {
            Task::ForwardOnly => {
                need(&self.train_low, "training degraded clips")?;
                need(&self.val_low, "validation degraded clips")
            }
            Task::Dual => {
                need(&self.train_low, "training degraded clips")?;
                need(&self.train_high, "clean clips")?;
                need(&self.val_low, "validation degraded clips")?;
                need(&self.val_high, "validation clean clips")
            }
            Task::Pretrain => {
                need(&self.train_high, "training clean clips")?;
                need(&self.val_high, "validation clean clips")
            }
        }
    }
}

/// Deterministic 64-bit mix of several words.
pub fn mix_seed(parts: &[u64]) -> u64 {
    let mut z: u64 = 0x853c_49e6_748f_ea9b;
    for &p in parts {
        z ^= p.wrapping_add(0x9e37_79b9_7f4a_7c15).wrapping_add(z << 6).wrapping_add(z >> 2);
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        z ^= z >> 31;
    }
    z
}

/// Random crop of `len` samples (zero-padded when the clip is shorter).
pub fn random_crop(clip: &[f64], len: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    if clip.len() <= len {
        let mut v = clip.to_vec();
        v.resize(len, 0.0);
        return v;
    }
    let start = rng.random_range(0..=clip.len() - len);
    clip[start..start + len].to_vec()
}

/// Centred crop of `len` samples (zero-padded when the clip is shorter).
pub fn center_crop(clip: &[f64], len: usize) -> Vec<f64> {
    if clip.len() <= len {
        let mut v = clip.to_vec();
        v.resize(len, 0.0);
        return v;
    }
    let start = (clip.len() - len) / 2;
    clip[start..start + len].to_vec()
}

/// Training loop over a bundle.
pub struct Trainer<'a> {
    pub bundle: &'a mut ModelBundle,
    pub config: TrainConfig,
    pub objective: Objective,
    pub adam: Adam,
    pub scheduler: Plateau,
    seed: u64,
    crop: usize,
}

/// Seed tag separating the validation recipe stream from training.
const VALIDATION_STREAM: u64 = u64::MAX;

impl<'a> Trainer<'a> {
    pub fn new(bundle: &'a mut ModelBundle, config: &TrainConfig, loss: &LossConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        if !bundle.synthesis_frozen || bundle.synthesis.params.trainable() {
            return Err(Error::param("synthesis", "the synthesis module must be frozen during training"));
        }
        let objective = Objective::new(bundle, loss, config.task, config.beta_for(loss))?;
        let adam = Adam::new(
            &[&bundle.analysis.params, &bundle.channel.params],
            config.adam_beta1,
            config.adam_beta2,
            config.adam_eps,
        );
        let crop = config.crop_len(bundle.dsp.sample_rate, bundle.dsp.hop);
        let min = bundle.dsp.frame_size / 2 + 1;
        if crop < min {
            return Err(Error::param("train.clip_seconds", alloc::format!("crops of {crop} samples are shorter than {min}")));
        }
        Ok(Self { scheduler: Plateau::new(config.lr, config.lr_decay, config.patience_epochs), bundle, config: config.clone(), objective, adam, seed, crop })
    }

    pub fn crop_len(&self) -> usize {
        self.crop
    }

    /// One optimizer step on `batch`.
    pub fn step(&mut self, batch: &Batch, batch_index: usize) -> Result<StepLosses> {
        let eval = self.objective.evaluate(self.bundle, batch)?;
        let l = eval.losses;
        if !l.total.is_finite() || !l.recons.is_finite() || l.feature.is_some_and(|f| !f.is_finite()) {
            return Err(Error::NonFiniteLoss {
                batch: batch_index,
                detail: alloc::format!("total={} recons={} feature={:?}", l.total, l.recons, l.feature),
            });
        }
        let grads = eval.grads.expect("training evaluation returns gradients");
        let lr = self.scheduler.lr;
        self.adam.step(&mut [&mut self.bundle.analysis.params, &mut self.bundle.channel.params], &grads, lr);
        self.bundle.analysis.params.apply_stats(&eval.stats);
        self.bundle.channel.params.apply_stats(&eval.stats);
        Ok(l)
    }

    /// The batches of training epoch `epoch` (1-based), a pure function of
    /// the seed, the epoch and the data.
    pub fn epoch_batches(&self, data: &TrainData, epoch: usize) -> Vec<Batch> {
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[self.seed, epoch as u64]));
        let primary = match self.config.task {
            Task::Pretrain => &data.train_high,
            _ => &data.train_low,
        };
        let mut order: Vec<usize> = (0..primary.len()).collect();
        order.shuffle(&mut rng);
        let mut high_order: Vec<usize> = (0..data.train_high.len()).collect();
        high_order.shuffle(&mut rng);
        let bs = self.config.batch_size;
        let mut batches = Vec::new();
        for (bi, chunk) in order.chunks(bs).enumerate() {
            if self.config.steps_per_epoch.is_some_and(|s| bi >= s) {
                break;
            }
            let mut batch = Batch::default();
            for (j, &i) in chunk.iter().enumerate() {
                match self.config.task {
                    Task::ForwardOnly => batch.low.push(random_crop(data.train_low[i].samples(), self.crop, &mut rng)),
                    Task::Dual => {
                        batch.low.push(random_crop(data.train_low[i].samples(), self.crop, &mut rng));
                        let h = high_order[(bi * bs + j) % high_order.len()];
                        batch.high.push(random_crop(data.train_high[h].samples(), self.crop, &mut rng));
                    }
                    Task::Pretrain => {
                        batch.high.push(random_crop(data.train_high[i].samples(), self.crop, &mut rng));
                        batch.recipes.push(sample_pretrain_recipe(mix_seed(&[self.seed, epoch as u64, (bi * bs + j) as u64])));
                    }
                }
            }
            batches.push(batch);
        }
        batches
    }

    /// Deterministic centre-cropped validation batches.
    pub fn validation_batches(&self, data: &TrainData) -> Vec<Batch> {
        let bs = self.config.batch_size;
        let n = match self.config.task {
            Task::Pretrain => data.val_high.len(),
            _ => data.val_low.len(),
        };
        let idx: Vec<usize> = (0..n).collect();
        idx.chunks(bs)
            .map(|chunk| {
                let mut batch = Batch::default();
                for &i in chunk {
                    match self.config.task {
                        Task::ForwardOnly => batch.low.push(center_crop(data.val_low[i].samples(), self.crop)),
                        Task::Dual => {
                            batch.low.push(center_crop(data.val_low[i].samples(), self.crop));
                            batch.high.push(center_crop(data.val_high[i % data.val_high.len()].samples(), self.crop));
                        }
                        Task::Pretrain => {
                            batch.high.push(center_crop(data.val_high[i].samples(), self.crop));
                            batch.recipes.push(sample_pretrain_recipe(mix_seed(&[self.seed, VALIDATION_STREAM, i as u64])));
                        }
                    }
                }
                batch
            })
            .collect()
    }

    /// Mean eval-mode total loss over the validation batches.
    pub fn validation_loss(&self, data: &TrainData) -> Result<f64> {
        let batches = self.validation_batches(data);
        let mut sum = 0.0;
        let mut count = 0usize;
        for b in &batches {
            let n = b.low.len().max(b.high.len());
            sum += self.objective.validate(self.bundle, b)?.total * n as f64;
            count += n;
        }
        let v = sum / count as f64;
        if !v.is_finite() {
            return Err(Error::NonFiniteLoss { batch: 0, detail: alloc::format!("validation loss {v}") });
        }
        Ok(v)
    }

    fn snapshot(&self) -> (Vec<f64>, Vec<f64>) {
        (self.bundle.analysis.params.flatten(), self.bundle.channel.params.flatten())
    }

    /// Runs epochs `state.epoch + 1 ..= max_epochs`, calling `on_epoch` after
    /// each. On return the bundle holds the best-validation parameters.
    pub fn fit(
        &mut self,
        data: &TrainData,
        mut state: Option<TrainState>,
        on_epoch: &mut dyn FnMut(&ModelBundle, &TrainState) -> Result<()>,
    ) -> Result<TrainState> {
        data.check(self.config.task)?;
        let mut st = match state.take() {
            Some(s) => {
                self.scheduler = s.scheduler.clone();
                self.adam.state = s.adam.clone();
                s
            }
            None => TrainState {
                epoch: 0,
                scheduler: self.scheduler.clone(),
                best_epoch: 0,
                adam: self.adam.state.clone(),
                best_params: None,
                history: Vec::new(),
            },
        };
        while st.epoch < self.config.max_epochs {
            let epoch = st.epoch + 1;
            let batches = self.epoch_batches(data, epoch);
            let mut sum = 0.0;
            for (i, b) in batches.iter().enumerate() {
                sum += self.step(b, i)?.total;
            }
            let train_loss = sum / batches.len().max(1) as f64;
            let val_loss = self.validation_loss(data)?;
            if self.scheduler.observe(val_loss) {
                st.best_epoch = epoch;
                st.best_params = Some(self.snapshot());
            }
            let record = EpochRecord { epoch, train_loss, val_loss, lr: self.scheduler.lr };
            log::info!(
                "epoch {epoch}: train {train_loss:.5} val {val_loss:.5} lr {:.2e}{}",
                record.lr,
                if st.best_epoch == epoch { " (best)" } else { "" }
            );
            st.epoch = epoch;
            st.history.push(record);
            st.scheduler = self.scheduler.clone();
            st.adam = self.adam.state.clone();
            on_epoch(self.bundle, &st)?;
        }
        if let Some((a, c)) = &st.best_params {
            self.bundle.analysis.params.load_flat(a)?;
            self.bundle.channel.params.load_flat(c)?;
        }
        Ok(st)
    }
}

/// Settings for pretraining the toy vocoder on clean speech.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VocoderTrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub clip_seconds: f64,
}

impl Default for VocoderTrainConfig {
    fn default() -> Self {
        Self { steps: 400, batch_size: 4, lr: 2e-3, clip_seconds: 0.5 }
    }
}

/// Fits `vocoder` to reproduce clean clips from their mel spectrograms with
/// the multi-scale spectral loss. Returns the loss of every step.
pub fn train_vocoder(
    vocoder: &mut ToyVocoder,
    analyzer: &MelAnalyzer,
    clips: &[Waveform],
    cfg: &VocoderTrainConfig,
    loss: &LossConfig,
    seed: u64,
) -> Result<Vec<f64>> {
    if clips.is_empty() {
        return Err(Error::EmptyDataset("vocoder training clips"));
    }
    let hop = analyzer.config().hop;
    let crop = TrainConfig { clip_seconds: cfg.clip_seconds, ..TrainConfig::default() }.crop_len(analyzer.config().sample_rate, hop);
    let spectral = SpectralLoss::new(loss)?;
    let was_trainable = vocoder.params.trainable();
    vocoder.params.set_trainable(true);
    let mut adam = Adam::new(&[&vocoder.params], 0.9, 0.999, 1e-8);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut history = Vec::with_capacity(cfg.steps);
    let result = (|| {
        for step in 0..cfg.steps {
            let crops: Vec<Vec<f64>> = (0..cfg.batch_size)
                .map(|_| {
                    let i = rng.random_range(0..clips.len());
                    random_crop(clips[i].samples(), crop, &mut rng)
                })
                .collect();
            let refs: Vec<&[f64]> = crops.iter().map(|c| c.as_slice()).collect();
            let mels = refs.iter().map(|c| analyzer.analyze_samples(c)).collect::<Result<Vec<_>>>()?;
            let mut tape = Tape::new(true);
            let x = tape.constant(mel_batch_tensor(&mels.iter().collect::<Vec<_>>())?);
            let y = vocoder.forward(&mut tape, x)?;
            let y = tape.slice_time(y, 0, crop)?;
            let l = tape.spectral_loss(&spectral, &refs, y)?;
            let v = tape.value(l).item();
            if !v.is_finite() {
                return Err(Error::NonFiniteLoss { batch: step, detail: alloc::format!("vocoder loss {v}") });
            }
            let grads = tape.backward(l);
            adam.step(&mut [&mut vocoder.params], &grads, cfg.lr);
            history.push(v);
            if step % 50 == 0 {
                log::info!("vocoder step {step}: loss {v:.5}");
            }
        }
        Ok(())
    })();
    vocoder.params.set_trainable(was_trainable);
    result.map(|_| history)
}

/// Human-readable task name.
pub fn task_name(task: Task) -> String {
    String::from(match task {
        Task::ForwardOnly => "forward_only",
        Task::Dual => "dual",
        Task::Pretrain => "pretrain",
    })
}
