//! The analysis, channel and synthesis networks and the bundle that holds them.
//!
//! All three are fully convolutional over time:
//!
//! * [`AnalysisNet`] maps a log-mel spectrogram to restored log-mel features
//!   at the same frame rate plus one time-invariant channel vector.
//! * [`ChannelNet`] re-applies a distortion to raw samples, conditioned on
//!   the channel vector through per-level feature-wise modulation.
//! * [`ToyVocoder`] decodes log-mel features to samples with transposed
//!   convolutions; it is pretrained on clean speech and then frozen.
//!   [`ReferenceVocoder`] is a non-differentiable Griffin-Lim alternative for
//!   inference.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::sync::atomic::{AtomicUsize, Ordering};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autograd::{Act, Tape, Tensor, Var};
use crate::dsp::{DspConfig, MelAnalyzer, MelFilterbank, MelSpectrogram, Waveform};
use crate::math::ln;
use crate::nn::{Conv, Linear, ParamSet, ResBlock, Upsample};
use crate::{Error, Result};

pub const ANALYSIS: u8 = 0;
pub const CHANNEL: u8 = 1;
pub const SYNTHESIS: u8 = 2;

/// Fixed affine normalization of log-mel values fed to and produced by the
/// networks: `(log_mel - LOG_MEL_CENTER) / LOG_MEL_SCALE`.
pub const LOG_MEL_CENTER: f64 = -6.0;
pub const LOG_MEL_SCALE: f64 = 3.0;

/// Checkpoint format version written by this build.
pub const BUNDLE_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum VocoderKind {
    #[default]
    ToyNeural,
    Reference,
    External,
}

impl core::str::FromStr for VocoderKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.replace('_', "-").as_str() {
            "toy-neural" => Ok(VocoderKind::ToyNeural),
            "reference" => Ok(VocoderKind::Reference),
            "external" => Ok(VocoderKind::External),
            other => Err(Error::param("vocoder", alloc::format!("unknown vocoder `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// U-Net depth; each level halves the time resolution.
    pub levels: usize,
    pub blocks_per_level: usize,
    pub kernel_size: usize,
    pub analysis_width: usize,
    pub channel_width: usize,
    /// Dimension of the channel feature.
    pub channel_dim: usize,
    pub channel_head_hidden: usize,
    pub vocoder: VocoderKind,
    pub vocoder_width: usize,
    /// Toy-format vocoder checkpoint used by the `external` vocoder.
    pub vocoder_checkpoint: Option<String>,
    /// Griffin-Lim iterations of the reference vocoder.
    pub reference_iterations: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            levels: 4,
            blocks_per_level: 4,
            kernel_size: 3,
            analysis_width: 64,
            channel_width: 32,
            channel_dim: 128,
            channel_head_hidden: 128,
            vocoder: VocoderKind::ToyNeural,
            vocoder_width: 64,
            vocoder_checkpoint: None,
            reference_iterations: 60,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("model.levels", self.levels),
            ("model.blocks_per_level", self.blocks_per_level),
            ("model.analysis_width", self.analysis_width),
            ("model.channel_width", self.channel_width),
            ("model.channel_dim", self.channel_dim),
            ("model.channel_head_hidden", self.channel_head_hidden),
            ("model.vocoder_width", self.vocoder_width),
            ("model.reference_iterations", self.reference_iterations),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::param(name, "must be positive"));
        }
        if self.levels > 12 {
            return Err(Error::param("model.levels", "at most 12 levels"));
        }
        if self.kernel_size % 2 == 0 {
            return Err(Error::param("model.kernel_size", "must be odd"));
        }
        if self.vocoder == VocoderKind::External && self.vocoder_checkpoint.is_none() {
            return Err(Error::param("model.vocoder_checkpoint", "required by the external vocoder"));
        }
        Ok(())
    }

    /// Time-axis multiple every U-Net input is padded to.
    pub fn time_multiple(&self) -> usize {
        1 << self.levels
    }
}

/// SHA-256 of the architecture-relevant configuration: everything that
/// changes parameter shapes or the meaning of the features. Inference-time
/// choices (which vocoder, how many Griffin-Lim rounds) are excluded.
pub fn fingerprint(model: &ModelConfig, dsp: &DspConfig) -> String {
    let canonical = alloc::format!(
        "levels={};blocks={};kernel={};aw={};cw={};dc={};hidden={};vw={};sr={};frame={};hop={};mels={};fmin={:?};fmax={:?};floor={:?}",
        model.levels,
        model.blocks_per_level,
        model.kernel_size,
        model.analysis_width,
        model.channel_width,
        model.channel_dim,
        model.channel_head_hidden,
        model.vocoder_width,
        dsp.sample_rate,
        dsp.frame_size,
        dsp.hop,
        dsp.n_mels,
        dsp.f_min,
        dsp.f_max,
        dsp.floor,
    );
    let digest = Sha256::digest(canonical.as_bytes());
    digest.iter().map(|b| alloc::format!("{b:02x}")).collect()
}

/// Rows of a batch of mel spectrograms as a `[batch, n_mels, frames]` tensor
/// of normalized log values.
pub fn mel_batch_tensor(mels: &[&MelSpectrogram]) -> Result<Tensor> {
    let first = mels.first().ok_or(Error::EmptyDataset("mel batch"))?;
    let (frames, n_mels) = (first.frames, first.n_mels);
    let mut t = Tensor::zeros([mels.len(), n_mels, frames]);
    for (b, m) in mels.iter().enumerate() {
        if m.frames != frames || m.n_mels != n_mels {
            return Err(Error::ShapeMismatch("mel batch items differ in shape".into()));
        }
        for f in 0..frames {
            for k in 0..n_mels {
                t.data[(b * n_mels + k) * frames + f] = (ln(m.values[f * n_mels + k]) - LOG_MEL_CENTER) / LOG_MEL_SCALE;
            }
        }
    }
    Ok(t)
}

/// Inverse of [`mel_batch_tensor`] for one batch row.
pub fn tensor_to_mel(t: &Tensor, b: usize, template: &MelSpectrogram) -> Result<MelSpectrogram> {
    let [_, n_mels, frames] = t.shape;
    if n_mels != template.n_mels {
        return Err(Error::ShapeMismatch(alloc::format!("{n_mels} bands vs {}", template.n_mels)));
    }
    let mut log = vec![0.0; frames * n_mels];
    for k in 0..n_mels {
        for (f, v) in t.row(b, k).iter().enumerate() {
            log[f * n_mels + k] = v * LOG_MEL_SCALE + LOG_MEL_CENTER;
        }
    }
    MelSpectrogram::from_log(&log, frames, template)
}

/// Samples as a `[batch, 1, len]` tensor.
pub fn wave_batch_tensor(waves: &[&[f64]]) -> Result<Tensor> {
    let len = waves.first().ok_or(Error::EmptyDataset("waveform batch"))?.len();
    if waves.iter().any(|w| w.len() != len) {
        return Err(Error::ShapeMismatch("waveform batch items differ in length".into()));
    }
    let mut t = Tensor::zeros([waves.len(), 1, len]);
    for (b, w) in waves.iter().enumerate() {
        t.row_mut(b, 0).copy_from_slice(w);
    }
    Ok(t)
}

fn round_up(n: usize, m: usize) -> usize {
    n.div_ceil(m).max(1) * m
}

/// Analysis outputs on the tape.
#[derive(Debug, Clone, Copy)]
pub struct AnalysisVars {
    /// Restored features, normalized log-mel `[batch, n_mels, frames]`.
    pub features: Var,
    /// Channel feature `[batch, channel_dim, 1]`.
    pub channel: Var,
    /// Time-averaged bottleneck `[batch, width, 1]` feeding the channel head.
    pub pooled: Var,
}

/// U-Net over mel frames with a speech-feature head and a time-invariant
/// channel-feature head.
#[derive(Debug, Clone)]
pub struct AnalysisNet {
    pub params: ParamSet,
    levels: usize,
    n_mels: usize,
    input: Conv,
    encoder: Vec<Vec<ResBlock>>,
    up: Vec<Upsample>,
    merge: Vec<Conv>,
    decoder: Vec<Vec<ResBlock>>,
    output: Conv,
    head: (Linear, Linear),
}

impl AnalysisNet {
    pub fn new(cfg: &ModelConfig, n_mels: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut ps = ParamSet::new(ANALYSIS);
        let (w, k) = (cfg.analysis_width, cfg.kernel_size);
        let input = Conv::new(&mut ps, &mut rng, "in", n_mels, w, k);
        let blocks = |ps: &mut ParamSet, rng: &mut ChaCha8Rng, tag: &str| -> Vec<ResBlock> {
            (0..cfg.blocks_per_level).map(|i| ResBlock::new(ps, rng, &alloc::format!("{tag}.{i}"), w, k)).collect()
        };
        let encoder = (0..cfg.levels).map(|l| blocks(&mut ps, &mut rng, &alloc::format!("enc{l}"))).collect();
        let mut up = Vec::new();
        let mut merge = Vec::new();
        let mut decoder = Vec::new();
        for l in (0..cfg.levels).rev() {
            up.push(Upsample::new(&mut ps, &mut rng, &alloc::format!("up{l}"), w, w, 2));
            merge.push(Conv::new(&mut ps, &mut rng, &alloc::format!("merge{l}"), 2 * w, w, 1));
            decoder.push(blocks(&mut ps, &mut rng, &alloc::format!("dec{l}")));
        }
        let output = Conv::with_gain(&mut ps, &mut rng, "out", w, n_mels, 1, 0.5);
        let head = (
            Linear::new(&mut ps, &mut rng, "head.0", w, cfg.channel_head_hidden, 1.0),
            Linear::new(&mut ps, &mut rng, "head.1", cfg.channel_head_hidden, cfg.channel_dim, 1.0),
        );
        Self { params: ps, levels: cfg.levels, n_mels, input, encoder, up, merge, decoder, output, head }
    }

    /// Runs on normalized log-mel input `[batch, n_mels, frames]`. The time
    /// axis is right-padded with the floor level to a multiple of `2^levels`
    /// and the features are trimmed back.
    pub fn forward(&self, tape: &mut Tape, log_mel: &Tensor, floor: f64) -> Result<AnalysisVars> {
        let [b, n_mels, frames] = log_mel.shape;
        if n_mels != self.n_mels || frames == 0 {
            return Err(Error::ShapeMismatch(alloc::format!("analysis expects {} bands, got {:?}", self.n_mels, log_mel.shape)));
        }
        let padded_len = round_up(frames, 1 << self.levels);
        let fill = (ln(floor) - LOG_MEL_CENTER) / LOG_MEL_SCALE;
        let mut padded = Tensor::full([b, n_mels, padded_len], fill);
        for bi in 0..b {
            for k in 0..n_mels {
                padded.row_mut(bi, k)[..frames].copy_from_slice(log_mel.row(bi, k));
            }
        }
        let x = tape.constant(padded);
        let ps = &self.params;
        let mut h = self.input.forward(ps, tape, x)?;
        let mut skips = Vec::with_capacity(self.levels);
        for level in &self.encoder {
            for block in level {
                h = block.forward(ps, tape, h, None)?;
            }
            skips.push(h);
            h = tape.avg_pool2(h);
        }
        let pooled = tape.mean_time(h);
        for (i, level) in self.decoder.iter().enumerate() {
            h = self.up[i].forward(ps, tape, h)?;
            h = tape.concat(h, skips[self.levels - 1 - i])?;
            h = self.merge[i].forward(ps, tape, h)?;
            for block in level {
                h = block.forward(ps, tape, h, None)?;
            }
        }
        let out = self.output.forward(ps, tape, h)?;
        let features = tape.slice_time(out, 0, frames)?;
        let hidden = self.head.0.forward(ps, tape, pooled)?;
        let hidden = tape.activation(hidden, Act::Silu);
        let channel = self.head.1.forward(ps, tape, hidden)?;
        Ok(AnalysisVars { features, channel, pooled })
    }
}

/// Waveform-domain U-Net conditioned on the channel feature.
#[derive(Debug, Clone)]
pub struct ChannelNet {
    pub params: ParamSet,
    levels: usize,
    channel_dim: usize,
    input: Conv,
    encoder: Vec<Vec<ResBlock>>,
    encoder_film: Vec<(Linear, Linear)>,
    up: Vec<Upsample>,
    merge: Vec<Conv>,
    decoder: Vec<Vec<ResBlock>>,
    decoder_film: Vec<(Linear, Linear)>,
    output: Conv,
    /// Diagnostic switch: modulation scale 1 and shift 0 everywhere.
    pub film_disabled: bool,
}

impl ChannelNet {
    pub fn new(cfg: &ModelConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut ps = ParamSet::new(CHANNEL);
        let (w, k, dc) = (cfg.channel_width, cfg.kernel_size, cfg.channel_dim);
        let input = Conv::new(&mut ps, &mut rng, "in", 1, w, k);
        let film = |ps: &mut ParamSet, rng: &mut ChaCha8Rng, tag: &str| {
            (
                Linear::new(ps, rng, &alloc::format!("{tag}.scale"), dc, w, 0.1),
                Linear::new(ps, rng, &alloc::format!("{tag}.shift"), dc, w, 0.1),
            )
        };
        let blocks = |ps: &mut ParamSet, rng: &mut ChaCha8Rng, tag: &str| -> Vec<ResBlock> {
            (0..cfg.blocks_per_level).map(|i| ResBlock::new(ps, rng, &alloc::format!("{tag}.{i}"), w, k)).collect()
        };
        let mut encoder = Vec::new();
        let mut encoder_film = Vec::new();
        for l in 0..cfg.levels {
            encoder.push(blocks(&mut ps, &mut rng, &alloc::format!("enc{l}")));
            encoder_film.push(film(&mut ps, &mut rng, &alloc::format!("enc{l}.film")));
        }
        let (mut up, mut merge, mut decoder, mut decoder_film) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
        for l in (0..cfg.levels).rev() {
            up.push(Upsample::new(&mut ps, &mut rng, &alloc::format!("up{l}"), w, w, 2));
            merge.push(Conv::new(&mut ps, &mut rng, &alloc::format!("merge{l}"), 2 * w, w, 1));
            decoder.push(blocks(&mut ps, &mut rng, &alloc::format!("dec{l}")));
            decoder_film.push(film(&mut ps, &mut rng, &alloc::format!("dec{l}.film")));
        }
        let output = Conv::with_gain(&mut ps, &mut rng, "out", w, 1, k, 0.1);
        Self {
            params: ps,
            levels: cfg.levels,
            channel_dim: dc,
            input,
            encoder,
            encoder_film,
            up,
            merge,
            decoder,
            decoder_film,
            output,
            film_disabled: false,
        }
    }

    pub fn channel_dim(&self) -> usize {
        self.channel_dim
    }

    fn film(&self, tape: &mut Tape, pair: &(Linear, Linear), c: Var) -> Result<Option<(Var, Var)>> {
        if self.film_disabled {
            return Ok(None);
        }
        Ok(Some((pair.0.forward(&self.params, tape, c)?, pair.1.forward(&self.params, tape, c)?)))
    }

    /// Distorts `x` (`[batch, 1, len]`) as described by `c`
    /// (`[batch, channel_dim, 1]`); output has the input's length.
    pub fn forward(&self, tape: &mut Tape, x: Var, c: Var) -> Result<Var> {
        let [b, ch, len] = tape.shape(x);
        if ch != 1 || len == 0 {
            return Err(Error::ShapeMismatch(alloc::format!("channel module expects [b, 1, t], got {:?}", tape.shape(x))));
        }
        if tape.shape(c) != [b, self.channel_dim, 1] {
            return Err(Error::ShapeMismatch(alloc::format!(
                "channel feature {:?}, expected {:?}",
                tape.shape(c),
                [b, self.channel_dim, 1]
            )));
        }
        let ps = &self.params;
        let padded = tape.pad_reflect_end(x, round_up(len, 1 << self.levels) - len)?;
        let mut h = self.input.forward(ps, tape, padded)?;
        let mut skips = Vec::with_capacity(self.levels);
        for (level, film) in self.encoder.iter().zip(&self.encoder_film) {
            let m = self.film(tape, film, c)?;
            for block in level {
                h = block.forward(ps, tape, h, m)?;
            }
            skips.push(h);
            h = tape.avg_pool2(h);
        }
        for (i, (level, film)) in self.decoder.iter().zip(&self.decoder_film).enumerate() {
            h = self.up[i].forward(ps, tape, h)?;
            h = tape.concat(h, skips[self.levels - 1 - i])?;
            h = self.merge[i].forward(ps, tape, h)?;
            let m = self.film(tape, film, c)?;
            for block in level {
                h = block.forward(ps, tape, h, m)?;
            }
        }
        let residual = self.output.forward(ps, tape, h)?;
        let y = tape.add(padded, residual)?;
        tape.slice_time(y, 0, len)
    }
}

const NOISE_CHANNELS: usize = 4;

/// Deterministic excitation noise in [-1, 1] for sample position `i`.
fn excitation(i: u64) -> f64 {
    let mut z = i.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^= z >> 31;
    (z >> 11) as f64 / (1u64 << 52) as f64 - 1.0
}

/// Small transposed-convolution mel decoder: `frames` frames become
/// `frames * hop` samples.
#[derive(Debug)]
pub struct ToyVocoder {
    pub params: ParamSet,
    hop: usize,
    n_mels: usize,
    input: Conv,
    ups: Vec<(Upsample, Conv)>,
    gate: Conv,
    post: Conv,
    output: Conv,
    calls: AtomicUsize,
}

impl Clone for ToyVocoder {
    fn clone(&self) -> Self {
        Self {
            params: self.params.clone(),
            hop: self.hop,
            n_mels: self.n_mels,
            input: self.input,
            ups: self.ups.clone(),
            gate: self.gate,
            post: self.post,
            output: self.output,
            calls: AtomicUsize::new(self.calls.load(Ordering::Relaxed)),
        }
    }
}

/// Factors `hop` into upsampling strides of 4 and 2.
fn strides_for(hop: usize) -> Result<Vec<usize>> {
    let mut h = hop;
    let mut out = Vec::new();
    while h % 4 == 0 {
        out.push(4);
        h /= 4;
    }
    while h % 2 == 0 {
        out.push(2);
        h /= 2;
    }
    if h != 1 || out.is_empty() {
        return Err(Error::param("dsp.hop", alloc::format!("{hop} is not a power of two >= 2")));
    }
    Ok(out)
}

impl ToyVocoder {
    pub fn new(cfg: &ModelConfig, dsp: &DspConfig, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut ps = ParamSet::new(SYNTHESIS);
        let mut w = cfg.vocoder_width;
        let input = Conv::new(&mut ps, &mut rng, "in", dsp.n_mels, w, 3);
        let mut ups = Vec::new();
        for (i, s) in strides_for(dsp.hop)?.into_iter().enumerate() {
            let next = (w / 2).max(8);
            ups.push((
                Upsample::new(&mut ps, &mut rng, &alloc::format!("up{i}"), w, next, s),
                Conv::new(&mut ps, &mut rng, &alloc::format!("conv{i}"), next, next, 3),
            ));
            w = next;
        }
        let gate = Conv::new(&mut ps, &mut rng, "gate", w, NOISE_CHANNELS, 3);
        let post = Conv::new(&mut ps, &mut rng, "post", w + NOISE_CHANNELS, w, 7);
        let output = Conv::with_gain(&mut ps, &mut rng, "out", w, 1, 7, 0.5);
        Ok(Self { params: ps, hop: dsp.hop, n_mels: dsp.n_mels, input, ups, gate, post, output, calls: AtomicUsize::new(0) })
    }

    pub fn hop(&self) -> usize {
        self.hop
    }

    /// How many times the vocoder has been run since construction.
    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::Relaxed)
    }

    /// Decodes normalized log-mel `[batch, n_mels, frames]` to `[batch, 1, frames * hop]`.
    pub fn forward(&self, tape: &mut Tape, log_mel: Var) -> Result<Var> {
        let [b, n_mels, frames] = tape.shape(log_mel);
        if n_mels != self.n_mels {
            return Err(Error::ShapeMismatch(alloc::format!("vocoder expects {} bands, got {n_mels}", self.n_mels)));
        }
        self.calls.fetch_add(1, Ordering::Relaxed);
        let ps = &self.params;
        let mut h = self.input.forward(ps, tape, log_mel)?;
        h = tape.activation(h, Act::Silu);
        for (up, conv) in &self.ups {
            h = up.forward(ps, tape, h)?;
            h = tape.activation(h, Act::Silu);
            let r = conv.forward(ps, tape, h)?;
            let r = tape.activation(r, Act::Silu);
            h = tape.add(h, r)?;
        }
        let len = frames * self.hop;
        // noise excitation with a learned per-sample envelope, so unvoiced
        // sounds and pauses get their own level
        let mut noise = Tensor::zeros([b, NOISE_CHANNELS, len]);
        for bi in 0..b {
            for c in 0..NOISE_CHANNELS {
                for (i, v) in noise.row_mut(bi, c).iter_mut().enumerate() {
                    *v = excitation((i * NOISE_CHANNELS + c) as u64);
                }
            }
        }
        let noise = tape.constant(noise);
        let envelope = self.gate.forward(ps, tape, h)?;
        let noise = tape.mul(noise, envelope)?;
        h = tape.concat(h, noise)?;
        h = self.post.forward(ps, tape, h)?;
        h = tape.activation(h, Act::Silu);
        let y = self.output.forward(ps, tape, h)?;
        Ok(tape.activation(y, Act::Tanh))
    }

    /// Eval-mode decode of one spectrogram.
    pub fn synthesize(&self, mel: &MelSpectrogram) -> Result<Waveform> {
        let mut tape = Tape::inference();
        let x = tape.constant(mel_batch_tensor(&[mel])?);
        let y = self.forward(&mut tape, x)?;
        Waveform::new(tape.value(y).row(0, 0).to_vec(), mel.sample_rate)
    }
}

/// Griffin-Lim mel inversion behind the vocoder interface.
#[derive(Debug, Clone)]
pub struct ReferenceVocoder {
    pub iterations: usize,
    filterbank: MelFilterbank,
}

impl ReferenceVocoder {
    pub fn new(dsp: &DspConfig, iterations: usize) -> Self {
        Self {
            iterations,
            filterbank: MelFilterbank::new(dsp.n_mels, dsp.frame_size, dsp.sample_rate, dsp.f_min, dsp.f_max),
        }
    }

    /// Always fails: Griffin-Lim has no gradient path.
    pub fn forward(&self, _tape: &mut Tape, _log_mel: Var) -> Result<Var> {
        Err(Error::NonDifferentiableVocoder)
    }

    pub fn synthesize(&self, mel: &MelSpectrogram) -> Result<Waveform> {
        crate::dsp::mel_invert_with(mel, &self.filterbank, self.iterations)
    }
}

/// A mel-to-waveform decoder usable at inference time.
pub trait MelVocoder {
    fn synthesize(&self, mel: &MelSpectrogram) -> Result<Waveform>;
}

impl MelVocoder for ToyVocoder {
    fn synthesize(&self, mel: &MelSpectrogram) -> Result<Waveform> {
        ToyVocoder::synthesize(self, mel)
    }
}

impl MelVocoder for ReferenceVocoder {
    fn synthesize(&self, mel: &MelSpectrogram) -> Result<Waveform> {
        ReferenceVocoder::synthesize(self, mel)
    }
}

/// The three modules plus the configuration they were built from.
#[derive(Debug, Clone)]
pub struct ModelBundle {
    pub model: ModelConfig,
    pub dsp: DspConfig,
    pub analysis: AnalysisNet,
    pub channel: ChannelNet,
    pub synthesis: ToyVocoder,
    pub synthesis_frozen: bool,
}

impl ModelBundle {
    /// Freshly initialized modules; the vocoder starts frozen.
    pub fn new(model: &ModelConfig, dsp: &DspConfig, seed: u64) -> Result<Self> {
        model.validate()?;
        dsp.validate()?;
        let mut synthesis = ToyVocoder::new(model, dsp, seed.wrapping_add(2))?;
        synthesis.params.set_trainable(false);
        Ok(Self {
            model: model.clone(),
            dsp: dsp.clone(),
            analysis: AnalysisNet::new(model, dsp.n_mels, seed),
            channel: ChannelNet::new(model, seed.wrapping_add(1)),
            synthesis,
            synthesis_frozen: true,
        })
    }

    pub fn fingerprint(&self) -> String {
        fingerprint(&self.model, &self.dsp)
    }

    pub fn analyzer(&self) -> Result<MelAnalyzer> {
        MelAnalyzer::new(&self.dsp)
    }

    /// Replaces the vocoder (e.g. with a pretrained one) and freezes it.
    pub fn set_synthesis(&mut self, mut vocoder: ToyVocoder) {
        vocoder.params.set_trainable(false);
        self.synthesis = vocoder;
        self.synthesis_frozen = true;
    }

    pub fn reference_vocoder(&self) -> ReferenceVocoder {
        ReferenceVocoder::new(&self.dsp, self.model.reference_iterations)
    }

    /// The parameter sets in checkpoint order.
    pub fn param_sets(&self) -> [&ParamSet; 3] {
        [&self.analysis.params, &self.channel.params, &self.synthesis.params]
    }

    pub fn param_sets_mut(&mut self) -> [&mut ParamSet; 3] {
        [&mut self.analysis.params, &mut self.channel.params, &mut self.synthesis.params]
    }

    /// Eval-mode analysis of one spectrogram: restored features and channel
    /// vector.
    pub fn analyze(&self, mel: &MelSpectrogram) -> Result<(MelSpectrogram, Vec<f64>)> {
        let mut tape = Tape::inference();
        let input = mel_batch_tensor(&[mel])?;
        let out = self.analysis.forward(&mut tape, &input, self.dsp.floor)?;
        let features = tensor_to_mel(tape.value(out.features), 0, mel)?;
        Ok((features, tape.value(out.channel).data.clone()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::ParamKey;
    use crate::synth::{SpeechSynth, Voice};
    use rand::Rng;

    pub(crate) fn tiny() -> ModelConfig {
        ModelConfig {
            levels: 2,
            blocks_per_level: 1,
            analysis_width: 4,
            channel_width: 3,
            channel_dim: 5,
            channel_head_hidden: 4,
            vocoder_width: 4,
            ..ModelConfig::default()
        }
    }

    fn tiny_dsp() -> DspConfig {
        DspConfig { n_mels: 6, frame_size: 64, hop: 16, ..DspConfig::default() }
    }

    fn random(rng: &mut ChaCha8Rng, shape: [usize; 3]) -> Tensor {
        Tensor { shape, data: (0..shape.iter().product()).map(|_| rng.random_range(-1.0..1.0)).collect() }
    }

    /// Compares analytic and central-difference gradients of `loss(params)`
    /// for `samples` random entries of the parameter set picked by `which`.
    fn fd_check(
        bundle: &mut ModelBundle,
        which: usize,
        samples: usize,
        loss: &dyn Fn(&ModelBundle, &mut Tape) -> Var,
    ) {
        let mut tape = Tape::new(true);
        let l = loss(bundle, &mut tape);
        let grads = tape.backward(l);
        let module = bundle.param_sets()[which].module();
        let mut rng = ChaCha8Rng::seed_from_u64(17 + which as u64);
        let n_tensors = bundle.param_sets()[which].tensors().len();
        let eval = |b: &ModelBundle| {
            let mut t = Tape::new(true);
            let v = loss(b, &mut t);
            t.value(v).item()
        };
        let mut checked = 0;
        while checked < samples {
            let ti = rng.random_range(0..n_tensors);
            let len = bundle.param_sets()[which].tensors()[ti].len();
            let i = rng.random_range(0..len);
            let analytic = grads.get(&ParamKey { module, index: ti as u32 }).map_or(0.0, |g| g.data[i]);
            let h = 1e-5;
            let orig = bundle.param_sets()[which].tensors()[ti].data[i];
            bundle.param_sets_mut()[which].tensors_mut()[ti].data[i] = orig + h;
            let up = eval(bundle);
            bundle.param_sets_mut()[which].tensors_mut()[ti].data[i] = orig - h;
            let down = eval(bundle);
            bundle.param_sets_mut()[which].tensors_mut()[ti].data[i] = orig;
            let fd = (up - down) / (2.0 * h);
            if fd.abs().max(analytic.abs()) < 1e-7 {
                continue;
            }
            let rel = (fd - analytic).abs() / fd.abs().max(analytic.abs());
            assert!(rel < 1e-3, "module {which} tensor {} entry {i}: fd {fd} analytic {analytic}", bundle.param_sets()[which].names()[ti]);
            checked += 1;
        }
    }

    #[test]
    fn analysis_preserves_frames_and_pools_channel() {
        let cfg = ModelConfig { levels: 4, blocks_per_level: 1, analysis_width: 8, ..tiny() };
        let net = AnalysisNet::new(&cfg, 80, 0);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for frames in [1usize, 5, 16, 37, 128] {
            let mut tape = Tape::new(false);
            let out = net.forward(&mut tape, &random(&mut rng, [2, 80, frames]), 1e-5).unwrap();
            assert_eq!(tape.shape(out.features), [2, 80, frames]);
            assert_eq!(tape.shape(out.channel), [2, cfg.channel_dim, 1]);
        }
    }

    #[test]
    fn channel_preserves_length_and_reacts_to_c() {
        let cfg = tiny();
        let mut net = ChannelNet::new(&cfg, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = random(&mut rng, [1, 1, 37]);
        let (c1, c2) = (random(&mut rng, [1, 5, 1]), random(&mut rng, [1, 5, 1]));
        let run = |net: &ChannelNet, c: &Tensor| {
            let mut tape = Tape::new(false);
            let (xv, cv) = (tape.constant(x.clone()), tape.constant(c.clone()));
            let y = net.forward(&mut tape, xv, cv).unwrap();
            tape.value(y).clone()
        };
        let (y1, y2) = (run(&net, &c1), run(&net, &c2));
        assert_eq!(y1.shape, [1, 1, 37]);
        assert!(y1.data.iter().zip(&y2.data).any(|(a, b)| a != b));
        net.film_disabled = true;
        assert_eq!(run(&net, &c1), run(&net, &c2));
    }

    #[test]
    fn vocoder_upsamples_by_hop() {
        let dsp = DspConfig::default();
        let voc = ToyVocoder::new(&ModelConfig { vocoder_width: 8, ..tiny() }, &dsp, 0).unwrap();
        let w = SpeechSynth::new(Voice::default()).utterance(0, 1.0);
        let mel = MelAnalyzer::new(&dsp).unwrap().analyze(&w).unwrap();
        assert_eq!(mel.frames, 87);
        let out = voc.synthesize(&mel).unwrap();
        assert_eq!(out.len(), 87 * 256);
        assert_eq!(voc.calls(), 1);
        let mut tape = Tape::new(true);
        let z = tape.leaf(Tensor::zeros([1, 80, 4]));
        let refv = ReferenceVocoder::new(&dsp, 4);
        assert!(matches!(refv.forward(&mut tape, z), Err(Error::NonDifferentiableVocoder)));
    }

    #[test]
    fn strides_factor_hop() {
        assert_eq!(strides_for(256).unwrap(), [4, 4, 4, 4]);
        assert_eq!(strides_for(16).unwrap(), [4, 4]);
        assert_eq!(strides_for(8).unwrap(), [4, 2]);
        assert!(strides_for(100).is_err());
    }

    #[test]
    fn fingerprint_tracks_architecture() {
        let (m, d) = (ModelConfig::default(), DspConfig::default());
        assert_eq!(fingerprint(&m, &d), fingerprint(&m.clone(), &d.clone()));
        assert_ne!(fingerprint(&m, &d), fingerprint(&ModelConfig { channel_width: 16, ..m.clone() }, &d));
        assert_ne!(fingerprint(&m, &d), fingerprint(&m, &DspConfig { hop: 128, ..d.clone() }));
        assert_eq!(
            fingerprint(&m, &d),
            fingerprint(&ModelConfig { vocoder: VocoderKind::Reference, ..m.clone() }, &d)
        );
    }

    #[test]
    fn gradients_match_finite_differences() {
        let dsp = tiny_dsp();
        let mut bundle = ModelBundle::new(&tiny(), &dsp, 5).unwrap();
        bundle.synthesis.params.set_trainable(true);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mel_in = random(&mut rng, [2, 6, 5]);
        let target = random(&mut rng, [2, 1, 80]);
        let loss = move |b: &ModelBundle, tape: &mut Tape| -> Var {
            let a = b.analysis.forward(tape, &mel_in, 1e-5).unwrap();
            let wav = b.synthesis.forward(tape, a.features).unwrap();
            let y = b.channel.forward(tape, wav, a.channel).unwrap();
            tape.mse(y, &target).unwrap()
        };
        for which in 0..3 {
            fd_check(&mut bundle, which, 10, &loss);
        }
    }
}
