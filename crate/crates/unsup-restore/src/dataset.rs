//! Clean corpora, simulated degraded datasets and split assignment.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use unsup_restore_core::degrade::{apply_with, DegradationRecipe};
use unsup_restore_core::dsp::{DspConfig, Waveform};
use unsup_restore_core::synth::multi_speaker_corpus;
use unsup_restore_core::train::mix_seed;

use crate::audio::save_wav;
use crate::cache::AudioCache;
use crate::error::{Error, Result};
use crate::manifest::{Manifest, ManifestItem, Split};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitSizes {
    pub val: usize,
    pub test: usize,
}

impl Default for SplitSizes {
    fn default() -> Self {
        Self { val: 25, test: 25 }
    }
}

/// Seeded split assignment: a shuffled order whose first `val` ids go to
/// validation, the next `test` to test and the rest to training.
pub fn assign_splits(ids: &[String], sizes: SplitSizes, seed: u64) -> Result<Vec<Split>> {
    if sizes.val + sizes.test > ids.len() {
        return Err(Error::Usage(format!("cannot take {} val + {} test items from {}", sizes.val, sizes.test, ids.len())));
    }
    // shuffle by sorted id so the assignment does not depend on row order
    let mut order: Vec<usize> = (0..ids.len()).collect();
    order.sort_by(|&a, &b| ids[a].cmp(&ids[b]));
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut splits = vec![Split::Train; ids.len()];
    for (rank, &i) in order.iter().enumerate() {
        if rank < sizes.val {
            splits[i] = Split::Val;
        } else if rank < sizes.val + sizes.test {
            splits[i] = Split::Test;
        }
    }
    Ok(splits)
}

/// Per-item recipe; random pretraining recipes get an item-specific seed so
/// each file can be regenerated from the manifest alone.
pub fn item_recipe(recipe: &DegradationRecipe, seed: u64, index: usize) -> DegradationRecipe {
    match recipe {
        DegradationRecipe::RandomPretrain { seed: base } => DegradationRecipe::RandomPretrain { seed: mix_seed(&[*base, seed, index as u64]) },
        r => r.clone(),
    }
}

/// Degrades every item's clean audio into `out_dir/wav/<id>.wav` and
/// returns the updated manifest (splits unchanged).
pub fn degrade_manifest(clean: &Manifest, recipe: &DegradationRecipe, out_dir: &Path, seed: u64, dsp: &DspConfig, cache: &AudioCache) -> Result<Manifest> {
    recipe.validate()?;
    let mut items = Vec::with_capacity(clean.len());
    for (i, it) in clean.items.iter().enumerate() {
        let w = cache.load(&it.clean_path, dsp)?;
        let r = item_recipe(recipe, seed, i);
        let y = apply_with(&r, &w, &dsp.resampler)?;
        let path = out_dir.join("wav").join(format!("{}.wav", it.id));
        save_wav(&y, &path)?;
        items.push(ManifestItem { degraded_path: Some(path), recipe: Some(r), duration: w.duration_seconds(), ..it.clone() });
    }
    let m = Manifest::new(items)?;
    m.write(out_dir.join("manifest.csv"))?;
    Ok(m)
}

/// [`degrade_manifest`] plus a fresh seeded val/test split.
pub fn build_simulated_dataset(
    clean: &Manifest,
    recipe: &DegradationRecipe,
    out_dir: &Path,
    seed: u64,
    sizes: SplitSizes,
    dsp: &DspConfig,
    cache: &AudioCache,
) -> Result<Manifest> {
    let ids: Vec<String> = clean.items.iter().map(|it| it.id.clone()).collect();
    let splits = assign_splits(&ids, sizes, seed)?;
    let mut clean = clean.clone();
    for (it, s) in clean.items.iter_mut().zip(splits) {
        it.split = s;
    }
    degrade_manifest(&clean, recipe, out_dir, seed, dsp, cache)
}

/// Writes a synthetic multi-speaker clean corpus with a seeded split.
pub fn make_corpus(out_dir: &Path, speakers: u64, count: usize, seconds: f64, seed: u64, sizes: SplitSizes) -> Result<Manifest> {
    let clips = multi_speaker_corpus(speakers, count, seconds, seed);
    let ids: Vec<String> = (0..count).map(|i| format!("utt{i:04}")).collect();
    let splits = assign_splits(&ids, sizes, seed)?;
    let mut items = Vec::with_capacity(count);
    for ((id, w), split) in ids.into_iter().zip(clips).zip(splits) {
        let path = out_dir.join("wav").join(format!("{id}.wav"));
        save_wav(&w, &path)?;
        items.push(ManifestItem { id, clean_path: path, degraded_path: None, recipe: None, split, duration: w.duration_seconds() });
    }
    let m = Manifest::new(items)?;
    m.write(out_dir.join("manifest.csv"))?;
    Ok(m)
}

/// Loads the clean or degraded audio of a manifest split.
pub fn load_split(m: &Manifest, split: Option<Split>, degraded: bool, dsp: &DspConfig, cache: &AudioCache) -> Result<Vec<Waveform>> {
    m.items
        .iter()
        .filter(|it| split.is_none_or(|s| it.split == s))
        .map(|it| {
            let p: &PathBuf = if degraded {
                it.degraded_path.as_ref().ok_or_else(|| Error::Usage(format!("item `{}` has no degraded audio", it.id)))?
            } else {
                &it.clean_path
            };
            cache.load(p, dsp)
        })
        .collect()
}
