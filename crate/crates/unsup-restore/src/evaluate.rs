//! Test-split evaluation and report files.

use std::path::{Path, PathBuf};

use unsup_restore_core::dsp::{DspConfig, MelAnalyzer, Waveform};
use unsup_restore_core::infer::{restore, restore_chunked};
use unsup_restore_core::losses::{LossConfig, SpectralLoss};
use unsup_restore_core::metrics::{Evaluator, Metric, MetricReport};
use unsup_restore_core::models::{MelVocoder, ModelBundle};

use crate::cache::AudioCache;
use crate::error::{Error, Result};
use crate::manifest::{Manifest, Split};

/// Scores `hypothesis(item, degraded)` against each clean reference of a
/// split, in manifest order.
pub fn evaluate_with(
    manifest: &Manifest,
    split: Split,
    metrics: &[Metric],
    dsp: &DspConfig,
    loss: &LossConfig,
    cache: &AudioCache,
    mut hypothesis: impl FnMut(&Waveform) -> Result<Waveform>,
) -> Result<MetricReport> {
    let eval = Evaluator::new(MelAnalyzer::new(dsp)?, SpectralLoss::new(loss)?, metrics);
    let mut items = Vec::new();
    for it in manifest.split(split) {
        let clean = cache.load(&it.clean_path, dsp)?;
        let degraded = match &it.degraded_path {
            Some(p) => cache.load(p, dsp)?,
            None => return Err(Error::Usage(format!("item `{}` has no degraded audio to evaluate", it.id))),
        };
        let hyp = hypothesis(&degraded)?;
        items.push(eval.item(&it.id, &clean, &hyp)?);
    }
    if items.is_empty() {
        return Err(Error::Usage(format!("the {} split is empty", split.name())));
    }
    Ok(MetricReport::from_items(items))
}

/// Restores every test item and scores it against its clean reference.
pub fn evaluate(
    manifest: &Manifest,
    bundle: &ModelBundle,
    vocoder: &dyn MelVocoder,
    metrics: &[Metric],
    loss: &LossConfig,
    chunk_seconds: Option<f64>,
    cache: &AudioCache,
) -> Result<MetricReport> {
    evaluate_with(manifest, Split::Test, metrics, &bundle.dsp, loss, cache, |x| {
        Ok(match chunk_seconds {
            Some(c) => restore_chunked(x, bundle, vocoder, c)?,
            None => restore(x, bundle, vocoder)?,
        })
    })
}

/// Scores the degraded inputs themselves.
pub fn evaluate_inputs(manifest: &Manifest, metrics: &[Metric], dsp: &DspConfig, loss: &LossConfig, cache: &AudioCache) -> Result<MetricReport> {
    evaluate_with(manifest, Split::Test, metrics, dsp, loss, cache, |x| Ok(x.clone()))
}

fn cell(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.9}")).unwrap_or_default()
}

/// Path of the JSON summary written next to a CSV report.
pub fn summary_path(csv: &Path) -> PathBuf {
    csv.with_extension("summary.json")
}

/// Writes per-item rows to `path` and the aggregate to
/// [`summary_path`]`(path)`.
pub fn write_report(report: &MetricReport, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(Error::io(dir))?;
    }
    let bad = |e: csv::Error| Error::Manifest { path: path.into(), reason: e.to_string() };
    let mut w = csv::Writer::from_path(path).map_err(bad)?;
    w.write_record(["id", "mcd", "spectral_distance"]).map_err(bad)?;
    for it in &report.per_item {
        w.write_record([it.id.clone(), cell(it.mcd), cell(it.spectral_distance)]).map_err(bad)?;
    }
    w.flush().map_err(Error::io(path))?;
    let summary = serde_json::json!({ "mcd": report.mcd, "spectral_distance": report.spectral_distance });
    let sp = summary_path(path);
    std::fs::write(&sp, serde_json::to_string_pretty(&summary).expect("summary serializes") + "\n").map_err(Error::io(&sp))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{make_corpus, SplitSizes};
    use crate::manifest::ManifestItem;

    #[test]
    fn clean_against_clean_scores_zero() {
        let dir = tempfile::tempdir().unwrap();
        let mut m = make_corpus(dir.path(), 2, 4, 0.3, 2, SplitSizes { val: 0, test: 3 }).unwrap();
        m.items = m.items.into_iter().map(|it| ManifestItem { degraded_path: Some(it.clean_path.clone()), ..it }).collect();
        let dsp = DspConfig::default();
        let r = evaluate_inputs(&m, &[Metric::Mcd, Metric::Msd], &dsp, &LossConfig::default(), &AudioCache::disabled()).unwrap();
        assert_eq!(r.per_item.len(), 3);
        assert!(r.per_item.iter().all(|i| i.mcd == Some(0.0) && i.spectral_distance == Some(0.0)));
        let p = dir.path().join("out/report.csv");
        write_report(&r, &p).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        assert_eq!(text.lines().count(), 4);
        let s: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(summary_path(&p)).unwrap()).unwrap();
        assert_eq!(s["mcd"]["mean"], 0.0);
        assert_eq!(s["spectral_distance"]["count"], 3);
    }

    #[test]
    fn empty_test_split_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let m = make_corpus(dir.path(), 1, 2, 0.2, 2, SplitSizes { val: 0, test: 0 }).unwrap();
        assert!(evaluate_inputs(&m, &[Metric::Mcd], &DspConfig::default(), &LossConfig::default(), &AudioCache::disabled()).is_err());
    }
}
