use proptest::prelude::*;

use unsup_restore::audio::{load_wav, save_wav};
use unsup_restore::dataset::{assign_splits, SplitSizes};
use unsup_restore::manifest::{Manifest, ManifestItem, Split};
use unsup_restore_core::degrade::DegradationRecipe;
use unsup_restore_core::dsp::{DspConfig, Waveform};

fn split_of(i: u8) -> Split {
    [Split::Train, Split::Val, Split::Test][i as usize % 3]
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 32, ..ProptestConfig::default() })]

    #[test]
    fn wav_round_trip_within_one_lsb(samples in prop::collection::vec(-1.0f64..1.0, 1..2000)) {
        let tmp = tempfile::tempdir().unwrap();
        let path = tmp.path().join("x.wav");
        save_wav(&Waveform::new(samples.clone(), 22_050).unwrap(), &path).unwrap();
        let back = load_wav(&path, &DspConfig::default()).unwrap();
        prop_assert_eq!(back.len(), samples.len());
        for (a, b) in samples.iter().zip(back.samples()) {
            prop_assert!((a - b).abs() <= 1.0 / 32768.0);
        }
    }

    #[test]
    fn manifest_round_trip(rows in prop::collection::vec((0u8..3, 0.001f64..100.0, prop::option::of(0.01f64..1.0)), 1..12)) {
        let tmp = tempfile::tempdir().unwrap();
        let items: Vec<ManifestItem> = rows
            .iter()
            .enumerate()
            .map(|(i, (s, duration, threshold))| {
                let clean = tmp.path().join(format!("c{i}.wav"));
                std::fs::write(&clean, b"").unwrap();
                let degraded = threshold.map(|_| {
                    let p = tmp.path().join("deg").join(format!("d{i}.wav"));
                    std::fs::create_dir_all(p.parent().unwrap()).unwrap();
                    std::fs::write(&p, b"").unwrap();
                    p
                });
                ManifestItem {
                    id: format!("item, {i}"),
                    clean_path: clean,
                    degraded_path: degraded,
                    recipe: threshold.map(|t| DegradationRecipe::Clipped { clip_threshold: t }),
                    split: split_of(*s),
                    duration: *duration,
                }
            })
            .collect();
        let m = Manifest::new(items).unwrap();
        let path = tmp.path().join("manifest.csv");
        m.write(&path).unwrap();
        prop_assert_eq!(Manifest::read(&path).unwrap(), m);
    }

    #[test]
    fn split_assignment_sizes_and_order_independence(n in 2usize..60, val in 0usize..10, test in 0usize..10, seed in any::<u64>()) {
        let ids: Vec<String> = (0..n).map(|i| format!("u{i:03}")).collect();
        let sizes = SplitSizes { val, test };
        let splits = match assign_splits(&ids, sizes, seed) {
            Ok(s) => s,
            Err(_) => {
                prop_assert!(val + test > n);
                return Ok(());
            }
        };
        prop_assert_eq!(splits.iter().filter(|s| **s == Split::Val).count(), val);
        prop_assert_eq!(splits.iter().filter(|s| **s == Split::Test).count(), test);
        let rev_ids: Vec<String> = ids.iter().rev().cloned().collect();
        let rev = assign_splits(&rev_ids, sizes, seed).unwrap();
        let rev: Vec<Split> = rev.into_iter().rev().collect();
        prop_assert_eq!(rev, splits);
    }
}
