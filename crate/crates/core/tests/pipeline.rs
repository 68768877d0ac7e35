use std::collections::BTreeSet;

use dacil::augment::{cross_domain_cp, in_domain_cp, replay, PasteConfig, Scene};
use dacil::eval::average_precision;
use dacil::geometry::box_iou;
use dacil::gtdb::{build_database, GtDatabase};
use dacil::par::Execution;
use dacil::rng;
use dacil::workbench::io::{decode_scene, encode_scene, load_record, save_augmented, RECORD_EXT};
use dacil::workbench::synth::{synth_domain, DomainSpec};
use proptest::prelude::*;

fn domains(seed: u64, n: usize) -> (Vec<Scene>, Vec<Scene>) {
    let (src, tgt) = DomainSpec::desk_pair();
    let part = src.partition();
    let source = synth_domain(&src, seed, 0, n, Execution::Sequential)
        .unwrap()
        .iter()
        .map(|s| s.with_labels(|c| part.is_base(c)))
        .collect();
    let target = synth_domain(&tgt, seed ^ 1, 0, n, Execution::Sequential)
        .unwrap()
        .iter()
        .map(|s| s.with_labels(|c| part.is_novel(c)))
        .collect();
    (source, target)
}

fn base_db(scenes: &[Scene]) -> GtDatabase {
    let part = DomainSpec::desk_pair().0.partition();
    let base: BTreeSet<u32> = part.base.iter().copied().collect();
    build_database(scenes, &base, 5).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn pasted_scenes_replay_and_round_trip(seed in 0u64..10_000) {
        let (source, target) = domains(seed, 3);
        let db = base_db(&source);
        let cfg = PasteConfig::default();
        for (i, scene) in source.iter().chain(&target).enumerate() {
            let mut r = rng::stream(seed, "pipeline", i as u64);
            let cross = i >= source.len();
            let (out, record) = if cross {
                cross_domain_cp(scene, &db, &cfg, &mut r).unwrap()
            } else {
                in_domain_cp(scene, &db, &cfg, &mut r).unwrap()
            };
            prop_assert_eq!(out.boxes.len(), scene.boxes.len() + record.entries.len());
            let pasted = &out.boxes[scene.boxes.len()..];
            for (k, a) in pasted.iter().enumerate() {
                for b in out.boxes.iter().take(scene.boxes.len() + k) {
                    prop_assert_eq!(box_iou(a, b), 0.0);
                }
            }
            let (again, _) = replay(scene, &db, record.clone()).unwrap();
            prop_assert_eq!(&again, &out);
            let path = std::path::Path::new("mem.dcs");
            prop_assert_eq!(decode_scene(&encode_scene(&out), path).unwrap(), out);
        }
    }

    #[test]
    fn database_survives_disk(seed in 0u64..10_000) {
        let (source, _) = domains(seed, 4);
        let db = base_db(&source);
        let dir = tempfile::tempdir().unwrap();
        db.save(dir.path()).unwrap();
        prop_assert_eq!(GtDatabase::load(dir.path()).unwrap(), db);
    }

    #[test]
    fn ap_is_bounded_and_monotone(flags in prop::collection::vec(any::<bool>(), 0..40), extra in 0usize..5) {
        let tp = flags.iter().filter(|&&f| f).count();
        let num_gt = tp + extra;
        match average_precision(&flags, num_gt) {
            None => prop_assert!(num_gt == 0 && flags.is_empty()),
            Some(ap) => {
                prop_assert!((0.0..=1.0).contains(&ap));
                let mut sorted = flags.clone();
                sorted.sort_by(|a, b| b.cmp(a));
                prop_assert!(average_precision(&sorted, num_gt).unwrap() >= ap - 1e-12);
            }
        }
    }
}

#[test]
fn augmented_corpus_writes_sidecars() {
    let (source, target) = domains(5, 3);
    let db = base_db(&source);
    let cfg = PasteConfig::default();
    let items: Vec<_> = target
        .iter()
        .enumerate()
        .map(|(i, s)| cross_domain_cp(s, &db, &cfg, &mut rng::stream(5, "sidecars", i as u64)).unwrap())
        .collect();
    let dir = tempfile::tempdir().unwrap();
    save_augmented(dir.path(), &items).unwrap();
    let mut records: Vec<_> = std::fs::read_dir(dir.path())
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.to_string_lossy().ends_with(RECORD_EXT))
        .collect();
    records.sort();
    assert_eq!(records.len(), items.len());
    for (path, (_, record)) in records.iter().zip(&items) {
        assert_eq!(&load_record(path).unwrap(), record);
    }
}
