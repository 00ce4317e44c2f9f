use std::path::Path;

use anonet::dataset::{self, Dataset, DatasetConfig, Split};
use anonet::detect::SkinToneDetector;
use anonet::mask::NUM_CLASSES;
use anonet::synth;
use anonet::Error;

fn config(root: &Path, res: Vec<u32>) -> DatasetConfig {
    DatasetConfig {
        root: root.to_path_buf(),
        resolution_set: res,
        holdout_fraction: 0.25,
        ..DatasetConfig::default()
    }
}

#[test]
fn prepared_corpus_round_trips_through_disk() {
    let tmp = tempfile::tempdir().unwrap();
    let raw = tmp.path().join("raw");
    assert_eq!(synth::write_corpus(&raw, 4, 2, 96, 1).unwrap(), 8);
    let cfg = config(&raw, vec![32, 64]);
    let prepared = dataset::prepare_pairs(&cfg, &SkinToneDetector::default(), 64).unwrap();
    assert_eq!(prepared.stems.len(), 8);
    assert_eq!(prepared.samples.len(), 16);
    assert!(prepared.report.unpaired.is_empty() && prepared.report.corrupt.is_empty());
    for s in &prepared.samples {
        assert_eq!(s.photo.dimensions(), (64, 64));
        assert_eq!(s.mask.dimensions(), (64, 64));
        assert!(s.mask.labels().iter().all(|&l| (l as usize) < NUM_CLASSES));
    }

    let out = tmp.path().join("prepared");
    let manifest = dataset::write_prepared(&out, &prepared, &cfg, 64, false).unwrap();
    assert_eq!(manifest.train.len() + manifest.test.len(), 16);
    assert!(
        dataset::write_prepared(&out, &prepared, &cfg, 64, false).is_err(),
        "existing output needs force"
    );
    dataset::write_prepared(&out, &prepared, &cfg, 64, true).unwrap();

    let train = Dataset::load(&out, Split::Train).unwrap();
    let test = Dataset::load(&out, Split::Test).unwrap();
    assert_eq!(train.len() + test.len(), 16);
    let train_stems: Vec<_> = train.samples().iter().map(|s| s.stem.clone()).collect();
    assert!(
        test.samples()
            .iter()
            .all(|s| !train_stems.contains(&s.stem)),
        "splits share a stem"
    );
}

#[test]
fn unpaired_and_corrupt_files_are_reported() {
    let tmp = tempfile::tempdir().unwrap();
    let raw = tmp.path();
    synth::write_corpus(raw, 2, 2, 64, 2).unwrap();
    std::fs::remove_file(raw.join("masks/id000_00.png")).unwrap();
    std::fs::write(raw.join("masks/id001_01.png"), b"not a png").unwrap();
    let prepared =
        dataset::prepare_pairs(&config(raw, vec![64]), &SkinToneDetector::default(), 64).unwrap();
    assert_eq!(prepared.report.unpaired, vec!["id000_00".to_string()]);
    assert_eq!(prepared.report.corrupt.len(), 1);
    assert_eq!(prepared.report.corrupt[0].0, "id001_01");
    assert_eq!(prepared.stems.len(), 2);
}

#[test]
fn missing_root_is_a_dataset_error() {
    let tmp = tempfile::tempdir().unwrap();
    let err = dataset::prepare_pairs(
        &config(&tmp.path().join("nope"), vec![64]),
        &SkinToneDetector::default(),
        64,
    )
    .unwrap_err();
    assert!(matches!(err, Error::Dataset(_)));
}

#[test]
fn split_is_seeded_and_disjoint() {
    let stems: Vec<String> = (0..40).map(|i| format!("s{i:02}")).collect();
    let (a_train, a_test) = dataset::split_stems(&stems, 0.2, 9);
    let (b_train, b_test) = dataset::split_stems(&stems, 0.2, 9);
    assert_eq!((&a_train, &a_test), (&b_train, &b_test));
    assert_eq!(a_train.len() + a_test.len(), 40);
    assert!(a_test.iter().all(|s| !a_train.contains(s)));
}

#[test]
fn toy_dataset_identities() {
    let d = synth::toy_dataset(5, 3, 64, 4).unwrap();
    assert_eq!(d.len(), 15);
    assert_eq!(d.num_identities(), 5);
}
