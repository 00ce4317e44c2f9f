use std::path::Path;

use anonet::checkpoint::{self, LoadOptions};
use anonet::models::ModelBundle;
use anonet::nets::NetConfig;
use anonet::training::{TrainConfig, TrainState};
use anonet::Error;

fn state(seed: u64) -> TrainState {
    let train = TrainConfig::default();
    TrainState::new(
        ModelBundle::new(&NetConfig::toy(), 2, seed),
        &train,
        vec![0.1, 0.1, 0.1, 0.05, 0.05],
    )
}

fn saved(dir: &Path, seed: u64) -> TrainState {
    let s = state(seed);
    checkpoint::save_checkpoint(dir, &s, "abc", seed).unwrap();
    s
}

#[test]
fn round_trip_restores_every_tensor() {
    let tmp = tempfile::tempdir().unwrap();
    let s = saved(tmp.path(), 3);
    let back = checkpoint::load_checkpoint(
        tmp.path(),
        &TrainConfig::default(),
        Some("abc"),
        LoadOptions::default(),
    )
    .unwrap();
    assert_eq!(s.digests(), back.digests());
    assert_eq!(s.optim, back.optim);
    assert_eq!(s.margins, back.margins);
    let m = checkpoint::read_manifest(tmp.path()).unwrap();
    assert!(checkpoint::diff_manifest(tmp.path(), &m).is_clean());
    assert_eq!(m.config_hash, "abc");
}

#[test]
fn margins_round_trip_bitwise() {
    let tmp = tempfile::tempdir().unwrap();
    let mut s = state(4);
    s.margins = vec![
        0.1 + 0.2,
        1.0 / 3.0,
        0.9722405489952459,
        f64::MIN_POSITIVE,
        2.0f64.sqrt(),
    ];
    checkpoint::save_checkpoint(tmp.path(), &s, "abc", 4).unwrap();
    let back = checkpoint::load_checkpoint(
        tmp.path(),
        &TrainConfig::default(),
        None,
        LoadOptions::default(),
    )
    .unwrap();
    let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&back.margins), bits(&s.margins));
}

#[test]
fn hash_mismatch_is_refused_unless_allowed() {
    let tmp = tempfile::tempdir().unwrap();
    saved(tmp.path(), 3);
    let err = checkpoint::load_checkpoint(
        tmp.path(),
        &TrainConfig::default(),
        Some("other"),
        LoadOptions::default(),
    )
    .unwrap_err();
    assert!(matches!(err, Error::ConfigHashMismatch { .. }));
    let opts = LoadOptions {
        allow_config_mismatch: true,
        ..LoadOptions::default()
    };
    assert!(
        checkpoint::load_checkpoint(tmp.path(), &TrainConfig::default(), Some("other"), opts)
            .is_ok()
    );
}

#[test]
fn corrupt_file_is_detected() {
    let tmp = tempfile::tempdir().unwrap();
    saved(tmp.path(), 3);
    let p = tmp.path().join("dx.safetensors");
    let mut bytes = std::fs::read(&p).unwrap();
    let last = bytes.len() - 1;
    bytes[last] ^= 0xff;
    std::fs::write(&p, bytes).unwrap();
    let m = checkpoint::read_manifest(tmp.path()).unwrap();
    assert_eq!(
        checkpoint::diff_manifest(tmp.path(), &m).corrupt,
        vec!["dx.safetensors".to_string()]
    );
    assert!(checkpoint::load_checkpoint(
        tmp.path(),
        &TrainConfig::default(),
        None,
        LoadOptions::default()
    )
    .is_err());
}

#[test]
fn inference_load_needs_only_the_generators() {
    let tmp = tempfile::tempdir().unwrap();
    let s = saved(tmp.path(), 3);
    for f in std::fs::read_dir(tmp.path()).unwrap() {
        let p = f.unwrap().path();
        let name = p.file_name().unwrap().to_str().unwrap().to_string();
        if name != checkpoint::MANIFEST && name != "g.safetensors" && name != "gs.safetensors" {
            std::fs::remove_file(p).unwrap();
        }
    }
    let err = checkpoint::load_checkpoint(
        tmp.path(),
        &TrainConfig::default(),
        None,
        LoadOptions::default(),
    )
    .unwrap_err();
    assert!(matches!(err, Error::MissingCheckpointFiles { .. }));
    let opts = LoadOptions {
        inference_only: true,
        ..LoadOptions::default()
    };
    let (models, _) = checkpoint::load_models(tmp.path(), Some("abc"), opts).unwrap();
    let d = |m: &ModelBundle, n: &str| m.module(n).unwrap().params().digest();
    assert_eq!(d(&models, "g"), d(&s.models, "g"));
    assert_eq!(d(&models, "gs"), d(&s.models, "gs"));

    std::fs::remove_file(tmp.path().join("gs.safetensors")).unwrap();
    assert!(matches!(
        checkpoint::load_models(tmp.path(), None, opts),
        Err(Error::MissingCheckpointFiles { .. })
    ));
}

#[test]
fn latest_pointer_follows_the_newest_save() {
    let tmp = tempfile::tempdir().unwrap();
    assert!(checkpoint::latest(tmp.path()).is_err());
    for e in 0..3 {
        let dir = checkpoint::epoch_dir(tmp.path(), e);
        saved(&dir, e as u64);
        checkpoint::mark_latest(tmp.path(), &dir).unwrap();
    }
    assert_eq!(
        checkpoint::latest(tmp.path()).unwrap(),
        checkpoint::epoch_dir(tmp.path(), 2)
    );
}
