use std::collections::BTreeMap;

use anonet::dataset::Dataset;
use anonet::losses::LossConfig;
use anonet::models::ModelBundle;
use anonet::nets::{Module, NetConfig};
use anonet::synth;
use anonet::training::{self, Batch, TrainConfig, TrainState, Trainer};

fn data() -> Dataset {
    synth::toy_dataset(3, 2, 64, 5).unwrap()
}

fn trainer(train: TrainConfig) -> Trainer {
    let loss = LossConfig::default();
    let models = ModelBundle::new(&NetConfig::toy(), loss.scales, 2);
    let state = TrainState::new(models, &train, vec![0.05; 5]);
    Trainer::new(state, train, loss, 2).unwrap()
}

fn digests(t: &Trainer) -> BTreeMap<&'static str, String> {
    t.state.digests().into_iter().collect()
}

fn changed(
    before: &BTreeMap<&'static str, String>,
    after: &BTreeMap<&'static str, String>,
) -> Vec<&'static str> {
    before
        .keys()
        .copied()
        .filter(|k| before[k] != after[k])
        .collect()
}

#[test]
fn each_phase_updates_only_its_networks() {
    let d = data();
    let mut t = trainer(TrainConfig::default());
    let batch = Batch::gather(&d, &[0], &[3]);
    let lr = 2e-4;

    let s0 = digests(&t);
    let fakes = t.segmentation_generator_step(&batch, lr).unwrap();
    let s1 = digests(&t);
    assert_eq!(changed(&s0, &s1), vec!["f", "g"]);

    t.segmentation_discriminator_step(&batch, &fakes, lr)
        .unwrap();
    let s2 = digests(&t);
    assert_eq!(changed(&s1, &s2), vec!["dx", "dy"]);

    let fake = t.synthesis_generator_step(&batch, lr).unwrap();
    let s3 = digests(&t);
    assert_eq!(changed(&s2, &s3), vec!["gs"]);

    t.synthesis_discriminator_step(&batch, &fake, lr).unwrap();
    let s4 = digests(&t);
    assert_eq!(changed(&s3, &s4), vec!["ds"]);
    assert_eq!(s0["vgg"], s4["vgg"]);
    assert!(t.incidents.is_empty());
}

#[test]
fn zero_learning_rate_leaves_parameters_unchanged() {
    let d = data();
    let mut t = trainer(TrainConfig::default());
    let batch = Batch::gather(&d, &[1], &[4]);
    let before: Vec<_> = t
        .state
        .models
        .g
        .params()
        .params()
        .map(|(_, p)| p.digest())
        .collect();
    let fakes = t.segmentation_generator_step(&batch, 0.0).unwrap();
    t.segmentation_discriminator_step(&batch, &fakes, 0.0)
        .unwrap();
    let after: Vec<_> = t
        .state
        .models
        .g
        .params()
        .params()
        .map(|(_, p)| p.digest())
        .collect();
    assert_eq!(before, after);
    assert_eq!(t.state.optim.g.steps_taken(), 1);
}

#[test]
fn loss_records_are_finite_and_named() {
    let d = data();
    let mut t = trainer(TrainConfig {
        epochs: 1,
        max_steps: Some(2),
        ..TrainConfig::default()
    });
    t.fit(&d, |_| Ok(())).unwrap();
    assert_eq!(t.state.step, 2);
    let terms: std::collections::BTreeSet<&str> =
        t.records.iter().map(|r| r.term.as_str()).collect();
    for term in ["gen.total", "seg.disc_x", "seg.disc_y", "syn.disc"] {
        assert!(terms.contains(term), "missing {term} in {terms:?}");
    }
    assert!(t.records.iter().all(|r| r.value.is_finite()));
    assert!(t.records.windows(2).all(|w| w[0].step <= w[1].step));
}

#[test]
fn max_steps_stops_mid_epoch_without_completing_it() {
    let d = data();
    let mut t = trainer(TrainConfig {
        epochs: 3,
        max_steps: Some(1),
        ..TrainConfig::default()
    });
    let mut calls = 0;
    t.fit(&d, |_| {
        calls += 1;
        Ok(())
    })
    .unwrap();
    assert_eq!(t.state.step, 1);
    assert_eq!(t.state.epoch, 0);
    assert_eq!(calls, 0);
}

#[test]
fn margins_must_match_the_perceptual_layers() {
    let train = TrainConfig::default();
    let models = ModelBundle::new(&NetConfig::toy(), 2, 1);
    let state = TrainState::new(models, &train, vec![0.1; 3]);
    assert!(Trainer::new(state, train, LossConfig::default(), 1).is_err());
}

#[test]
fn calibrated_margins_are_seeded_and_positive() {
    let d = data();
    let models = ModelBundle::new(&NetConfig::toy(), 2, 1);
    let a = training::calibrate_margins(&models.vgg, &d, 8, 25.0, 3).unwrap();
    let b = training::calibrate_margins(&models.vgg, &d, 8, 25.0, 3).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.len(), 5);
    assert!(a.iter().all(|&m| m > 0.0));
    let p = training::perceptual_distances(&models.vgg, &d.get(0).photo, &d.get(0).photo);
    assert!(p.iter().all(|&x| x == 0.0));
}

#[test]
fn schedule_is_constant_then_linear() {
    let c = TrainConfig::default();
    let lrs: Vec<f64> = (0..10).map(|s| c.lr_at(s, 10)).collect();
    assert!(lrs[..5].iter().all(|&l| l == c.learning_rate));
    assert!(lrs[5..].windows(2).all(|w| w[1] < w[0]));
    assert!(lrs[9] > 0.0);
}
