mod common;

use common::*;
use petnas::criterion::CriterionAccumulator;
use petnas::data::{generate_task, TaskSource, TaskSpec};
use petnas::model::ClassifierHead;
use petnas::pet::{BiasSpace, Granularity, LoraInit, PetSet, SearchSpace};
use petnas::train::{evaluate, pretrain, train, TrainConfig, TrainableState};
use petnas::Error;

fn bias_state(seed: u64) -> (petnas::model::Model, TrainableState) {
    let model = desk_model(seed);
    let space = SearchSpace {
        bias: Some(BiasSpace::all(Granularity::Unstructured)),
        lora: None,
    };
    let mut pets = PetSet::from_search_space(&model, &space).unwrap();
    pets.init(LoraInit::Balanced, &mut rng(seed));
    let head = ClassifierHead::init(&model.config, &mut rng(seed + 1));
    (model, TrainableState { pets, head })
}

#[test]
fn separable_task_fits_in_200_steps() {
    // Presence of one marker token is separable from a bag-of-tokens view.
    let (model, mut state) = bias_state(3);
    let data = generate_task(
        &TaskSpec::synthetic(TaskSource::Presence, 320, 64),
        &model.config,
        3,
    )
    .unwrap();
    let cfg = TrainConfig {
        epochs: 10,
        peak_lr: 3e-2,
        ..Default::default()
    };
    assert_eq!(cfg.epochs * cfg.steps_per_epoch(data.train.len()), 200);
    let out = train(&model, &mut state, &data.train, &cfg, 4, None).unwrap();
    assert_eq!(out.history.len(), 200);
    assert_eq!(out.history.last().unwrap().lr, 0.0);
    assert!(
        out.final_train.accuracy >= 0.95,
        "train accuracy {}",
        out.final_train.accuracy
    );
}

#[test]
fn training_is_deterministic() {
    let data = generate_task(
        &TaskSpec::synthetic(TaskSource::Majority, 64, 32),
        &desk_config(),
        5,
    )
    .unwrap();
    let cfg = TrainConfig {
        epochs: 2,
        peak_lr: 1e-2,
        ..Default::default()
    };
    let run = || {
        let (model, mut state) = bias_state(6);
        let mut acc = CriterionAccumulator::new(&state.pets);
        let out = train(&model, &mut state, &data.train, &cfg, 7, Some(&mut acc)).unwrap();
        let metrics = evaluate(&model, &state, &data.validation).unwrap();
        (state, out.history, metrics, acc)
    };
    let (a, b) = (run(), run());
    assert_eq!(a.0, b.0);
    assert_eq!(a.1, b.1);
    assert_eq!(a.2, b.2);
    assert_eq!(a.3, b.3);
    assert_eq!(a.3.steps(), a.1.len());
}

#[test]
fn evaluation_is_repeatable_and_rejects_empty_split() {
    let (model, state) = bias_state(8);
    let data = generate_task(
        &TaskSpec::synthetic(TaskSource::Order, 64, 32),
        &model.config,
        8,
    )
    .unwrap();
    assert_eq!(
        evaluate(&model, &state, &data.validation).unwrap(),
        evaluate(&model, &state, &data.validation).unwrap()
    );
    assert!(matches!(
        evaluate(&model, &state, &[]),
        Err(Error::Usage(_))
    ));
}

#[test]
fn huge_learning_rate_reports_divergence() {
    let (model, mut state) = bias_state(9);
    let data = generate_task(
        &TaskSpec::synthetic(TaskSource::Presence, 64, 16),
        &model.config,
        9,
    )
    .unwrap();
    let cfg = TrainConfig {
        epochs: 4,
        peak_lr: 1e200,
        ..Default::default()
    };
    match train(&model, &mut state, &data.train, &cfg, 1, None) {
        Err(Error::Divergence { step, .. }) => assert!(step > 1),
        other => panic!("expected divergence, got {other:?}"),
    }
}

#[test]
fn pretraining_moves_only_the_base() {
    let mut model = desk_model(10);
    let before = model.clone();
    let data = generate_task(
        &TaskSpec::synthetic(TaskSource::Majority, 64, 16),
        &model.config,
        10,
    )
    .unwrap();
    let cfg = TrainConfig {
        epochs: 2,
        peak_lr: 1e-3,
        ..Default::default()
    };
    pretrain(&mut model, &data.train, &cfg, 11).unwrap();
    assert_ne!(model.params, before.params);
    assert_eq!(model.sites, before.sites);
}
