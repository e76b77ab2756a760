#![allow(dead_code)]

use petnas::autodiff::Tape;
use petnas::data::{generate_task, Dataset, Example, TaskSource, TaskSpec};
use petnas::model::{forward, ClassifierHead, ForwardOptions, Model, SiteName, TransformerConfig};
use petnas::pet::{BiasSpace, Granularity, LoraInit, LoraSpace, PetSet, SearchSpace};
use petnas::train::TrainableState;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn desk_config() -> TransformerConfig {
    TransformerConfig::default()
}

pub fn desk_model(seed: u64) -> Model {
    Model::build(&desk_config(), seed).unwrap()
}

pub fn desk_data(kind: TaskSource, seed: u64) -> Dataset {
    generate_task(&TaskSpec::synthetic(kind, 512, 256), &desk_config(), seed).unwrap()
}

/// Bias deltas at every site and low-rank updates at every weight matrix.
pub fn every_site_space(rank: usize, granularity: Granularity) -> SearchSpace {
    SearchSpace {
        bias: Some(BiasSpace::all(granularity)),
        lora: Some(LoraSpace {
            sites: SiteName::LAYER_SITES
                .into_iter()
                .filter(|s| s.accepts_lora())
                .collect(),
            rank,
            ..LoraSpace::standard(granularity)
        }),
    }
}

/// PETs for `space` with every value drawn uniformly from `[-scale, scale]`.
pub fn random_pets(model: &Model, space: &SearchSpace, scale: f64, seed: u64) -> PetSet {
    let mut pets = PetSet::from_search_space(model, space).unwrap();
    pets.init(LoraInit::Balanced, &mut rng(seed));
    let mut r = rng(seed ^ 0xabcdef);
    for (t, _) in pets.tensors_mut() {
        for x in t.data_mut() {
            *x = r.gen_range(-scale..scale);
        }
    }
    pets
}

pub fn random_state(model: &Model, space: &SearchSpace, scale: f64, seed: u64) -> TrainableState {
    TrainableState {
        pets: random_pets(model, space, scale, seed),
        head: ClassifierHead::init(&model.config, &mut rng(seed + 1)),
    }
}

/// Random token sequences of random length with random labels.
pub fn random_batch(cfg: &TransformerConfig, n: usize, seed: u64) -> Vec<Example> {
    let mut r = rng(seed);
    (0..n)
        .map(|_| {
            let len = r.gen_range(1..=cfg.max_seq_len);
            Example {
                tokens: (0..len).map(|_| r.gen_range(1..cfg.vocab_size)).collect(),
                label: r.gen_range(0..cfg.num_classes),
            }
        })
        .collect()
}

/// Mean loss over `data` in one batch, without gradients.
pub fn loss_of(model: &Model, state: &TrainableState, data: &[Example]) -> f64 {
    let batch: Vec<&Example> = data.iter().collect();
    let mut tape = Tape::inference();
    let out = forward(
        &mut tape,
        model,
        &state.pets,
        &state.head,
        &batch,
        ForwardOptions::default(),
    )
    .unwrap();
    tape.value(out.loss).data()[0]
}

/// Gradients of every PET tensor, then head weight and bias.
pub fn grads_of(model: &Model, state: &TrainableState, data: &[Example]) -> Vec<Vec<f64>> {
    let batch: Vec<&Example> = data.iter().collect();
    let mut tape = Tape::new();
    let out = forward(
        &mut tape,
        model,
        &state.pets,
        &state.head,
        &batch,
        ForwardOptions::default(),
    )
    .unwrap();
    tape.backward(out.loss).unwrap();
    out.pet_vars
        .iter()
        .chain(&out.head_vars)
        .map(|v| tape.grad(*v).unwrap().to_vec())
        .collect()
}

/// Mutable views of every trainable tensor, in [`grads_of`] order.
pub fn trainable_mut(state: &mut TrainableState) -> Vec<&mut [f64]> {
    let mut out: Vec<&mut [f64]> = state
        .pets
        .tensors_mut()
        .into_iter()
        .map(|(t, _)| t.data_mut())
        .collect();
    out.push(state.head.weight.data_mut());
    out.push(state.head.bias.data_mut());
    out
}

pub fn rel_err(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

pub fn pearson(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let cov: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    let vy: f64 = y.iter().map(|b| (b - my).powi(2)).sum();
    cov / (vx * vy).sqrt()
}
