//! Adam with a linear warmup/decay schedule, plus evaluation.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor};
use crate::criterion::CriterionAccumulator;
use crate::data::Example;
use crate::error::{Error, Result};
use crate::model::{forward, predict, ClassifierHead, ForwardOptions, Model};
use crate::pet::PetSet;

const EVAL_BATCH: usize = 64;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default = "default_peak_lr")]
    pub peak_lr: f64,
    #[serde(default = "default_warmup")]
    pub warmup_fraction: f64,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_epsilon")]
    pub epsilon: f64,
}

fn default_epochs() -> usize {
    10
}
fn default_batch_size() -> usize {
    16
}
fn default_peak_lr() -> f64 {
    3e-4
}
fn default_warmup() -> f64 {
    0.06
}
fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_epsilon() -> f64 {
    1e-8
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: default_epochs(),
            batch_size: default_batch_size(),
            peak_lr: default_peak_lr(),
            warmup_fraction: default_warmup(),
            beta1: default_beta1(),
            beta2: default_beta2(),
            epsilon: default_epsilon(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, field: &str) -> Result<()> {
        let f = |name: &str| format!("{field}.{name}");
        if self.epochs == 0 {
            return Err(Error::config(f("epochs"), "must be at least 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::config(f("batch_size"), "must be at least 1"));
        }
        if !(self.peak_lr.is_finite() && self.peak_lr > 0.0) {
            return Err(Error::config(f("peak_lr"), "must be positive"));
        }
        if !(self.warmup_fraction > 0.0 && self.warmup_fraction < 1.0) {
            return Err(Error::config(f("warmup_fraction"), "must lie in (0, 1)"));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::config(f("beta1/beta2"), "must lie in [0, 1)"));
        }
        if self.epsilon.is_nan() || self.epsilon <= 0.0 {
            return Err(Error::config(f("epsilon"), "must be positive"));
        }
        Ok(())
    }

    pub fn steps_per_epoch(&self, examples: usize) -> usize {
        examples.div_ceil(self.batch_size)
    }
}

/// Piecewise-linear learning rate: rises from 0 to `peak_lr` over the first
/// `⌈warmup_fraction · total⌉` steps, then falls to 0 at `total_steps`.
#[derive(Clone, Debug, PartialEq)]
pub struct Schedule {
    pub total_steps: usize,
    pub warmup_steps: usize,
    pub peak_lr: f64,
}

impl Schedule {
    pub fn new(total_steps: usize, warmup_fraction: f64, peak_lr: f64) -> Self {
        let warmup_steps =
            ((warmup_fraction * total_steps as f64).ceil() as usize).clamp(1, total_steps.max(1));
        Self {
            total_steps,
            warmup_steps,
            peak_lr,
        }
    }

    /// Learning rate for optimizer step `step` (1-based); `lr(0) = 0`.
    pub fn lr(&self, step: usize) -> f64 {
        if step <= self.warmup_steps {
            self.peak_lr * step as f64 / self.warmup_steps as f64
        } else if step >= self.total_steps {
            0.0
        } else {
            let decay = (self.total_steps - self.warmup_steps) as f64;
            self.peak_lr * (self.total_steps - step) as f64 / decay
        }
    }
}

/// Bias-corrected Adam without weight decay.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
    step: u32,
}

impl Adam {
    pub fn new(shapes: &[usize], beta1: f64, beta2: f64, epsilon: f64) -> Self {
        Self {
            beta1,
            beta2,
            epsilon,
            first: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            second: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            step: 0,
        }
    }

    pub fn from_config(shapes: &[usize], cfg: &TrainConfig) -> Self {
        Self::new(shapes, cfg.beta1, cfg.beta2, cfg.epsilon)
    }

    pub fn steps_taken(&self) -> u32 {
        self.step
    }

    /// One update of every parameter tensor with its gradient.
    pub fn step(&mut self, params: Vec<&mut [f64]>, grads: &[Vec<f64>], lr: f64) -> Result<()> {
        if params.len() != self.first.len() || grads.len() != self.first.len() {
            return Err(Error::Internal(format!(
                "optimizer tracks {} tensors, got {} params / {} grads",
                self.first.len(),
                params.len(),
                grads.len()
            )));
        }
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for (((p, g), m), v) in params
            .into_iter()
            .zip(grads)
            .zip(&mut self.first)
            .zip(&mut self.second)
        {
            if p.len() != g.len() || p.len() != m.len() {
                return Err(Error::Internal("optimizer shape mismatch".into()));
            }
            for i in 0..p.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                p[i] -= lr * m_hat / (v_hat.sqrt() + self.epsilon);
            }
        }
        Ok(())
    }
}

/// Everything a run trains: PET modules plus the task head.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainableState {
    pub pets: PetSet,
    pub head: ClassifierHead,
}

impl TrainableState {
    fn tensor_lens(&self) -> Vec<usize> {
        let mut lens: Vec<usize> = self.pets.tensors().iter().map(|t| t.len()).collect();
        lens.extend([self.head.weight.len(), self.head.bias.len()]);
        lens
    }

    fn params_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = self
            .pets
            .tensors_mut()
            .into_iter()
            .map(|(t, _)| t.data_mut())
            .collect();
        out.push(self.head.weight.data_mut());
        out.push(self.head.bias.data_mut());
        out
    }

    /// Count of masked-out PET entries that are not exactly zero.
    pub fn mask_violations(&self) -> usize {
        self.pets
            .tensors()
            .iter()
            .zip(self.pets.masks())
            .map(|(t, m)| {
                t.data()
                    .iter()
                    .zip(m)
                    .filter(|(&x, &keep)| !keep && x != 0.0)
                    .count()
            })
            .sum()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
    /// Accuracy on the step's minibatch.
    pub accuracy: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainOutcome {
    pub history: Vec<StepRecord>,
    /// Loss and accuracy over the whole training split after the last step.
    pub final_train: Metrics,
    /// Masked entries found non-zero after any step (always 0 unless broken).
    pub mask_violations: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub accuracy: f64,
    pub loss: f64,
}

/// Trains `state` on `data`. The head and every unmasked PET entry are
/// updated; the base model is never touched. When `acc` is given, the
/// criterion observes every step between backward and the optimizer update.
pub fn train(
    model: &Model,
    state: &mut TrainableState,
    data: &[Example],
    cfg: &TrainConfig,
    shuffle_seed: u64,
    mut acc: Option<&mut CriterionAccumulator>,
) -> Result<TrainOutcome> {
    cfg.validate("train")?;
    if data.is_empty() {
        return Err(Error::Usage("training split is empty".into()));
    }
    let per_epoch = cfg.steps_per_epoch(data.len());
    let schedule = Schedule::new(cfg.epochs * per_epoch, cfg.warmup_fraction, cfg.peak_lr);
    let mut adam = Adam::from_config(&state.tensor_lens(), cfg);
    let mut rng = ChaCha8Rng::seed_from_u64(shuffle_seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut history = Vec::with_capacity(schedule.total_steps);
    let mut mask_violations = state.mask_violations();
    let mut step = 0;

    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            step += 1;
            let batch: Vec<&Example> = chunk.iter().map(|&i| &data[i]).collect();
            let mut tape = Tape::new();
            let out = forward(
                &mut tape,
                model,
                &state.pets,
                &state.head,
                &batch,
                ForwardOptions::default(),
            )?;
            let loss = tape.value(out.loss).data()[0];
            if !loss.is_finite() {
                return Err(Error::Divergence { step, loss });
            }
            let accuracy = accuracy(tape.value(out.logits), &batch);
            tape.backward(out.loss)?;

            let mut grads = Vec::with_capacity(out.pet_vars.len() + 2);
            for v in out.pet_vars.iter().chain(&out.head_vars) {
                let g = tape
                    .grad(*v)
                    .ok_or_else(|| Error::Internal("trainable tensor has no gradient".into()))?;
                grads.push(g.to_vec());
            }
            state.pets.mask_gradients(&mut grads);
            if let Some(acc) = acc.as_deref_mut() {
                acc.observe_step(&state.pets, &grads[..out.pet_vars.len()])?;
            }
            let lr = schedule.lr(step);
            adam.step(state.params_mut(), &grads, lr)?;
            state.pets.apply_masks();
            mask_violations += state.mask_violations();
            history.push(StepRecord {
                step,
                lr,
                loss,
                accuracy,
            });
        }
    }
    let final_train = evaluate(model, state, data)?;
    Ok(TrainOutcome {
        history,
        final_train,
        mask_violations,
    })
}

/// Fraction of rows whose arg-max logit (lowest index on ties) is the label.
pub fn accuracy(logits: &Tensor, batch: &[&Example]) -> f64 {
    let correct = batch
        .iter()
        .enumerate()
        .filter(|(r, ex)| argmax(logits.row(*r)) == ex.label)
        .count();
    correct as f64 / batch.len() as f64
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Mean loss and accuracy over `data`, in order, without gradients.
pub fn evaluate(model: &Model, state: &TrainableState, data: &[Example]) -> Result<Metrics> {
    if data.is_empty() {
        return Err(Error::Usage("cannot evaluate an empty split".into()));
    }
    let mut loss_sum = 0.0;
    let mut correct = 0.0;
    for chunk in data.chunks(EVAL_BATCH) {
        let batch: Vec<&Example> = chunk.iter().collect();
        let (loss, logits) = predict(model, &state.pets, &state.head, &batch)?;
        loss_sum += loss * batch.len() as f64;
        correct += accuracy(&logits, &batch) * batch.len() as f64;
    }
    let n = data.len() as f64;
    Ok(Metrics {
        accuracy: correct / n,
        loss: loss_sum / n,
    })
}

/// Trains every base weight together with a throwaway head, then leaves the
/// model to be used frozen. Gives the base non-random features before PET
/// search.
pub fn pretrain(
    model: &mut Model,
    data: &[Example],
    cfg: &TrainConfig,
    seed: u64,
) -> Result<Metrics> {
    cfg.validate("pretrain.train")?;
    if data.is_empty() {
        return Err(Error::Usage("pre-training split is empty".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut state = TrainableState {
        pets: PetSet::new(),
        head: ClassifierHead::init(&model.config, &mut rng),
    };
    let per_epoch = cfg.steps_per_epoch(data.len());
    let schedule = Schedule::new(cfg.epochs * per_epoch, cfg.warmup_fraction, cfg.peak_lr);
    let mut lens: Vec<usize> = model.params.tensors_mut().iter().map(|t| t.len()).collect();
    lens.extend([state.head.weight.len(), state.head.bias.len()]);
    let mut adam = Adam::from_config(&lens, cfg);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut step = 0;
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            step += 1;
            let batch: Vec<&Example> = chunk.iter().map(|&i| &data[i]).collect();
            let mut tape = Tape::new();
            let opts = ForwardOptions {
                base_trainable: true,
            };
            let out = forward(&mut tape, model, &state.pets, &state.head, &batch, opts)?;
            let loss = tape.value(out.loss).data()[0];
            if !loss.is_finite() {
                return Err(Error::Divergence { step, loss });
            }
            tape.backward(out.loss)?;
            let grads: Vec<Vec<f64>> = out
                .base_vars
                .iter()
                .chain(&out.head_vars)
                .map(|v| tape.grad(*v).map(<[f64]>::to_vec))
                .collect::<Option<_>>()
                .ok_or_else(|| Error::Internal("base tensor has no gradient".into()))?;
            let mut params: Vec<&mut [f64]> = model
                .params
                .tensors_mut()
                .into_iter()
                .map(Tensor::data_mut)
                .collect();
            params.push(state.head.weight.data_mut());
            params.push(state.head.bias.data_mut());
            adam.step(params, &grads, schedule.lr(step))?;
        }
    }
    evaluate(model, &state, data)
}

/// Writes `phase,step,lr,loss,accuracy` rows for one or more phases.
pub fn write_history_csv(path: &Path, phases: &[(&str, &[StepRecord])]) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = csv::Writer::from_writer(file);
    w.write_record(["phase", "step", "lr", "loss", "accuracy"])?;
    for (phase, records) in phases {
        for r in *records {
            w.write_record([
                phase.to_string(),
                r.step.to_string(),
                format!("{:e}", r.lr),
                format!("{:e}", r.loss),
                format!("{}", r.accuracy),
            ])?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_shape() {
        let s = Schedule::new(100, 0.06, 3e-4);
        assert_eq!(s.warmup_steps, 6);
        assert_eq!(s.lr(0), 0.0);
        assert_eq!(s.lr(6), 3e-4);
        assert_eq!(s.lr(100), 0.0);
        assert!((s.lr(3) - 1.5e-4).abs() < 1e-18);
        assert!((s.lr(53) - 1.5e-4).abs() < 1e-18);
        let max = (0..=100).map(|k| s.lr(k)).fold(0.0, f64::max);
        assert_eq!(max, s.lr(6));
    }

    #[test]
    fn warmup_rounds_up() {
        let s = Schedule::new(40, 0.06, 1.0);
        assert_eq!(s.warmup_steps, 3); // ceil(2.4)
        assert_eq!(s.lr(3), 1.0);
    }

    #[test]
    fn adam_two_steps_by_hand() {
        // θ0 = 1, g1 = 0.5, g2 = -0.25, lr = 0.1, β1 = 0.9, β2 = 0.999, ε = 1e-8.
        let mut adam = Adam::new(&[1], 0.9, 0.999, 1e-8);
        let mut theta = vec![1.0];
        adam.step(vec![&mut theta], &[vec![0.5]], 0.1).unwrap();
        // m = 0.05, v = 0.00025; m̂ = 0.5, v̂ = 0.25 → step = 0.1·0.5/(0.5+1e-8)
        let t1 = 1.0 - 0.1 * 0.5 / (0.5 + 1e-8);
        assert!((theta[0] - t1).abs() < 1e-12);
        adam.step(vec![&mut theta], &[vec![-0.25]], 0.1).unwrap();
        let m: f64 = 0.9 * 0.05 + 0.1 * -0.25;
        let v: f64 = 0.999 * 0.00025 + 0.001 * 0.0625;
        let m_hat = m / (1.0 - 0.81);
        let v_hat = v / (1.0 - 0.999f64 * 0.999);
        let t2 = t1 - 0.1 * m_hat / (v_hat.sqrt() + 1e-8);
        assert!((theta[0] - t2).abs() < 1e-12);
    }

    #[test]
    fn accuracy_edge_cases() {
        let a = Example {
            tokens: vec![1],
            label: 0,
        };
        let b = Example {
            tokens: vec![1],
            label: 1,
        };
        let batch = vec![&a, &b, &a, &b];
        let perfect = Tensor::matrix(4, 2, vec![1., 0., 0., 1., 1., 0., 0., 1.]).unwrap();
        assert_eq!(accuracy(&perfect, &batch), 1.0);
        let constant = Tensor::matrix(4, 2, vec![1., 0., 1., 0., 1., 0., 1., 0.]).unwrap();
        assert_eq!(accuracy(&constant, &batch), 0.5);
    }

    #[test]
    fn config_validation() {
        let bad = TrainConfig {
            warmup_fraction: 1.0,
            ..Default::default()
        };
        assert!(matches!(bad.validate("train"), Err(Error::Config { .. })));
        let bad = TrainConfig {
            batch_size: 0,
            ..Default::default()
        };
        assert!(bad.validate("train").is_err());
    }
}
