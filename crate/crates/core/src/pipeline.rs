//! Search by pruning: train the over-provisioned PET set while accumulating
//! the criterion, prune to budget in increasing-score order, rewind the
//! survivors to their exact initial values, retrain and evaluate.

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::criterion::{
    group_scores, ColumnScore, CriterionAccumulator, CriterionMode, PruneKind, PruneOp,
};
use crate::data::{generate_task, Dataset, TaskSpec};
use crate::error::{Error, Result};
use crate::model::{ClassifierHead, Model, SiteId, SiteName, TransformerConfig};
use crate::pet::{Granularity, LoraInit, PetKind, PetSet, SearchSpace};
use crate::train::{evaluate, pretrain, train, Metrics, TrainConfig, TrainOutcome, TrainableState};

const STREAM_PET_INIT: u64 = 0;
const STREAM_HEAD_INIT: u64 = 1;
const STREAM_SHUFFLE: u64 = 2;
const STREAM_RANDOM_MASK: u64 = 3;
const PRETRAIN_SEED_OFFSET: u64 = 0x9e37_79b9_7f4a_7c15;

fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Seed of the per-epoch shuffles for run `seed`. Search and retrain share it.
pub fn shuffle_seed(seed: u64) -> u64 {
    rng_for(seed, STREAM_SHUFFLE).next_u64()
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Seeds {
    #[serde(default)]
    pub model: u64,
    #[serde(default)]
    pub data: u64,
    #[serde(default = "default_runs")]
    pub runs: Vec<u64>,
}

fn default_runs() -> Vec<u64> {
    (0..5).collect()
}

impl Default for Seeds {
    fn default() -> Self {
        Self {
            model: 0,
            data: 0,
            runs: default_runs(),
        }
    }
}

/// Optional warm-up of the base weights on a (usually different) task
/// before they are frozen.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PretrainConfig {
    pub task: TaskSpec,
    #[serde(default)]
    pub train: TrainConfig,
}

/// Everything that determines a search run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub model: TransformerConfig,
    /// Load the base weights from a checkpoint instead of building them.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model_checkpoint: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pretrain: Option<PretrainConfig>,
    pub task: TaskSpec,
    #[serde(default)]
    pub search_space: SearchSpace,
    pub budget: usize,
    #[serde(default)]
    pub criterion: CriterionMode,
    #[serde(default)]
    pub column_score: ColumnScore,
    #[serde(default)]
    pub lora_init: LoraInit,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub seeds: Seeds,
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate("train")?;
        if let Some(p) = &self.pretrain {
            p.train.validate("pretrain.train")?;
        }
        if self.seeds.runs.is_empty() {
            return Err(Error::config(
                "seeds.runs",
                "at least one run seed is required",
            ));
        }
        Ok(())
    }
}

/// A prepared base model and dataset shared by every run of one config.
#[derive(Clone, Debug)]
pub struct Experiment {
    pub config: RunConfig,
    pub model: Model,
    pub data: Dataset,
    /// Training-split metrics of the warm-up, when one ran.
    pub pretrain: Option<Metrics>,
}

impl Experiment {
    pub fn prepare(config: RunConfig) -> Result<Self> {
        config.validate()?;
        let mut model = match &config.model_checkpoint {
            Some(path) => {
                let m = Model::load_checkpoint(path)?;
                if m.config != config.model {
                    return Err(Error::config(
                        "model_checkpoint",
                        "checkpoint shape differs from `model`",
                    ));
                }
                m
            }
            None => Model::build(&config.model, config.seeds.model)?,
        };
        config.search_space.validate(&model)?;
        let pretrain_metrics = match &config.pretrain {
            Some(p) => {
                let seed = config.seeds.data.wrapping_add(PRETRAIN_SEED_OFFSET);
                let warm = generate_task(&p.task, &config.model, seed)?;
                let run_seed = config.seeds.model.wrapping_add(PRETRAIN_SEED_OFFSET);
                let m = pretrain(&mut model, &warm.train, &p.train, run_seed)?;
                log::info!(
                    "pre-training: loss {:.4}, accuracy {:.3}",
                    m.loss,
                    m.accuracy
                );
                Some(m)
            }
            None => None,
        };
        let data = generate_task(&config.task, &config.model, config.seeds.data)?;
        Ok(Self {
            config,
            model,
            data,
            pretrain: pretrain_metrics,
        })
    }

    /// Over-provisioned PET set, initialized for run `seed`, with masks open.
    pub fn initial_state(&self, seed: u64) -> Result<TrainableState> {
        let mut pets = PetSet::from_search_space(&self.model, &self.config.search_space)?;
        pets.init(self.config.lora_init, &mut rng_for(seed, STREAM_PET_INIT));
        let head = ClassifierHead::init(&self.model.config, &mut rng_for(seed, STREAM_HEAD_INIT));
        Ok(TrainableState { pets, head })
    }
}

/// Snapshot of every trainable value at initial-train step 0.
#[derive(Clone, Debug, PartialEq)]
pub struct InitRecord {
    pub state: TrainableState,
}

impl InitRecord {
    pub fn capture(state: &TrainableState) -> Self {
        Self {
            state: state.clone(),
        }
    }

    /// Initial values with the masks of `pruned`: survivors keep their
    /// recorded values, pruned entries are zero, the head is rewound too.
    pub fn restore(&self, pruned: &PetSet) -> Result<TrainableState> {
        let mut state = self.state.clone();
        state.pets.copy_masks_from(pruned)?;
        Ok(state)
    }

    /// Confirms `state` is exactly the rewound initialization: bitwise-equal
    /// survivors and head, and zero at every pruned entry.
    pub fn verify_restored(&self, state: &TrainableState) -> Result<RestorationCheck> {
        let mut check = RestorationCheck::default();
        let init = self.state.pets.tensors();
        let now = state.pets.tensors();
        if init.len() != now.len() {
            return Err(Error::Internal("PET layout changed during pruning".into()));
        }
        for ((a, b), mask) in init.iter().zip(&now).zip(state.pets.masks()) {
            for ((x, y), &keep) in a.data().iter().zip(b.data()).zip(mask) {
                if keep {
                    check.survivors += 1;
                    if x.to_bits() != y.to_bits() {
                        return Err(Error::Internal("surviving parameter not rewound".into()));
                    }
                } else {
                    check.pruned += 1;
                    if *y != 0.0 {
                        return Err(Error::Internal("pruned parameter is non-zero".into()));
                    }
                }
            }
        }
        if state.head != self.state.head {
            return Err(Error::Internal("classifier head not rewound".into()));
        }
        Ok(check)
    }
}

/// Counts from the lottery-ticket checks performed by a run.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct RestorationCheck {
    pub survivors: usize,
    pub pruned: usize,
    /// Pruned entries seen non-zero after any retraining step.
    pub retrain_mask_violations: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PruneOutcome {
    /// Applied ops, in application order.
    pub applied: Vec<PruneOp>,
    pub final_count: usize,
    pub warning: Option<String>,
}

pub const NO_PRUNING_WARNING: &str =
    "no pruning performed: budget is not below the initial parameter count";

/// Sorts ascending by score, ties by (layer, site, kind, index).
pub fn sort_ops(ops: &mut [PruneOp]) {
    ops.sort_by(|a, b| {
        a.score
            .total_cmp(&b.score)
            .then_with(|| a.order_key().cmp(&b.order_key()))
    });
}

/// Applies ops in increasing-score order until the count is at most `budget`.
pub fn prune_to_budget(ops: &[PruneOp], current_count: usize, budget: usize) -> PruneOutcome {
    let mut sorted = ops.to_vec();
    sort_ops(&mut sorted);
    take_until_budget(sorted, current_count, budget)
}

fn take_until_budget(ordered: Vec<PruneOp>, current_count: usize, budget: usize) -> PruneOutcome {
    if current_count <= budget {
        return PruneOutcome {
            applied: Vec::new(),
            final_count: current_count,
            warning: Some(NO_PRUNING_WARNING.to_string()),
        };
    }
    let mut count = current_count;
    let mut applied = Vec::new();
    for op in ordered {
        if count <= budget {
            break;
        }
        count -= op.param_count.min(count);
        applied.push(op);
    }
    PruneOutcome {
        applied,
        final_count: count,
        warning: None,
    }
}

/// Masks the unit named by `op`.
pub fn apply_prune(pets: &mut PetSet, op: &PruneOp) -> Result<()> {
    let bad = || {
        Error::Internal(format!(
            "prune op {:?} does not fit PET {}",
            op.kind, op.pet_id
        ))
    };
    let pet = pets.get_mut(op.pet_id).ok_or_else(bad)?;
    match (&mut pet.kind, op.kind) {
        (PetKind::Bias(b), PruneKind::WholeBias) => b.mask.iter_mut().for_each(|m| *m = false),
        (PetKind::Bias(b), PruneKind::BiasEntry) => {
            *b.mask.get_mut(op.index).ok_or_else(bad)? = false
        }
        (PetKind::Lora(l), PruneKind::LoraColumn) if op.index < l.rank() => {
            l.prune_column(op.index)
        }
        (PetKind::Lora(l), PruneKind::LoraEntry) => {
            let nu = l.mask_u.len();
            if op.index < nu {
                l.mask_u[op.index] = false;
            } else {
                *l.mask_v.get_mut(op.index - nu).ok_or_else(bad)? = false;
            }
        }
        _ => return Err(bad()),
    }
    Ok(())
}

/// How the pruned architecture is chosen.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Selection {
    /// Criterion averaged over every search step.
    Averaged,
    /// Criterion from the last search step only.
    LastStep,
    /// Units pruned in a seeded random order.
    Random,
    /// No pruning.
    Full,
}

impl From<CriterionMode> for Selection {
    fn from(m: CriterionMode) -> Self {
        match m {
            CriterionMode::Averaged => Selection::Averaged,
            CriterionMode::LastStep => Selection::LastStep,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaselineKind {
    RandomMask,
    LastStepCriterion,
    Full,
}

impl BaselineKind {
    pub fn selection(self) -> Selection {
        match self {
            BaselineKind::RandomMask => Selection::Random,
            BaselineKind::LastStepCriterion => Selection::LastStep,
            BaselineKind::Full => Selection::Full,
        }
    }
}

impl std::str::FromStr for BaselineKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "random" | "random_mask" => Ok(BaselineKind::RandomMask),
            "last_step" | "last_step_criterion" => Ok(BaselineKind::LastStepCriterion),
            "full" => Ok(BaselineKind::Full),
            other => Err(Error::Usage(format!(
                "unknown baseline kind `{other}` (expected random, last_step or full)"
            ))),
        }
    }
}

/// Run-length encoded boolean mask: the value of the first run, then run
/// lengths of alternating values.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rle {
    pub first: bool,
    pub runs: Vec<usize>,
}

impl Rle {
    pub fn encode(mask: &[bool]) -> Self {
        let mut runs = Vec::new();
        let first = mask.first().copied().unwrap_or(true);
        let mut current = first;
        let mut len = 0;
        for &m in mask {
            if m == current {
                len += 1;
            } else {
                runs.push(len);
                current = m;
                len = 1;
            }
        }
        if len > 0 {
            runs.push(len);
        }
        Self { first, runs }
    }

    pub fn decode(&self) -> Vec<bool> {
        let mut out = Vec::with_capacity(self.runs.iter().sum());
        let mut value = self.first;
        for &n in &self.runs {
            out.extend(std::iter::repeat_n(value, n));
            value = !value;
        }
        out
    }

    pub fn len(&self) -> usize {
        self.runs.iter().sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// One module of an [`ArchitectureSpec`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ModuleSpec {
    Bias {
        layer: usize,
        site: SiteName,
        granularity: Granularity,
        length: usize,
        mask: Rle,
    },
    Lora {
        layer: usize,
        site: SiteName,
        granularity: Granularity,
        out_dim: usize,
        in_dim: usize,
        rank: usize,
        /// Surviving columns (structured only).
        #[serde(default, skip_serializing_if = "Option::is_none")]
        columns: Option<Vec<usize>>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        mask_u: Option<Rle>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        mask_v: Option<Rle>,
    },
}

impl ModuleSpec {
    pub fn site(&self) -> SiteId {
        match self {
            ModuleSpec::Bias { layer, site, .. } | ModuleSpec::Lora { layer, site, .. } => SiteId {
                layer: *layer,
                name: *site,
            },
        }
    }

    /// (kept, capacity) in parameters.
    pub fn kept_and_capacity(&self) -> (usize, usize) {
        match self {
            ModuleSpec::Bias { length, mask, .. } => {
                (mask.decode().iter().filter(|&&m| m).count(), *length)
            }
            ModuleSpec::Lora {
                out_dim,
                in_dim,
                rank,
                columns,
                mask_u,
                mask_v,
                ..
            } => {
                let capacity = (out_dim + in_dim) * rank;
                let kept = match (columns, mask_u, mask_v) {
                    (Some(c), _, _) => c.len() * (out_dim + in_dim),
                    (None, Some(u), Some(v)) => {
                        u.decode().iter().chain(&v.decode()).filter(|&&m| m).count()
                    }
                    _ => capacity,
                };
                (kept, capacity)
            }
        }
    }

    fn from_module(pet: &crate::pet::PetModule) -> Self {
        let (layer, site) = (pet.site.layer, pet.site.name);
        match &pet.kind {
            PetKind::Bias(b) => ModuleSpec::Bias {
                layer,
                site,
                granularity: b.granularity,
                length: b.len(),
                mask: Rle::encode(&b.mask),
            },
            PetKind::Lora(l) => {
                let structured = l.granularity == Granularity::Structured;
                ModuleSpec::Lora {
                    layer,
                    site,
                    granularity: l.granularity,
                    out_dim: l.out_dim(),
                    in_dim: l.in_dim(),
                    rank: l.rank(),
                    columns: structured
                        .then(|| (0..l.rank()).filter(|&j| l.column_alive(j)).collect()),
                    mask_u: (!structured).then(|| Rle::encode(&l.mask_u)),
                    mask_v: (!structured).then(|| Rle::encode(&l.mask_v)),
                }
            }
        }
    }

    fn apply_to(&self, pet: &mut crate::pet::PetModule) -> Result<()> {
        let mismatch = || {
            Error::Input(format!(
                "spec module at {} does not match the search space",
                pet.site
            ))
        };
        if self.site() != pet.site {
            return Err(mismatch());
        }
        match (self, &mut pet.kind) {
            (
                ModuleSpec::Bias {
                    length,
                    mask,
                    granularity,
                    ..
                },
                PetKind::Bias(b),
            ) => {
                if *length != b.len() || mask.len() != b.len() || *granularity != b.granularity {
                    return Err(mismatch());
                }
                b.mask = mask.decode();
            }
            (
                ModuleSpec::Lora {
                    out_dim,
                    in_dim,
                    rank,
                    columns,
                    mask_u,
                    mask_v,
                    granularity,
                    ..
                },
                PetKind::Lora(l),
            ) => {
                if (*out_dim, *in_dim, *rank) != (l.out_dim(), l.in_dim(), l.rank())
                    || *granularity != l.granularity
                {
                    return Err(mismatch());
                }
                match (columns, mask_u, mask_v) {
                    (Some(cols), None, None) => {
                        if cols.iter().any(|&c| c >= l.rank()) {
                            return Err(mismatch());
                        }
                        for j in 0..l.rank() {
                            if !cols.contains(&j) {
                                l.prune_column(j);
                            }
                        }
                    }
                    (None, Some(u), Some(v))
                        if u.len() == l.mask_u.len() && v.len() == l.mask_v.len() =>
                    {
                        l.mask_u = u.decode();
                        l.mask_v = v.decode();
                    }
                    _ => return Err(mismatch()),
                }
            }
            _ => return Err(mismatch()),
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpecSeeds {
    pub model: u64,
    pub data: u64,
    pub run: u64,
}

/// The learned architecture: final masks of every module in the search
/// space, plus what is needed to reproduce its retraining.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArchitectureSpec {
    pub model: TransformerConfig,
    pub selection: Selection,
    pub column_score: ColumnScore,
    pub lora_init: LoraInit,
    pub budget: usize,
    pub initial_param_count: usize,
    pub param_count: usize,
    pub seeds: SpecSeeds,
    pub modules: Vec<ModuleSpec>,
    /// Wall-clock time per stage; excluded from reproducibility comparisons.
    #[serde(default)]
    pub timings_ms: BTreeMap<String, u64>,
}

impl ArchitectureSpec {
    pub fn from_pets(pets: &PetSet) -> Vec<ModuleSpec> {
        pets.modules().iter().map(ModuleSpec::from_module).collect()
    }

    /// Imposes this spec's masks on a freshly built PET set.
    pub fn apply_masks(&self, pets: &mut PetSet) -> Result<()> {
        if pets.len() != self.modules.len() {
            return Err(Error::Input(format!(
                "spec has {} modules, search space has {}",
                self.modules.len(),
                pets.len()
            )));
        }
        for (spec, pet) in self.modules.iter().zip(pets.modules_mut()) {
            spec.apply_to(pet)?;
        }
        pets.apply_masks();
        Ok(())
    }

    /// JSON with `timings_ms` removed, for byte-level comparisons.
    pub fn to_json_without_timings(&self) -> Result<String> {
        let mut v = serde_json::to_value(self)?;
        if let Some(obj) = v.as_object_mut() {
            obj.remove("timings_ms");
        }
        Ok(serde_json::to_string_pretty(&v)?)
    }
}

/// Everything a single run produced.
#[derive(Clone, Debug)]
pub struct RunResult {
    pub seed: u64,
    pub spec: ArchitectureSpec,
    pub validation: Metrics,
    /// Absent for selections that need no search training.
    pub search: Option<TrainOutcome>,
    pub retrain: TrainOutcome,
    /// Scores of every prunable unit before pruning (empty when unscored).
    pub scores: Vec<PruneOp>,
    pub prune: PruneOutcome,
    pub restoration: RestorationCheck,
}

/// Search-phase training result, reusable by several selections.
#[derive(Clone, Debug)]
pub struct SearchPhase {
    pub record: InitRecord,
    pub trained: TrainableState,
    pub accumulator: CriterionAccumulator,
    pub outcome: TrainOutcome,
    pub elapsed_ms: u64,
}

/// Initial training of the full search space with criterion accumulation.
pub fn search_phase(exp: &Experiment, seed: u64) -> Result<SearchPhase> {
    let start = Instant::now();
    let mut state = exp.initial_state(seed)?;
    let record = InitRecord::capture(&state);
    let mut acc = CriterionAccumulator::new(&state.pets);
    let outcome = train(
        &exp.model,
        &mut state,
        &exp.data.train,
        &exp.config.train,
        shuffle_seed(seed),
        Some(&mut acc),
    )?;
    log::info!(
        "seed {seed}: search training done, {} steps, final train loss {:.4}",
        outcome.history.len(),
        outcome.final_train.loss
    );
    Ok(SearchPhase {
        record,
        trained: state,
        accumulator: acc,
        outcome,
        elapsed_ms: start.elapsed().as_millis() as u64,
    })
}

/// Runs the configured criterion search for one seed.
pub fn run_nas(exp: &Experiment, seed: u64) -> Result<RunResult> {
    run_selection(exp, seed, exp.config.criterion.into())
}

pub fn run_baseline(exp: &Experiment, seed: u64, kind: BaselineKind) -> Result<RunResult> {
    run_selection(exp, seed, kind.selection())
}

pub fn run_selection(exp: &Experiment, seed: u64, selection: Selection) -> Result<RunResult> {
    match selection {
        Selection::Averaged | Selection::LastStep => {
            let phase = search_phase(exp, seed)?;
            finish_from_search(exp, seed, &phase, selection)
        }
        Selection::Random | Selection::Full => {
            let record = InitRecord::capture(&exp.initial_state(seed)?);
            let mut timings = BTreeMap::new();
            let start = Instant::now();
            let pets = &record.state.pets;
            let (scores, prune) = if selection == Selection::Random {
                let zeros: Vec<Vec<f64>> =
                    pets.tensors().iter().map(|t| vec![0.0; t.len()]).collect();
                let mut ops = group_scores(&zeros, pets, exp.config.column_score);
                ops.shuffle(&mut rng_for(seed, STREAM_RANDOM_MASK));
                (
                    Vec::new(),
                    take_until_budget(ops, pets.param_count(), exp.config.budget),
                )
            } else {
                let count = pets.param_count();
                let prune = PruneOutcome {
                    applied: Vec::new(),
                    final_count: count,
                    warning: None,
                };
                (Vec::new(), prune)
            };
            timings.insert("prune".to_string(), start.elapsed().as_millis() as u64);
            retrain_pruned(exp, seed, &record, selection, scores, prune, None, timings)
        }
    }
}

/// Scores, prunes and retrains from a finished search phase.
pub fn finish_from_search(
    exp: &Experiment,
    seed: u64,
    phase: &SearchPhase,
    selection: Selection,
) -> Result<RunResult> {
    let mode = match selection {
        Selection::Averaged => CriterionMode::Averaged,
        Selection::LastStep => CriterionMode::LastStep,
        _ => {
            return Err(Error::Usage(format!(
                "{selection:?} does not use the criterion"
            )))
        }
    };
    let mut timings = BTreeMap::new();
    timings.insert("search_train".to_string(), phase.elapsed_ms);
    let start = Instant::now();
    let scores = phase
        .accumulator
        .score_ops(&phase.trained.pets, mode, exp.config.column_score)?;
    timings.insert("score".to_string(), start.elapsed().as_millis() as u64);
    let start = Instant::now();
    let prune = prune_to_budget(&scores, phase.trained.pets.param_count(), exp.config.budget);
    timings.insert("prune".to_string(), start.elapsed().as_millis() as u64);
    retrain_pruned(
        exp,
        seed,
        &phase.record,
        selection,
        scores,
        prune,
        Some(phase.outcome.clone()),
        timings,
    )
}

#[allow(clippy::too_many_arguments)]
fn retrain_pruned(
    exp: &Experiment,
    seed: u64,
    record: &InitRecord,
    selection: Selection,
    scores: Vec<PruneOp>,
    prune: PruneOutcome,
    search: Option<TrainOutcome>,
    mut timings: BTreeMap<String, u64>,
) -> Result<RunResult> {
    if let Some(w) = &prune.warning {
        log::warn!("seed {seed}: {w}");
    }
    let mut masks = record.state.pets.clone();
    for op in &prune.applied {
        apply_prune(&mut masks, op)?;
    }
    masks.apply_masks();
    let initial_param_count = record.state.pets.param_count();
    let param_count = masks.param_count();
    if param_count != prune.final_count {
        return Err(Error::Internal(format!(
            "pruner expected {} parameters, masks keep {param_count}",
            prune.final_count
        )));
    }
    if selection != Selection::Full && param_count > exp.config.budget && prune.warning.is_none() {
        return Err(Error::Internal("budget not met after pruning".into()));
    }

    let mut state = record.restore(&masks)?;
    let mut restoration = record.verify_restored(&state)?;
    let start = Instant::now();
    let retrain = train(
        &exp.model,
        &mut state,
        &exp.data.train,
        &exp.config.train,
        shuffle_seed(seed),
        None,
    )?;
    restoration.retrain_mask_violations = retrain.mask_violations;
    if retrain.mask_violations != 0 {
        return Err(Error::Internal(
            "pruned parameter moved during retraining".into(),
        ));
    }
    timings.insert("retrain".to_string(), start.elapsed().as_millis() as u64);
    let start = Instant::now();
    let validation = evaluate(&exp.model, &state, &exp.data.validation)?;
    timings.insert("evaluate".to_string(), start.elapsed().as_millis() as u64);
    log::info!(
        "seed {seed}: {selection:?} kept {param_count}/{initial_param_count}, validation accuracy {:.4}",
        validation.accuracy
    );

    let cfg = &exp.config;
    let spec = ArchitectureSpec {
        model: cfg.model.clone(),
        selection,
        column_score: cfg.column_score,
        lora_init: cfg.lora_init,
        budget: cfg.budget,
        initial_param_count,
        param_count,
        seeds: SpecSeeds {
            model: cfg.seeds.model,
            data: cfg.seeds.data,
            run: seed,
        },
        modules: ArchitectureSpec::from_pets(&masks),
        timings_ms: timings,
    };
    Ok(RunResult {
        seed,
        spec,
        validation,
        search,
        retrain,
        scores,
        prune,
        restoration,
    })
}

/// Retrains the architecture in `spec` from its recorded seeds.
pub fn retrain_from_spec(
    exp: &Experiment,
    spec: &ArchitectureSpec,
) -> Result<(Metrics, TrainableState)> {
    if spec.model != exp.config.model {
        return Err(Error::Input(
            "spec was produced for a different model shape".into(),
        ));
    }
    let seed = spec.seeds.run;
    let mut state = exp.initial_state(seed)?;
    spec.apply_masks(&mut state.pets)?;
    train(
        &exp.model,
        &mut state,
        &exp.data.train,
        &exp.config.train,
        shuffle_seed(seed),
        None,
    )?;
    Ok((evaluate(&exp.model, &state, &exp.data.validation)?, state))
}

/// Median of `values` (mean of the two middle values for even counts).
pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    })
}
