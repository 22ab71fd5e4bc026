//! Staged training: a base-only stage followed by joint stages, each over a
//! zip-paired dataset with its own learning rates and refinement budget.
//!
//! All randomness for a step is derived from `(seed, stage index, step)`, so
//! resuming from a checkpoint replays exactly the batches an uninterrupted
//! run would have seen.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::augment::{augment_batch, zip_epoch, AugmentConfig, SampleBatch};
use crate::error::{Error, Result};
use crate::imagecore::{AlphaMatte, Image};
use crate::losses::{LossMode, LossValues};
use crate::model::{k_for_area_fraction, Model, TrainInputs, HD_REFINE_FRACTION};
use crate::nn::{AdamConfig, GroupRates};
use crate::refiner::{Kernel, RefineConfig, Selection};

/// How many cells the refiner processes per training batch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum RefineBudget {
    Count(usize),
    AreaFraction(f64),
    Threshold(f64),
}

impl RefineBudget {
    pub fn selection(&self, n: usize, h: usize, w: usize) -> Selection {
        match *self {
            Self::Count(k) => Selection::TopK(k),
            Self::AreaFraction(f) => Selection::TopK(k_for_area_fraction(n, h, w, f)),
            Self::Threshold(t) => Selection::Threshold(t),
        }
    }
}

/// Stop a stage early when the validation loss improves by less than
/// `min_rel_improvement` over `patience` consecutive evaluations.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Plateau {
    pub every: u64,
    pub patience: usize,
    pub min_rel_improvement: f64,
}

impl Default for Plateau {
    fn default() -> Self {
        Self {
            every: 100,
            patience: 3,
            min_rel_improvement: 0.01,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StageConfig {
    pub name: String,
    pub mode: LossMode,
    pub epochs: u64,
    /// Overrides the epoch budget with an exact step count.
    pub steps: Option<u64>,
    pub batch_size: usize,
    /// Backbone, ASPP, decoder, refiner. The refiner rate is unused in base-only stages.
    pub rates: GroupRates,
    pub dataset: String,
    pub c: usize,
    pub budget: RefineBudget,
    pub augment: AugmentConfig,
    pub plateau: Option<Plateau>,
}

impl StageConfig {
    /// Base network only, batch 8, rates `[1e-4, 5e-4, 5e-4]`.
    pub fn base_only(name: &str, dataset: &str, epochs: u64) -> Self {
        Self {
            name: name.into(),
            mode: LossMode::BaseOnly,
            epochs,
            steps: None,
            batch_size: 8,
            rates: GroupRates([1e-4, 5e-4, 5e-4, 0.0]),
            dataset: dataset.into(),
            c: 4,
            budget: RefineBudget::AreaFraction(HD_REFINE_FRACTION),
            augment: AugmentConfig {
                crop_multiple: Model::size_multiple(4),
                ..AugmentConfig::default()
            },
            plateau: None,
        }
    }

    /// Whole pipeline, batch 4, rates `[5e-5, 5e-5, 1e-4, 3e-4]`.
    pub fn joint(name: &str, dataset: &str, epochs: u64) -> Self {
        Self {
            mode: LossMode::Joint,
            batch_size: 4,
            rates: GroupRates([5e-5, 5e-5, 1e-4, 3e-4]),
            ..Self::base_only(name, dataset, epochs)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig(format!("stage {}: batch size must be positive", self.name)));
        }
        if self.c != 4 && self.c != 8 {
            return Err(Error::InvalidConfig(format!("stage {}: c must be 4 or 8", self.name)));
        }
        if self.rates.0.iter().any(|r| !r.is_finite() || *r < 0.0) {
            return Err(Error::InvalidConfig(format!("stage {}: learning rates must be nonnegative", self.name)));
        }
        let m = Model::size_multiple(self.c);
        if self.augment.crop_multiple % m != 0 {
            return Err(Error::InvalidConfig(format!(
                "stage {}: crop sides must be multiples of {m} for c = {}",
                self.name, self.c
            )));
        }
        self.augment.validate()
    }

    /// Learning rates actually applied: base-only stages never move the refiner.
    pub fn effective_rates(&self) -> GroupRates {
        let mut r = self.rates;
        if self.mode == LossMode::BaseOnly {
            r.0[3] = 0.0;
        }
        r
    }
}

/// Foreground/alpha samples and backgrounds, paired per epoch.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub name: String,
    pub samples: Vec<(Image, AlphaMatte)>,
    pub backgrounds: Vec<Image>,
}

impl Dataset {
    pub fn is_empty(&self) -> bool {
        self.samples.is_empty() || self.backgrounds.is_empty()
    }

    pub fn epoch_len(&self) -> usize {
        self.samples.len().max(self.backgrounds.len())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepLog {
    pub stage: usize,
    pub stage_step: u64,
    pub global_step: u64,
    pub values: LossValues,
}

#[derive(Debug, Clone)]
pub struct TrainState {
    pub model: Model,
    pub adam: AdamConfig,
    pub seed: u64,
    pub global_step: u64,
    /// Stage in progress (or the next one to run).
    pub stage_index: usize,
    /// Steps already taken in the stage in progress.
    pub stage_step: u64,
    pub history: Vec<StepLog>,
}

impl TrainState {
    pub fn new(model: Model, seed: u64) -> Self {
        Self {
            model,
            adam: AdamConfig::default(),
            seed,
            global_step: 0,
            stage_index: 0,
            stage_step: 0,
            history: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum TrainEvent {
    Step(StepLog),
    Validation { stage: usize, stage_step: u64, loss: f64 },
    PlateauStop { stage: usize, stage_step: u64 },
    StageEnd { stage: usize },
}

/// Mixes seed components into one 64-bit seed (splitmix64 finalizer).
pub fn derive_seed(parts: &[u64]) -> u64 {
    let mut h: u64 = 0x9e37_79b9_7f4a_7c15;
    for &p in parts {
        h ^= p;
        h = h.wrapping_add(0x9e37_79b9_7f4a_7c15);
        h = (h ^ (h >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        h = (h ^ (h >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        h ^= h >> 31;
    }
    h
}

const TAG_SHUFFLE: u64 = 1;
const TAG_AUGMENT: u64 = 2;
const TAG_VALIDATION: u64 = 3;

fn steps_per_epoch(stage: &StageConfig, data: &Dataset) -> u64 {
    data.epoch_len().div_ceil(stage.batch_size) as u64
}

pub fn stage_total_steps(stage: &StageConfig, data: &Dataset) -> u64 {
    stage.steps.unwrap_or(stage.epochs * steps_per_epoch(stage, data))
}

/// Sample/background pairs making up batch `step` of a stage.
pub fn batch_pairs(stage: &StageConfig, stage_index: usize, data: &Dataset, seed: u64, step: u64) -> Vec<(usize, usize)> {
    let spe = steps_per_epoch(stage, data);
    let (epoch, j) = (step / spe, (step % spe) as usize);
    let mut pairs = zip_epoch(data.samples.len(), data.backgrounds.len());
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(&[seed, TAG_SHUFFLE, stage_index as u64, epoch]));
    pairs.shuffle(&mut rng);
    (0..stage.batch_size)
        .map(|i| pairs[(j * stage.batch_size + i) % pairs.len()])
        .collect()
}

/// The augmented batch for `step` of a stage.
pub fn make_batch(stage: &StageConfig, stage_index: usize, data: &Dataset, seed: u64, step: u64) -> Result<SampleBatch> {
    let pairs = batch_pairs(stage, stage_index, data, seed, step);
    let items: Vec<_> = pairs
        .iter()
        .map(|&(s, b)| (&data.samples[s].0, &data.samples[s].1, &data.backgrounds[b]))
        .collect();
    augment_batch(&items, &stage.augment, derive_seed(&[seed, TAG_AUGMENT, stage_index as u64, step]))
}

fn refine_config(stage: &StageConfig, kernel: Kernel, batch: &SampleBatch) -> RefineConfig {
    RefineConfig {
        c: stage.c,
        selection: stage.budget.selection(batch.image.n(), batch.image.h(), batch.image.w()),
        kernel,
    }
}

fn inputs(batch: &SampleBatch) -> TrainInputs<'_> {
    TrainInputs {
        image: &batch.image,
        background: &batch.background,
        alpha: &batch.alpha,
        fg: &batch.fg,
    }
}

fn validation_batch(stage: &StageConfig, stage_index: usize, data: &Dataset, seed: u64) -> Result<SampleBatch> {
    let n = stage.batch_size.min(data.samples.len());
    let items: Vec<_> = (0..n)
        .map(|i| (&data.samples[i].0, &data.samples[i].1, &data.backgrounds[i % data.backgrounds.len()]))
        .collect();
    augment_batch(&items, &stage.augment, derive_seed(&[seed, TAG_VALIDATION, stage_index as u64]))
}

/// Runs (or continues) stage `stage_index` to its step budget.
///
/// On a non-finite loss or gradient the error is returned and the model is
/// left as it was after the last successful step.
pub fn train_stage(
    state: &mut TrainState,
    stage: &StageConfig,
    stage_index: usize,
    data: &Dataset,
    observer: &mut dyn FnMut(&TrainState, &TrainEvent) -> Result<()>,
) -> Result<()> {
    stage.validate()?;
    if data.is_empty() {
        return Err(Error::MissingDataset(format!("dataset {} is empty", data.name)));
    }
    if state.stage_index != stage_index {
        state.stage_index = stage_index;
        state.stage_step = 0;
    }
    let total = stage_total_steps(stage, data);
    let rates = stage.effective_rates();
    let kernel = state.model.config.kernel;
    let validation = match stage.plateau {
        Some(_) => Some(validation_batch(stage, stage_index, data, state.seed)?),
        None => None,
    };
    let mut best = f64::INFINITY;
    let mut stale = 0;
    while state.stage_step < total {
        let batch = make_batch(stage, stage_index, data, state.seed, state.stage_step)?;
        let rc = refine_config(stage, kernel, &batch);
        let values = state
            .model
            .train_step(&inputs(&batch), stage.mode, &rc, &rates, &state.adam)
            .map_err(|e| match e {
                Error::NonFiniteLoss { .. } => Error::NonFiniteLoss { step: state.global_step },
                e => e,
            })?;
        let log = StepLog {
            stage: stage_index,
            stage_step: state.stage_step,
            global_step: state.global_step,
            values,
        };
        state.stage_step += 1;
        state.global_step += 1;
        state.history.push(log);
        observer(state, &TrainEvent::Step(log))?;

        if let (Some(p), Some(vb)) = (stage.plateau, &validation) {
            if p.every > 0 && state.stage_step % p.every == 0 {
                let rc = refine_config(stage, kernel, vb);
                let loss = state.model.loss(&inputs(vb), stage.mode, &rc)?.total;
                observer(
                    state,
                    &TrainEvent::Validation {
                        stage: stage_index,
                        stage_step: state.stage_step,
                        loss,
                    },
                )?;
                if loss < best * (1.0 - p.min_rel_improvement) {
                    best = loss;
                    stale = 0;
                } else {
                    stale += 1;
                    if stale >= p.patience {
                        observer(
                            state,
                            &TrainEvent::PlateauStop {
                                stage: stage_index,
                                stage_step: state.stage_step,
                            },
                        )?;
                        break;
                    }
                }
            }
        }
    }
    state.stage_index = stage_index + 1;
    state.stage_step = 0;
    observer(state, &TrainEvent::StageEnd { stage: stage_index })
}

/// Runs every stage from `state.stage_index` on. All dataset names are
/// resolved before any training happens.
pub fn run_schedule(
    state: &mut TrainState,
    stages: &[StageConfig],
    datasets: &[Dataset],
    observer: &mut dyn FnMut(&TrainState, &TrainEvent) -> Result<()>,
) -> Result<()> {
    let mut resolved = Vec::with_capacity(stages.len());
    for s in stages {
        s.validate()?;
        let d = datasets
            .iter()
            .find(|d| d.name == s.dataset)
            .ok_or_else(|| Error::MissingDataset(format!("stage {} refers to unknown dataset {}", s.name, s.dataset)))?;
        if d.is_empty() {
            return Err(Error::MissingDataset(format!("dataset {} is empty", d.name)));
        }
        resolved.push(d);
    }
    for (i, (s, d)) in stages.iter().zip(resolved).enumerate().skip(state.stage_index) {
        train_stage(state, s, i, d, observer)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::synth::{generate_sample, SynthSpec};

    fn data(n: usize, size: usize) -> Dataset {
        let spec = SynthSpec::default().with_size(size, size);
        let s: Vec<_> = (0..n as u64).map(|i| generate_sample(&spec, i).unwrap()).collect();
        Dataset {
            name: "synthetic".into(),
            samples: s.iter().map(|x| (x.fg.clone(), x.alpha.clone())).collect(),
            backgrounds: s.iter().map(|x| x.bg.clone()).collect(),
        }
    }

    fn small_stage(mode: LossMode, steps: u64) -> StageConfig {
        let base = match mode {
            LossMode::BaseOnly => StageConfig::base_only("s", "synthetic", 1),
            LossMode::Joint => StageConfig::joint("s", "synthetic", 1),
        };
        StageConfig {
            steps: Some(steps),
            batch_size: 2,
            augment: AugmentConfig {
                crop: (64, 64),
                crop_multiple: 64,
                ..AugmentConfig::default()
            },
            ..base
        }
    }

    fn noop() -> impl FnMut(&TrainState, &TrainEvent) -> Result<()> {
        |_, _| Ok(())
    }

    #[test]
    fn zero_epochs_only_advance_stage() {
        let d = data(2, 72);
        let mut st = TrainState::new(Model::new(ModelConfig::tiny(1)).unwrap(), 5);
        let before = st.model.store.clone();
        let stage = StageConfig {
            steps: None,
            epochs: 0,
            ..small_stage(LossMode::Joint, 0)
        };
        train_stage(&mut st, &stage, 0, &d, &mut noop()).unwrap();
        assert_eq!(st.model.store, before);
        assert_eq!(st.stage_index, 1);
        assert_eq!(st.global_step, 0);
    }

    #[test]
    fn missing_dataset_fails_before_training() {
        let d = data(2, 72);
        let mut st = TrainState::new(Model::new(ModelConfig::tiny(1)).unwrap(), 5);
        let mut other = small_stage(LossMode::Joint, 1);
        other.dataset = "absent".into();
        let stages = [small_stage(LossMode::BaseOnly, 1), other];
        let err = run_schedule(&mut st, &stages, &[d], &mut noop()).unwrap_err();
        assert!(matches!(err, Error::MissingDataset(_)));
        assert_eq!(st.global_step, 0);
    }

    #[test]
    fn batches_cover_zip_pairs() {
        let d = data(3, 40);
        let stage = StageConfig {
            batch_size: 3,
            ..small_stage(LossMode::Joint, 1)
        };
        let mut seen: Vec<_> = (0..1).flat_map(|s| batch_pairs(&stage, 0, &d, 9, s)).collect();
        seen.sort();
        assert_eq!(seen, vec![(0, 0), (1, 1), (2, 2)]);
    }

    #[test]
    fn resume_reproduces_trace() {
        let d = data(3, 72);
        let stages = [small_stage(LossMode::BaseOnly, 2), small_stage(LossMode::Joint, 2)];
        let mut full = TrainState::new(Model::new(ModelConfig::tiny(2)).unwrap(), 11);
        run_schedule(&mut full, &stages, core::slice::from_ref(&d), &mut noop()).unwrap();

        let mut part = TrainState::new(Model::new(ModelConfig::tiny(2)).unwrap(), 11);
        let mut snapshot = None;
        let mut grab = |s: &TrainState, e: &TrainEvent| {
            if let TrainEvent::Step(l) = e {
                if l.global_step == 2 {
                    snapshot = Some(s.clone());
                }
            }
            Ok(())
        };
        run_schedule(&mut part, &stages, core::slice::from_ref(&d), &mut grab).unwrap();
        let mut resumed = snapshot.unwrap();
        run_schedule(&mut resumed, &stages, core::slice::from_ref(&d), &mut noop()).unwrap();
        assert_eq!(resumed.history, full.history);
        assert_eq!(resumed.model.store, full.model.store);
    }
}
