//! Continual-learning strategies and the per-task training loop.

mod agem;
mod ewc;
mod memory;
mod schedule;

pub use agem::agem_project;
pub use ewc::{ewc_fisher, ewc_penalty_grad, FisherSnapshot};
pub use memory::{balance_key, EpisodicMemory, MemoryEntry};
pub use schedule::{lr_adjust, LrSchedule};

use std::collections::HashSet;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::score_examples;
use crate::model::{loss_and_grad_refs, sgd_step, Example, ModelConfig, ParameterVector};
use crate::tasks::{LabelVocab, TaskSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StrategyKind {
    Vanilla,
    Replay,
    Agem,
    Ewc,
}

impl StrategyKind {
    pub fn name(self) -> &'static str {
        match self {
            StrategyKind::Vanilla => "vanilla",
            StrategyKind::Replay => "replay",
            StrategyKind::Agem => "agem",
            StrategyKind::Ewc => "ewc",
        }
    }

    fn uses_memory(self) -> bool {
        matches!(self, StrategyKind::Replay | StrategyKind::Agem)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum EwcAnchor {
    /// One penalty term per completed task.
    #[default]
    AllTasks,
    /// Only the most recent snapshot.
    Latest,
}

fn default_gamma() -> f64 {
    0.9
}
fn default_lr_min() -> f64 {
    1e-6
}
fn default_retrieve() -> usize {
    100
}
fn default_run_per_step() -> u64 {
    1
}
fn default_fisher_samples() -> usize {
    1000
}

/// Strategy hyper-parameters.
///
/// `gamma = 0.9` and `lr_min = 1e-6` are engine defaults for the inter-task
/// learning-rate adjustment, not values taken from any published run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StrategyConfig {
    pub kind: StrategyKind,
    /// EWC penalty coefficient.
    #[serde(default)]
    pub lambda: f64,
    #[serde(default)]
    pub ewc_anchor: EwcAnchor,
    #[serde(default = "default_fisher_samples")]
    pub fisher_samples: usize,
    /// Batch size drawn from memory for replay steps and A-GEM references.
    #[serde(default = "default_retrieve")]
    pub retrieve_num_samples: usize,
    /// Replay fires on every `run_per_step`-th gradient step.
    #[serde(default = "default_run_per_step")]
    pub run_per_step: u64,
    #[serde(default)]
    pub store_memory_prob: f64,
    /// `null` for an unbounded memory.
    #[serde(default)]
    pub max_store_num_samples: Option<usize>,
    #[serde(default)]
    pub use_lr_adjust: bool,
    #[serde(default = "default_gamma")]
    pub gamma: f64,
    #[serde(default = "default_lr_min")]
    pub lr_min: f64,
}

impl StrategyConfig {
    pub fn vanilla() -> Self {
        Self {
            kind: StrategyKind::Vanilla,
            lambda: 0.0,
            ewc_anchor: EwcAnchor::AllTasks,
            fisher_samples: default_fisher_samples(),
            retrieve_num_samples: default_retrieve(),
            run_per_step: default_run_per_step(),
            store_memory_prob: 0.0,
            max_store_num_samples: None,
            use_lr_adjust: false,
            gamma: default_gamma(),
            lr_min: default_lr_min(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::Config(format!("lambda must be nonnegative, got {}", self.lambda)));
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(Error::Config(format!("gamma must lie in (0, 1], got {}", self.gamma)));
        }
        if self.lr_min.is_nan() || self.lr_min <= 0.0 {
            return Err(Error::Config(format!("lr_min must be positive, got {}", self.lr_min)));
        }
        if self.retrieve_num_samples == 0 {
            return Err(Error::Config("retrieve_num_samples must be positive".into()));
        }
        if let Some(cap) = self.max_store_num_samples {
            if self.kind.uses_memory() && self.retrieve_num_samples > cap {
                return Err(Error::Config(format!(
                    "retrieve_num_samples {} exceeds memory capacity {cap}",
                    self.retrieve_num_samples
                )));
            }
        }
        if self.run_per_step == 0 {
            return Err(Error::Config("run_per_step must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.store_memory_prob) {
            return Err(Error::Config(format!(
                "store_memory_prob must lie in [0, 1], got {}",
                self.store_memory_prob
            )));
        }
        if self.fisher_samples == 0 {
            return Err(Error::Config("fisher_samples must be positive".into()));
        }
        Ok(())
    }
}

fn default_batch_size() -> usize {
    32
}
fn default_max_epochs() -> usize {
    20
}
fn default_patience() -> usize {
    5
}
fn default_decay() -> f64 {
    1.0
}

/// Optimisation settings shared by every task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    #[serde(default = "default_decay")]
    pub per_step_decay: f64,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default = "default_max_epochs")]
    pub max_epochs: usize,
    /// Epochs without dev improvement before stopping; 0 disables early
    /// stopping (and best-weight restoration).
    #[serde(default = "default_patience")]
    pub patience: usize,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("lr must be positive, got {}", self.lr)));
        }
        if !(self.per_step_decay > 0.0 && self.per_step_decay <= 1.0) {
            return Err(Error::Config(format!(
                "per_step_decay must lie in (0, 1], got {}",
                self.per_step_decay
            )));
        }
        if self.batch_size == 0 || self.max_epochs == 0 {
            return Err(Error::Config("batch_size and max_epochs must be positive".into()));
        }
        Ok(())
    }
}

/// Mutable state of one training run.
///
/// Each concern draws from its own random stream so that, for example, an
/// inactive memory never perturbs batch shuffling.
#[derive(Debug, Clone)]
pub struct StrategyState {
    pub memory: EpisodicMemory,
    pub snapshots: Vec<FisherSnapshot>,
    pub schedule: LrSchedule,
    /// Gradient steps taken so far across all tasks.
    pub global_step: u64,
    pub tasks_started: usize,
    base_lr: f64,
    shuffle_rng: ChaCha8Rng,
    memory_rng: ChaCha8Rng,
    fisher_rng: ChaCha8Rng,
}

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

impl StrategyState {
    pub fn new(strategy: &StrategyConfig, train: &TrainConfig, seed: u64) -> Self {
        Self {
            memory: EpisodicMemory::new(strategy.max_store_num_samples, strategy.store_memory_prob),
            snapshots: Vec::new(),
            schedule: LrSchedule {
                lr_current: train.lr,
                gamma: strategy.gamma,
                lr_min: strategy.lr_min,
                per_step_decay: train.per_step_decay,
            },
            global_step: 0,
            tasks_started: 0,
            base_lr: train.lr,
            shuffle_rng: stream_rng(seed, 2),
            memory_rng: stream_rng(seed, 3),
            fisher_rng: stream_rng(seed, 4),
        }
    }

    /// Sets the learning rate for the next task.
    ///
    /// With the inter-task adjustment enabled, every task after the first
    /// starts from `max(lr_min, lr * gamma)` of the rate the previous task
    /// ended on. Without it each task restarts from the base rate.
    pub fn start_task(&mut self, strategy: &StrategyConfig) {
        if strategy.use_lr_adjust {
            if self.tasks_started > 0 {
                self.schedule = self.schedule.lr_adjust();
            }
        } else {
            self.schedule.lr_current = self.base_lr;
        }
        self.tasks_started += 1;
    }
}

/// One SGD step on a memory batch every `run_per_step` steps.
pub fn replay_step<R: rand::Rng + ?Sized>(
    theta: ParameterVector,
    config: &ModelConfig,
    memory: &EpisodicMemory,
    schedule: &LrSchedule,
    step_index: u64,
    strategy: &StrategyConfig,
    rng: &mut R,
) -> Result<ParameterVector> {
    if !step_index.is_multiple_of(strategy.run_per_step) || memory.is_empty() {
        return Ok(theta);
    }
    let batch = memory.sample(strategy.retrieve_num_samples, rng);
    let (_, g) = loss_and_grad_refs(&theta, config, &batch)?;
    sgd_step(&theta, &g, schedule.lr_current)
}

fn finite_or_abort(loss: f64, task: &str, step: u64) -> Result<()> {
    if loss.is_finite() {
        Ok(())
    } else {
        Err(Error::Numeric(format!(
            "non-finite loss on task {task:?} at step {step}"
        )))
    }
}

/// Trains on one task with the strategy's hooks and returns the new weights.
///
/// Each epoch shuffles `task.train` and takes one SGD step per mini-batch.
/// Replay and A-GEM offer every training example to memory once (during the
/// first epoch). A-GEM references are drawn only from memory entries of
/// earlier tasks. With `patience > 0` the dev score is checked after every
/// epoch and the best-scoring weights are restored at the end. EWC appends
/// a Fisher snapshot once training finishes.
pub fn train_task(
    mut theta: ParameterVector,
    config: &ModelConfig,
    task: &TaskSpec,
    vocab: &LabelVocab,
    train: &TrainConfig,
    strategy: &StrategyConfig,
    state: &mut StrategyState,
) -> Result<ParameterVector> {
    if task.train.is_empty() {
        return Err(Error::Input(format!("task {:?} has no training data", task.task_id)));
    }
    let early_stopping = train.patience > 0;
    if early_stopping && task.dev.is_empty() {
        return Err(Error::Input(format!(
            "task {:?} has no dev split but early stopping is enabled",
            task.task_id
        )));
    }
    let current: HashSet<&str> = task
        .train
        .iter()
        .map(|e| e.task_id.as_str())
        .chain(std::iter::once(task.task_id.as_str()))
        .collect();
    let mut best: Option<(f64, ParameterVector)> = None;
    let mut stale = 0;
    let mut order: Vec<usize> = (0..task.train.len()).collect();

    for epoch in 0..train.max_epochs {
        order.shuffle(&mut state.shuffle_rng);
        for chunk in order.chunks(train.batch_size) {
            let batch: Vec<&Example> = chunk.iter().map(|&i| &task.train[i]).collect();
            let (loss, mut g) = loss_and_grad_refs(&theta, config, &batch)?;
            finite_or_abort(loss, &task.task_id, state.global_step + 1)?;

            match strategy.kind {
                StrategyKind::Agem => {
                    let reference = state.memory.sample_where(
                        strategy.retrieve_num_samples,
                        &mut state.memory_rng,
                        |e| !current.contains(e.task_id.as_str()),
                    );
                    if !reference.is_empty() {
                        let (_, g_ref) = loss_and_grad_refs(&theta, config, &reference)?;
                        g = agem_project(&g, &g_ref)?;
                    }
                }
                StrategyKind::Ewc if strategy.lambda > 0.0 && !state.snapshots.is_empty() => {
                    let snaps = match strategy.ewc_anchor {
                        EwcAnchor::AllTasks => &state.snapshots[..],
                        EwcAnchor::Latest => &state.snapshots[state.snapshots.len() - 1..],
                    };
                    let (_, pg) = ewc_penalty_grad(&theta, snaps, strategy.lambda)?;
                    g.values.iter_mut().zip(&pg.values).for_each(|(a, b)| *a += b);
                }
                _ => {}
            }

            theta = sgd_step(&theta, &g, state.schedule.lr_current).map_err(|e| {
                e.context(format!("task {:?} step {}", task.task_id, state.global_step + 1))
            })?;
            state.global_step += 1;
            state.schedule.decay_step();

            if strategy.kind.uses_memory() && epoch == 0 {
                for e in &batch {
                    state.memory.observe((*e).clone(), &mut state.memory_rng);
                }
            }
            if strategy.kind == StrategyKind::Replay {
                theta = replay_step(
                    theta,
                    config,
                    &state.memory,
                    &state.schedule,
                    state.global_step,
                    strategy,
                    &mut state.memory_rng,
                )
                .map_err(|e| e.context(format!("replay on task {:?}", task.task_id)))?;
            }
        }

        if early_stopping {
            let score = score_examples(&theta, config, &task.dev, vocab)?;
            if best.as_ref().is_none_or(|(b, _)| score > *b) {
                best = Some((score, theta.clone()));
                stale = 0;
            } else {
                stale += 1;
                if stale >= train.patience {
                    break;
                }
            }
        }
    }

    if let Some((_, w)) = best {
        theta = w;
    }
    if strategy.kind == StrategyKind::Ewc {
        let snap = ewc_fisher(
            &theta,
            config,
            &task.train,
            strategy.fisher_samples,
            &task.task_id,
            &mut state.fisher_rng,
        )?;
        state.snapshots.push(snap);
    }
    Ok(theta)
}
