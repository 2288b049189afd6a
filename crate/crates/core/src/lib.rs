//! Continual-learning experiment engine.
//!
//! Trains a small classifier on an ordered stream of distribution-shifted
//! tasks, with optional replay, A-GEM, or EWC protection and an inter-task
//! learning-rate decay, and scores forgetting through forward and backward
//! transfer over the stage-by-task score matrix.

pub mod error;
pub mod harness;
pub mod metrics;
pub mod model;
pub mod strategies;
pub mod tasks;

pub use error::{Error, Result};
pub use harness::{ExperimentConfig, Method, RunResult};
pub use metrics::{cbt, cft, CbtRow, EvalReport, ScoreMatrix};
pub use model::{Activation, Example, GradientVector, HeadKind, ModelConfig, ParameterVector};
pub use strategies::{LrSchedule, StrategyConfig, StrategyKind, TrainConfig};
pub use tasks::{LabelVocab, OrderingPolicy, SyntheticStreamConfig, TaskSpec, TaskStream};
