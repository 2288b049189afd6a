//! Experiment orchestration: run modes, seed loops, aggregation and output.

mod aggregate;
mod run;

pub use aggregate::{aggregate, Stat};
pub use run::{
    load_base_stream, run_experiment, run_mono, run_multi, run_sequential, run_warm_start, write_outputs,
    CurvePoint, RunResult, SeedResult,
};

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::CbtRow;
use crate::model::{Activation, HeadKind, ModelConfig};
use crate::strategies::{StrategyConfig, TrainConfig};
use crate::tasks::{OrderingPolicy, SyntheticStreamConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StreamSource {
    Synthetic(SyntheticStreamConfig),
    Jsonl {
        data: PathBuf,
        labels: PathBuf,
        hash_dim: usize,
    },
}

/// How the tasks are presented to the model.
///
/// `Sequential` trains one model task by task with the CL strategy named in
/// `strategy.kind` (optionally after a multi-task warm start); `Multi` pools
/// every task; `Mono` trains one isolated model per task.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    #[default]
    Sequential,
    Multi,
    Mono,
}

/// Architecture settings; input width and label count come from the stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    #[serde(default)]
    pub hidden_dims: Vec<usize>,
    #[serde(default = "default_activation")]
    pub activation: Activation,
}

fn default_activation() -> Activation {
    Activation::Tanh
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub stream: StreamSource,
    #[serde(default)]
    pub method: Method,
    /// Number of leading tasks trained jointly before going sequential;
    /// 0 disables the warm start.
    #[serde(default)]
    pub warm_start_k: usize,
    #[serde(default)]
    pub ordering: OrderingPolicy,
    pub seeds: Vec<u64>,
    pub model: ModelSpec,
    pub strategy: StrategyConfig,
    pub training: TrainConfig,
    /// Optimisation settings for pooled training; defaults to `training`.
    #[serde(default)]
    pub multi_training: Option<TrainConfig>,
    #[serde(default)]
    pub cbt_row: CbtRow,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::Config("seeds must not be empty".into()));
        }
        self.strategy.validate()?;
        self.training.validate()?;
        if let Some(m) = &self.multi_training {
            m.validate()?;
        }
        if self.model.hidden_dims.contains(&0) {
            return Err(Error::Config("hidden_dims entries must be positive".into()));
        }
        match &self.stream {
            StreamSource::Synthetic(s) => {
                s.validate()?;
                if self.method == Method::Sequential && self.warm_start_k >= s.num_tasks {
                    return Err(Error::Config(format!(
                        "warm_start_k {} must be below the number of tasks {}",
                        self.warm_start_k, s.num_tasks
                    )));
                }
            }
            StreamSource::Jsonl { hash_dim, .. } => {
                if *hash_dim == 0 {
                    return Err(Error::Config("hash_dim must be positive".into()));
                }
            }
        }
        Ok(())
    }

    pub fn model_config(&self, input_dim: usize, num_labels: usize, head_kind: HeadKind, seed: u64) -> ModelConfig {
        ModelConfig {
            input_dim,
            hidden_dims: self.model.hidden_dims.clone(),
            num_labels,
            activation: self.model.activation,
            head_kind,
            init_seed: seed,
        }
    }

    /// Result label, e.g. `replay+lr_adjust`, `multi`, `vanilla@warm5`.
    pub fn method_name(&self) -> String {
        match self.method {
            Method::Multi => "multi".into(),
            Method::Mono => "mono".into(),
            Method::Sequential => {
                let mut name = self.strategy.kind.name().to_string();
                if self.strategy.use_lr_adjust {
                    name.push_str("+lr_adjust");
                }
                if self.warm_start_k > 0 {
                    name.push_str(&format!("@warm{}", self.warm_start_k));
                }
                name
            }
        }
    }
}
