//! Task streams: the ordered list of datasets a model is trained on.

mod jsonl;
mod synthetic;

pub use jsonl::{hash_featurize, load_stream, write_jsonl, JsonlRecord};
pub use synthetic::{
    generate_stream, generate_text_records, rotate, task_family, task_prototypes, SyntheticStreamConfig,
};

use std::collections::{BTreeMap, HashMap, HashSet};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Example, HeadKind};

/// One dataset in the curriculum.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub task_id: String,
    pub family: String,
    pub train: Vec<Example>,
    pub dev: Vec<Example>,
    pub test: Vec<Example>,
    pub head_kind: HeadKind,
}

impl TaskSpec {
    /// Concatenates the splits of several tasks into one multi-task dataset.
    ///
    /// Examples keep their original `task_id`. A single task pools to itself.
    pub fn pooled(tasks: &[TaskSpec]) -> Result<TaskSpec> {
        let first = tasks
            .first()
            .ok_or_else(|| Error::Input("cannot pool an empty task list".into()))?;
        if tasks.len() == 1 {
            return Ok(first.clone());
        }
        let collect = |f: fn(&TaskSpec) -> &Vec<Example>| -> Vec<Example> {
            tasks.iter().flat_map(|t| f(t).iter().cloned()).collect()
        };
        Ok(TaskSpec {
            task_id: tasks.iter().map(|t| t.task_id.as_str()).collect::<Vec<_>>().join("+"),
            family: first.family.clone(),
            train: collect(|t| &t.train),
            dev: collect(|t| &t.dev),
            test: collect(|t| &t.test),
            head_kind: first.head_kind,
        })
    }
}

/// Label names; the position of a name is its label id.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelVocab {
    pub names: Vec<String>,
}

impl LabelVocab {
    pub fn new(names: Vec<String>) -> Result<Self> {
        let mut seen = HashSet::new();
        for n in &names {
            if !seen.insert(n.as_str()) {
                return Err(Error::Schema(format!("duplicate label {n:?} in vocabulary")));
            }
        }
        Ok(Self { names })
    }

    /// `L0, L1, ...` for classification tasks.
    pub fn classes(num_labels: usize) -> Self {
        Self {
            names: (0..num_labels).map(|i| format!("L{i}")).collect(),
        }
    }

    /// `O, B-T1, I-T1, B-T2, ...`; `num_labels` must be odd.
    pub fn bio(num_labels: usize) -> Result<Self> {
        if num_labels < 3 || num_labels.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "token tasks need an odd label count (O plus B/I pairs), got {num_labels}"
            )));
        }
        let mut names = vec!["O".to_string()];
        for t in 1..=(num_labels - 1) / 2 {
            names.push(format!("B-T{t}"));
            names.push(format!("I-T{t}"));
        }
        Ok(Self { names })
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn id(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn name(&self, id: usize) -> Option<&str> {
        self.names.get(id).map(String::as_str)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(tag = "policy", rename_all = "snake_case")]
pub enum OrderingPolicy {
    #[default]
    Random,
    FamilyGrouped,
    Explicit {
        order: Vec<String>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskStream {
    pub tasks: Vec<TaskSpec>,
    pub order_seed: u64,
    pub ordering_policy: OrderingPolicy,
    pub labels: LabelVocab,
}

impl TaskStream {
    pub fn new(tasks: Vec<TaskSpec>, labels: LabelVocab) -> Result<Self> {
        let stream = Self {
            tasks,
            order_seed: 0,
            ordering_policy: OrderingPolicy::Random,
            labels,
        };
        stream.validate()?;
        Ok(stream)
    }

    pub fn len(&self) -> usize {
        self.tasks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tasks.is_empty()
    }

    pub fn task_ids(&self) -> Vec<String> {
        self.tasks.iter().map(|t| t.task_id.clone()).collect()
    }

    pub fn head_kind(&self) -> Option<HeadKind> {
        self.tasks.first().map(|t| t.head_kind)
    }

    pub fn validate(&self) -> Result<()> {
        let mut ids = HashSet::new();
        for t in &self.tasks {
            if !ids.insert(t.task_id.as_str()) {
                return Err(Error::Input(format!("duplicate task id {:?}", t.task_id)));
            }
            if t.train.is_empty() || t.test.is_empty() {
                return Err(Error::Input(format!(
                    "task {:?} needs nonempty train and test splits",
                    t.task_id
                )));
            }
            if Some(t.head_kind) != self.head_kind() {
                return Err(Error::Input("all tasks in a stream must share a head kind".into()));
            }
        }
        Ok(())
    }
}

/// Reorders a stream.
///
/// `Random` shuffles uniformly by `seed`. `FamilyGrouped` shuffles the family
/// order, then emits each family's tasks contiguously in a shuffled order.
/// `Explicit` applies the given order after checking it is a permutation.
pub fn order_stream(stream: TaskStream, policy: &OrderingPolicy, seed: u64) -> Result<TaskStream> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(0x0bde);
    let TaskStream { tasks, labels, .. } = stream;
    let tasks = match policy {
        OrderingPolicy::Random => {
            let mut tasks = tasks;
            tasks.shuffle(&mut rng);
            tasks
        }
        OrderingPolicy::FamilyGrouped => {
            let mut by_family: BTreeMap<String, Vec<TaskSpec>> = BTreeMap::new();
            for t in tasks {
                by_family.entry(t.family.clone()).or_default().push(t);
            }
            let mut families: Vec<Vec<TaskSpec>> = by_family.into_values().collect();
            families.shuffle(&mut rng);
            families
                .into_iter()
                .flat_map(|mut group| {
                    group.shuffle(&mut rng);
                    group
                })
                .collect()
        }
        OrderingPolicy::Explicit { order } => {
            let mut by_id: HashMap<String, TaskSpec> =
                tasks.into_iter().map(|t| (t.task_id.clone(), t)).collect();
            if order.len() != by_id.len() {
                return Err(Error::Input(format!(
                    "explicit order lists {} tasks but the stream has {}",
                    order.len(),
                    by_id.len()
                )));
            }
            order
                .iter()
                .map(|id| {
                    by_id
                        .remove(id)
                        .ok_or_else(|| Error::Input(format!("explicit order: unknown or repeated task id {id:?}")))
                })
                .collect::<Result<Vec<_>>>()?
        }
    };
    Ok(TaskStream {
        tasks,
        order_seed: seed,
        ordering_policy: policy.clone(),
        labels,
    })
}
