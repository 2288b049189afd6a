//! Synthetic "language" streams built from rotated Gaussian label prototypes.
//!
//! A base prototype per label is drawn once. Task `t` belongs to family
//! `t % num_families` and is the `t / num_families`-th member of it; its
//! prototypes are the base set rotated by
//! `between_families * family + within_family * member`.
//! Rotations act on the coordinate pairs `(0,1), (2,3), ...` so every
//! prototype turns by the same angle.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{JsonlRecord, LabelVocab, TaskSpec, TaskStream};
use crate::error::{Error, Result};
use crate::model::{Example, HeadKind};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticStreamConfig {
    pub num_tasks: usize,
    pub num_families: usize,
    pub input_dim: usize,
    pub num_labels: usize,
    pub train_per_task: usize,
    #[serde(default)]
    pub dev_per_task: usize,
    pub test_per_task: usize,
    /// Radians.
    pub rotation_within_family: f64,
    /// Radians.
    pub rotation_between_families: f64,
    /// Standard deviation of the per-example noise around a prototype.
    pub label_prototype_noise: f64,
    pub head_kind: HeadKind,
    pub seed: u64,
}

impl SyntheticStreamConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_families == 0 || self.num_tasks < self.num_families {
            return Err(Error::Config(format!(
                "need num_tasks >= num_families >= 1, got {} tasks and {} families",
                self.num_tasks, self.num_families
            )));
        }
        let pi = std::f64::consts::PI;
        for (name, a) in [
            ("rotation_within_family", self.rotation_within_family),
            ("rotation_between_families", self.rotation_between_families),
        ] {
            if !(0.0..=pi).contains(&a) {
                return Err(Error::Config(format!("{name} must lie in [0, pi], got {a}")));
            }
        }
        if self.label_prototype_noise.is_nan() || self.label_prototype_noise < 0.0 {
            return Err(Error::Config("label_prototype_noise must be nonnegative".into()));
        }
        if self.input_dim == 0 {
            return Err(Error::Config("input_dim must be positive".into()));
        }
        if self.num_labels < 2 {
            return Err(Error::Config("num_labels must be at least 2".into()));
        }
        if self.train_per_task == 0 || self.test_per_task == 0 {
            return Err(Error::Config("train and test splits must be nonempty".into()));
        }
        if self.head_kind == HeadKind::TokenLabeling {
            LabelVocab::bio(self.num_labels)?;
        }
        Ok(())
    }

    pub fn vocab(&self) -> Result<LabelVocab> {
        match self.head_kind {
            HeadKind::SequenceClassification => Ok(LabelVocab::classes(self.num_labels)),
            HeadKind::TokenLabeling => LabelVocab::bio(self.num_labels),
        }
    }

    fn task_angle(&self, t: usize) -> f64 {
        let (family, member) = task_family(t, self.num_families);
        self.rotation_between_families * family as f64 + self.rotation_within_family * member as f64
    }
}

/// `(family index, position within family)` under round-robin assignment.
pub fn task_family(t: usize, num_families: usize) -> (usize, usize) {
    (t % num_families, t / num_families)
}

/// Rotates every coordinate pair `(2i, 2i+1)` by `angle`; an odd trailing
/// coordinate is left in place.
pub fn rotate(v: &[f64], angle: f64) -> Vec<f64> {
    let (s, c) = angle.sin_cos();
    let mut out = v.to_vec();
    for pair in out.chunks_exact_mut(2) {
        let (x, y) = (pair[0], pair[1]);
        pair[0] = c * x - s * y;
        pair[1] = s * x + c * y;
    }
    out
}

fn base_prototypes(cfg: &SyntheticStreamConfig) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    (0..cfg.num_labels)
        .map(|_| (0..cfg.input_dim).map(|_| rng.sample(StandardNormal)).collect())
        .collect()
}

/// Label prototypes of task `t`.
pub fn task_prototypes(cfg: &SyntheticStreamConfig, t: usize) -> Vec<Vec<f64>> {
    let angle = cfg.task_angle(t);
    base_prototypes(cfg).iter().map(|p| rotate(p, angle)).collect()
}

fn task_rng(seed: u64, t: usize, split: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1 + 4 * t as u64 + split);
    rng
}

fn noisy(rng: &mut ChaCha8Rng, proto: &[f64], noise: f64) -> Vec<f64> {
    proto
        .iter()
        .map(|p| p + noise * rng.sample::<f64, _>(StandardNormal))
        .collect()
}

/// BIO label sequence of length 3..=10. Entity type `k` (1-based) uses
/// labels `2k-1` (B) and `2k` (I).
fn bio_sequence(rng: &mut ChaCha8Rng, num_labels: usize) -> Vec<usize> {
    let len = rng.random_range(3..=10);
    let types = (num_labels - 1) / 2;
    let mut labels = Vec::with_capacity(len);
    while labels.len() < len {
        if rng.random_bool(0.5) {
            labels.push(0);
            continue;
        }
        let k = rng.random_range(1..=types);
        let span = rng.random_range(1..=3usize).min(len - labels.len());
        labels.push(2 * k - 1);
        labels.extend(std::iter::repeat_n(2 * k, span - 1));
    }
    labels
}

fn gen_split(cfg: &SyntheticStreamConfig, t: usize, protos: &[Vec<f64>], n: usize, split: u64) -> Vec<Example> {
    let mut rng = task_rng(cfg.seed, t, split);
    let task_id = task_id(cfg, t);
    match cfg.head_kind {
        HeadKind::SequenceClassification => {
            // balanced labels in shuffled order
            let mut labels: Vec<usize> = (0..n).map(|i| i % cfg.num_labels).collect();
            rand::seq::SliceRandom::shuffle(labels.as_mut_slice(), &mut rng);
            labels
                .into_iter()
                .map(|y| Example::sequence(task_id.clone(), noisy(&mut rng, &protos[y], cfg.label_prototype_noise), y))
                .collect()
        }
        HeadKind::TokenLabeling => (0..n)
            .map(|_| {
                let labels = bio_sequence(&mut rng, cfg.num_labels);
                let features = labels
                    .iter()
                    .map(|&y| noisy(&mut rng, &protos[y], cfg.label_prototype_noise))
                    .collect();
                Example::tokens(task_id.clone(), features, labels)
            })
            .collect(),
    }
}

fn task_id(cfg: &SyntheticStreamConfig, t: usize) -> String {
    let width = (cfg.num_tasks.max(1) - 1).to_string().len();
    format!("t{t:0width$}")
}

/// Deterministic synthetic stream in generation order (task `t0` first).
pub fn generate_stream(cfg: &SyntheticStreamConfig) -> Result<TaskStream> {
    cfg.validate()?;
    let tasks = (0..cfg.num_tasks)
        .map(|t| {
            let protos = task_prototypes(cfg, t);
            let (family, _) = task_family(t, cfg.num_families);
            TaskSpec {
                task_id: task_id(cfg, t),
                family: format!("f{family}"),
                train: gen_split(cfg, t, &protos, cfg.train_per_task, 0),
                dev: gen_split(cfg, t, &protos, cfg.dev_per_task, 1),
                test: gen_split(cfg, t, &protos, cfg.test_per_task, 2),
                head_kind: cfg.head_kind,
            }
        })
        .collect();
    TaskStream::new(tasks, cfg.vocab()?)
}

const CONCEPTS_PER_LABEL: usize = 6;
const FILLER_CONCEPTS: usize = 40;

/// Text rendering of the same stream layout, for the JSONL ingestion path.
///
/// Each label owns a pool of concepts; a token names a concept through a
/// surface form that is global with probability `1 - between/pi`, otherwise
/// family-specific with probability `1 - within/pi`, otherwise task-specific.
/// With both angles zero every task shares one distribution.
pub fn generate_text_records(cfg: &SyntheticStreamConfig) -> Result<(Vec<JsonlRecord>, LabelVocab)> {
    cfg.validate()?;
    let vocab = cfg.vocab()?;
    let pi = std::f64::consts::PI;
    let p_global = 1.0 - cfg.rotation_between_families / pi;
    let p_family = 1.0 - cfg.rotation_within_family / pi;
    let mut records = Vec::new();
    for t in 0..cfg.num_tasks {
        let (family, _) = task_family(t, cfg.num_families);
        let id = task_id(cfg, t);
        for (split, n, code) in [
            ("train", cfg.train_per_task, 0),
            ("dev", cfg.dev_per_task, 1),
            ("test", cfg.test_per_task, 2),
        ] {
            let mut rng = task_rng(cfg.seed, t, code);
            let render = |rng: &mut ChaCha8Rng, concept: usize| -> String {
                if rng.random_bool(p_global.clamp(0.0, 1.0)) {
                    format!("c{concept}")
                } else if rng.random_bool(p_family.clamp(0.0, 1.0)) {
                    format!("f{family}c{concept}")
                } else {
                    format!("t{t}c{concept}")
                }
            };
            let filler = |rng: &mut ChaCha8Rng| 1000 + rng.random_range(0..FILLER_CONCEPTS);
            let concept = |rng: &mut ChaCha8Rng, y: usize| y * CONCEPTS_PER_LABEL + rng.random_range(0..CONCEPTS_PER_LABEL);
            for i in 0..n {
                let record = match cfg.head_kind {
                    HeadKind::SequenceClassification => {
                        let y = i % cfg.num_labels;
                        let len = rng.random_range(4..=12);
                        let tokens = (0..len)
                            .map(|_| {
                                let c = if rng.random_bool(0.5) { concept(&mut rng, y) } else { filler(&mut rng) };
                                render(&mut rng, c)
                            })
                            .collect();
                        JsonlRecord {
                            task_id: id.clone(),
                            family: format!("f{family}"),
                            split: split.into(),
                            tokens,
                            labels: None,
                            label: Some(vocab.names[y].clone()),
                        }
                    }
                    HeadKind::TokenLabeling => {
                        let labels = bio_sequence(&mut rng, cfg.num_labels);
                        let tokens = labels
                            .iter()
                            .map(|&y| {
                                let c = if y == 0 { filler(&mut rng) } else { concept(&mut rng, y) };
                                render(&mut rng, c)
                            })
                            .collect();
                        JsonlRecord {
                            task_id: id.clone(),
                            family: format!("f{family}"),
                            split: split.into(),
                            tokens,
                            labels: Some(labels.iter().map(|&y| vocab.names[y].clone()).collect()),
                            label: None,
                        }
                    }
                };
                records.push(record);
            }
        }
    }
    Ok((records, vocab))
}
