//! Elastic weight consolidation: diagonal Fisher snapshots and the
//! quadratic anchoring penalty.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{forward, loss_and_grad, Example, GradientVector, ModelConfig, ParameterVector};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FisherSnapshot {
    pub fisher_diag: Vec<f64>,
    pub anchor: ParameterVector,
    pub task_id: String,
}

/// Samples an index from a probability vector.
fn sample_label<R: Rng + ?Sized>(probs: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.len() - 1
}

/// Diagonal Fisher estimate at `theta`.
///
/// Uses `min(num_samples, data.len())` examples (a uniform subset when
/// `data` is larger). For each, labels are drawn from the model's own
/// predictive distribution and the squared gradient of that example's NLL
/// is accumulated; the result is the mean over examples.
pub fn ewc_fisher<R: Rng + ?Sized>(
    theta: &ParameterVector,
    config: &ModelConfig,
    data: &[Example],
    num_samples: usize,
    task_id: &str,
    rng: &mut R,
) -> Result<FisherSnapshot> {
    if data.is_empty() {
        return Err(Error::Input("Fisher estimate needs at least one example".into()));
    }
    let n = num_samples.clamp(1, data.len());
    let chosen: Vec<&Example> = if n == data.len() {
        data.iter().collect()
    } else {
        let mut idx = rand::seq::index::sample(rng, data.len(), n).into_vec();
        idx.sort_unstable();
        idx.into_iter().map(|i| &data[i]).collect()
    };
    let mut fisher = vec![0.0; theta.len()];
    for example in chosen {
        let probs = forward(theta, config, example)?;
        let labels: Vec<usize> = probs.iter().map(|p| sample_label(p, rng)).collect();
        let (_, g) = loss_and_grad(theta, config, std::slice::from_ref(&example.with_labels(&labels)))?;
        for (f, gi) in fisher.iter_mut().zip(&g.values) {
            *f += gi * gi;
        }
    }
    let scale = 1.0 / n as f64;
    fisher.iter_mut().for_each(|f| *f *= scale);
    Ok(FisherSnapshot {
        fisher_diag: fisher,
        anchor: theta.clone(),
        task_id: task_id.to_string(),
    })
}

/// `sum_s sum_i (lambda/2) F_i (theta_i - anchor_i)^2` and its gradient.
pub fn ewc_penalty_grad(
    theta: &ParameterVector,
    snapshots: &[FisherSnapshot],
    lambda: f64,
) -> Result<(f64, GradientVector)> {
    let mut grad = GradientVector::zeros(theta.len());
    let mut penalty = 0.0;
    for s in snapshots {
        if s.fisher_diag.len() != theta.len() || s.anchor.len() != theta.len() {
            return Err(Error::Input(format!(
                "Fisher snapshot for {:?} has length {} but the model has {}",
                s.task_id,
                s.fisher_diag.len(),
                theta.len()
            )));
        }
        for ((g, (&t, &a)), &f) in grad
            .values
            .iter_mut()
            .zip(theta.values.iter().zip(&s.anchor.values))
            .zip(&s.fisher_diag)
        {
            let d = t - a;
            penalty += 0.5 * lambda * f * d * d;
            *g += lambda * f * d;
        }
    }
    Ok((penalty, grad))
}
