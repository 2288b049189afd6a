//! Feed-forward classifier with hand-written backpropagation.
//!
//! All weights live in one flat [`ParameterVector`]; layer `l` contributes a
//! weight matrix of shape `[fan_out, fan_in]` (row-major) followed by a bias
//! vector of length `fan_out`. Sequence tasks produce one prediction per
//! example, token tasks one prediction per token with the same weights.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Tanh,
    Relu,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadKind {
    SequenceClassification,
    TokenLabeling,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub input_dim: usize,
    #[serde(default)]
    pub hidden_dims: Vec<usize>,
    pub num_labels: usize,
    pub activation: Activation,
    pub head_kind: HeadKind,
    #[serde(default)]
    pub init_seed: u64,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 {
            return Err(Error::Config("input_dim must be positive".into()));
        }
        if self.hidden_dims.contains(&0) {
            return Err(Error::Config("hidden_dims entries must be positive".into()));
        }
        if self.num_labels < 2 {
            return Err(Error::Config(format!(
                "num_labels must be at least 2, got {}",
                self.num_labels
            )));
        }
        Ok(())
    }

    /// Layer widths from input to output.
    fn widths(&self) -> Vec<usize> {
        let mut w = Vec::with_capacity(self.hidden_dims.len() + 2);
        w.push(self.input_dim);
        w.extend_from_slice(&self.hidden_dims);
        w.push(self.num_labels);
        w
    }

    pub fn num_parameters(&self) -> usize {
        self.widths().windows(2).map(|p| p[0] * p[1] + p[1]).sum()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerShape {
    pub name: String,
    pub shape: Vec<usize>,
}

impl LayerShape {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Flat model weights plus the layout describing how they map to layers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParameterVector {
    pub values: Vec<f64>,
    pub layout: Vec<LayerShape>,
}

impl ParameterVector {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn zeros_like(config: &ModelConfig) -> Self {
        let layout = layout_for(config);
        let n = layout.iter().map(LayerShape::len).sum();
        Self {
            values: vec![0.0; n],
            layout,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    fn check_layout(&self) -> Result<()> {
        let expected: usize = self.layout.iter().map(LayerShape::len).sum();
        if expected != self.values.len() {
            return Err(Error::Input(format!(
                "parameter vector has {} values but layout describes {}",
                self.values.len(),
                expected
            )));
        }
        Ok(())
    }
}

/// Gradient aligned one-to-one with a [`ParameterVector`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradientVector {
    pub values: Vec<f64>,
}

impl GradientVector {
    pub fn zeros(len: usize) -> Self {
        Self {
            values: vec![0.0; len],
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn dot(&self, other: &GradientVector) -> f64 {
        self.values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| a * b)
            .sum()
    }

    pub fn norm_sq(&self) -> f64 {
        self.dot(self)
    }
}

/// Input features and gold labels of one example.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Input {
    Sequence { features: Vec<f64>, label: usize },
    Tokens { features: Vec<Vec<f64>>, labels: Vec<usize> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Example {
    pub task_id: String,
    pub input: Input,
}

impl Example {
    pub fn sequence(task_id: impl Into<String>, features: Vec<f64>, label: usize) -> Self {
        Self {
            task_id: task_id.into(),
            input: Input::Sequence { features, label },
        }
    }

    pub fn tokens(task_id: impl Into<String>, features: Vec<Vec<f64>>, labels: Vec<usize>) -> Self {
        Self {
            task_id: task_id.into(),
            input: Input::Tokens { features, labels },
        }
    }

    /// Number of prediction points (1 for sequence tasks, token count otherwise).
    pub fn num_points(&self) -> usize {
        match &self.input {
            Input::Sequence { .. } => 1,
            Input::Tokens { labels, .. } => labels.len(),
        }
    }

    /// `(features, gold label)` per prediction point.
    pub fn points(&self) -> Vec<(&[f64], usize)> {
        match &self.input {
            Input::Sequence { features, label } => vec![(features.as_slice(), *label)],
            Input::Tokens { features, labels } => features
                .iter()
                .map(Vec::as_slice)
                .zip(labels.iter().copied())
                .collect(),
        }
    }

    pub fn gold(&self) -> Vec<usize> {
        match &self.input {
            Input::Sequence { label, .. } => vec![*label],
            Input::Tokens { labels, .. } => labels.clone(),
        }
    }

    /// Copy of this example with the gold labels replaced.
    pub fn with_labels(&self, labels: &[usize]) -> Example {
        let input = match &self.input {
            Input::Sequence { features, .. } => Input::Sequence {
                features: features.clone(),
                label: labels[0],
            },
            Input::Tokens { features, .. } => Input::Tokens {
                features: features.clone(),
                labels: labels.to_vec(),
            },
        };
        Example {
            task_id: self.task_id.clone(),
            input,
        }
    }

    pub fn validate(&self, config: &ModelConfig) -> Result<()> {
        match (&self.input, config.head_kind) {
            (Input::Sequence { .. }, HeadKind::SequenceClassification) => {}
            (Input::Tokens { features, labels }, HeadKind::TokenLabeling) => {
                if features.len() != labels.len() {
                    return Err(Error::Input(format!(
                        "token example has {} feature vectors but {} labels",
                        features.len(),
                        labels.len()
                    )));
                }
            }
            _ => {
                return Err(Error::Input(format!(
                    "example kind does not match head {:?}",
                    config.head_kind
                )))
            }
        }
        for (x, y) in self.points() {
            if x.len() != config.input_dim {
                return Err(Error::Input(format!(
                    "feature length {} does not match input_dim {}",
                    x.len(),
                    config.input_dim
                )));
            }
            if y >= config.num_labels {
                return Err(Error::Input(format!(
                    "label {y} out of range for {} labels",
                    config.num_labels
                )));
            }
        }
        Ok(())
    }
}

fn layout_for(config: &ModelConfig) -> Vec<LayerShape> {
    config
        .widths()
        .windows(2)
        .enumerate()
        .flat_map(|(l, p)| {
            [
                LayerShape {
                    name: format!("layer{l}.weight"),
                    shape: vec![p[1], p[0]],
                },
                LayerShape {
                    name: format!("layer{l}.bias"),
                    shape: vec![p[1]],
                },
            ]
        })
        .collect()
}

/// Glorot-uniform weights, zero biases, deterministic in `init_seed`.
pub fn init_model(config: &ModelConfig) -> Result<ParameterVector> {
    config.validate()?;
    let mut theta = ParameterVector::zeros_like(config);
    let mut rng = ChaCha8Rng::seed_from_u64(config.init_seed);
    let mut offset = 0;
    for p in config.widths().windows(2) {
        let (fan_in, fan_out) = (p[0], p[1]);
        let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
        for w in &mut theta.values[offset..offset + fan_in * fan_out] {
            *w = rng.random_range(-a..=a);
        }
        offset += fan_in * fan_out + fan_out;
    }
    Ok(theta)
}

struct Layer {
    fan_in: usize,
    fan_out: usize,
    w: usize,
    b: usize,
}

fn layers(config: &ModelConfig) -> Vec<Layer> {
    let mut offset = 0;
    config
        .widths()
        .windows(2)
        .map(|p| {
            let l = Layer {
                fan_in: p[0],
                fan_out: p[1],
                w: offset,
                b: offset + p[0] * p[1],
            };
            offset += p[0] * p[1] + p[1];
            l
        })
        .collect()
}

fn check_theta(theta: &ParameterVector, config: &ModelConfig) -> Result<()> {
    theta.check_layout()?;
    if theta.len() != config.num_parameters() {
        return Err(Error::Input(format!(
            "parameter vector length {} does not match model ({} parameters)",
            theta.len(),
            config.num_parameters()
        )));
    }
    Ok(())
}

/// Per-layer activations of one forward pass; the last entry holds logits.
fn forward_point(theta: &[f64], layers: &[Layer], act: Activation, x: &[f64]) -> Vec<Vec<f64>> {
    let mut acts = Vec::with_capacity(layers.len() + 1);
    acts.push(x.to_vec());
    for (i, layer) in layers.iter().enumerate() {
        let input = &acts[i];
        let mut z = theta[layer.b..layer.b + layer.fan_out].to_vec();
        for (j, zj) in z.iter_mut().enumerate() {
            let row = &theta[layer.w + j * layer.fan_in..layer.w + (j + 1) * layer.fan_in];
            *zj += row.iter().zip(input).map(|(w, a)| w * a).sum::<f64>();
        }
        if i + 1 < layers.len() {
            for v in &mut z {
                *v = match act {
                    Activation::Tanh => v.tanh(),
                    Activation::Relu => v.max(0.0),
                };
            }
        }
        acts.push(z);
    }
    acts
}

fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
    logits.iter().map(|z| z - lse).collect()
}

/// Probability vector per prediction point.
pub fn forward(theta: &ParameterVector, config: &ModelConfig, example: &Example) -> Result<Vec<Vec<f64>>> {
    check_theta(theta, config)?;
    example.validate(config)?;
    let layers = layers(config);
    Ok(example
        .points()
        .into_iter()
        .map(|(x, _)| {
            let acts = forward_point(&theta.values, &layers, config.activation, x);
            log_softmax(acts.last().unwrap())
                .into_iter()
                .map(f64::exp)
                .collect()
        })
        .collect())
}

/// Lowest index among the maximal entries.
pub fn argmax(probs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &p) in probs.iter().enumerate() {
        if p > probs[best] {
            best = i;
        }
    }
    best
}

pub fn predict(theta: &ParameterVector, config: &ModelConfig, example: &Example) -> Result<Vec<usize>> {
    Ok(forward(theta, config, example)?
        .iter()
        .map(|p| argmax(p))
        .collect())
}

/// Mean negative log-likelihood of the batch and its exact gradient.
///
/// Token examples average over their tokens first, then over examples.
pub fn loss_and_grad(
    theta: &ParameterVector,
    config: &ModelConfig,
    batch: &[Example],
) -> Result<(f64, GradientVector)> {
    let refs: Vec<&Example> = batch.iter().collect();
    loss_and_grad_refs(theta, config, &refs)
}

/// [`loss_and_grad`] over borrowed examples.
pub fn loss_and_grad_refs(
    theta: &ParameterVector,
    config: &ModelConfig,
    batch: &[&Example],
) -> Result<(f64, GradientVector)> {
    if batch.is_empty() {
        return Err(Error::Input("empty batch".into()));
    }
    check_theta(theta, config)?;
    let layers = layers(config);
    let mut grad = GradientVector::zeros(theta.len());
    let mut loss = 0.0;
    let per_example = 1.0 / batch.len() as f64;
    for example in batch {
        example.validate(config)?;
        let points = example.points();
        if points.is_empty() {
            continue;
        }
        let weight = per_example / points.len() as f64;
        for (x, y) in points {
            let acts = forward_point(&theta.values, &layers, config.activation, x);
            let logp = log_softmax(acts.last().unwrap());
            loss -= weight * logp[y];
            let mut delta: Vec<f64> = logp.iter().map(|lp| weight * lp.exp()).collect();
            delta[y] -= weight;
            backprop(&theta.values, &layers, config.activation, &acts, delta, &mut grad.values);
        }
    }
    Ok((loss, grad))
}

fn backprop(
    theta: &[f64],
    layers: &[Layer],
    act: Activation,
    acts: &[Vec<f64>],
    mut delta: Vec<f64>,
    grad: &mut [f64],
) {
    for (i, layer) in layers.iter().enumerate().rev() {
        let input = &acts[i];
        for (j, &d) in delta.iter().enumerate() {
            grad[layer.b + j] += d;
            if d != 0.0 {
                let row = &mut grad[layer.w + j * layer.fan_in..layer.w + (j + 1) * layer.fan_in];
                for (g, a) in row.iter_mut().zip(input) {
                    *g += d * a;
                }
            }
        }
        if i == 0 {
            break;
        }
        let mut prev = vec![0.0; layer.fan_in];
        for (j, &d) in delta.iter().enumerate() {
            let row = &theta[layer.w + j * layer.fan_in..layer.w + (j + 1) * layer.fan_in];
            for (p, w) in prev.iter_mut().zip(row) {
                *p += w * d;
            }
        }
        // input holds post-activation values of the previous hidden layer
        for (p, &a) in prev.iter_mut().zip(input) {
            *p *= match act {
                Activation::Tanh => 1.0 - a * a,
                Activation::Relu => {
                    if a > 0.0 {
                        1.0
                    } else {
                        0.0
                    }
                }
            };
        }
        delta = prev;
    }
}

/// `theta - lr * grad`.
pub fn sgd_step(theta: &ParameterVector, grad: &GradientVector, lr: f64) -> Result<ParameterVector> {
    if theta.len() != grad.len() {
        return Err(Error::Input(format!(
            "gradient length {} does not match parameters {}",
            grad.len(),
            theta.len()
        )));
    }
    if !(lr > 0.0 && lr.is_finite()) {
        return Err(Error::Input(format!("learning rate must be positive, got {lr}")));
    }
    if let Some(i) = grad.values.iter().position(|g| !g.is_finite()) {
        return Err(Error::Numeric(format!("non-finite gradient component at index {i}")));
    }
    let values: Vec<f64> = theta
        .values
        .iter()
        .zip(&grad.values)
        .map(|(t, g)| t - lr * g)
        .collect();
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("parameter update produced non-finite weights".into()));
    }
    Ok(ParameterVector {
        values,
        layout: theta.layout.clone(),
    })
}
