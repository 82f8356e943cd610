//! Small feed-forward networks with exact backpropagation.
//!
//! One type serves as the desk-scale deployed model, the multi-task unfair
//! baseline (two output heads over a shared trunk) and the patch model.

mod io;
mod train;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::prob::{self, ProbVector};

pub use io::FORMAT_VERSION;
pub use train::{
    grad_check, mean_loss, train, BlockError, GradCheckReport, KlDirection, LossKind, Optimizer, Targets, TrainConfig,
    TrainReport, GRAD_CHECK_STEP, GRAD_CHECK_THRESHOLD,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Tanh,
}

impl Activation {
    #[inline]
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Relu => z.max(0.0),
            Activation::Tanh => z.tanh(),
        }
    }

    /// Derivative expressed through the pre-activation `z` and output `a`.
    #[inline]
    fn derivative(self, z: f64, a: f64) -> f64 {
        match self {
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => 1.0 - a * a,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OutputMode {
    Softmax,
    Sigmoid,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelRole {
    Deployed,
    Patch,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ModelMetadata {
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default)]
    pub trained_on: Option<String>,
    #[serde(default)]
    pub role: Option<ModelRole>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bias_attr: Option<String>,
}

/// A multilayer perceptron.
///
/// Weights are stored per layer as row-major `out x in` matrices. The final
/// layer may be split into several heads (`heads` partitions the output
/// dimension); [`MlpModel::forward_probs`] always reports the first head.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpModel {
    layer_dims: Vec<usize>,
    activations: Vec<Activation>,
    output_mode: OutputMode,
    heads: Vec<usize>,
    pub(crate) weights: Vec<Vec<f64>>,
    pub(crate) biases: Vec<Vec<f64>>,
    pub metadata: ModelMetadata,
}

impl MlpModel {
    /// Builds a network with Glorot-uniform weights and zero biases.
    pub fn new(layer_dims: &[usize], activation: Activation, output_mode: OutputMode, seed: u64) -> Result<Self> {
        let output = *layer_dims.last().unwrap_or(&0);
        Self::with_heads(layer_dims, activation, output_mode, &[output], seed)
    }

    pub fn with_heads(
        layer_dims: &[usize],
        activation: Activation,
        output_mode: OutputMode,
        heads: &[usize],
        seed: u64,
    ) -> Result<Self> {
        if layer_dims.len() < 2 {
            return Err(Error::InvalidInput("need at least input and output layers".into()));
        }
        let hidden = layer_dims.len() - 2;
        let mut model = Self::zeros(layer_dims, &vec![activation; hidden], output_mode, heads)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for (l, w) in model.weights.iter_mut().enumerate() {
            let (fan_in, fan_out) = (layer_dims[l], layer_dims[l + 1]);
            let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let dist = Uniform::new_inclusive(-limit, limit).expect("finite bounds");
            for v in w.iter_mut() {
                *v = dist.sample(&mut rng);
            }
        }
        model.metadata.seed = Some(seed);
        Ok(model)
    }

    /// All-zero parameters; validates the architecture.
    pub fn zeros(
        layer_dims: &[usize],
        activations: &[Activation],
        output_mode: OutputMode,
        heads: &[usize],
    ) -> Result<Self> {
        validate_architecture(layer_dims, activations, output_mode, heads)?;
        let weights = layer_dims.windows(2).map(|d| vec![0.0; d[0] * d[1]]).collect();
        let biases = layer_dims[1..].iter().map(|&d| vec![0.0; d]).collect();
        Ok(Self {
            layer_dims: layer_dims.to_vec(),
            activations: activations.to_vec(),
            output_mode,
            heads: heads.to_vec(),
            weights,
            biases,
            metadata: ModelMetadata::default(),
        })
    }

    pub fn layer_dims(&self) -> &[usize] {
        &self.layer_dims
    }

    pub fn activations(&self) -> &[Activation] {
        &self.activations
    }

    pub fn output_mode(&self) -> OutputMode {
        self.output_mode
    }

    pub fn heads(&self) -> &[usize] {
        &self.heads
    }

    pub fn input_dim(&self) -> usize {
        self.layer_dims[0]
    }

    /// Number of classes reported by the first head.
    pub fn num_classes(&self) -> usize {
        match (self.output_mode, self.heads[0]) {
            (OutputMode::Sigmoid, 1) => 2,
            (_, n) => n,
        }
    }

    pub fn num_layers(&self) -> usize {
        self.weights.len()
    }

    pub fn weights(&self, layer: usize) -> &[f64] {
        &self.weights[layer]
    }

    pub fn weights_mut(&mut self, layer: usize) -> &mut [f64] {
        &mut self.weights[layer]
    }

    pub fn biases(&self, layer: usize) -> &[f64] {
        &self.biases[layer]
    }

    pub fn biases_mut(&mut self, layer: usize) -> &mut [f64] {
        &mut self.biases[layer]
    }

    pub fn num_parameters(&self) -> usize {
        self.weights.iter().chain(&self.biases).map(Vec::len).sum()
    }

    /// Raw output-layer values for every head.
    pub fn forward_logits(&self, features: &[f64]) -> Result<Vec<f64>> {
        if features.len() != self.input_dim() {
            return Err(Error::shape(self.input_dim(), features.len()));
        }
        let mut current = features.to_vec();
        for l in 0..self.num_layers() {
            let mut next = affine(&self.weights[l], &self.biases[l], &current);
            if l + 1 < self.num_layers() {
                let act = self.activations[l];
                next.iter_mut().for_each(|v| *v = act.apply(*v));
            }
            current = next;
        }
        if let Some(bad) = current.iter().find(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!("non-finite activation {bad}")));
        }
        Ok(current)
    }

    /// Class probabilities of the first (target) head.
    pub fn forward_probs(&self, features: &[f64]) -> Result<ProbVector> {
        self.head_probs(features, 0)
    }

    pub fn head_probs(&self, features: &[f64], head: usize) -> Result<ProbVector> {
        if head >= self.heads.len() {
            return Err(Error::InvalidInput(format!(
                "head {head} out of range ({} heads)",
                self.heads.len()
            )));
        }
        let logits = self.forward_logits(features)?;
        let offset: usize = self.heads[..head].iter().sum();
        let segment = &logits[offset..offset + self.heads[head]];
        match self.output_mode {
            OutputMode::Softmax => prob::softmax_to_prob(segment),
            OutputMode::Sigmoid => {
                let scores: Vec<f64> = segment.iter().map(|z| sigmoid(*z)).collect();
                ProbVector::from_sigmoid_scores(&scores)
            }
        }
    }

    pub fn forward_batch<F: AsRef<[f64]>>(&self, batch: &[F]) -> Result<Vec<ProbVector>> {
        batch.iter().map(|x| self.forward_probs(x.as_ref())).collect()
    }
}

pub(crate) fn validate_architecture(
    layer_dims: &[usize],
    activations: &[Activation],
    output_mode: OutputMode,
    heads: &[usize],
) -> Result<()> {
    if layer_dims.len() < 2 {
        return Err(Error::InvalidInput("need at least input and output layers".into()));
    }
    if layer_dims.contains(&0) {
        return Err(Error::InvalidInput(format!(
            "layer dims must be positive: {layer_dims:?}"
        )));
    }
    if activations.len() != layer_dims.len() - 2 {
        return Err(Error::InvalidInput(format!(
            "{} hidden layers but {} activations",
            layer_dims.len() - 2,
            activations.len()
        )));
    }
    let output = *layer_dims.last().unwrap();
    let min_head = match output_mode {
        OutputMode::Softmax => 2,
        OutputMode::Sigmoid => 1,
    };
    if heads.is_empty() || heads.iter().sum::<usize>() != output || heads.iter().any(|h| *h < min_head) {
        return Err(Error::InvalidInput(format!(
            "heads {heads:?} do not partition output dim {output} ({output_mode:?} heads need >= {min_head} units)"
        )));
    }
    Ok(())
}

#[inline]
pub(crate) fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

#[inline]
fn affine(weights: &[f64], biases: &[f64], input: &[f64]) -> Vec<f64> {
    let cols = input.len();
    biases
        .iter()
        .enumerate()
        .map(|(r, b)| b + dot(&weights[r * cols..(r + 1) * cols], input))
        .collect()
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}
