use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{dot, sigmoid, MlpModel, OutputMode};
use crate::error::{Error, Result};
use crate::prob::{log_softmax_slice, ProbVector};

/// Central-difference step used by [`grad_check`].
pub const GRAD_CHECK_STEP: f64 = 1e-5;
/// Maximum relative error for a passing [`grad_check`].
pub const GRAD_CHECK_THRESHOLD: f64 = 1e-4;
/// Relative errors are measured against `max(|analytic|, |numeric|, REL_FLOOR)`
/// so that entries with vanishing gradients are compared absolutely.
const REL_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    /// Cross-entropy against hard target labels.
    HardLabelCe,
    /// KL divergence against per-example soft targets.
    SoftTargetKl,
    /// Summed cross-entropy over a target head and a bias head.
    MultitaskCe,
}

/// Argument order of the soft-target KL divergence.
///
/// `Forward` minimizes `KL(target || model)`, i.e. cross-entropy against the
/// target, whose logit gradient is simply `p - t`. `Reverse` minimizes
/// `KL(model || target)`. Both share the minimizer `model == target`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KlDirection {
    #[default]
    Forward,
    Reverse,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Optimizer {
    Sgd,
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl Default for Optimizer {
    fn default() -> Self {
        Optimizer::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub loss: LossKind,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub optimizer: Optimizer,
    pub l2: f64,
    pub kl_direction: KlDirection,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            loss: LossKind::HardLabelCe,
            learning_rate: 1e-3,
            epochs: 200,
            batch_size: 64,
            seed: 0,
            optimizer: Optimizer::default(),
            l2: 0.0,
            kl_direction: KlDirection::Forward,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!(
                "learning_rate {} must be > 0",
                self.learning_rate
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(self.l2 >= 0.0 && self.l2.is_finite()) {
            return Err(Error::Config(format!("l2 {} must be >= 0", self.l2)));
        }
        if let Optimizer::Adam { beta1, beta2, eps } = self.optimizer {
            if !(0.0..1.0).contains(&beta1) || !(0.0..1.0).contains(&beta2) || eps <= 0.0 {
                return Err(Error::Config(format!(
                    "invalid adam parameters ({beta1}, {beta2}, {eps})"
                )));
            }
        }
        Ok(())
    }
}

/// Supervision aligned with the training features.
#[derive(Debug, Clone, PartialEq)]
pub enum Targets {
    Hard(Vec<usize>),
    Soft(Vec<ProbVector>),
    /// `(target, bias)` label pairs for a two-head model.
    Multitask(Vec<(usize, usize)>),
}

impl Targets {
    pub fn len(&self) -> usize {
        match self {
            Targets::Hard(v) => v.len(),
            Targets::Soft(v) => v.len(),
            Targets::Multitask(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn expected_loss(&self) -> LossKind {
        match self {
            Targets::Hard(_) => LossKind::HardLabelCe,
            Targets::Soft(_) => LossKind::SoftTargetKl,
            Targets::Multitask(_) => LossKind::MultitaskCe,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    pub model: MlpModel,
    /// Mean objective per epoch, measured on the parameters each batch saw.
    pub epoch_losses: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockError {
    pub name: String,
    pub max_rel_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub blocks: Vec<BlockError>,
    pub pass: bool,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.blocks.iter().map(|b| b.max_rel_error).fold(0.0, f64::max)
    }
}

/// Parameter-shaped accumulator.
#[derive(Debug, Clone)]
struct Grads {
    w: Vec<Vec<f64>>,
    b: Vec<Vec<f64>>,
}

impl Grads {
    fn zeros_like(model: &MlpModel) -> Self {
        Self {
            w: model.weights.iter().map(|w| vec![0.0; w.len()]).collect(),
            b: model.biases.iter().map(|b| vec![0.0; b.len()]).collect(),
        }
    }

    fn clear(&mut self) {
        self.w.iter_mut().chain(self.b.iter_mut()).for_each(|v| v.fill(0.0));
    }
}

/// Forward/backward scratch space reused across examples.
struct Workspace {
    pre: Vec<Vec<f64>>,
    post: Vec<Vec<f64>>,
    delta: Vec<Vec<f64>>,
}

impl Workspace {
    fn new(model: &MlpModel) -> Self {
        let outs = &model.layer_dims[1..];
        Self {
            pre: outs.iter().map(|&d| vec![0.0; d]).collect(),
            post: outs.iter().map(|&d| vec![0.0; d]).collect(),
            delta: outs.iter().map(|&d| vec![0.0; d]).collect(),
        }
    }
}

struct LossSpec {
    kind: LossKind,
    direction: KlDirection,
    mode: OutputMode,
}

fn check_compatibility(model: &MlpModel, targets: &Targets, spec: &LossSpec) -> Result<()> {
    if targets.expected_loss() != spec.kind {
        return Err(Error::Config(format!(
            "loss {:?} does not match supplied targets ({:?} expected)",
            spec.kind,
            targets.expected_loss()
        )));
    }
    if spec.kind == LossKind::SoftTargetKl && spec.direction == KlDirection::Reverse && spec.mode == OutputMode::Sigmoid
    {
        return Err(Error::Config("reverse KL requires softmax output".into()));
    }
    let classes = |head: usize| match (model.output_mode, model.heads[head]) {
        (OutputMode::Sigmoid, 1) => 2,
        (_, n) => n,
    };
    let out_of_range = |label: usize, head: usize| -> Result<()> {
        if label >= classes(head) {
            return Err(Error::InvalidInput(format!(
                "label {label} out of range for head {head} with {} classes",
                classes(head)
            )));
        }
        Ok(())
    };
    match targets {
        Targets::Hard(labels) => labels.iter().try_for_each(|&y| out_of_range(y, 0)),
        Targets::Soft(soft) => soft.iter().try_for_each(|q| {
            if q.len() != classes(0) {
                return Err(Error::shape(classes(0), q.len()));
            }
            Ok(())
        }),
        Targets::Multitask(pairs) => {
            if model.heads.len() != 2 {
                return Err(Error::Config(format!(
                    "multitask loss needs a two-head model, got {} head(s)",
                    model.heads.len()
                )));
            }
            pairs.iter().try_for_each(|&(y, b)| {
                out_of_range(y, 0)?;
                out_of_range(b, 1)
            })
        }
    }
}

/// Loss and logit gradient for one head. `target` is a class distribution.
fn head_loss(spec: &LossSpec, logits: &[f64], target: &[f64], grad: &mut [f64]) -> f64 {
    match spec.mode {
        OutputMode::Softmax => {
            let logp = log_softmax_slice(logits);
            match spec.direction {
                KlDirection::Reverse if spec.kind == LossKind::SoftTargetKl => {
                    let mut loss = 0.0;
                    for (lp, t) in logp.iter().zip(target) {
                        loss += lp.exp() * (lp - t.ln());
                    }
                    for ((g, lp), t) in grad.iter_mut().zip(&logp).zip(target) {
                        *g = lp.exp() * (lp - t.ln() - loss);
                    }
                    loss
                }
                _ => {
                    let mut loss = 0.0;
                    for ((g, lp), t) in grad.iter_mut().zip(&logp).zip(target) {
                        if *t > 0.0 {
                            loss += t * (t.ln() - lp);
                        }
                        *g = lp.exp() - t;
                    }
                    loss
                }
            }
        }
        OutputMode::Sigmoid => {
            // One unit encodes a binary head through its positive class.
            let units: &[f64] = if logits.len() == 1 { &target[1..] } else { target };
            let mut loss = 0.0;
            for ((g, z), u) in grad.iter_mut().zip(logits).zip(units) {
                loss += softplus(*z) - u * z;
                *g = sigmoid(*z) - u;
            }
            loss
        }
    }
}

#[inline]
fn softplus(z: f64) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

fn one_hot(label: usize, classes: usize) -> Vec<f64> {
    let mut v = vec![0.0; classes];
    v[label] = 1.0;
    v
}

/// Forward pass into the workspace, then backprop of one example's loss,
/// accumulating `scale * gradient` into `grads`. Returns the example loss.
#[allow(clippy::too_many_arguments)]
fn backprop_example(
    model: &MlpModel,
    spec: &LossSpec,
    x: &[f64],
    targets: &Targets,
    index: usize,
    ws: &mut Workspace,
    grads: &mut Grads,
    scale: f64,
) -> f64 {
    let layers = model.num_layers();
    for l in 0..layers {
        let cols = model.layer_dims[l];
        let (before, after) = ws.post.split_at_mut(l);
        let input: &[f64] = if l == 0 { x } else { &before[l - 1] };
        let w = &model.weights[l];
        for (r, b) in model.biases[l].iter().enumerate() {
            ws.pre[l][r] = b + dot(&w[r * cols..(r + 1) * cols], input);
        }
        let out = &mut after[0];
        if l + 1 < layers {
            let act = model.activations[l];
            for (o, z) in out.iter_mut().zip(&ws.pre[l]) {
                *o = act.apply(*z);
            }
        } else {
            out.copy_from_slice(&ws.pre[l]);
        }
    }

    let logits = &ws.post[layers - 1];
    let output_delta = &mut ws.delta[layers - 1];
    let classes = |units: usize| match (model.output_mode, units) {
        (OutputMode::Sigmoid, 1) => 2,
        (_, n) => n,
    };
    let mut loss = 0.0;
    let mut offset = 0;
    for (h, &units) in model.heads.iter().enumerate() {
        // Single-head losses ignore any extra heads.
        if h > 0 && !matches!(targets, Targets::Multitask(_)) {
            output_delta[offset..offset + units].fill(0.0);
        } else {
            let target: Vec<f64> = match targets {
                Targets::Hard(labels) => one_hot(labels[index], classes(units)),
                Targets::Soft(soft) => soft[index].as_slice().to_vec(),
                Targets::Multitask(pairs) => {
                    let label = if h == 0 { pairs[index].0 } else { pairs[index].1 };
                    one_hot(label, classes(units))
                }
            };
            loss += head_loss(
                spec,
                &logits[offset..offset + units],
                &target,
                &mut output_delta[offset..offset + units],
            );
        }
        offset += units;
    }

    for l in (0..layers).rev() {
        let cols = model.layer_dims[l];
        let (lower, upper) = ws.delta.split_at_mut(l);
        let delta = &upper[0];
        let input: &[f64] = if l == 0 { x } else { &ws.post[l - 1] };
        let gw = &mut grads.w[l];
        for (r, d) in delta.iter().enumerate() {
            let sd = scale * d;
            grads.b[l][r] += sd;
            for (g, a) in gw[r * cols..(r + 1) * cols].iter_mut().zip(input) {
                *g += sd * a;
            }
        }
        if l > 0 {
            let prev = &mut lower[l - 1];
            prev.fill(0.0);
            let w = &model.weights[l];
            for (r, d) in delta.iter().enumerate() {
                for (p, wv) in prev.iter_mut().zip(&w[r * cols..(r + 1) * cols]) {
                    *p += wv * d;
                }
            }
            let act = model.activations[l - 1];
            for ((p, z), a) in prev.iter_mut().zip(&ws.pre[l - 1]).zip(&ws.post[l - 1]) {
                *p *= act.derivative(*z, *a);
            }
        }
    }
    loss
}

fn l2_penalty(model: &MlpModel, l2: f64) -> f64 {
    if l2 == 0.0 {
        return 0.0;
    }
    0.5 * l2 * model.weights.iter().flatten().map(|w| w * w).sum::<f64>()
}

/// Mean loss and gradient over a set of examples.
#[allow(clippy::too_many_arguments)]
fn batch_objective<F: AsRef<[f64]>>(
    model: &MlpModel,
    spec: &LossSpec,
    features: &[F],
    targets: &Targets,
    indices: &[usize],
    l2: f64,
    ws: &mut Workspace,
    grads: &mut Grads,
) -> f64 {
    grads.clear();
    let scale = 1.0 / indices.len() as f64;
    let mut loss = 0.0;
    for &i in indices {
        loss += backprop_example(model, spec, features[i].as_ref(), targets, i, ws, grads, scale);
    }
    if l2 > 0.0 {
        for (g, w) in grads.w.iter_mut().zip(&model.weights) {
            for (gv, wv) in g.iter_mut().zip(w) {
                *gv += l2 * wv;
            }
        }
    }
    loss * scale + l2_penalty(model, l2)
}

enum OptimizerState {
    Sgd,
    Adam {
        beta1: f64,
        beta2: f64,
        eps: f64,
        step: i32,
        m: Grads,
        v: Grads,
    },
}

impl OptimizerState {
    fn new(optimizer: Optimizer, model: &MlpModel) -> Self {
        match optimizer {
            Optimizer::Sgd => OptimizerState::Sgd,
            Optimizer::Adam { beta1, beta2, eps } => OptimizerState::Adam {
                beta1,
                beta2,
                eps,
                step: 0,
                m: Grads::zeros_like(model),
                v: Grads::zeros_like(model),
            },
        }
    }

    fn step(&mut self, model: &mut MlpModel, grads: &Grads, lr: f64) {
        let params = model.weights.iter_mut().chain(model.biases.iter_mut());
        let gs = grads.w.iter().chain(&grads.b);
        match self {
            OptimizerState::Sgd => {
                for (p, g) in params.zip(gs) {
                    for (pv, gv) in p.iter_mut().zip(g) {
                        *pv -= lr * gv;
                    }
                }
            }
            OptimizerState::Adam {
                beta1,
                beta2,
                eps,
                step,
                m,
                v,
            } => {
                *step += 1;
                let c1 = 1.0 - beta1.powi(*step);
                let c2 = 1.0 - beta2.powi(*step);
                let ms = m.w.iter_mut().chain(m.b.iter_mut());
                let vs = v.w.iter_mut().chain(v.b.iter_mut());
                for (((p, g), mb), vb) in params.zip(gs).zip(ms).zip(vs) {
                    for (((pv, gv), mv), vv) in p.iter_mut().zip(g).zip(mb.iter_mut()).zip(vb.iter_mut()) {
                        *mv = *beta1 * *mv + (1.0 - *beta1) * gv;
                        *vv = *beta2 * *vv + (1.0 - *beta2) * gv * gv;
                        *pv -= lr * (*mv / c1) / ((*vv / c2).sqrt() + *eps);
                    }
                }
            }
        }
    }
}

fn validate_inputs<F: AsRef<[f64]>>(model: &MlpModel, features: &[F], targets: &Targets) -> Result<()> {
    if features.len() != targets.len() {
        return Err(Error::shape(features.len(), targets.len()));
    }
    if let Some(bad) = features.iter().find(|x| x.as_ref().len() != model.input_dim()) {
        return Err(Error::shape(model.input_dim(), bad.as_ref().len()));
    }
    Ok(())
}

/// Trains a copy of `model` with minibatch gradient descent.
///
/// Examples are reshuffled every epoch from a generator seeded with
/// `config.seed`, and gradients are reduced in a fixed order, so identical
/// inputs produce bit-identical parameters. Batches larger than the dataset
/// are clamped to full-batch training.
pub fn train<F: AsRef<[f64]>>(
    model: &MlpModel,
    features: &[F],
    targets: &Targets,
    config: &TrainConfig,
) -> Result<TrainReport> {
    config.validate()?;
    validate_inputs(model, features, targets)?;
    let spec = LossSpec {
        kind: config.loss,
        direction: config.kl_direction,
        mode: model.output_mode,
    };
    check_compatibility(model, targets, &spec)?;

    let mut model = model.clone();
    let mut epoch_losses = Vec::with_capacity(config.epochs);
    if config.epochs == 0 || features.is_empty() {
        return Ok(TrainReport { model, epoch_losses });
    }

    let n = features.len();
    let batch = config.batch_size.min(n);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..n).collect();
    let mut ws = Workspace::new(&model);
    let mut grads = Grads::zeros_like(&model);
    let mut optimizer = OptimizerState::new(config.optimizer, &model);

    for epoch in 1..=config.epochs {
        if batch < n {
            order.shuffle(&mut rng);
        }
        let mut total = 0.0;
        for chunk in order.chunks(batch) {
            let loss = batch_objective(&model, &spec, features, targets, chunk, config.l2, &mut ws, &mut grads);
            if !loss.is_finite() {
                return Err(Error::Divergence { epoch, loss });
            }
            total += loss * chunk.len() as f64;
            optimizer.step(&mut model, &grads, config.learning_rate);
        }
        let mean = total / n as f64;
        if model
            .weights
            .iter()
            .chain(&model.biases)
            .flatten()
            .any(|v| !v.is_finite())
        {
            return Err(Error::Divergence { epoch, loss: f64::NAN });
        }
        epoch_losses.push(mean);
    }
    Ok(TrainReport { model, epoch_losses })
}

/// Mean objective of `model` over all examples (no regularization).
pub fn mean_loss<F: AsRef<[f64]>>(
    model: &MlpModel,
    features: &[F],
    targets: &Targets,
    loss: LossKind,
    direction: KlDirection,
) -> Result<f64> {
    validate_inputs(model, features, targets)?;
    let spec = LossSpec {
        kind: loss,
        direction,
        mode: model.output_mode,
    };
    check_compatibility(model, targets, &spec)?;
    let indices: Vec<usize> = (0..features.len()).collect();
    let mut ws = Workspace::new(model);
    let mut grads = Grads::zeros_like(model);
    Ok(batch_objective(
        model, &spec, features, targets, &indices, 0.0, &mut ws, &mut grads,
    ))
}

/// Compares backpropagated gradients with central finite differences.
///
/// One report entry per parameter block (`layer{l}.weight`, `layer{l}.bias`).
/// Invalid inputs are reported as failing blocks rather than errors.
pub fn grad_check<F: AsRef<[f64]>>(
    model: &MlpModel,
    features: &[F],
    targets: &Targets,
    loss: LossKind,
    direction: KlDirection,
) -> GradCheckReport {
    let failed = |name: &str| GradCheckReport {
        blocks: vec![BlockError {
            name: name.to_string(),
            max_rel_error: f64::INFINITY,
        }],
        pass: false,
    };
    if features.is_empty() || validate_inputs(model, features, targets).is_err() {
        return failed("inputs");
    }
    let spec = LossSpec {
        kind: loss,
        direction,
        mode: model.output_mode,
    };
    if check_compatibility(model, targets, &spec).is_err() {
        return failed("loss");
    }
    let indices: Vec<usize> = (0..features.len()).collect();
    let mut ws = Workspace::new(model);
    let mut analytic = Grads::zeros_like(model);
    batch_objective(model, &spec, features, targets, &indices, 0.0, &mut ws, &mut analytic);

    let mut scratch = Grads::zeros_like(model);
    let mut probe = model.clone();
    let mut objective =
        |m: &MlpModel| batch_objective(m, &spec, features, targets, &indices, 0.0, &mut ws, &mut scratch);

    let mut blocks = Vec::with_capacity(2 * model.num_layers());
    for l in 0..model.num_layers() {
        for is_bias in [false, true] {
            let len = if is_bias {
                model.biases[l].len()
            } else {
                model.weights[l].len()
            };
            let mut worst: f64 = 0.0;
            for i in 0..len {
                let original = param(&probe, l, is_bias, i);
                *param_mut(&mut probe, l, is_bias, i) = original + GRAD_CHECK_STEP;
                let plus = objective(&probe);
                *param_mut(&mut probe, l, is_bias, i) = original - GRAD_CHECK_STEP;
                let minus = objective(&probe);
                *param_mut(&mut probe, l, is_bias, i) = original;
                let numeric = (plus - minus) / (2.0 * GRAD_CHECK_STEP);
                let exact = if is_bias { analytic.b[l][i] } else { analytic.w[l][i] };
                let denom = exact.abs().max(numeric.abs()).max(REL_FLOOR);
                let err = (exact - numeric).abs() / denom;
                worst = if err.is_nan() { f64::INFINITY } else { worst.max(err) };
            }
            blocks.push(BlockError {
                name: format!("layer{l}.{}", if is_bias { "bias" } else { "weight" }),
                max_rel_error: worst,
            });
        }
    }
    let pass = blocks.iter().all(|b| b.max_rel_error < GRAD_CHECK_THRESHOLD);
    GradCheckReport { blocks, pass }
}

fn param(model: &MlpModel, layer: usize, is_bias: bool, i: usize) -> f64 {
    if is_bias {
        model.biases[layer][i]
    } else {
        model.weights[layer][i]
    }
}

fn param_mut(model: &mut MlpModel, layer: usize, is_bias: bool, i: usize) -> &mut f64 {
    if is_bias {
        &mut model.biases[layer][i]
    } else {
        &mut model.weights[layer][i]
    }
}
