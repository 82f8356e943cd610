//! Rule distillation: recovering the model's bias-only prediction from its
//! outputs on a labeled calibration set, then fitting a patch model to it.
//!
//! For a calibration example `x` with target `y` and bias value `b`, the
//! distilled target is
//!
//! ```text
//! p(y | x^b) = softmax( (1/k) * [ log M(x) + sum_{i != y} meanlog(S_{i,b}) ] )
//! ```
//!
//! where `S_{i,b}` holds the calibration examples with target `i` and bias
//! value `b`, and `meanlog` is the arithmetic mean of their log-probability
//! vectors. Contrast cells never contain `x` itself since their targets
//! differ from `y`.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataset::{group_index, Dataset};
use crate::error::{Error, Result};
use crate::nnet::{self, Activation, LossKind, MlpModel, ModelRole, OutputMode, Targets, TrainConfig};
use crate::oracle::OracleHandle;
use crate::prob::{softmax_to_prob, ProbVector};

/// Contrast cells and cached oracle log-outputs for one bias attribute.
#[derive(Debug, Clone)]
pub struct ContrastIndex {
    bias_attr: String,
    attr: usize,
    k: usize,
    oracle_id: String,
    cells: BTreeMap<(usize, usize), Vec<usize>>,
    log_probs: Vec<Vec<f64>>,
    cell_means: BTreeMap<(usize, usize), Vec<f64>>,
}

impl ContrastIndex {
    pub fn bias_attr(&self) -> &str {
        &self.bias_attr
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn oracle_id(&self) -> &str {
        &self.oracle_id
    }

    /// Calibration indices of cell `(target, bias value)`.
    pub fn cell(&self, target: usize, bias: usize) -> Option<&[usize]> {
        self.cells.get(&(target, bias)).map(Vec::as_slice)
    }

    pub fn cell_mean_log(&self, target: usize, bias: usize) -> Option<&[f64]> {
        self.cell_means.get(&(target, bias)).map(Vec::as_slice)
    }

    pub fn len(&self) -> usize {
        self.log_probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.log_probs.is_empty()
    }

    /// The bracketed log-space sum for calibration example `i`, before the
    /// `1/k` factor.
    pub(crate) fn contrast_sum(&self, i: usize, target: usize, bias: usize) -> Vec<f64> {
        let mut acc = self.log_probs[i].clone();
        for other in (0..self.k).filter(|&c| c != target) {
            for (a, m) in acc.iter_mut().zip(&self.cell_means[&(other, bias)]) {
                *a += m;
            }
        }
        acc
    }

    fn from_log_probs(
        calibration: &Dataset,
        log_probs: Vec<Vec<f64>>,
        bias_attr: &str,
        oracle_id: &str,
    ) -> Result<Self> {
        let attr = calibration.schema().attr_index(bias_attr)?;
        let k = calibration.schema().num_classes;
        let cells = group_index(calibration, bias_attr)?;
        let missing: Vec<String> = cells
            .iter()
            .filter(|(_, v)| v.is_empty())
            .map(|((y, b), _)| format!("(target={y}, bias={b})"))
            .collect();
        if !missing.is_empty() {
            return Err(Error::MissingCells(missing));
        }
        let cell_means = cells
            .iter()
            .map(|(&key, members)| {
                let mut mean = vec![0.0; k];
                for &i in members {
                    for (m, l) in mean.iter_mut().zip(&log_probs[i]) {
                        *m += l;
                    }
                }
                let n = members.len() as f64;
                mean.iter_mut().for_each(|m| *m /= n);
                (key, mean)
            })
            .collect();
        Ok(Self {
            bias_attr: bias_attr.to_string(),
            attr,
            k,
            oracle_id: oracle_id.to_string(),
            cells,
            log_probs,
            cell_means,
        })
    }
}

/// Queries the oracle once per calibration example and groups the results
/// by `(target, bias value)` of `bias_attr`.
pub fn build_contrast_index(calibration: &Dataset, oracle: &OracleHandle, bias_attr: &str) -> Result<ContrastIndex> {
    build_contrast_indices(calibration, oracle, &[bias_attr.to_string()]).map(|mut v| v.remove(0))
}

/// One index per attribute, sharing a single pass of oracle queries.
pub fn build_contrast_indices(
    calibration: &Dataset,
    oracle: &OracleHandle,
    bias_attrs: &[String],
) -> Result<Vec<ContrastIndex>> {
    if calibration.is_empty() {
        return Err(Error::InvalidInput("calibration set is empty".into()));
    }
    if bias_attrs.is_empty() {
        return Err(Error::InvalidInput("no bias attribute requested".into()));
    }
    let k = calibration.schema().num_classes;
    if oracle.k() != k {
        return Err(Error::shape(k, oracle.k()));
    }
    for attr in bias_attrs {
        calibration.schema().attr_index(attr)?;
        // Report empty cells before spending any oracle queries.
        let missing: Vec<String> = group_index(calibration, attr)?
            .iter()
            .filter(|(_, v)| v.is_empty())
            .map(|((y, b), _)| format!("(target={y}, bias={b})"))
            .collect();
        if !missing.is_empty() {
            return Err(Error::MissingCells(missing));
        }
    }
    let probs = oracle.query_batch(&calibration.features())?;
    let log_probs: Vec<Vec<f64>> = probs.iter().map(ProbVector::log_probs).collect();
    bias_attrs
        .iter()
        .map(|attr| ContrastIndex::from_log_probs(calibration, log_probs.clone(), attr, oracle.id()))
        .collect()
}

/// Distilled bias-only predictions, aligned with the calibration examples.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistilledTargets {
    pub bias_attr: String,
    pub oracle_id: String,
    pub targets: Vec<ProbVector>,
    pub seed: Option<u64>,
}

impl DistilledTargets {
    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut bytes = serde_json::to_vec(self)?;
        bytes.push(b'\n');
        std::fs::write(path, bytes)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Ok(serde_json::from_slice(&std::fs::read(path)?)?)
    }
}

pub fn distill_targets(calibration: &Dataset, index: &ContrastIndex) -> Result<DistilledTargets> {
    if calibration.len() != index.len() || calibration.schema().num_classes != index.k {
        return Err(Error::InvalidInput(
            "contrast index was built for a different calibration set".into(),
        ));
    }
    let scale = 1.0 / index.k as f64;
    let targets = calibration
        .examples()
        .iter()
        .enumerate()
        .map(|(i, ex)| {
            let sum = index.contrast_sum(i, ex.target, ex.bias[index.attr]);
            let logits: Vec<f64> = sum.iter().map(|s| s * scale).collect();
            softmax_to_prob(&logits)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(DistilledTargets {
        bias_attr: index.bias_attr.clone(),
        oracle_id: index.oracle_id.clone(),
        targets,
        seed: calibration.provenance.seed,
    })
}

/// Hidden layout of a patch model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PatchArch {
    pub hidden: Vec<usize>,
    pub activation: Activation,
}

impl Default for PatchArch {
    fn default() -> Self {
        Self {
            hidden: vec![16],
            activation: Activation::Relu,
        }
    }
}

impl PatchArch {
    /// One hidden layer at half the deployed model's first hidden width.
    pub fn default_for(deployed_hidden: usize) -> Self {
        Self {
            hidden: vec![(deployed_hidden / 2).max(1)],
            ..Self::default()
        }
    }
}

/// Fits a softmax patch to the distilled targets. The loss in `config` is
/// replaced by the soft-target KL objective; `config.seed` drives both the
/// initialization and batch order.
pub fn train_patch(
    calibration: &Dataset,
    targets: &DistilledTargets,
    config: &TrainConfig,
    arch: &PatchArch,
) -> Result<MlpModel> {
    if targets.len() != calibration.len() {
        return Err(Error::shape(calibration.len(), targets.len()));
    }
    let schema = calibration.schema();
    if let Some(t) = targets.targets.iter().find(|t| t.len() != schema.num_classes) {
        return Err(Error::shape(schema.num_classes, t.len()));
    }
    let mut dims = vec![schema.feature_dim];
    dims.extend(&arch.hidden);
    dims.push(schema.num_classes);
    let init = MlpModel::new(&dims, arch.activation, OutputMode::Softmax, config.seed)?;
    let config = TrainConfig {
        loss: LossKind::SoftTargetKl,
        ..config.clone()
    };
    let mut model = nnet::train(
        &init,
        &calibration.features(),
        &Targets::Soft(targets.targets.clone()),
        &config,
    )?
    .model;
    model.metadata.role = Some(ModelRole::Patch);
    model.metadata.bias_attr = Some(targets.bias_attr.clone());
    model.metadata.trained_on = calibration.provenance.source.clone();
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{BiasAttr, Example, Provenance, SyntheticSpec, TaskSchema, Variant};
    use crate::nnet::Optimizer;

    fn schema(k: usize, card: usize, dim: usize) -> TaskSchema {
        TaskSchema::new(
            k,
            vec![BiasAttr {
                name: "race".into(),
                cardinality: card,
            }],
            dim,
        )
        .unwrap()
    }

    fn dataset(rows: &[(f64, usize, usize)]) -> Dataset {
        let examples = rows
            .iter()
            .map(|&(f, y, b)| Example {
                features: vec![f],
                target: y,
                bias: vec![b],
            })
            .collect();
        Dataset::new(schema(2, 2, 1), examples, Provenance::default()).unwrap()
    }

    /// One-input softmax model with logits `[0, w * x]`.
    fn linear_1d(w: f64) -> MlpModel {
        let mut m = MlpModel::zeros(&[1, 2], &[], OutputMode::Softmax, &[2]).unwrap();
        m.weights_mut(0).copy_from_slice(&[0.0, w]);
        m
    }

    #[test]
    fn two_class_single_contrast() {
        // Oracle outputs [0.9, 0.1] on x and [0.2, 0.8] on the contrast example.
        let w = (0.1f64 / 0.9).ln();
        let w2 = (0.8f64 / 0.2).ln();
        let ds = dataset(&[(1.0, 0, 0), (w2 / w, 1, 0), (1.0, 0, 1), (w2 / w, 1, 1)]);
        let oracle = OracleHandle::local(linear_1d(w));
        let index = build_contrast_index(&ds, &oracle, "race").unwrap();
        assert_eq!(index.cell(0, 0).unwrap(), &[0]);
        let out = distill_targets(&ds, &index).unwrap();
        let expected = [0.18f64.sqrt(), 0.08f64.sqrt()];
        let z = expected[0] + expected[1];
        for (a, e) in out.targets[0].as_slice().iter().zip(expected) {
            assert!((a - e / z).abs() < 1e-12, "{:?}", out.targets[0]);
        }
        assert!((out.targets[0].as_slice()[0] - 0.6).abs() < 1e-12);
    }

    #[test]
    fn cells_and_means() {
        let ds = dataset(&[
            (0.1, 0, 0),
            (0.2, 0, 0),
            (0.3, 0, 1),
            (0.4, 0, 1),
            (0.5, 1, 0),
            (0.6, 1, 0),
            (0.7, 1, 1),
            (0.8, 1, 1),
        ]);
        let oracle = OracleHandle::local(linear_1d(2.0));
        let index = build_contrast_index(&ds, &oracle, "race").unwrap();
        for (y, b) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
            let members = index.cell(y, b).unwrap();
            assert_eq!(members.len(), 2);
            let want: Vec<f64> = (0..2)
                .map(|c| {
                    members
                        .iter()
                        .map(|&i| {
                            oracle.query_batch(&[ds.examples()[i].features.clone()]).unwrap()[0].as_slice()[c].ln()
                        })
                        .sum::<f64>()
                        / 2.0
                })
                .collect();
            for (a, e) in index.cell_mean_log(y, b).unwrap().iter().zip(want) {
                assert!((a - e).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn missing_cell_is_named() {
        let ds = dataset(&[(0.1, 0, 0), (0.3, 0, 1), (0.7, 1, 1)]);
        let oracle = OracleHandle::local(linear_1d(1.0));
        match build_contrast_index(&ds, &oracle, "race") {
            Err(Error::MissingCells(cells)) => assert_eq!(cells, vec!["(target=1, bias=0)".to_string()]),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn constant_oracle_is_reproduced() {
        let ds = dataset(&[(0.1, 0, 0), (0.3, 0, 1), (0.5, 1, 0), (0.7, 1, 1), (0.9, 1, 1)]);
        let mut m = linear_1d(0.0);
        m.biases_mut(0).copy_from_slice(&[0.3, -0.4]);
        let c = m.forward_probs(&[0.0]).unwrap();
        let oracle = OracleHandle::local(m);
        let index = build_contrast_index(&ds, &oracle, "race").unwrap();
        for t in distill_targets(&ds, &index).unwrap().targets {
            for (a, e) in t.as_slice().iter().zip(c.as_slice()) {
                assert!((a - e).abs() < 1e-12);
            }
        }
    }

    fn linear_oracle(dim: usize, k: usize, seed: u64) -> MlpModel {
        MlpModel::new(&[dim, k], Activation::Relu, OutputMode::Softmax, seed).unwrap()
    }

    #[test]
    fn linear_oracle_matches_mean_feature_vector() {
        let ds = SyntheticSpec {
            variant: Variant::Multiclass,
            n: 400,
            num_classes: 3,
            feature_dim: 6,
            seed: 5,
            ..SyntheticSpec::default()
        }
        .generate()
        .unwrap();
        let model = linear_oracle(6, 3, 11);
        let oracle = OracleHandle::local(model.clone());
        let index = build_contrast_index(&ds, &oracle, "color").unwrap();
        let out = distill_targets(&ds, &index).unwrap();
        for (i, ex) in ds.examples().iter().enumerate() {
            let b = ex.bias[0];
            let mut mean = ex.features.clone();
            for other in (0..3).filter(|&c| c != ex.target) {
                let cell = index.cell(other, b).unwrap();
                for &j in cell {
                    for (m, f) in mean.iter_mut().zip(&ds.examples()[j].features) {
                        *m += f / cell.len() as f64;
                    }
                }
            }
            mean.iter_mut().for_each(|m| *m /= 3.0);
            let want = model.forward_probs(&mean).unwrap();
            for (a, e) in out.targets[i].as_slice().iter().zip(want.as_slice()) {
                assert!((a - e).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn argmax_ignores_the_scale_factor() {
        let ds = SyntheticSpec {
            n: 300,
            feature_dim: 5,
            seed: 2,
            ..SyntheticSpec::default()
        }
        .generate()
        .unwrap();
        let model = MlpModel::new(&[5, 8, 2], Activation::Tanh, OutputMode::Softmax, 3).unwrap();
        let index = build_contrast_index(&ds, &OracleHandle::local(model), "bias").unwrap();
        let targets = distill_targets(&ds, &index).unwrap();
        for (i, ex) in ds.examples().iter().enumerate() {
            let sum = index.contrast_sum(i, ex.target, ex.bias[0]);
            let unscaled = softmax_to_prob(&sum).unwrap();
            let doubled: Vec<f64> = sum.iter().map(|s| s * 2.0).collect();
            assert_eq!(unscaled.argmax(), targets.targets[i].argmax());
            assert_eq!(softmax_to_prob(&doubled).unwrap().argmax(), targets.targets[i].argmax());
        }
    }

    #[test]
    fn bias_groups_tighten_as_noise_drops() {
        let spread = |noise: f64| {
            let ds = SyntheticSpec {
                n: 800,
                feature_dim: 8,
                noise_std: noise,
                seed: 9,
                ..SyntheticSpec::default()
            }
            .generate()
            .unwrap();
            let index = build_contrast_index(&ds, &OracleHandle::local(linear_oracle(8, 2, 1)), "bias").unwrap();
            let targets = distill_targets(&ds, &index).unwrap();
            let mut worst = 0.0f64;
            for b in 0..2 {
                let group: Vec<&ProbVector> = ds
                    .examples()
                    .iter()
                    .zip(&targets.targets)
                    .filter(|(e, _)| e.bias[0] == b)
                    .map(|(_, t)| t)
                    .collect();
                for c in 0..2 {
                    let vals = group.iter().map(|t| t.as_slice()[c]);
                    let lo = vals.clone().fold(f64::INFINITY, f64::min);
                    let hi = vals.fold(f64::NEG_INFINITY, f64::max);
                    worst = worst.max(hi - lo);
                }
            }
            worst
        };
        let s = [spread(0.05), spread(0.3), spread(1.0)];
        assert!(s[0] < s[1] && s[1] < s[2], "{s:?}");
        assert!(s[0] < 0.1, "{s:?}");
    }

    #[test]
    fn multi_bias_indices_are_independent() {
        let ds = SyntheticSpec {
            variant: Variant::TwoBias,
            n: 600,
            alpha: 0.5,
            feature_dim: 8,
            seed: 4,
            ..SyntheticSpec::default()
        }
        .generate()
        .unwrap();
        let oracle = OracleHandle::local(linear_oracle(8, 2, 2));
        let attrs = vec!["background".to_string(), "co_object".to_string()];
        let both = build_contrast_indices(&ds, &oracle, &attrs).unwrap();
        for (index, attr) in both.iter().zip(&attrs) {
            let alone = build_contrast_index(&ds, &oracle, attr).unwrap();
            let a = ds.schema().attr_index(attr).unwrap();
            for ((y, b), members) in group_index(&ds, attr).unwrap() {
                assert_eq!(index.cell(y, b).unwrap(), members.as_slice());
                assert!(members.iter().all(|&i| ds.examples()[i].bias[a] == b));
                assert_eq!(index.cell_mean_log(y, b), alone.cell_mean_log(y, b));
            }
        }
        assert_ne!(both[0].cell(0, 0).unwrap(), both[1].cell(0, 0).unwrap());
    }

    fn patch_config(epochs: usize) -> TrainConfig {
        TrainConfig {
            learning_rate: 0.05,
            epochs,
            batch_size: 32,
            seed: 8,
            optimizer: Optimizer::default(),
            ..TrainConfig::default()
        }
    }

    fn grouped_targets() -> (Dataset, DistilledTargets, [ProbVector; 2]) {
        let ds = SyntheticSpec {
            n: 400,
            feature_dim: 6,
            bias_signal: 2.0,
            noise_std: 0.3,
            seed: 1,
            ..SyntheticSpec::default()
        }
        .generate()
        .unwrap();
        let groups = [
            ProbVector::new(vec![0.7, 0.3]).unwrap(),
            ProbVector::new(vec![0.15, 0.85]).unwrap(),
        ];
        let targets = DistilledTargets {
            bias_attr: "bias".into(),
            oracle_id: "fixture".into(),
            targets: ds.examples().iter().map(|e| groups[e.bias[0]].clone()).collect(),
            seed: None,
        };
        (ds, targets, groups)
    }

    #[test]
    fn patch_converges_to_group_targets() {
        let (ds, targets, groups) = grouped_targets();
        let patch = train_patch(&ds, &targets, &patch_config(150), &PatchArch::default()).unwrap();
        assert_eq!(patch.num_classes(), 2);
        assert_eq!(patch.metadata.role, Some(ModelRole::Patch));
        for ex in ds.examples() {
            let out = patch.forward_probs(&ex.features).unwrap();
            for (a, e) in out.as_slice().iter().zip(groups[ex.bias[0]].as_slice()) {
                assert!((a - e).abs() < 0.02, "{out:?}");
            }
        }
    }

    #[test]
    fn zero_epochs_and_determinism() {
        let (ds, targets, _) = grouped_targets();
        let arch = PatchArch::default_for(32);
        assert_eq!(arch.hidden, vec![16]);
        let untrained = train_patch(&ds, &targets, &patch_config(0), &arch).unwrap();
        let init = MlpModel::new(&[6, 16, 2], Activation::Relu, OutputMode::Softmax, 8).unwrap();
        assert_eq!(untrained.weights(0), init.weights(0));
        assert_eq!(untrained.weights(1), init.weights(1));
        let a = train_patch(&ds, &targets, &patch_config(3), &arch).unwrap();
        let b = train_patch(&ds, &targets, &patch_config(3), &arch).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn misaligned_targets_rejected() {
        let (ds, mut targets, _) = grouped_targets();
        targets.targets.pop();
        assert!(train_patch(&ds, &targets, &patch_config(1), &PatchArch::default()).is_err());
    }

    #[test]
    fn sidecar_round_trip() {
        let (_, targets, _) = grouped_targets();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("targets.json");
        targets.save(&path).unwrap();
        assert_eq!(DistilledTargets::load(&path).unwrap(), targets);
        let doc: serde_json::Value = serde_json::from_slice(&std::fs::read(&path).unwrap()).unwrap();
        for key in ["bias_attr", "oracle_id", "targets", "seed"] {
            assert!(doc.get(key).is_some(), "{key}");
        }
    }
}
