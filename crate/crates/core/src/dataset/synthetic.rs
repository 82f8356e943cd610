//! Synthetic data with a controllable spurious correlation.
//!
//! Each bias attribute takes its "aligned" value `y mod cardinality` with
//! probability `1 / (1 + alpha)` and is otherwise uniform over the remaining
//! values, so `alpha` is the minority-to-majority ratio of group sizes.
//! Features are a sum of one target prototype, one prototype per bias
//! attribute and isotropic gaussian noise. Prototypes are orthonormal, which
//! keeps target and bias signals in separate linear channels.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{BiasAttr, Dataset, Example, Provenance, TaskSchema};
use crate::error::{Error, Result};

const TRAIN_STREAM: u64 = 1;
/// Stream used for group-balanced evaluation sets.
pub const EVAL_STREAM: u64 = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Two classes, one binary bias attribute.
    BinaryBias,
    /// `num_classes` classes, one bias attribute with the same cardinality.
    Multiclass,
    /// Two classes, two binary bias attributes, conditionally independent given the target.
    TwoBias,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticSpec {
    pub variant: Variant,
    pub n: usize,
    pub alpha: f64,
    /// Only consulted by [`Variant::Multiclass`].
    pub num_classes: usize,
    pub feature_dim: usize,
    pub target_signal: f64,
    pub bias_signal: f64,
    pub noise_std: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            variant: Variant::BinaryBias,
            n: 12_000,
            alpha: 0.05,
            num_classes: 4,
            feature_dim: 16,
            target_signal: 1.0,
            bias_signal: 6.0,
            noise_std: 1.5,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn schema(&self) -> Result<TaskSchema> {
        let binary = |name: &str| BiasAttr {
            name: name.into(),
            cardinality: 2,
        };
        let (k, attrs) = match self.variant {
            Variant::BinaryBias => (2, vec![binary("bias")]),
            Variant::Multiclass => (
                self.num_classes,
                vec![BiasAttr {
                    name: "color".into(),
                    cardinality: self.num_classes,
                }],
            ),
            Variant::TwoBias => (2, vec![binary("background"), binary("co_object")]),
        };
        TaskSchema::new(k, attrs, self.feature_dim)
    }

    fn validate(&self, schema: &TaskSchema) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha <= 1.0) {
            return Err(Error::Generation(format!("alpha {} outside (0, 1]", self.alpha)));
        }
        if !(self.noise_std > 0.0 && self.noise_std.is_finite()) {
            return Err(Error::Generation(format!(
                "noise_std {} must be positive",
                self.noise_std
            )));
        }
        if !(self.target_signal.is_finite() && self.bias_signal.is_finite()) {
            return Err(Error::Generation("signal strengths must be finite".into()));
        }
        let prototypes = schema.num_classes + schema.bias_attrs.iter().map(|a| a.cardinality).sum::<usize>();
        if self.feature_dim < prototypes {
            return Err(Error::Generation(format!(
                "feature_dim {} cannot hold {prototypes} orthogonal prototypes",
                self.feature_dim
            )));
        }
        Ok(())
    }
}

fn cell_count(schema: &TaskSchema) -> usize {
    schema.num_classes * schema.bias_attrs.iter().map(|a| a.cardinality).product::<usize>()
}

/// Fixed prototypes for one [`SyntheticSpec`]; samples drawn from it share them.
#[derive(Debug, Clone)]
pub struct Generator {
    spec: SyntheticSpec,
    schema: TaskSchema,
    target_protos: Vec<Vec<f64>>,
    bias_protos: Vec<Vec<Vec<f64>>>,
}

impl Generator {
    pub fn new(spec: &SyntheticSpec) -> Result<Self> {
        let schema = spec.schema().map_err(|e| Error::Generation(e.to_string()))?;
        spec.validate(&schema)?;
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let total = schema.num_classes + schema.bias_attrs.iter().map(|a| a.cardinality).sum::<usize>();
        let mut basis = orthonormal_basis(total, spec.feature_dim, &mut rng).into_iter();
        let target_protos = basis.by_ref().take(schema.num_classes).collect();
        let bias_protos = schema
            .bias_attrs
            .iter()
            .map(|a| basis.by_ref().take(a.cardinality).collect())
            .collect();
        Ok(Self {
            spec: spec.clone(),
            schema,
            target_protos,
            bias_protos,
        })
    }

    pub fn schema(&self) -> &TaskSchema {
        &self.schema
    }

    pub fn target_prototype(&self, y: usize) -> &[f64] {
        &self.target_protos[y]
    }

    pub fn bias_prototype(&self, attr: usize, value: usize) -> &[f64] {
        &self.bias_protos[attr][value]
    }

    /// `n` examples at skew `alpha` from the given random stream.
    pub fn sample(&self, n: usize, alpha: f64, stream: u64) -> Result<Dataset> {
        if !(alpha > 0.0 && alpha <= 1.0) {
            return Err(Error::Generation(format!("alpha {alpha} outside (0, 1]")));
        }
        let cells = cell_count(&self.schema);
        if n < 4 * cells {
            return Err(Error::Generation(format!("n = {n} is below 4 x {cells} group cells")));
        }
        let mut rng = self.stream_rng(stream);
        let aligned = 1.0 / (1.0 + alpha);
        let k = self.schema.num_classes;
        let mut examples = Vec::with_capacity(n);
        for _ in 0..n {
            let target = rng.random_range(0..k);
            let bias = self
                .schema
                .bias_attrs
                .iter()
                .map(|attr| {
                    let card = attr.cardinality;
                    let majority = target % card;
                    if rng.random_bool(aligned) {
                        majority
                    } else {
                        let offset = rng.random_range(1..card);
                        (majority + offset) % card
                    }
                })
                .collect::<Vec<_>>();
            examples.push(self.example(target, bias, &mut rng));
        }
        let dataset = self.wrap(examples, Some(alpha))?;
        self.check_populated(&dataset)?;
        Ok(dataset)
    }

    /// Exactly `per_cell` examples in every joint `(target, bias...)` cell,
    /// in lexicographic cell order.
    pub fn sample_balanced(&self, per_cell: usize, stream: u64) -> Result<Dataset> {
        if per_cell == 0 {
            return Err(Error::Generation("per_cell must be positive".into()));
        }
        let mut rng = self.stream_rng(stream);
        let mut examples = Vec::with_capacity(per_cell * cell_count(&self.schema));
        for cell in joint_cells(&self.schema) {
            for _ in 0..per_cell {
                examples.push(self.example(cell[0], cell[1..].to_vec(), &mut rng));
            }
        }
        self.wrap(examples, None)
    }

    fn stream_rng(&self, stream: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.spec.seed);
        rng.set_stream(stream);
        rng
    }

    fn example(&self, target: usize, bias: Vec<usize>, rng: &mut ChaCha8Rng) -> Example {
        let features = (0..self.spec.feature_dim)
            .map(|d| {
                let mut v = self.spec.target_signal * self.target_protos[target][d];
                for (attr, &b) in bias.iter().enumerate() {
                    v += self.spec.bias_signal * self.bias_protos[attr][b][d];
                }
                let noise: f64 = StandardNormal.sample(rng);
                v + self.spec.noise_std * noise
            })
            .collect();
        Example { features, target, bias }
    }

    fn wrap(&self, examples: Vec<Example>, alpha: Option<f64>) -> Result<Dataset> {
        let provenance = Provenance {
            seed: Some(self.spec.seed),
            source: Some("synthetic".into()),
            alpha,
            variant: Some(self.spec.variant),
        };
        Dataset::new(self.schema.clone(), examples, provenance)
    }

    fn check_populated(&self, dataset: &Dataset) -> Result<()> {
        let mut seen = std::collections::BTreeSet::new();
        for ex in dataset.examples() {
            let mut key = vec![ex.target];
            key.extend(&ex.bias);
            seen.insert(key);
        }
        if let Some(missing) = joint_cells(&self.schema).into_iter().find(|c| !seen.contains(c)) {
            return Err(Error::Generation(format!("group cell {missing:?} is empty")));
        }
        Ok(())
    }
}

/// All `[target, bias_0, bias_1, ...]` combinations in lexicographic order.
pub(crate) fn joint_cells(schema: &TaskSchema) -> Vec<Vec<usize>> {
    let mut cells = vec![vec![]];
    let dims = std::iter::once(schema.num_classes).chain(schema.bias_attrs.iter().map(|a| a.cardinality));
    for d in dims {
        cells = cells
            .into_iter()
            .flat_map(|c| {
                (0..d).map(move |v| {
                    let mut next = c.clone();
                    next.push(v);
                    next
                })
            })
            .collect();
    }
    cells
}

fn orthonormal_basis(count: usize, dim: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(count);
    while basis.len() < count {
        let mut v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut *rng)).collect();
        for b in &basis {
            let proj: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
            v.iter_mut().zip(b).for_each(|(x, y)| *x -= proj * y);
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-6 {
            basis.push(v.into_iter().map(|x| x / norm).collect());
        }
    }
    basis
}

impl SyntheticSpec {
    /// Draws `n` examples at `alpha` with fresh prototypes for this spec.
    pub fn generate(&self) -> Result<Dataset> {
        Generator::new(self)?.sample(self.n, self.alpha, TRAIN_STREAM)
    }
}
