//! Labeled examples with target and bias attributes.

mod csv_io;
mod synthetic;

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use csv_io::{load_csv, save_csv, SchemaHints};
pub use synthetic::{Generator, SyntheticSpec, Variant, EVAL_STREAM};

/// Default calibration share of the available training data.
pub const DEFAULT_CALIBRATION_FRACTION: f64 = 1.0 / 6.0;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BiasAttr {
    pub name: String,
    pub cardinality: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskSchema {
    pub num_classes: usize,
    pub bias_attrs: Vec<BiasAttr>,
    pub feature_dim: usize,
}

impl TaskSchema {
    pub fn new(num_classes: usize, bias_attrs: Vec<BiasAttr>, feature_dim: usize) -> Result<Self> {
        let schema = Self {
            num_classes,
            bias_attrs,
            feature_dim,
        };
        schema.validate()?;
        Ok(schema)
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::Schema(format!(
                "need at least 2 classes, got {}",
                self.num_classes
            )));
        }
        if self.feature_dim == 0 {
            return Err(Error::Schema("feature_dim must be positive".into()));
        }
        for (i, attr) in self.bias_attrs.iter().enumerate() {
            if attr.cardinality < 2 {
                return Err(Error::Schema(format!(
                    "bias attribute '{}' has cardinality {} (< 2)",
                    attr.name, attr.cardinality
                )));
            }
            if self.bias_attrs[..i].iter().any(|a| a.name == attr.name) {
                return Err(Error::Schema(format!("duplicate bias attribute '{}'", attr.name)));
            }
        }
        Ok(())
    }

    pub fn attr_index(&self, name: &str) -> Result<usize> {
        self.bias_attrs
            .iter()
            .position(|a| a.name == name)
            .ok_or_else(|| Error::Schema(format!("unknown bias attribute '{name}'")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Example {
    pub features: Vec<f64>,
    pub target: usize,
    pub bias: Vec<usize>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alpha: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub variant: Option<Variant>,
}

/// An ordered collection of examples conforming to one schema. Order is
/// part of a dataset's identity: splits and contrast cells refer to indices.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    schema: TaskSchema,
    examples: Vec<Example>,
    pub provenance: Provenance,
}

impl Dataset {
    pub fn new(schema: TaskSchema, examples: Vec<Example>, provenance: Provenance) -> Result<Self> {
        schema.validate()?;
        for (i, ex) in examples.iter().enumerate() {
            check_example(&schema, ex).map_err(|m| Error::Schema(format!("example {i}: {m}")))?;
        }
        Ok(Self {
            schema,
            examples,
            provenance,
        })
    }

    pub fn schema(&self) -> &TaskSchema {
        &self.schema
    }

    pub fn examples(&self) -> &[Example] {
        &self.examples
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn features(&self) -> Vec<&[f64]> {
        self.examples.iter().map(|e| e.features.as_slice()).collect()
    }

    pub fn targets(&self) -> Vec<usize> {
        self.examples.iter().map(|e| e.target).collect()
    }

    pub fn bias_labels(&self, attr: usize) -> Vec<usize> {
        self.examples.iter().map(|e| e.bias[attr]).collect()
    }

    /// A new dataset holding the examples at `indices`, in that order.
    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            schema: self.schema.clone(),
            examples: indices.iter().map(|&i| self.examples[i].clone()).collect(),
            provenance: self.provenance.clone(),
        }
    }

    /// Metadata document written next to generated CSV files.
    pub fn sidecar(&self) -> serde_json::Value {
        serde_json::json!({
            "seed": self.provenance.seed,
            "alpha": self.provenance.alpha,
            "variant": self.provenance.variant,
            "schema": self.schema,
        })
    }
}

fn check_example(schema: &TaskSchema, ex: &Example) -> std::result::Result<(), String> {
    if ex.features.len() != schema.feature_dim {
        return Err(format!(
            "expected {} features, found {}",
            schema.feature_dim,
            ex.features.len()
        ));
    }
    if ex.target >= schema.num_classes {
        return Err(format!("target {} >= num_classes {}", ex.target, schema.num_classes));
    }
    if ex.bias.len() != schema.bias_attrs.len() {
        return Err(format!(
            "expected {} bias labels, found {}",
            schema.bias_attrs.len(),
            ex.bias.len()
        ));
    }
    for (b, attr) in ex.bias.iter().zip(&schema.bias_attrs) {
        if *b >= attr.cardinality {
            return Err(format!(
                "bias '{}' value {b} >= cardinality {}",
                attr.name, attr.cardinality
            ));
        }
    }
    Ok(())
}

/// Splits a dataset into a deployment-training part and a calibration part.
///
/// Indices are shuffled with a generator seeded by `seed`; the first
/// `floor(n * (1 - fraction))` go to deployment training and the rest to
/// calibration. Each side keeps the original relative order.
pub fn split_calibration(dataset: &Dataset, fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    let (train_idx, calib_idx) = split_indices(dataset.len(), fraction, seed)?;
    Ok((dataset.subset(&train_idx), dataset.subset(&calib_idx)))
}

pub fn split_indices(n: usize, fraction: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::Split(format!("fraction {fraction} outside (0, 1)")));
    }
    // Guard against 1 - 1/6 landing just below an integer boundary.
    let train_len = ((n as f64) * (1.0 - fraction) + 1e-9).floor() as usize;
    if train_len == 0 || train_len >= n {
        return Err(Error::Split(format!(
            "fraction {fraction} of {n} examples leaves an empty side"
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut train = order[..train_len].to_vec();
    let mut calib = order[train_len..].to_vec();
    train.sort_unstable();
    calib.sort_unstable();
    Ok((train, calib))
}

/// Example indices for every `(target, bias value)` cell of one attribute.
/// Every cell appears in the map, empty or not.
pub fn group_index(dataset: &Dataset, bias_attr: &str) -> Result<BTreeMap<(usize, usize), Vec<usize>>> {
    let attr = dataset.schema.attr_index(bias_attr)?;
    let cardinality = dataset.schema.bias_attrs[attr].cardinality;
    let mut cells: BTreeMap<(usize, usize), Vec<usize>> = (0..dataset.schema.num_classes)
        .flat_map(|y| (0..cardinality).map(move |b| ((y, b), Vec::new())))
        .collect();
    for (i, ex) in dataset.examples.iter().enumerate() {
        cells
            .get_mut(&(ex.target, ex.bias[attr]))
            .expect("validated labels")
            .push(i);
    }
    Ok(cells)
}
