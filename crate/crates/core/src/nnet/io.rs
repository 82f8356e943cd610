//! Versioned JSON model documents.
//!
//! Floats are written in shortest round-trip decimal form, so
//! save -> load -> save is byte-identical.

use serde::{Deserialize, Serialize};

use super::{validate_architecture, Activation, MlpModel, ModelMetadata, OutputMode};
use crate::error::{Error, Result};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct ModelDocument {
    format_version: u32,
    layer_dims: Vec<usize>,
    activations: Vec<Activation>,
    output_mode: OutputMode,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    heads: Option<Vec<usize>>,
    weights: Vec<Vec<Vec<f64>>>,
    biases: Vec<Vec<f64>>,
    #[serde(default)]
    metadata: ModelMetadata,
}

impl MlpModel {
    pub fn to_json_bytes(&self) -> Vec<u8> {
        let weights = self
            .weights
            .iter()
            .enumerate()
            .map(|(l, w)| w.chunks(self.layer_dims[l]).map(<[f64]>::to_vec).collect())
            .collect();
        let single_head = self.heads.len() == 1;
        let doc = ModelDocument {
            format_version: FORMAT_VERSION,
            layer_dims: self.layer_dims.clone(),
            activations: self.activations.clone(),
            output_mode: self.output_mode,
            heads: (!single_head).then(|| self.heads.clone()),
            weights,
            biases: self.biases.clone(),
            metadata: self.metadata.clone(),
        };
        let mut bytes = serde_json::to_vec(&doc).expect("model document serializes");
        bytes.push(b'\n');
        bytes
    }

    pub fn from_json_bytes(bytes: &[u8]) -> Result<Self> {
        let doc: ModelDocument =
            serde_json::from_slice(bytes).map_err(|e| Error::Load(format!("malformed document: {e}")))?;
        if doc.format_version != FORMAT_VERSION {
            return Err(Error::Load(format!(
                "unsupported format_version {} (expected {FORMAT_VERSION})",
                doc.format_version
            )));
        }
        let output = *doc.layer_dims.last().unwrap_or(&0);
        let heads = doc.heads.unwrap_or_else(|| vec![output]);
        validate_architecture(&doc.layer_dims, &doc.activations, doc.output_mode, &heads)
            .map_err(|e| Error::Load(e.to_string()))?;

        let layers = doc.layer_dims.len() - 1;
        if doc.weights.len() != layers || doc.biases.len() != layers {
            return Err(Error::Load(format!(
                "expected {layers} weight and bias blocks, found {} and {}",
                doc.weights.len(),
                doc.biases.len()
            )));
        }
        let mut weights = Vec::with_capacity(layers);
        for (l, rows) in doc.weights.into_iter().enumerate() {
            let (fan_in, fan_out) = (doc.layer_dims[l], doc.layer_dims[l + 1]);
            if rows.len() != fan_out {
                return Err(Error::Load(format!(
                    "layer {l}: declared {fan_out} rows, found {}",
                    rows.len()
                )));
            }
            if let Some((r, row)) = rows.iter().enumerate().find(|(_, row)| row.len() != fan_in) {
                return Err(Error::Load(format!(
                    "layer {l} row {r}: declared dim {fan_in}, found {} weights",
                    row.len()
                )));
            }
            weights.push(rows.concat());
        }
        for (l, b) in doc.biases.iter().enumerate() {
            if b.len() != doc.layer_dims[l + 1] {
                return Err(Error::Load(format!(
                    "layer {l}: declared {} biases, found {}",
                    doc.layer_dims[l + 1],
                    b.len()
                )));
            }
        }
        if weights.iter().chain(&doc.biases).flatten().any(|v| !v.is_finite()) {
            return Err(Error::Load("non-finite parameter".into()));
        }
        Ok(Self {
            layer_dims: doc.layer_dims,
            activations: doc.activations,
            output_mode: doc.output_mode,
            heads,
            weights,
            biases: doc.biases,
            metadata: doc.metadata,
        })
    }

    pub fn save(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        std::fs::write(path, self.to_json_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::Load(format!("cannot read {}: {e}", path.display())))?;
        Self::from_json_bytes(&bytes)
    }
}
