//! Inference-time debiasing of black-box classifiers.
//!
//! A deployed model `M` is only reachable through its output probabilities.
//! From a small labeled calibration set, [`distill`] recovers the part of
//! `M`'s decision explained by a bias attribute alone and stores it in a
//! patch model `G`. At inference time the eraser removes that rule:
//! `softmax(log M(x) - log G(x))`.
//!
//! ```
//! use eraser_core::{erase, ProbVector};
//!
//! let model = ProbVector::new(vec![0.8, 0.2]).unwrap();
//! let rule = ProbVector::new(vec![0.6, 0.4]).unwrap();
//! let fair = erase(&model, &rule).unwrap();
//! assert!((fair.as_slice()[0] - 8.0 / 11.0).abs() < 1e-12);
//! ```

pub mod dataset;
pub mod distill;
pub mod error;
pub mod metrics;
pub mod nnet;
pub mod oracle;
pub mod pipeline;
pub mod prob;
pub mod proxy;
pub mod wire;

pub use dataset::{BiasAttr, Dataset, Example, SyntheticSpec, TaskSchema, Variant};
pub use distill::{build_contrast_index, distill_targets, train_patch, ContrastIndex, DistilledTargets, PatchArch};
pub use error::{Error, Result};
pub use metrics::{compare, evaluate, DeltaReport, MetricsReport, PredictionSet};
pub use nnet::{Activation, MlpModel, OutputMode, TrainConfig};
pub use oracle::{NormalizePolicy, OracleHandle, RemoteConfig};
pub use prob::{erase, erase_multi, inject_prior, softmax, LogitVector, ProbVector};
