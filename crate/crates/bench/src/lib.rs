//! Shared fixtures for the criterion benchmarks.

use eraser_core::dataset::split_calibration;
use eraser_core::nnet::{Activation, MlpModel, OutputMode};
use eraser_core::{Dataset, ProbVector, SyntheticSpec};

/// Deterministic probability vector of length `k`, varied by `i`.
pub fn probs(k: usize, i: usize) -> ProbVector {
    let raw = (0..k).map(|c| 1.0 + ((i * 31 + c * 17) % 13) as f64).collect();
    ProbVector::from_unnormalized(raw).expect("positive scores")
}

/// Default synthetic training set at size `n`, plus its calibration split.
pub fn data(n: usize) -> (Dataset, Dataset) {
    let ds = SyntheticSpec {
        n,
        seed: 7,
        ..SyntheticSpec::default()
    }
    .generate()
    .expect("valid spec");
    split_calibration(&ds, 1.0 / 6.0, 7).expect("valid fraction")
}

pub fn deployed(input_dim: usize) -> MlpModel {
    MlpModel::new(&[input_dim, 32, 2], Activation::Relu, OutputMode::Softmax, 3).expect("valid dims")
}
