//! End-to-end workflows behind the `eraser` command line.
//!
//! Every stage reads its inputs from disk, writes its artifacts under the
//! configured output directory and returns the JSON summary it stored as
//! `report_{stage}.json`. Artifacts record seeds and SHA-256 digests of the
//! files they were built from and carry no timestamps, so rerunning a stage
//! with the same inputs reproduces them byte for byte.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::json;
use sha2::{Digest, Sha256};

use crate::dataset::{
    load_csv, save_csv, split_calibration, Dataset, Generator, SchemaHints, SyntheticSpec,
    DEFAULT_CALIBRATION_FRACTION, EVAL_STREAM,
};
use crate::distill::{build_contrast_indices, distill_targets, train_patch, DistilledTargets, PatchArch};
use crate::error::{Error, Result};
use crate::metrics::{compare, evaluate, render_table, DeltaReport, MetricsReport, PredictionSet};
use crate::nnet::{self, Activation, LossKind, MlpModel, ModelRole, OutputMode, Targets, TrainConfig};
use crate::oracle::{NormalizePolicy, OracleHandle, RemoteConfig};
use crate::prob::{erase_multi, ProbVector};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DeployedConfig {
    pub hidden: Vec<usize>,
    pub activation: Activation,
    pub output_mode: OutputMode,
    /// Train a second head on the first bias attribute.
    pub multitask: bool,
    pub train: TrainConfig,
}

impl Default for DeployedConfig {
    fn default() -> Self {
        Self {
            hidden: vec![32],
            activation: Activation::Relu,
            output_mode: OutputMode::Softmax,
            multitask: false,
            train: TrainConfig {
                loss: LossKind::HardLabelCe,
                learning_rate: 1e-3,
                epochs: 20,
                batch_size: 64,
                ..TrainConfig::default()
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PatchConfig {
    /// Defaults to [`PatchArch::default_for`] the deployed hidden width.
    pub arch: Option<PatchArch>,
    pub train: TrainConfig,
}

impl Default for PatchConfig {
    fn default() -> Self {
        Self {
            arch: None,
            train: TrainConfig {
                loss: LossKind::SoftTargetKl,
                learning_rate: 1e-3,
                epochs: 100,
                batch_size: 64,
                ..TrainConfig::default()
            },
        }
    }
}

/// Where the deployed model is reached. A URL takes precedence over the
/// local model file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OracleTarget {
    pub url: Option<String>,
    pub model: Option<PathBuf>,
    pub normalize: NormalizePolicy,
    pub timeout_ms: u64,
    pub retries: u32,
    pub max_in_flight: usize,
}

impl Default for OracleTarget {
    fn default() -> Self {
        let remote = RemoteConfig::default();
        Self {
            url: None,
            model: None,
            normalize: NormalizePolicy::default(),
            timeout_ms: remote.timeout_ms,
            retries: remote.retries,
            max_in_flight: remote.max_in_flight,
        }
    }
}

/// Settings for the debiasing proxy started by `serve`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ServeConfig {
    pub listen: String,
    pub request_timeout_ms: u64,
    pub max_in_flight: usize,
    /// Serve the deployed model itself over the oracle protocol instead.
    pub oracle_only: bool,
}

impl Default for ServeConfig {
    fn default() -> Self {
        Self {
            listen: "127.0.0.1:8080".into(),
            request_timeout_ms: 10_000,
            max_in_flight: 64,
            oracle_only: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    /// Drives data generation, the calibration split and every training run.
    pub seed: u64,
    pub out: PathBuf,
    pub data: SyntheticSpec,
    /// Examples per joint group in the generated test set.
    pub eval_per_cell: usize,
    pub calibration_fraction: f64,
    /// Empty selects every bias attribute of the dataset.
    pub bias_attrs: Vec<String>,
    pub deployed: DeployedConfig,
    pub patch: PatchConfig,
    pub oracle: OracleTarget,
    pub train_csv: Option<PathBuf>,
    pub test_csv: Option<PathBuf>,
    /// Patch model files; `None` means one `patch_{attr}.json` per attribute.
    pub patches: Option<Vec<PathBuf>>,
    /// Input CSV for `erase`.
    pub input: Option<PathBuf>,
    pub serve: ServeConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out: PathBuf::from("out"),
            data: SyntheticSpec::default(),
            eval_per_cell: 500,
            calibration_fraction: DEFAULT_CALIBRATION_FRACTION,
            bias_attrs: Vec::new(),
            deployed: DeployedConfig::default(),
            patch: PatchConfig::default(),
            oracle: OracleTarget::default(),
            train_csv: None,
            test_csv: None,
            patches: None,
            input: None,
            serve: ServeConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        serde_json::from_slice(&bytes).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn train_csv(&self) -> PathBuf {
        self.train_csv.clone().unwrap_or_else(|| self.out.join("train.csv"))
    }

    pub fn test_csv(&self) -> PathBuf {
        self.test_csv.clone().unwrap_or_else(|| self.out.join("test.csv"))
    }

    pub fn deployed_model(&self) -> PathBuf {
        self.oracle
            .model
            .clone()
            .unwrap_or_else(|| self.out.join("deployed.json"))
    }

    pub fn patch_path(&self, attr: &str) -> PathBuf {
        self.out.join(format!("patch_{attr}.json"))
    }

    fn resolve_attrs(&self, dataset: &Dataset) -> Result<Vec<String>> {
        if self.bias_attrs.is_empty() {
            let all: Vec<String> = dataset.schema().bias_attrs.iter().map(|a| a.name.clone()).collect();
            if all.is_empty() {
                return Err(Error::Config("dataset has no bias attributes".into()));
            }
            return Ok(all);
        }
        for a in &self.bias_attrs {
            dataset.schema().attr_index(a)?;
        }
        Ok(self.bias_attrs.clone())
    }

    fn patch_arch(&self) -> PatchArch {
        self.patch
            .arch
            .clone()
            .unwrap_or_else(|| PatchArch::default_for(self.deployed.hidden.first().copied().unwrap_or(32)))
    }

    /// The oracle for the deployed model, remote when a URL is configured.
    pub fn oracle_handle(&self, k: usize) -> Result<OracleHandle> {
        match &self.oracle.url {
            Some(url) => {
                let remote = RemoteConfig {
                    base_url: url.clone(),
                    timeout_ms: self.oracle.timeout_ms,
                    retries: self.oracle.retries,
                    max_in_flight: self.oracle.max_in_flight,
                    ..RemoteConfig::default()
                };
                OracleHandle::remote(remote, k, self.oracle.normalize)
            }
            None => {
                let model = MlpModel::load(self.deployed_model())?;
                if model.num_classes() != k {
                    return Err(Error::shape(k, model.num_classes()));
                }
                Ok(OracleHandle::local(model))
            }
        }
    }
}

/// SHA-256 of a file, hex encoded.
pub fn file_digest(path: impl AsRef<Path>) -> Result<String> {
    Ok(hex::encode(Sha256::digest(std::fs::read(path)?)))
}

fn input_record(path: &Path) -> Result<serde_json::Value> {
    Ok(json!({ "path": path.display().to_string(), "sha256": file_digest(path)? }))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    std::fs::write(path, bytes)?;
    Ok(())
}

fn write_report(cfg: &RunConfig, stage: &str, value: &serde_json::Value) -> Result<()> {
    write_json(&cfg.out.join(format!("report_{stage}.json")), value)
}

fn prepare_out(cfg: &RunConfig) -> Result<()> {
    std::fs::create_dir_all(&cfg.out)?;
    Ok(())
}

fn load_dataset(path: &Path) -> Result<Dataset> {
    load_csv(path, &SchemaHints::default())
}

fn effective_spec(cfg: &RunConfig) -> SyntheticSpec {
    SyntheticSpec {
        seed: cfg.seed,
        ..cfg.data.clone()
    }
}

/// Training set at the configured skew plus a group-balanced test set from
/// the same generator.
pub fn generate_datasets(spec: &SyntheticSpec, eval_per_cell: usize) -> Result<(Dataset, Dataset)> {
    let generator = Generator::new(spec)?;
    let train = spec.generate()?;
    let test = generator.sample_balanced(eval_per_cell, EVAL_STREAM)?;
    Ok((train, test))
}

pub fn gen_data(cfg: &RunConfig) -> Result<serde_json::Value> {
    prepare_out(cfg)?;
    let spec = effective_spec(cfg);
    let (train, test) = generate_datasets(&spec, cfg.eval_per_cell)?;
    let (train_path, test_path) = (cfg.train_csv(), cfg.test_csv());
    save_csv(&train, &train_path)?;
    save_csv(&test, &test_path)?;
    write_json(&cfg.out.join("data.json"), &train.sidecar())?;
    let report = json!({
        "stage": "gen-data",
        "seed": cfg.seed,
        "spec": spec,
        "eval_per_cell": cfg.eval_per_cell,
        "outputs": { "train": input_record(&train_path)?, "test": input_record(&test_path)? },
        "sizes": { "train": train.len(), "test": test.len() },
    });
    write_report(cfg, "gen-data", &report)?;
    Ok(report)
}

/// Trains the deployed model on `train`; the returned model carries the seed.
pub fn train_deployed_model(train: &Dataset, deployed: &DeployedConfig, seed: u64) -> Result<MlpModel> {
    let schema = train.schema();
    let mut dims = vec![schema.feature_dim];
    dims.extend(&deployed.hidden);
    let out_dim = match deployed.output_mode {
        OutputMode::Softmax => schema.num_classes,
        OutputMode::Sigmoid if schema.num_classes == 2 => 1,
        OutputMode::Sigmoid => schema.num_classes,
    };
    let config = TrainConfig {
        seed,
        ..deployed.train.clone()
    };
    let features = train.features();
    let (init, targets, config) = if deployed.multitask {
        let attr = schema
            .bias_attrs
            .first()
            .ok_or_else(|| Error::Config("multitask training needs a bias attribute".into()))?;
        if deployed.output_mode != OutputMode::Softmax {
            return Err(Error::Config("multitask training requires softmax output".into()));
        }
        dims.push(schema.num_classes + attr.cardinality);
        let init = MlpModel::with_heads(
            &dims,
            deployed.activation,
            deployed.output_mode,
            &[schema.num_classes, attr.cardinality],
            seed,
        )?;
        let pairs = train.examples().iter().map(|e| (e.target, e.bias[0])).collect();
        let config = TrainConfig {
            loss: LossKind::MultitaskCe,
            ..config
        };
        (init, Targets::Multitask(pairs), config)
    } else {
        dims.push(out_dim);
        let init = MlpModel::new(&dims, deployed.activation, deployed.output_mode, seed)?;
        let config = TrainConfig {
            loss: LossKind::HardLabelCe,
            ..config
        };
        (init, Targets::Hard(train.targets()), config)
    };
    let mut model = nnet::train(&init, &features, &targets, &config)?.model;
    model.metadata.role = Some(ModelRole::Deployed);
    model.metadata.trained_on = train.provenance.source.clone();
    Ok(model)
}

pub fn train_deployed(cfg: &RunConfig) -> Result<serde_json::Value> {
    prepare_out(cfg)?;
    let train_path = cfg.train_csv();
    let data = load_dataset(&train_path)?;
    let (deploy_part, calibration) = split_calibration(&data, cfg.calibration_fraction, cfg.seed)?;
    let model = train_deployed_model(&deploy_part, &cfg.deployed, cfg.seed)?;
    let model_path = cfg.deployed_model();
    model.save(&model_path)?;
    let report = json!({
        "stage": "train-deployed",
        "seed": cfg.seed,
        "inputs": { "train": input_record(&train_path)? },
        "split": { "fraction": cfg.calibration_fraction, "deployed": deploy_part.len(), "calibration": calibration.len() },
        "config": cfg.deployed,
        "outputs": { "model": input_record(&model_path)? },
    });
    write_report(cfg, "train-deployed", &report)?;
    Ok(report)
}

/// One distilled target set and trained patch per attribute.
pub fn distill_patches(
    calibration: &Dataset,
    oracle: &OracleHandle,
    attrs: &[String],
    arch: &PatchArch,
    train: &TrainConfig,
    seed: u64,
) -> Result<Vec<(DistilledTargets, MlpModel)>> {
    let indices = build_contrast_indices(calibration, oracle, attrs)?;
    indices
        .iter()
        .enumerate()
        .map(|(m, index)| {
            let mut targets = distill_targets(calibration, index)?;
            targets.seed = Some(seed);
            let config = TrainConfig {
                seed: seed.wrapping_add(m as u64),
                ..train.clone()
            };
            let patch = train_patch(calibration, &targets, &config, arch)?;
            Ok((targets, patch))
        })
        .collect()
}

pub fn distill(cfg: &RunConfig) -> Result<serde_json::Value> {
    prepare_out(cfg)?;
    let train_path = cfg.train_csv();
    let data = load_dataset(&train_path)?;
    let (_, calibration) = split_calibration(&data, cfg.calibration_fraction, cfg.seed)?;
    let attrs = cfg.resolve_attrs(&data)?;
    let oracle = cfg.oracle_handle(data.schema().num_classes)?.with_cache();
    let arch = cfg.patch_arch();
    let results = distill_patches(&calibration, &oracle, &attrs, &arch, &cfg.patch.train, cfg.seed)?;
    let mut outputs = Vec::new();
    for (attr, (targets, patch)) in attrs.iter().zip(&results) {
        let targets_path = cfg.out.join(format!("targets_{attr}.json"));
        targets.save(&targets_path)?;
        let patch_path = cfg.patch_path(attr);
        patch.save(&patch_path)?;
        outputs.push(json!({
            "bias_attr": attr,
            "targets": input_record(&targets_path)?,
            "patch": input_record(&patch_path)?,
        }));
    }
    let mut inputs = json!({ "train": input_record(&train_path)?, "oracle": oracle.id() });
    if cfg.oracle.url.is_none() {
        inputs["deployed"] = input_record(&cfg.deployed_model())?;
    }
    let report = json!({
        "stage": "distill",
        "seed": cfg.seed,
        "inputs": inputs,
        "calibration_size": calibration.len(),
        "arch": arch,
        "train": cfg.patch.train,
        "outputs": outputs,
    });
    write_report(cfg, "distill", &report)?;
    Ok(report)
}

/// Raw oracle outputs and their erased counterparts.
pub fn erase_batch<F: AsRef<[f64]> + Sync>(
    oracle: &OracleHandle,
    patches: &[MlpModel],
    features: &[F],
) -> Result<(Vec<ProbVector>, Vec<ProbVector>)> {
    let raw = oracle.query_batch(features)?;
    let fair = raw
        .iter()
        .zip(features)
        .map(|(p, x)| {
            let rules = patches
                .iter()
                .map(|g| g.forward_probs(x.as_ref()))
                .collect::<Result<Vec<_>>>()?;
            erase_multi(p, &rules)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((raw, fair))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub before: MetricsReport,
    pub after: MetricsReport,
    pub delta: DeltaReport,
}

pub fn evaluate_erasure(test: &Dataset, oracle: &OracleHandle, patches: &[MlpModel]) -> Result<Evaluation> {
    let (raw, fair) = erase_batch(oracle, patches, &test.features())?;
    let before = evaluate(&PredictionSet::from_probs(&raw, test)?, test.schema())?;
    let after = evaluate(&PredictionSet::from_probs(&fair, test)?, test.schema())?;
    let delta = compare(&before, &after)?;
    Ok(Evaluation { before, after, delta })
}

fn patch_paths(cfg: &RunConfig, attrs: &[String]) -> Vec<PathBuf> {
    cfg.patches
        .clone()
        .unwrap_or_else(|| attrs.iter().map(|a| cfg.patch_path(a)).collect())
}

fn load_patches(paths: &[PathBuf], k: usize) -> Result<Vec<MlpModel>> {
    paths
        .iter()
        .map(|p| {
            let model = MlpModel::load(p)?;
            if model.num_classes() != k {
                return Err(Error::Config(format!(
                    "{}: patch has {} classes, oracle has {k}",
                    p.display(),
                    model.num_classes()
                )));
            }
            Ok(model)
        })
        .collect()
}

pub fn evaluate_stage(cfg: &RunConfig) -> Result<serde_json::Value> {
    prepare_out(cfg)?;
    let test_path = cfg.test_csv();
    let test = load_dataset(&test_path)?;
    let k = test.schema().num_classes;
    let oracle = cfg.oracle_handle(k)?;
    let attrs = cfg.resolve_attrs(&test)?;
    let paths = patch_paths(cfg, &attrs);
    let patches = load_patches(&paths, k)?;
    let mut eval = evaluate_erasure(&test, &oracle, &patches)?;
    let patch_records = paths.iter().map(|p| input_record(p)).collect::<Result<Vec<_>>>()?;
    let meta: BTreeMap<String, serde_json::Value> = [
        ("seed".to_string(), json!(cfg.seed)),
        ("oracle".to_string(), json!(oracle.id())),
        ("patches".to_string(), json!(patch_records)),
    ]
    .into();
    eval.before.metadata = meta.clone();
    eval.after.metadata = meta;
    let table = render_table(&[("Before", &eval.before), ("After", &eval.after)]);
    std::fs::write(cfg.out.join("report_evaluate.txt"), &table)?;
    let report = json!({
        "stage": "evaluate",
        "seed": cfg.seed,
        "inputs": { "test": input_record(&test_path)?, "oracle": oracle.id(), "patches": patch_records },
        "before": eval.before,
        "after": eval.after,
        "delta": eval.delta,
        "table": table,
    });
    write_report(cfg, "evaluate", &report)?;
    Ok(report)
}

/// Reads a CSV of inputs. Columns named `target` or `bias:*` are ignored.
pub fn read_feature_csv(path: &Path) -> Result<Vec<Vec<f64>>> {
    let mut rdr = csv::Reader::from_path(path).map_err(|e| Error::Csv {
        line: 1,
        message: e.to_string(),
    })?;
    let header = rdr
        .headers()
        .map_err(|e| Error::Csv {
            line: 1,
            message: e.to_string(),
        })?
        .clone();
    let keep: Vec<bool> = header
        .iter()
        .map(|h| h.trim() != "target" && !h.trim().starts_with("bias:"))
        .collect();
    let mut rows = Vec::new();
    for (i, record) in rdr.records().enumerate() {
        let line = i + 2;
        let record = record.map_err(|e| Error::Csv {
            line,
            message: e.to_string(),
        })?;
        let row = record
            .iter()
            .zip(&keep)
            .filter(|(_, k)| **k)
            .map(|(f, _)| {
                f.trim()
                    .parse::<f64>()
                    .ok()
                    .filter(|v| v.is_finite())
                    .ok_or_else(|| Error::Csv {
                        line,
                        message: format!("'{f}' is not a finite number"),
                    })
            })
            .collect::<Result<Vec<_>>>()?;
        rows.push(row);
    }
    Ok(rows)
}

pub fn erase(cfg: &RunConfig) -> Result<serde_json::Value> {
    prepare_out(cfg)?;
    let input = cfg
        .input
        .clone()
        .ok_or_else(|| Error::Config("erase needs an input CSV".into()))?;
    let rows = read_feature_csv(&input)?;
    let paths = match &cfg.patches {
        Some(p) => p.clone(),
        None if cfg.bias_attrs.is_empty() => {
            return Err(Error::Config("erase needs patch files or bias attributes".into()))
        }
        None => cfg.bias_attrs.iter().map(|a| cfg.patch_path(a)).collect(),
    };
    let first = MlpModel::load(
        paths
            .first()
            .ok_or_else(|| Error::Config("erase needs at least one patch".into()))?,
    )?;
    let k = first.num_classes();
    let patches = load_patches(&paths, k)?;
    let oracle = cfg.oracle_handle(k)?;
    let (raw, fair) = erase_batch(&oracle, &patches, &rows)?;

    let out_path = cfg.out.join("erased.csv");
    let mut wtr = csv::Writer::from_path(&out_path).map_err(|e| Error::Io(std::io::Error::other(e)))?;
    let header: Vec<String> = (0..k)
        .map(|c| format!("raw_{c}"))
        .chain((0..k).map(|c| format!("fair_{c}")))
        .chain(["argmax_raw".to_string(), "argmax_fair".to_string()])
        .collect();
    let to_io = |e: csv::Error| Error::Io(std::io::Error::other(e));
    wtr.write_record(&header).map_err(to_io)?;
    for (r, f) in raw.iter().zip(&fair) {
        let record: Vec<String> = r
            .as_slice()
            .iter()
            .chain(f.as_slice())
            .map(|v| v.to_string())
            .chain([r.argmax().to_string(), f.argmax().to_string()])
            .collect();
        wtr.write_record(&record).map_err(to_io)?;
    }
    wtr.flush()?;
    let changed = raw.iter().zip(&fair).filter(|(r, f)| r.argmax() != f.argmax()).count();
    let report = json!({
        "stage": "erase",
        "seed": cfg.seed,
        "inputs": {
            "input": input_record(&input)?,
            "oracle": oracle.id(),
            "patches": paths.iter().map(|p| input_record(p)).collect::<Result<Vec<_>>>()?,
        },
        "rows": rows.len(),
        "argmax_changed": changed,
        "outputs": { "erased": input_record(&out_path)? },
    });
    write_report(cfg, "erase", &report)?;
    Ok(report)
}

/// Parameters of an in-memory run from data generation to evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub data: SyntheticSpec,
    pub calibration_fraction: f64,
    pub eval_per_cell: usize,
    pub deployed: DeployedConfig,
    pub patch: PatchConfig,
    pub bias_attrs: Vec<String>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let run = RunConfig::default();
        Self {
            data: run.data,
            calibration_fraction: run.calibration_fraction,
            eval_per_cell: run.eval_per_cell,
            deployed: run.deployed,
            patch: run.patch,
            bias_attrs: run.bias_attrs,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ExperimentOutcome {
    pub evaluation: Evaluation,
    pub deployed: MlpModel,
    pub patches: Vec<MlpModel>,
    pub calibration_size: usize,
}

/// Generates data, trains the deployed model, distills one patch per bias
/// attribute and evaluates before and after erasure, all seeded by `seed`.
pub fn run_experiment(cfg: &ExperimentConfig, seed: u64) -> Result<ExperimentOutcome> {
    let run = RunConfig {
        seed,
        data: cfg.data.clone(),
        bias_attrs: cfg.bias_attrs.clone(),
        deployed: cfg.deployed.clone(),
        patch: cfg.patch.clone(),
        ..RunConfig::default()
    };
    let (data, test) = generate_datasets(&effective_spec(&run), cfg.eval_per_cell)?;
    let (deploy_part, calibration) = split_calibration(&data, cfg.calibration_fraction, seed)?;
    let attrs = run.resolve_attrs(&data)?;
    let deployed = train_deployed_model(&deploy_part, &cfg.deployed, seed)?;
    let oracle = OracleHandle::local(deployed.clone());
    let patches: Vec<MlpModel> =
        distill_patches(&calibration, &oracle, &attrs, &run.patch_arch(), &cfg.patch.train, seed)?
            .into_iter()
            .map(|(_, p)| p)
            .collect();
    let evaluation = evaluate_erasure(&test, &oracle, &patches)?;
    Ok(ExperimentOutcome {
        evaluation,
        deployed,
        patches,
        calibration_size: calibration.len(),
    })
}
