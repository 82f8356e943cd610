use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Duration;

use clap::{Parser, Subcommand};
use eraser_core::nnet::{MlpModel, OutputMode};
use eraser_core::pipeline::{self, RunConfig};
use eraser_core::proxy::{self, ProxyConfig, Upstream};
use eraser_core::{RemoteConfig, Result};

/// Debias a deployed classifier by distilling and erasing its bias rule.
#[derive(Debug, Parser)]
#[command(name = "eraser", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// JSON run configuration; flags override its keys.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Minority-to-majority ratio of generated data.
    #[arg(long, global = true)]
    alpha: Option<f64>,
    /// Calibration fraction of the training data.
    #[arg(long, global = true)]
    split: Option<f64>,
    /// Bias attribute to erase (repeatable).
    #[arg(long = "bias-attr", global = true)]
    bias_attr: Vec<String>,
    /// Query the deployed model at this URL instead of a local file.
    #[arg(long, global = true)]
    oracle_url: Option<String>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Deployed model file.
    #[arg(long, global = true)]
    model: Option<PathBuf>,
    /// Patch model file (repeatable); replaces the default patch list.
    #[arg(long = "patch", global = true)]
    patch: Vec<PathBuf>,
    /// Use no patches at all.
    #[arg(long, global = true, conflicts_with = "patch")]
    no_patches: bool,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a skewed training set and a group-balanced test set.
    GenData {
        #[arg(long)]
        n: Option<usize>,
    },
    /// Train the deployed model on the non-calibration part of the training set.
    TrainDeployed {
        /// Add a second output head predicting the first bias attribute.
        #[arg(long)]
        multitask: bool,
        #[arg(long, value_parser = ["softmax", "sigmoid"])]
        output_mode: Option<String>,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Distill bias rules from the deployed model and train one patch per attribute.
    Distill {
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Compare group accuracies and Equalodds before and after erasure.
    Evaluate,
    /// Apply the eraser to a CSV of inputs.
    Erase {
        #[arg(long)]
        input: PathBuf,
    },
    /// Run the debiasing proxy, or with --oracle-only serve the deployed model.
    Serve {
        #[arg(long)]
        listen: Option<String>,
        #[arg(long)]
        oracle_only: bool,
    },
}

fn build_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Command::Serve { .. } = cli.command {
        if let Ok(addr) = std::env::var(proxy::ENV_LISTEN_ADDR) {
            cfg.serve.listen = addr;
        }
        if let Ok(url) = std::env::var(proxy::ENV_UPSTREAM_URL) {
            cfg.oracle.url = Some(url);
        }
    }
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(alpha) = cli.alpha {
        cfg.data.alpha = alpha;
    }
    if let Some(split) = cli.split {
        cfg.calibration_fraction = split;
    }
    if !cli.bias_attr.is_empty() {
        cfg.bias_attrs = cli.bias_attr.clone();
    }
    if let Some(url) = &cli.oracle_url {
        cfg.oracle.url = Some(url.clone());
    }
    if let Some(out) = &cli.out {
        cfg.out = out.clone();
    }
    if let Some(model) = &cli.model {
        cfg.oracle.model = Some(model.clone());
    }
    if !cli.patch.is_empty() {
        cfg.patches = Some(cli.patch.clone());
    }
    if cli.no_patches {
        cfg.patches = Some(Vec::new());
    }
    match &cli.command {
        Command::GenData { n } => {
            if let Some(n) = n {
                cfg.data.n = *n;
            }
        }
        Command::TrainDeployed {
            multitask,
            output_mode,
            epochs,
        } => {
            cfg.deployed.multitask |= multitask;
            if let Some(mode) = output_mode {
                cfg.deployed.output_mode = if mode == "sigmoid" {
                    OutputMode::Sigmoid
                } else {
                    OutputMode::Softmax
                };
            }
            if let Some(e) = epochs {
                cfg.deployed.train.epochs = *e;
            }
        }
        Command::Distill { epochs } => {
            if let Some(e) = epochs {
                cfg.patch.train.epochs = *e;
            }
        }
        Command::Erase { input } => cfg.input = Some(input.clone()),
        Command::Serve { listen, oracle_only } => {
            if let Some(l) = listen {
                cfg.serve.listen = l.clone();
            }
            cfg.serve.oracle_only |= oracle_only;
        }
        Command::Evaluate => {}
    }
    Ok(cfg)
}

fn proxy_config(cfg: &RunConfig) -> Result<ProxyConfig> {
    let patches = match &cfg.patches {
        Some(p) => p.clone(),
        None if !cfg.bias_attrs.is_empty() => cfg.bias_attrs.iter().map(|a| cfg.patch_path(a)).collect(),
        None => {
            let mut found: Vec<PathBuf> = std::fs::read_dir(&cfg.out)?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| {
                    p.file_name()
                        .and_then(|n| n.to_str())
                        .is_some_and(|n| n.starts_with("patch_") && n.ends_with(".json"))
                })
                .collect();
            found.sort();
            found
        }
    };
    let upstream = match &cfg.oracle.url {
        Some(url) => Upstream::Url(url.clone()),
        None => Upstream::Model(cfg.deployed_model()),
    };
    Ok(ProxyConfig {
        listen: cfg.serve.listen.clone(),
        upstream: Some(upstream),
        patches,
        normalize: cfg.oracle.normalize,
        request_timeout_ms: cfg.serve.request_timeout_ms,
        max_in_flight: cfg.serve.max_in_flight,
        remote: RemoteConfig {
            timeout_ms: cfg.oracle.timeout_ms,
            retries: cfg.oracle.retries,
            max_in_flight: cfg.oracle.max_in_flight,
            ..RemoteConfig::default()
        },
    })
}

fn serve(cfg: &RunConfig) -> Result<()> {
    let runtime = tokio::runtime::Builder::new_multi_thread().enable_all().build()?;
    runtime.block_on(async {
        let server = if cfg.serve.oracle_only {
            proxy::start_oracle_server(MlpModel::load(cfg.deployed_model())?, &cfg.serve.listen).await?
        } else {
            proxy::start_proxy(proxy_config(cfg)?).await?
        };
        // Printed so scripts can discover an ephemeral port.
        println!("{}", serde_json::json!({ "listening": server.base_url() }));
        server.run_until_ctrl_c(Duration::from_secs(10)).await
    })
}

fn run(cli: &Cli) -> Result<()> {
    let cfg = build_config(cli)?;
    let report = match &cli.command {
        Command::GenData { .. } => pipeline::gen_data(&cfg)?,
        Command::TrainDeployed { .. } => pipeline::train_deployed(&cfg)?,
        Command::Distill { .. } => pipeline::distill(&cfg)?,
        Command::Evaluate => {
            let report = pipeline::evaluate_stage(&cfg)?;
            print!("{}", report["table"].as_str().unwrap_or_default());
            return Ok(());
        }
        Command::Erase { .. } => pipeline::erase(&cfg)?,
        Command::Serve { .. } => return serve(&cfg),
    };
    println!("{}", serde_json::to_string_pretty(&report)?);
    Ok(())
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(tracing_subscriber::EnvFilter::from_default_env())
        .with_writer(std::io::stderr)
        .init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let body = serde_json::json!({ "error": e.kind(), "message": e.to_string() });
            eprintln!("{body}");
            ExitCode::FAILURE
        }
    }
}
