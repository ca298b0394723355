//! Subcommands of the `adm` binary.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use log::info;

use adm::io::{self, RunConfig};
use adm::learning;
use adm::model::TrialSet;
use adm::{oracle, perf, presets, AdmError, ErrorCategory, Result};

/// Exit status for each error category.
pub fn exit_code(err: &AdmError) -> i32 {
    match err.category() {
        ErrorCategory::Config => 3,
        ErrorCategory::Data => 4,
        ErrorCategory::Numerical => 5,
        ErrorCategory::Io => 1,
    }
}

#[derive(Debug, Parser)]
#[command(name = "adm", version, about = "Adaptive delay model: simulate, fit, evaluate and export")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct GlobalArgs {
    /// TOML run configuration.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides `data.seed`.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads for the parallel parts.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Built-in dataset preset.
    #[arg(long, global = true)]
    pub preset: Option<String>,
    /// Overrides `outputs.directory`.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Simulate a dataset and write it with its ground truth.
    Simulate,
    /// Fit a model on the train split.
    Fit,
    /// Held-out log-likelihood of a model on the test split of each seed.
    Eval {
        #[arg(long)]
        model: PathBuf,
    },
    /// Exact GP versus state-space regression on the kernel zoo.
    Gpbench,
    /// Write the delay network of a model as an edge list.
    ExportNetwork {
        #[arg(long)]
        model: PathBuf,
        /// Comma-separated time steps; default from the config, else all.
        #[arg(long, value_delimiter = ',')]
        timesteps: Vec<usize>,
    },
    /// Time sequential against parallel inference.
    Perf,
}

/// Load the configuration and apply command-line overrides.
pub fn resolve_config(global: &GlobalArgs) -> Result<RunConfig> {
    let mut cfg = match &global.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = global.seed {
        cfg.data.seed = s;
    }
    if let Some(p) = &global.preset {
        presets::by_name(p)?;
        cfg.data.preset = Some(p.clone());
    }
    if let Some(o) = &global.out {
        cfg.outputs.directory = o.clone();
    }
    if global.threads == Some(0) {
        return Err(AdmError::Config("--threads must be at least 1".into()));
    }
    cfg.validate()?;
    Ok(cfg)
}

fn preset_of(cfg: &RunConfig) -> Result<presets::TwoRegionPreset> {
    let name = cfg.data.preset.as_deref().unwrap_or(presets::TWO_REGION_NAME);
    let mut p = presets::by_name(name)?;
    if let Some(r) = cfg.data.trials {
        p.trials = r;
    }
    Ok(p)
}

/// The configured dataset: the binary file if a path is given, otherwise
/// the preset simulated with the data seed.
pub fn load_data(cfg: &RunConfig) -> Result<TrialSet> {
    match &cfg.data.path {
        Some(p) => io::load_dataset(p),
        None => Ok(preset_of(cfg)?.simulate(cfg.data.seed)?.1.data),
    }
}

fn out_dir(cfg: &RunConfig) -> Result<&Path> {
    fs::create_dir_all(&cfg.outputs.directory)?;
    Ok(&cfg.outputs.directory)
}

pub fn cmd_simulate(cfg: &RunConfig) -> Result<Vec<PathBuf>> {
    let preset = preset_of(cfg)?;
    let (model, sim) = preset.simulate(cfg.data.seed)?;
    let dir = out_dir(cfg)?;
    let data = dir.join("data.adm");
    io::save_dataset(&sim.data, &data)?;
    let truth = dir.join("truth.json");
    io::save_model(&model, &truth)?;
    let delays = dir.join("truth_delays.tsv");
    fs::write(&delays, io::delays_tsv(&model))?;
    info!(
        "simulated R={} D={} T={} to {}",
        sim.data.len(),
        sim.data.obs_dim(),
        sim.data.bins(),
        data.display()
    );
    Ok(vec![data, truth, delays])
}

pub fn cmd_fit(cfg: &RunConfig) -> Result<Vec<PathBuf>> {
    let data = load_data(cfg)?;
    let split = io::split_trials(data.len(), cfg.data.split, cfg.data.seed)?;
    let train = data.subset(&split.train);
    info!("fitting on {} of {} trials", train.len(), data.len());
    let (model, trace) = learning::fit(&train, &cfg.fit_config())?;
    let dir = out_dir(cfg)?;
    let model_path = dir.join("model.json");
    io::save_model(&model, &model_path)?;
    let trace_path = dir.join("trace.csv");
    fs::write(&trace_path, io::trace_csv(&trace))?;
    let delays = dir.join("delays.tsv");
    fs::write(&delays, io::delays_tsv(&model))?;
    info!("{} iterations, converged: {}", trace.rows.len(), trace.converged);
    Ok(vec![model_path, trace_path, delays])
}

pub fn cmd_eval(cfg: &RunConfig, model: &Path) -> Result<Vec<PathBuf>> {
    let model = io::load_model(model)?;
    let data = load_data(cfg)?;
    if data.obs_dim() != model.layout().obs_dim() || data.bins() != model.layout().bins {
        return Err(AdmError::DimensionMismatch(format!(
            "data is {}×{}, model expects {}×{}",
            data.obs_dim(),
            data.bins(),
            model.layout().obs_dim(),
            model.layout().bins
        )));
    }
    let metrics = io::evaluate(
        &model,
        &data,
        cfg.data.split,
        &cfg.eval.seeds,
        cfg.optimize.method,
    )?;
    let path = out_dir(cfg)?.join("metrics.json");
    io::write_json(&metrics, &path)?;
    info!("mean plug-in test log-likelihood {:.3}", metrics.mean_plug_in);
    Ok(vec![path])
}

pub fn cmd_gpbench(cfg: &RunConfig) -> Result<Vec<PathBuf>> {
    let rows = oracle::run_parity_benchmark(&cfg.gpbench)?;
    let path = out_dir(cfg)?.join("parity.tsv");
    fs::write(&path, io::parity_tsv(&rows))?;
    for r in &rows {
        info!("{}: SSM/GP test MSE ratio {:.3}", r.kind, r.ratio());
    }
    Ok(vec![path])
}

pub fn cmd_export_network(cfg: &RunConfig, model: &Path, timesteps: &[usize]) -> Result<Vec<PathBuf>> {
    let model = io::load_model(model)?;
    let steps = if timesteps.is_empty() {
        &cfg.export.timesteps
    } else {
        timesteps
    };
    let edges = io::network_edges(&model, steps)?;
    let path = out_dir(cfg)?.join("network.tsv");
    fs::write(&path, io::network_tsv(&edges))?;
    Ok(vec![path])
}

pub fn cmd_perf(cfg: &RunConfig) -> Result<Vec<PathBuf>> {
    let rows = perf::run_perf(&cfg.perf.bins, cfg.perf.trials, cfg.perf.repeats, cfg.data.seed)?;
    let dir = out_dir(cfg)?;
    let tsv = dir.join("perf.tsv");
    fs::write(&tsv, perf::perf_tsv(&rows))?;
    let json = dir.join("perf.json");
    io::write_json(&rows, &json)?;
    Ok(vec![tsv, json])
}

pub fn run(cli: Cli) -> Result<Vec<PathBuf>> {
    let cfg = resolve_config(&cli.global)?;
    let work = || match &cli.command {
        Command::Simulate => cmd_simulate(&cfg),
        Command::Fit => cmd_fit(&cfg),
        Command::Eval { model } => cmd_eval(&cfg, model),
        Command::Gpbench => cmd_gpbench(&cfg),
        Command::ExportNetwork { model, timesteps } => cmd_export_network(&cfg, model, timesteps),
        Command::Perf => cmd_perf(&cfg),
    };
    match cli.global.threads {
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| AdmError::Config(e.to_string()))?
            .install(work),
        None => work(),
    }
}
