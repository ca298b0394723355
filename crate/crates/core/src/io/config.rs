//! TOML run configuration shared by the command-line subcommands.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{AdmError, Result};
use crate::inference::Method;
use crate::learning::{FitConfig, GradientMode};
use crate::oracle::ParityConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    /// Binary dataset; relative paths are resolved against the config file.
    pub path: Option<PathBuf>,
    /// Built-in preset used by `simulate` (and by other commands when no
    /// path is given).
    pub preset: Option<String>,
    /// Overrides the preset's trial count.
    pub trials: Option<usize>,
    /// Train / validation / test fractions, by trial.
    pub split: [f64; 3],
    pub seed: u64,
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            path: None,
            preset: None,
            trials: None,
            split: [0.8, 0.1, 0.1],
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    /// Across-region groups `m_a`.
    pub across: usize,
    /// Within-region groups `m_w`.
    pub within: usize,
    pub order: usize,
    pub delay_bound: Option<f64>,
    /// Delay smoothness weight λ.
    pub smoothness: f64,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            across: 2,
            within: 1,
            order: 5,
            delay_bound: None,
            smoothness: 2.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizeSection {
    pub max_iters: usize,
    pub loglik_rel_tol: f64,
    pub delay_step: f64,
    pub length_scale_step: f64,
    pub kernel_steps: usize,
    pub method: Method,
    pub gradient: GradientMode,
    pub learn_delays: bool,
    pub learn_length_scales: bool,
    /// Continuation jitters after the main fit (empty to skip).
    pub anneal_jitters: Vec<f64>,
    pub anneal_iters: usize,
}

impl Default for OptimizeSection {
    fn default() -> Self {
        let f = FitConfig::default();
        Self {
            max_iters: f.max_iters,
            loglik_rel_tol: f.loglik_rel_tol,
            delay_step: f.delay_step,
            length_scale_step: f.length_scale_step,
            kernel_steps: f.kernel_steps,
            method: Method::Sequential,
            gradient: f.gradient,
            learn_delays: f.learn_delays,
            learn_length_scales: f.learn_length_scales,
            anneal_jitters: crate::presets::ANNEAL_JITTERS.to_vec(),
            anneal_iters: f.anneal_iters,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputSection {
    pub directory: PathBuf,
}

impl Default for OutputSection {
    fn default() -> Self {
        Self {
            directory: PathBuf::from("adm-out"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    /// Split seeds; the test split of each is scored and the results averaged.
    pub seeds: Vec<u64>,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            seeds: (0..5).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExportSection {
    /// Time steps to export; empty means all.
    pub timesteps: Vec<usize>,
}

impl Default for ExportSection {
    fn default() -> Self {
        Self { timesteps: Vec::new() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PerfSection {
    pub bins: Vec<usize>,
    pub trials: usize,
    pub repeats: usize,
}

impl Default for PerfSection {
    fn default() -> Self {
        Self {
            bins: vec![100, 200, 400, 600],
            trials: 4,
            repeats: 3,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub data: DataSection,
    pub model: ModelSection,
    pub optimize: OptimizeSection,
    pub outputs: OutputSection,
    pub eval: EvalSection,
    pub export: ExportSection,
    pub perf: PerfSection,
    pub gpbench: ParityConfig,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| AdmError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Parse, resolve relative paths against the file's directory and check
    /// that referenced inputs exist.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| AdmError::Config(format!("cannot read {}: {e}", path.display())))?;
        let mut cfg = Self::from_toml(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        if let Some(p) = &cfg.data.path {
            if p.is_relative() {
                cfg.data.path = Some(base.join(p));
            }
        }
        if cfg.outputs.directory.is_relative() {
            cfg.outputs.directory = base.join(&cfg.outputs.directory);
        }
        cfg.check_paths()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| AdmError::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        let s = self.data.split;
        if s.iter().any(|f| !(*f >= 0.0)) || (s.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(AdmError::Config(format!(
                "split fractions must be non-negative and sum to 1, got {s:?}"
            )));
        }
        if s[0] == 0.0 || s[2] == 0.0 {
            return Err(AdmError::Config("train and test fractions must be positive".into()));
        }
        if self.perf.bins.is_empty() || self.perf.trials == 0 || self.perf.repeats == 0 {
            return Err(AdmError::Config("perf needs bins, trials and repeats".into()));
        }
        self.fit_config().validate()?;
        self.gpbench.validate()
    }

    pub fn check_paths(&self) -> Result<()> {
        if let Some(p) = &self.data.path {
            if !p.exists() {
                return Err(AdmError::Config(format!("data path {} does not exist", p.display())));
            }
        }
        Ok(())
    }

    pub fn fit_config(&self) -> FitConfig {
        let (m, o) = (&self.model, &self.optimize);
        FitConfig {
            across: m.across,
            within: m.within,
            order: m.order,
            delay_bound: m.delay_bound,
            smoothness: m.smoothness,
            max_iters: o.max_iters,
            loglik_rel_tol: o.loglik_rel_tol,
            delay_step: o.delay_step,
            length_scale_step: o.length_scale_step,
            kernel_steps: o.kernel_steps,
            method: o.method,
            gradient: o.gradient,
            learn_delays: o.learn_delays,
            learn_length_scales: o.learn_length_scales,
            anneal_jitters: o.anneal_jitters.clone(),
            anneal_iters: o.anneal_iters,
            seed: self.data.seed,
            ..FitConfig::default()
        }
    }
}
