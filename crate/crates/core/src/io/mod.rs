//! File formats: datasets, run configuration, model files and exported
//! tables.

pub mod config;
pub mod dataset;

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use config::RunConfig;
pub use dataset::{load_csv_trials, load_dataset, save_dataset};

use crate::convert::ConversionOptions;
use crate::error::{AdmError, Result};
use crate::inference::{self, Method, ObservationLogLik};
use crate::learning::FitTrace;
use crate::model::{AcrossGroup, AdmModel, FaParams, LatentLayout, TrialSet, WithinGroup};
use crate::oracle::ParityRow;

/// Trial indices of a train / validation / test split.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<usize>,
    pub validation: Vec<usize>,
    pub test: Vec<usize>,
}

/// Shuffle `trials` indices with `seed` and cut them by `fractions`.
pub fn split_trials(trials: usize, fractions: [f64; 3], seed: u64) -> Result<Split> {
    let sum: f64 = fractions.iter().sum();
    if fractions.iter().any(|f| !(*f >= 0.0)) || (sum - 1.0).abs() > 1e-9 {
        return Err(AdmError::Config(format!("bad split fractions {fractions:?}")));
    }
    let mut idx: Vec<usize> = (0..trials).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_train = (fractions[0] * trials as f64).round() as usize;
    let n_val = ((fractions[1] * trials as f64).round() as usize).min(trials - n_train);
    let test = idx.split_off(n_train + n_val);
    let validation = idx.split_off(n_train);
    if idx.is_empty() || test.is_empty() {
        return Err(AdmError::DimensionMismatch(format!(
            "{trials} trials are too few for split {fractions:?}"
        )));
    }
    Ok(Split {
        train: idx,
        validation,
        test,
    })
}

pub const MODEL_FORMAT_VERSION: u32 = 1;

/// Serializable parameters of an [`AdmModel`]; companion forms are rebuilt
/// on load.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelFile {
    pub format_version: u32,
    pub layout: LatentLayout,
    pub across: Vec<AcrossGroup>,
    pub within: Vec<WithinGroup>,
    pub fa: FaParams,
    pub conversion: ConversionOptions,
}

impl ModelFile {
    pub fn from_model(model: &AdmModel) -> Self {
        Self {
            format_version: MODEL_FORMAT_VERSION,
            layout: model.layout().clone(),
            across: model.across_groups().to_vec(),
            within: model.within_groups().to_vec(),
            fa: model.fa().clone(),
            conversion: *model.options(),
        }
    }

    pub fn into_model(self) -> Result<AdmModel> {
        if self.format_version != MODEL_FORMAT_VERSION {
            return Err(AdmError::UnsupportedVersion {
                found: self.format_version,
                supported: MODEL_FORMAT_VERSION,
            });
        }
        AdmModel::new(self.layout, self.across, self.within, self.fa, self.conversion)
    }
}

pub fn save_model(model: &AdmModel, path: &Path) -> Result<()> {
    let text = serde_json::to_string(&ModelFile::from_model(model))
        .map_err(|e| AdmError::Malformed(e.to_string()))?;
    fs::write(path, text)?;
    Ok(())
}

pub fn load_model(path: &Path) -> Result<AdmModel> {
    let text = fs::read_to_string(path)?;
    let file: ModelFile =
        serde_json::from_str(&text).map_err(|e| AdmError::Malformed(format!("{}: {e}", path.display())))?;
    file.into_model()
}

fn join<T: std::fmt::Debug>(v: impl IntoIterator<Item = T>) -> String {
    v.into_iter().map(|x| format!("{x:?}")).collect::<Vec<_>>().join(";")
}

/// Fit trace as CSV; vector columns are `;`-separated.
pub fn trace_csv(trace: &FitTrace) -> String {
    let mut out = String::from(
        "iteration,expected_loglik,expected_loglik_after,marginal_loglik,delay_grad_norm,length_scale_grad_norm,elapsed_secs,length_scales,mean_delays\n",
    );
    for r in &trace.rows {
        let _ = writeln!(
            out,
            "{},{:?},{:?},{:?},{:?},{:?},{:?},{},{}",
            r.iteration,
            r.expected_loglik,
            r.expected_loglik_after,
            r.marginal_loglik,
            r.delay_grad_norm,
            r.length_scale_grad_norm,
            r.elapsed_secs,
            join(&r.length_scales),
            join(r.mean_delays.iter().flatten()),
        );
    }
    out
}

/// Held-out log-likelihood of one split seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedMetrics {
    pub seed: u64,
    pub test_trials: usize,
    /// Summed over test trials and bins.
    pub plug_in: f64,
    pub marginal: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub seeds: Vec<u64>,
    pub per_seed: Vec<SeedMetrics>,
    pub mean_plug_in: f64,
    pub mean_marginal: f64,
}

/// Score `model` on the test split of every seed.
pub fn evaluate(
    model: &AdmModel,
    data: &TrialSet,
    fractions: [f64; 3],
    seeds: &[u64],
    method: Method,
) -> Result<Metrics> {
    if seeds.is_empty() {
        return Err(AdmError::Config("evaluation needs at least one seed".into()));
    }
    let per_seed = seeds
        .iter()
        .map(|&seed| {
            let split = split_trials(data.len(), fractions, seed)?;
            let refs: Vec<&DMatrix<f64>> = split.test.iter().map(|&i| &data.trials[i]).collect();
            let ObservationLogLik { plug_in, marginal } =
                inference::observation_loglik(model, &refs, method)?;
            Ok(SeedMetrics {
                seed,
                test_trials: refs.len(),
                plug_in,
                marginal,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let n = per_seed.len() as f64;
    Ok(Metrics {
        seeds: seeds.to_vec(),
        mean_plug_in: per_seed.iter().map(|m| m.plug_in).sum::<f64>() / n,
        mean_marginal: per_seed.iter().map(|m| m.marginal).sum::<f64>() / n,
        per_seed,
    })
}

/// One directed edge of the communication network at one time step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkEdge {
    pub t: usize,
    pub group: usize,
    /// 1-based region indices.
    pub region_i: usize,
    pub region_j: usize,
    /// `θᵢⱼ = dⱼ − dᵢ` in bins.
    pub delay: f64,
    /// `+1` when `i` leads `j`, `−1` when it lags, `0` for no delay.
    pub sign: i8,
}

pub const NETWORK_HEADER: &str = "\
# delay = d_j - d_i in bins for the region pair (i, j), regions 1-based, groups 0-based.
# Positive delay: region j lags region i, read as i -> j (forward from the lower-indexed region when i < j).
# direction: forward (i -> j), backward (j -> i), undefined (zero delay).
t\tgroup\tregion_i\tregion_j\tdelay\tdirection
";

/// Ordered pairs `(i, j)`, `i ≠ j`, of every across group at each requested
/// step (all steps when `timesteps` is empty).
pub fn network_edges(model: &AdmModel, timesteps: &[usize]) -> Result<Vec<NetworkEdge>> {
    let layout = model.layout();
    let steps: Vec<usize> = if timesteps.is_empty() {
        (0..layout.bins).collect()
    } else {
        timesteps.to_vec()
    };
    if let Some(&t) = steps.iter().find(|&&t| t >= layout.bins) {
        return Err(AdmError::Config(format!(
            "time step {t} is outside [0, {})",
            layout.bins
        )));
    }
    let mut out = Vec::new();
    for &t in &steps {
        for (g, grp) in model.across_groups().iter().enumerate() {
            let d = &grp.delays[t];
            for i in 0..layout.regions {
                for j in 0..layout.regions {
                    if i == j {
                        continue;
                    }
                    let delay = d[j] - d[i];
                    out.push(NetworkEdge {
                        t,
                        group: g,
                        region_i: i + 1,
                        region_j: j + 1,
                        delay,
                        sign: if delay > 0.0 {
                            1
                        } else if delay < 0.0 {
                            -1
                        } else {
                            0
                        },
                    });
                }
            }
        }
    }
    Ok(out)
}

pub fn network_tsv(edges: &[NetworkEdge]) -> String {
    let mut out = String::from(NETWORK_HEADER);
    for e in edges {
        let dir = match e.sign {
            1 => "forward",
            -1 => "backward",
            _ => "undefined",
        };
        let _ = writeln!(
            out,
            "{}\t{}\t{}\t{}\t{:?}\t{dir}",
            e.t, e.group, e.region_i, e.region_j, e.delay
        );
    }
    out
}

/// Parity table laid out like the published one: a GP row and an SSM row
/// per kernel, mean and standard deviation of test MSE over seeds.
pub fn parity_tsv(rows: &[ParityRow]) -> String {
    let mut out = String::from("kernel\torder\tmethod\tmse_mean\tmse_sd\tratio\tseeds\terror\n");
    for r in rows {
        let err = r.error.as_deref().unwrap_or("");
        let (gm, gs) = r.gp_summary();
        let (sm, ss) = r.ssm_summary();
        let n = r.gp_mse.len();
        let _ = writeln!(out, "{}\t{}\tGP\t{gm:.6}\t{gs:.6}\t\t{n}\t{err}", r.kind, r.order);
        let _ = writeln!(
            out,
            "{}\t{}\tSSM\t{sm:.6}\t{ss:.6}\t{:.4}\t{n}\t{err}",
            r.kind,
            r.order,
            r.ratio()
        );
    }
    out
}

/// Delay trajectories of every across group: `t, group, d_1, …, d_N`.
pub fn delays_tsv(model: &AdmModel) -> String {
    let regions = model.layout().regions;
    let mut out = String::from("t\tgroup");
    for i in 0..regions {
        let _ = write!(out, "\td_{}", i + 1);
    }
    out.push('\n');
    for (g, grp) in model.across_groups().iter().enumerate() {
        for (t, d) in grp.delays.iter().enumerate() {
            let _ = write!(out, "{t}\t{g}");
            for v in d {
                let _ = write!(out, "\t{v:?}");
            }
            out.push('\n');
        }
    }
    out
}

/// Write a JSON document.
pub fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| AdmError::Malformed(e.to_string()))?;
    fs::write(path, text)?;
    Ok(())
}
