//! Exact GP regression and the comparison against its state-space
//! approximation on the kernel zoo.

use std::sync::Arc;

use log::warn;
use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::convert::{self, ConversionOptions};
use crate::error::{AdmError, Result};
use crate::inference::{self, GaussianSequence, InfoObservation, Method};
use crate::kernels::{
    recommended_order, CsmComponent, CsmRank, KernelKind, LagBlockKernel, LmcComponent,
    MosmComponent, SmComponent,
};
use crate::linalg;

/// One observation time with a value per kernel output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub time: f64,
    pub value: DVector<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegressionTask {
    pub kernel: LagBlockKernel,
    pub noise_var: f64,
    pub train: Vec<Sample>,
    pub test: Vec<Sample>,
}

impl RegressionTask {
    fn validate(&self) -> Result<()> {
        self.kernel.validate()?;
        if !(self.noise_var > 0.0) || !self.noise_var.is_finite() {
            return Err(AdmError::Oracle(format!(
                "noise variance must be positive, got {}",
                self.noise_var
            )));
        }
        let n = self.kernel.outputs();
        for s in self.train.iter().chain(&self.test) {
            if s.value.len() != n {
                return Err(AdmError::DimensionMismatch(format!(
                    "sample at t={} has {} values, kernel has {n} outputs",
                    s.time,
                    s.value.len()
                )));
            }
        }
        for a in &self.train {
            if self.test.iter().any(|b| b.time == a.time) {
                return Err(AdmError::Oracle(format!(
                    "time {} is in both the train and test sets",
                    a.time
                )));
            }
        }
        Ok(())
    }
}

fn cross_gram(kernel: &LagBlockKernel, rows: &[f64], cols: &[f64]) -> DMatrix<f64> {
    let n = kernel.outputs();
    let mut k = DMatrix::zeros(n * rows.len(), n * cols.len());
    for (a, &s) in rows.iter().enumerate() {
        for (b, &t) in cols.iter().enumerate() {
            k.view_mut((a * n, b * n), (n, n))
                .copy_from(&kernel.eval_unchecked(s - t));
        }
    }
    k
}

/// Exact posterior mean `k*ᵀ(K + σ²I)⁻¹y` at every test time.
pub fn gp_predict(task: &RegressionTask) -> Result<Vec<DVector<f64>>> {
    task.validate()?;
    let n = task.kernel.outputs();
    if task.train.is_empty() {
        return Ok(vec![DVector::zeros(n); task.test.len()]);
    }
    let train_t: Vec<f64> = task.train.iter().map(|s| s.time).collect();
    let test_t: Vec<f64> = task.test.iter().map(|s| s.time).collect();
    let mut k = cross_gram(&task.kernel, &train_t, &train_t);
    linalg::symmetrize(&mut k);
    for i in 0..k.nrows() {
        k[(i, i)] += task.noise_var;
    }
    let (chol, _) = linalg::jittered_cholesky(&k, 0.0, 1e-6)
        .ok_or_else(|| AdmError::Oracle("train Gram matrix is not positive definite".into()))?;
    let mut y = DVector::zeros(n * train_t.len());
    for (a, s) in task.train.iter().enumerate() {
        y.rows_mut(a * n, n).copy_from(&s.value);
    }
    let alpha = chol.solve(&y);
    let mean = cross_gram(&task.kernel, &test_t, &train_t) * alpha;
    Ok((0..test_t.len())
        .map(|a| mean.rows(a * n, n).into_owned())
        .collect())
}

/// Uniform grid covering `times`: `(origin, step, index of each time)`.
fn grid_indices(times: &[f64]) -> Result<(f64, f64, Vec<usize>)> {
    let mut sorted = times.to_vec();
    sorted.sort_by(f64::total_cmp);
    sorted.dedup();
    if sorted.len() < 2 {
        return Ok((sorted.first().copied().unwrap_or(0.0), 1.0, vec![0; times.len()]));
    }
    let step = sorted
        .windows(2)
        .map(|w| w[1] - w[0])
        .fold(f64::INFINITY, f64::min);
    let origin = sorted[0];
    let idx = times
        .iter()
        .enumerate()
        .map(|(i, &t)| {
            let k = (t - origin) / step;
            let r = k.round();
            if (k - r).abs() > 1e-6 {
                Err(AdmError::NonUniformGrid {
                    index: i,
                    expected: step,
                    found: t - origin,
                })
            } else {
                Ok(r as usize)
            }
        })
        .collect::<Result<_>>()?;
    Ok((origin, step, idx))
}

/// Posterior mean of the companion-form approximation at the test times:
/// train values are observations with noise `σ²` on a shared uniform grid,
/// every other grid step is unobserved.
pub fn ssm_predict(
    task: &RegressionTask,
    order: usize,
    opts: &ConversionOptions,
) -> Result<Vec<DVector<f64>>> {
    task.validate()?;
    let n = task.kernel.outputs();
    let all: Vec<f64> = task.train.iter().chain(&task.test).map(|s| s.time).collect();
    if all.is_empty() {
        return Ok(Vec::new());
    }
    let (_, step, idx) = grid_indices(&all)?;
    let bins = idx.iter().max().copied().unwrap_or(0) + 1;
    // The kernel is written in grid units; rescale if the grid is not unit.
    let kernel = rescaled(&task.kernel, step);
    let comp = convert::kernel_to_markovian(&kernel, order, opts)?;
    let s = comp.state_dim();
    let prior_cov = convert::stacked_state_covariance(&kernel, order, opts.jitter_start)?;

    let h = &comp.mask;
    let precision = Arc::new(h.transpose() * h / task.noise_var);
    let mut observations: Vec<InfoObservation> =
        (0..bins).map(|_| InfoObservation::missing(s, 1)).collect();
    for (k, sample) in task.train.iter().enumerate() {
        let y = &sample.value;
        observations[idx[k]] = InfoObservation {
            precision: precision.clone(),
            info: DMatrix::from_column_slice(s, 1, (h.transpose() * y / task.noise_var).as_slice()),
            quad: DVector::from_element(1, y.norm_squared() / task.noise_var),
            log_det_noise: n as f64 * task.noise_var.ln(),
            dim: n,
        };
    }
    let seq = GaussianSequence {
        prior_mean: DVector::zeros(s),
        prior_cov,
        transitions: vec![comp.transition.clone(); bins],
        noises: vec![comp.noise.clone(); bins],
        observations,
    };
    let filt = inference::filter(&seq, Method::Sequential)?;
    let sm = inference::smooth(&seq, &filt, Method::Sequential)?;
    let offset = task.train.len();
    Ok((0..task.test.len())
        .map(|k| sm.means[idx[offset + k]].view((0, 0), (n, 1)).column(0).into_owned())
        .collect())
}

/// Express a kernel written in time units on a grid of spacing `step`.
fn rescaled(kernel: &LagBlockKernel, step: f64) -> LagBlockKernel {
    if (step - 1.0).abs() < 1e-12 {
        return kernel.clone();
    }
    let mut k = kernel.clone();
    match &mut k {
        LagBlockKernel::Exp { length_scale, .. }
        | LagBlockKernel::Matern32 { length_scale, .. }
        | LagBlockKernel::SE { length_scale, .. }
        | LagBlockKernel::RQ { length_scale, .. } => *length_scale /= step,
        LagBlockKernel::SM { components } => {
            for c in components {
                c.length_scale /= step;
                c.frequency *= step;
            }
        }
        LagBlockKernel::MOSE(p) => {
            p.length_scale /= step;
            for d in p.delays.iter_mut() {
                *d /= step;
            }
        }
        LagBlockKernel::MOSM { components } => {
            for c in components {
                c.length_scale /= step;
                c.frequency *= step;
                for d in c.delays.iter_mut() {
                    *d /= step;
                }
            }
        }
        LagBlockKernel::CSM { components, .. } => {
            for c in components {
                c.length_scale /= step;
                c.frequency *= step;
            }
        }
        LagBlockKernel::LMC { components } => {
            for c in components {
                c.length_scale /= step;
            }
        }
    }
    k
}

/// Versioned settings of the parity benchmark. The published protocol fixes
/// only the sample size, the split and the orders; noise level and kernel
/// hyperparameters are chosen here.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ParityConfig {
    pub version: u32,
    pub points: usize,
    pub train_fraction: f64,
    pub noise_var: f64,
    pub seeds: Vec<u64>,
    pub kernels: Vec<LagBlockKernel>,
    pub conversion: ConversionOptions,
}

pub const PARITY_CONFIG_VERSION: u32 = 1;

impl Default for ParityConfig {
    fn default() -> Self {
        Self {
            version: PARITY_CONFIG_VERSION,
            points: 300,
            train_fraction: 0.6,
            noise_var: 0.25,
            seeds: (0..5).collect(),
            kernels: zoo(),
            conversion: ConversionOptions::default(),
        }
    }
}

impl ParityConfig {
    pub fn validate(&self) -> Result<()> {
        if self.version != PARITY_CONFIG_VERSION {
            return Err(AdmError::Config(format!(
                "parity config version {} is not supported (expected {PARITY_CONFIG_VERSION})",
                self.version
            )));
        }
        if self.points < 2 {
            return Err(AdmError::Config("parity benchmark needs at least 2 points".into()));
        }
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return Err(AdmError::Config(format!(
                "train_fraction must lie in (0, 1), got {}",
                self.train_fraction
            )));
        }
        if self.seeds.is_empty() || self.kernels.is_empty() {
            return Err(AdmError::Config("parity benchmark needs seeds and kernels".into()));
        }
        for k in &self.kernels {
            k.validate()?;
        }
        Ok(())
    }
}

/// One kernel of each kind, with hyperparameters in grid units.
pub fn zoo() -> Vec<LagBlockKernel> {
    vec![
        LagBlockKernel::Exp {
            variance: 1.0,
            length_scale: 10.0,
        },
        LagBlockKernel::Matern32 {
            variance: 1.0,
            length_scale: 8.0,
        },
        LagBlockKernel::SE {
            variance: 1.0,
            length_scale: 3.0,
        },
        LagBlockKernel::RQ {
            variance: 1.0,
            length_scale: 5.0,
            alpha: 1.0,
        },
        LagBlockKernel::SM {
            components: vec![
                SmComponent {
                    variance: 0.6,
                    length_scale: 8.0,
                    frequency: 0.2,
                },
                SmComponent {
                    variance: 0.4,
                    length_scale: 6.0,
                    frequency: 0.5,
                },
            ],
        },
        LagBlockKernel::mose(vec![0.0, 2.0], 5.0),
        LagBlockKernel::MOSM {
            components: vec![MosmComponent {
                weights: vec![1.0, 0.8],
                delays: vec![0.0, 1.5],
                phases: vec![0.0, 0.5],
                length_scale: 8.0,
                frequency: 0.2,
            }],
        },
        LagBlockKernel::CSM {
            outputs: 2,
            components: vec![CsmComponent {
                length_scale: 8.0,
                frequency: 0.2,
                ranks: vec![
                    CsmRank {
                        weights: vec![0.8, 0.6],
                        phases: vec![0.0, 0.4],
                    },
                    CsmRank {
                        weights: vec![0.4, 0.6],
                        phases: vec![0.0, -0.3],
                    },
                ],
            }],
        },
        LagBlockKernel::LMC {
            components: vec![
                LmcComponent {
                    coregionalization: vec![vec![1.0, 0.5], vec![0.5, 0.8]],
                    length_scale: 5.0,
                },
                LmcComponent {
                    coregionalization: vec![vec![0.3, -0.2], vec![-0.2, 0.4]],
                    length_scale: 12.0,
                },
            ],
        },
    ]
}

/// Draw `points` noisy samples on the unit grid from the exact GP and split
/// them at random.
pub fn sample_task(
    kernel: &LagBlockKernel,
    points: usize,
    train_fraction: f64,
    noise_var: f64,
    seed: u64,
) -> Result<RegressionTask> {
    kernel.validate()?;
    let n = kernel.outputs();
    let times: Vec<f64> = (0..points).map(|t| t as f64).collect();
    let gram = crate::kernels::gram_matrix(kernel, &times)?;
    let (chol, _) = linalg::jittered_cholesky(&gram, 1e-10, 1e-4)
        .ok_or_else(|| AdmError::Oracle(format!("cannot sample from the {} kernel", kernel.kind())))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let z = DVector::from_fn(n * points, |_, _| rng.sample::<f64, _>(StandardNormal));
    let f = chol.l() * z;
    let sd = noise_var.sqrt();
    let mut samples: Vec<Sample> = (0..points)
        .map(|t| Sample {
            time: times[t],
            value: DVector::from_fn(n, |i, _| f[t * n + i] + sd * rng.sample::<f64, _>(StandardNormal)),
        })
        .collect();
    samples.shuffle(&mut rng);
    let n_train = ((points as f64) * train_fraction).round() as usize;
    let test = samples.split_off(n_train.min(points));
    let mut train = samples;
    train.sort_by(|a, b| a.time.total_cmp(&b.time));
    let mut test = test;
    test.sort_by(|a, b| a.time.total_cmp(&b.time));
    Ok(RegressionTask {
        kernel: kernel.clone(),
        noise_var,
        train,
        test,
    })
}

/// Mean squared error against the test targets, over all outputs.
pub fn test_mse(task: &RegressionTask, predictions: &[DVector<f64>]) -> f64 {
    let mut total = 0.0;
    let mut count = 0usize;
    for (s, p) in task.test.iter().zip(predictions) {
        total += (&s.value - p).norm_squared();
        count += s.value.len();
    }
    total / count.max(1) as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParityRow {
    pub kind: KernelKind,
    pub order: usize,
    pub gp_mse: Vec<f64>,
    pub ssm_mse: Vec<f64>,
    pub error: Option<String>,
}

fn mean_sd(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    if v.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let m = v.iter().sum::<f64>() / n;
    let var = if v.len() > 1 {
        v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    (m, var.sqrt())
}

impl ParityRow {
    pub fn gp_summary(&self) -> (f64, f64) {
        mean_sd(&self.gp_mse)
    }

    pub fn ssm_summary(&self) -> (f64, f64) {
        mean_sd(&self.ssm_mse)
    }

    /// Mean SSM MSE over mean exact-GP MSE.
    pub fn ratio(&self) -> f64 {
        self.ssm_summary().0 / self.gp_summary().0
    }
}

/// For every configured kernel and seed: sample a task, predict with the
/// exact GP and with the approximation at the recommended order. Failed
/// cells are reported in the row and do not stop the benchmark.
pub fn run_parity_benchmark(cfg: &ParityConfig) -> Result<Vec<ParityRow>> {
    cfg.validate()?;
    Ok(cfg
        .kernels
        .par_iter()
        .map(|kernel| {
            let order = recommended_order(kernel.kind());
            let cells: Result<Vec<(f64, f64)>> = cfg
                .seeds
                .iter()
                .map(|&seed| {
                    let task = sample_task(kernel, cfg.points, cfg.train_fraction, cfg.noise_var, seed)?;
                    let gp = test_mse(&task, &gp_predict(&task)?);
                    let ssm = test_mse(&task, &ssm_predict(&task, order, &cfg.conversion)?);
                    Ok((gp, ssm))
                })
                .collect();
            match cells {
                Ok(c) => ParityRow {
                    kind: kernel.kind(),
                    order,
                    gp_mse: c.iter().map(|x| x.0).collect(),
                    ssm_mse: c.iter().map(|x| x.1).collect(),
                    error: None,
                },
                Err(e) => {
                    warn!("parity cell {} failed: {e}", kernel.kind());
                    ParityRow {
                        kind: kernel.kind(),
                        order,
                        gp_mse: Vec::new(),
                        ssm_mse: Vec::new(),
                        error: Some(e.to_string()),
                    }
                }
            }
        })
        .collect())
}
