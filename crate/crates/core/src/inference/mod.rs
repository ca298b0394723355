//! Kalman filtering and RTS smoothing over time-varying linear-Gaussian
//! state-space models, in a sequential and a parallel-scan variant.
//!
//! All trials of a batch share the model, so they share every covariance;
//! only the means differ. Means are therefore stored as `S × R` matrices
//! (one column per trial) and each covariance is computed once.
//!
//! The observation update works in state space: with `Λ = EᵀV⁻¹E` and
//! `iₜ = EᵀV⁻¹(yₜ − d)` the gain-weighted covariance is
//! `M = (I + PΛ)⁻¹P`, which never forms a `D × D` inverse and never inverts
//! the (possibly near-singular) predicted covariance.

mod parallel;
pub mod scan;
mod sequential;

use std::f64::consts::PI;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::error::{AdmError, Result};
use crate::linalg;
use crate::model::AdmModel;

pub use parallel::{
    combine_filter, combine_smoother, parallel_filter, parallel_smoother, FilterElement,
    SmootherElement,
};
pub use scan::ScanStats;
pub use sequential::{seq_filter, seq_smoother};

const LN_2PI: f64 = 1.837_877_066_409_345_3;

/// Per-step observation summarized in state space.
#[derive(Debug, Clone)]
pub struct InfoObservation {
    /// `EᵀV⁻¹E` (`S × S`), shared across steps when the emission is fixed.
    pub precision: Arc<DMatrix<f64>>,
    /// `EᵀV⁻¹(yₜ − d)` for every trial (`S × R`).
    pub info: DMatrix<f64>,
    /// `(yₜ − d)ᵀV⁻¹(yₜ − d)` per trial.
    pub quad: DVector<f64>,
    /// `log|V|`.
    pub log_det_noise: f64,
    /// Observation dimension `D` (zero for a missing step).
    pub dim: usize,
}

impl InfoObservation {
    pub fn missing(state_dim: usize, trials: usize) -> Self {
        Self {
            precision: Arc::new(DMatrix::zeros(state_dim, state_dim)),
            info: DMatrix::zeros(state_dim, trials),
            quad: DVector::zeros(trials),
            log_det_noise: 0.0,
            dim: 0,
        }
    }

    pub fn is_missing(&self) -> bool {
        self.dim == 0
    }
}

/// A batch of trials under one time-varying linear-Gaussian model, ready for
/// filtering. `transitions[t]`/`noises[t]` map step `t-1` to `t`; entry 0 is
/// never used.
#[derive(Debug, Clone)]
pub struct GaussianSequence {
    pub prior_mean: DVector<f64>,
    pub prior_cov: DMatrix<f64>,
    pub transitions: Vec<DMatrix<f64>>,
    pub noises: Vec<DMatrix<f64>>,
    pub observations: Vec<InfoObservation>,
}

impl GaussianSequence {
    /// Build from explicit parameters and `D × T` observation matrices.
    #[allow(clippy::too_many_arguments)]
    pub fn from_lgssm(
        prior_mean: DVector<f64>,
        prior_cov: DMatrix<f64>,
        transitions: Vec<DMatrix<f64>>,
        noises: Vec<DMatrix<f64>>,
        emission: &DMatrix<f64>,
        noise_var: &DVector<f64>,
        bias: &DVector<f64>,
        trials: &[&DMatrix<f64>],
    ) -> Result<Self> {
        let s = prior_mean.len();
        let d = emission.nrows();
        let bins = transitions.len();
        if trials.is_empty() {
            return Err(AdmError::DimensionMismatch("no trials given".into()));
        }
        if emission.ncols() != s || noise_var.len() != d || bias.len() != d {
            return Err(AdmError::DimensionMismatch(format!(
                "emission {:?}, noise {}, bias {} incompatible with state dim {s}",
                emission.shape(),
                noise_var.len(),
                bias.len()
            )));
        }
        if noises.len() != bins || prior_cov.shape() != (s, s) {
            return Err(AdmError::DimensionMismatch(
                "transition/noise/prior sizes disagree".into(),
            ));
        }
        for (r, y) in trials.iter().enumerate() {
            if y.shape() != (d, bins) {
                return Err(AdmError::DimensionMismatch(format!(
                    "trial {r} has shape {:?}, expected ({d}, {bins})",
                    y.shape()
                )));
            }
        }
        if noise_var.iter().any(|v| !(*v > 0.0)) {
            return Err(AdmError::Inference {
                step: 0,
                reason: "observation noise variances must be positive".into(),
            });
        }
        let inv_v = noise_var.map(|v| 1.0 / v);
        let weighted_t = {
            // EᵀV⁻¹ (S × D)
            let mut w = emission.transpose();
            for (j, mut col) in w.column_iter_mut().enumerate() {
                col *= inv_v[j];
            }
            w
        };
        let precision = Arc::new(linalg::symmetrized(&weighted_t * emission));
        let log_det_noise: f64 = noise_var.iter().map(|v| v.ln()).sum();
        let r = trials.len();
        let observations = (0..bins)
            .into_par_iter()
            .map(|t| {
                let mut centered = DMatrix::zeros(d, r);
                for (k, y) in trials.iter().enumerate() {
                    centered.set_column(k, &(y.column(t) - bias));
                }
                let info = &weighted_t * &centered;
                let quad = DVector::from_fn(r, |k, _| {
                    centered
                        .column(k)
                        .iter()
                        .zip(inv_v.iter())
                        .map(|(e, w)| e * e * w)
                        .sum()
                });
                InfoObservation {
                    precision: precision.clone(),
                    info,
                    quad,
                    log_det_noise,
                    dim: d,
                }
            })
            .collect();
        Ok(Self {
            prior_mean,
            prior_cov,
            transitions,
            noises,
            observations,
        })
    }

    /// Sequence for a batch of trials under the joint ADM model.
    pub fn from_model(model: &AdmModel, trials: &[&DMatrix<f64>]) -> Result<Self> {
        let bins = model.layout().bins;
        let (mu0, p0) = model.stationary_initial()?;
        let steps: Vec<_> = (0..bins)
            .into_par_iter()
            .map(|t| model.assemble_joint(t))
            .collect::<Result<_>>()?;
        let (transitions, noises) = steps.into_iter().map(|j| (j.transition, j.noise)).unzip();
        let fa = model.fa();
        Self::from_lgssm(
            mu0,
            p0,
            transitions,
            noises,
            &model.emission(),
            &fa.noise,
            &fa.bias,
            trials,
        )
    }

    pub fn state_dim(&self) -> usize {
        self.prior_mean.len()
    }

    pub fn bins(&self) -> usize {
        self.transitions.len()
    }

    pub fn trials(&self) -> usize {
        self.observations.first().map_or(0, |o| o.info.ncols())
    }
}

#[derive(Debug, Clone)]
pub struct FilterOutput {
    /// Predicted means `m⁻ₜ` (`S × R` per step; step 0 holds the prior).
    pub predicted_means: Vec<DMatrix<f64>>,
    pub predicted_covs: Vec<DMatrix<f64>>,
    pub filtered_means: Vec<DMatrix<f64>>,
    pub filtered_covs: Vec<DMatrix<f64>>,
    /// `log p(yₜ | y₀:ₜ₋₁)` per trial, per step.
    pub log_evidence: Vec<DVector<f64>>,
    pub scan_stats: Option<ScanStats>,
}

impl FilterOutput {
    /// Total log marginal likelihood of each trial.
    pub fn total_log_evidence(&self) -> DVector<f64> {
        let r = self.log_evidence.first().map_or(0, |v| v.len());
        self.log_evidence
            .iter()
            .fold(DVector::zeros(r), |acc, v| acc + v)
    }
}

#[derive(Debug, Clone)]
pub struct SmootherOutput {
    /// Smoothed means `x̃ₜ` (`S × R`).
    pub means: Vec<DMatrix<f64>>,
    /// Smoothed covariances `Pˢₜ`.
    pub covs: Vec<DMatrix<f64>>,
    /// `Cov(xₜ, xₜ₋₁ | y)`; entry 0 is zero.
    pub cross_covs: Vec<DMatrix<f64>>,
    pub scan_stats: Option<ScanStats>,
}

impl SmootherOutput {
    /// `Cₜ = Pˢₜ + x̃ₜx̃ₜᵀ` for trial `r`.
    pub fn second_moment(&self, t: usize, r: usize) -> DMatrix<f64> {
        let m = self.means[t].column(r);
        &self.covs[t] + m * m.transpose()
    }

    /// `Cₜ,ₜ₋₁ = E[xₜxₜ₋₁ᵀ]` for trial `r` (`t ≥ 1`).
    pub fn cross_moment(&self, t: usize, r: usize) -> DMatrix<f64> {
        let a = self.means[t].column(r);
        let b = self.means[t - 1].column(r);
        &self.cross_covs[t] + a * b.transpose()
    }
}

/// Sequential (`O(T)` depth) or parallel-scan (`O(log T)` depth) inference.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Sequential,
    #[default]
    Parallel,
}

impl std::str::FromStr for Method {
    type Err = AdmError;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "sequential" | "seq" => Ok(Method::Sequential),
            "parallel" | "scan" => Ok(Method::Parallel),
            other => Err(AdmError::Config(format!("unknown inference method `{other}`"))),
        }
    }
}

pub fn filter(seq: &GaussianSequence, method: Method) -> Result<FilterOutput> {
    match method {
        Method::Sequential => seq_filter(seq),
        Method::Parallel => parallel_filter(seq),
    }
}

pub fn smooth(seq: &GaussianSequence, filt: &FilterOutput, method: Method) -> Result<SmootherOutput> {
    match method {
        Method::Sequential => seq_smoother(seq, filt),
        Method::Parallel => parallel_smoother(seq, filt),
    }
}

/// Filter and smooth a batch of trials under `model`.
pub fn posterior(
    model: &AdmModel,
    trials: &[&DMatrix<f64>],
    method: Method,
) -> Result<(GaussianSequence, FilterOutput, SmootherOutput)> {
    let seq = GaussianSequence::from_model(model, trials)?;
    let filt = filter(&seq, method)?;
    let sm = smooth(&seq, &filt, method)?;
    Ok((seq, filt, sm))
}

/// Result of conditioning one Gaussian predictive on one observation.
pub(crate) struct Update {
    pub mean: DMatrix<f64>,
    pub cov: DMatrix<f64>,
    pub evidence: DVector<f64>,
}

/// `M = (I + PΛ)⁻¹P` together with the Joseph-form posterior covariance
/// `(I − MΛ)P(I − MΛ)ᵀ + MΛM` and `log|I + PΛ|`.
pub(crate) fn gain_and_posterior(
    p: &DMatrix<f64>,
    lambda: &DMatrix<f64>,
    step: usize,
) -> Result<(DMatrix<f64>, DMatrix<f64>, f64)> {
    let s = p.nrows();
    let b = DMatrix::identity(s, s) + p * lambda;
    let lu = b.lu();
    let m = lu.solve(p).ok_or_else(|| AdmError::Inference {
        step,
        reason: "innovation system is singular".into(),
    })?;
    let log_det: f64 = lu.u().diagonal().iter().map(|d| d.abs().ln()).sum();
    if !log_det.is_finite() || m.iter().any(|v| !v.is_finite()) {
        return Err(AdmError::Inference {
            step,
            reason: "innovation covariance is not positive definite".into(),
        });
    }
    let m = linalg::symmetrized(m);
    let k = DMatrix::identity(s, s) - &m * lambda;
    let ml = &m * lambda;
    let post = linalg::symmetrized(&k * p * k.transpose() + &ml * &m);
    Ok((m, post, log_det))
}

pub(crate) fn update(
    mean: &DMatrix<f64>,
    cov: &DMatrix<f64>,
    obs: &InfoObservation,
    step: usize,
) -> Result<Update> {
    let r = mean.ncols();
    if obs.is_missing() {
        return Ok(Update {
            mean: mean.clone(),
            cov: cov.clone(),
            evidence: DVector::zeros(r),
        });
    }
    let lambda = obs.precision.as_ref();
    let (m, post, log_det_b) = gain_and_posterior(cov, lambda, step)?;
    let w = &obs.info - lambda * mean;
    let mw = &m * &w;
    let new_mean = mean + &mw;
    let lm = lambda * mean;
    let evidence = DVector::from_fn(r, |k, _| {
        let mk = mean.column(k);
        let rvr = obs.quad[k] - 2.0 * obs.info.column(k).dot(&mk) + mk.dot(&lm.column(k));
        let rsr = rvr - w.column(k).dot(&mw.column(k));
        -0.5 * (obs.dim as f64 * LN_2PI + obs.log_det_noise + log_det_b + rsr)
    });
    if evidence.iter().any(|v| !v.is_finite()) {
        return Err(AdmError::Inference {
            step,
            reason: "non-finite log-evidence".into(),
        });
    }
    Ok(Update {
        mean: new_mean,
        cov: post,
        evidence,
    })
}

pub(crate) fn predict(
    mean: &DMatrix<f64>,
    cov: &DMatrix<f64>,
    f: &DMatrix<f64>,
    q: &DMatrix<f64>,
) -> (DMatrix<f64>, DMatrix<f64>) {
    (f * mean, linalg::symmetrized(f * cov * f.transpose() + q))
}

/// Smoother gain `G = P⁺Fᵀ(P⁻)⁻¹`.
pub(crate) fn smoother_gain(
    filtered_cov: &DMatrix<f64>,
    next_f: &DMatrix<f64>,
    next_pred_cov: &DMatrix<f64>,
    step: usize,
) -> Result<DMatrix<f64>> {
    let rhs = next_f * filtered_cov;
    let gt = match next_pred_cov.clone().cholesky() {
        Some(ch) => ch.solve(&rhs),
        None => next_pred_cov
            .clone()
            .lu()
            .solve(&rhs)
            .ok_or_else(|| AdmError::Inference {
                step,
                reason: "predicted covariance is singular".into(),
            })?,
    };
    if gt.iter().any(|v| !v.is_finite()) {
        return Err(AdmError::Inference {
            step,
            reason: "non-finite smoother gain".into(),
        });
    }
    Ok(gt.transpose())
}

/// Expected complete-data log-likelihood `E[log p(x, y)]` under the
/// smoothed posterior, summed over the trials of the batch.
pub fn expected_loglik(seq: &GaussianSequence, sm: &SmootherOutput) -> Result<f64> {
    let bins = seq.bins();
    let s = seq.state_dim() as f64;
    let r = seq.trials();
    let rf = r as f64;

    let emission: f64 = (0..bins)
        .into_par_iter()
        .map(|t| {
            let obs = &seq.observations[t];
            if obs.is_missing() {
                return 0.0;
            }
            let lambda = obs.precision.as_ref();
            let x = &sm.means[t];
            let lx = lambda * x;
            let mut acc = rf * (obs.dim as f64 * LN_2PI + obs.log_det_noise);
            acc += rf * (lambda.component_mul(&sm.covs[t])).sum();
            for k in 0..r {
                let xk = x.column(k);
                acc += obs.quad[k] - 2.0 * obs.info.column(k).dot(&xk) + xk.dot(&lx.column(k));
            }
            -0.5 * acc
        })
        .sum();

    let initial = {
        let ch = seq
            .prior_cov
            .clone()
            .cholesky()
            .ok_or_else(|| AdmError::Inference {
                step: 0,
                reason: "initial covariance is not positive definite".into(),
            })?;
        let mut dev = sm.means[0].clone();
        for mut c in dev.column_iter_mut() {
            c -= &seq.prior_mean;
        }
        let second = rf * &sm.covs[0] + &dev * dev.transpose();
        let tr = ch.solve(&second).trace();
        -0.5 * (rf * (s * LN_2PI + linalg::log_det_from_cholesky(&ch)) + tr)
    };

    let transition: Result<f64> = (1..bins)
        .into_par_iter()
        .map(|t| transition_term(seq, sm, t))
        .sum();
    Ok(emission + initial + transition?)
}

fn transition_term(seq: &GaussianSequence, sm: &SmootherOutput, t: usize) -> Result<f64> {
    let f = &seq.transitions[t];
    let q = &seq.noises[t];
    let r = seq.trials() as f64;
    let s = seq.state_dim() as f64;
    let ch = q.clone().cholesky().ok_or_else(|| AdmError::Inference {
        step: t,
        reason: "process noise is not positive definite".into(),
    })?;
    let resid = &sm.means[t] - f * &sm.means[t - 1];
    let fc = f * sm.cross_covs[t].transpose();
    let cov_part = &sm.covs[t] - &fc - fc.transpose() + f * &sm.covs[t - 1] * f.transpose();
    let sigma = r * cov_part + &resid * resid.transpose();
    let tr = ch.solve(&sigma).trace();
    Ok(-0.5 * (r * (s * LN_2PI + linalg::log_det_from_cholesky(&ch)) + tr))
}

/// Held-out likelihood of a batch of trials.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ObservationLogLik {
    /// `Σₜ log N(yₜ | E x̃ₜ + d, V)` with smoothed means (primary metric).
    pub plug_in: f64,
    /// Exact marginal `Σₜ log p(yₜ | y₀:ₜ₋₁)`.
    pub marginal: f64,
}

pub fn observation_loglik(
    model: &AdmModel,
    trials: &[&DMatrix<f64>],
    method: Method,
) -> Result<ObservationLogLik> {
    let (_, filt, sm) = posterior(model, trials, method)?;
    let marginal = filt.total_log_evidence().sum();
    let e = model.emission();
    let fa = model.fa();
    let plug_in = plug_in_loglik(&e, &fa.bias, &fa.noise, trials, &sm.means);
    Ok(ObservationLogLik { plug_in, marginal })
}

/// `Σ_r Σₜ log N(y_rt | E x̃_rt + d, diag(V))`.
pub fn plug_in_loglik(
    emission: &DMatrix<f64>,
    bias: &DVector<f64>,
    noise_var: &DVector<f64>,
    trials: &[&DMatrix<f64>],
    means: &[DMatrix<f64>],
) -> f64 {
    let log_det: f64 = noise_var.iter().map(|v| v.ln()).sum();
    let d = emission.nrows() as f64;
    means
        .par_iter()
        .enumerate()
        .map(|(t, x)| {
            let pred = emission * x;
            let mut acc = 0.0;
            for (k, y) in trials.iter().enumerate() {
                for i in 0..emission.nrows() {
                    let e = y[(i, t)] - pred[(i, k)] - bias[i];
                    acc += e * e / noise_var[i];
                }
                acc += d * (2.0 * PI).ln() + log_det;
            }
            -0.5 * acc
        })
        .sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ln_2pi_constant() {
        assert!((LN_2PI - (2.0 * PI).ln()).abs() < 1e-15);
    }

    #[test]
    fn gain_matches_kalman_gain_form() {
        let p = DMatrix::from_row_slice(2, 2, &[2.0, 0.3, 0.3, 1.0]);
        let e = DMatrix::from_row_slice(1, 2, &[1.0, -0.5]);
        let v = 0.4;
        let lambda = e.transpose() * &e / v;
        let (_, post, _) = gain_and_posterior(&p, &lambda, 0).unwrap();
        let s = (&e * &p * e.transpose())[(0, 0)] + v;
        let k = &p * e.transpose() / s;
        let expect = &p - &k * &e * &p;
        assert!(linalg::max_abs_diff(&post, &expect) < 1e-12);
    }
}
