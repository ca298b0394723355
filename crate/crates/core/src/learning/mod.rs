//! EM fitting: closed-form factor-analysis updates and projected gradient
//! ascent on the kernel parameters (per-step delays, per-group length
//! scales).

mod init;
pub mod objective;

use std::time::Instant;

use log::{debug, info, warn};
use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::convert::ConversionOptions;
use crate::error::{AdmError, Result};
use crate::inference::{self, expected_loglik, GaussianSequence, Method, SmootherOutput};
use crate::kernels::MoseParams;
use crate::linalg;
use crate::model::{AcrossGroup, AdmModel, FaParams, LatentLayout, TrialSet, WithinGroup};

pub use objective::{GradientMode, InitialMoments, StepMoments, TransitionMoments};

/// Conversion options used while fitting. The larger diagonal loading keeps
/// the per-step likelihood in the delays smooth enough for gradient ascent;
/// with the default `1e-6` a delayed copy is almost noiselessly predictable
/// and the likelihood surface in each delay becomes sharply multimodal.
pub const LEARNING_CONVERSION: ConversionOptions = ConversionOptions {
    jitter_start: 1e-2,
    jitter_limit: 1e-1,
    stabilizer: 1e-6,
};

/// Which objective the delay line search checks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DelayObjective {
    /// Backtrack on the expected complete-data log-likelihood (plain EM).
    Expected,
    /// Step along the same gradient (equal to the gradient of `log p(Y)` at
    /// the current parameters) but backtrack on the exact marginal
    /// likelihood.
    #[default]
    Marginal,
}

/// How delays start out before EM.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum DelayInit {
    /// All delays zero.
    Zero,
    /// Constant delays at the peak of the lagged covariance between the
    /// region latents.
    #[default]
    Lagged,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FitConfig {
    pub across: usize,
    pub within: usize,
    pub order: usize,
    pub max_iters: usize,
    /// Stop when the relative gain of the expected log-likelihood in the
    /// M-step, and of the marginal likelihood in the delay step, both fall
    /// below this.
    pub loglik_rel_tol: f64,
    /// Absolute delay bound in bins; `None` means `delay_bound_scale · l`.
    pub delay_bound: Option<f64>,
    pub delay_bound_scale: f64,
    /// Initial step (bins per unit per-trial gradient) for delay ascent.
    pub delay_step: f64,
    /// Initial step on `log l` per unit per-sample gradient.
    pub length_scale_step: f64,
    /// Gradient-ascent passes per M-step.
    pub kernel_steps: usize,
    pub max_backtracks: usize,
    pub armijo: f64,
    /// Weight of the `Σₜ‖dₜ − dₜ₋₁‖²` penalty, per trial.
    pub smoothness: f64,
    pub gradient: GradientMode,
    pub fd_step: f64,
    pub learn_delays: bool,
    pub learn_length_scales: bool,
    pub method: Method,
    pub delay_init: DelayInit,
    pub delay_objective: DelayObjective,
    /// Initial global step of the marginal-likelihood delay update.
    pub marginal_delay_step: f64,
    pub conversion: ConversionOptions,
    /// Relative jitters of continuation stages run after the main fit. The
    /// large loading used while delays settle biases the model (shorter
    /// length scales, a worse marginal likelihood); resuming EM with
    /// smaller loadings removes most of that bias.
    pub anneal_jitters: Vec<f64>,
    /// Iteration cap of each continuation stage (also capped by
    /// `max_iters`).
    pub anneal_iters: usize,
    pub seed: u64,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            across: 1,
            within: 0,
            order: 2,
            max_iters: 200,
            loglik_rel_tol: 1e-5,
            delay_bound: None,
            delay_bound_scale: 3.0,
            delay_step: 1.0,
            length_scale_step: 0.1,
            kernel_steps: 1,
            max_backtracks: 20,
            armijo: 1e-4,
            smoothness: 0.0,
            gradient: GradientMode::Analytic,
            fd_step: 1e-6,
            learn_delays: true,
            learn_length_scales: true,
            method: Method::Parallel,
            delay_init: DelayInit::Lagged,
            delay_objective: DelayObjective::Marginal,
            marginal_delay_step: 1.0,
            conversion: LEARNING_CONVERSION,
            anneal_jitters: Vec::new(),
            anneal_iters: 40,
            seed: 0,
        }
    }
}

impl FitConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(AdmError::Config(msg));
        if self.across + self.within == 0 {
            return bad("at least one latent group is required".into());
        }
        if self.order == 0 {
            return bad("order must be at least 1".into());
        }
        if !(self.loglik_rel_tol > 0.0) {
            return bad(format!("loglik_rel_tol must be > 0, got {}", self.loglik_rel_tol));
        }
        if let Some(b) = self.delay_bound {
            if !(b > 0.0) {
                return bad(format!("delay_bound must be > 0, got {b}"));
            }
        }
        if !(self.delay_bound_scale > 0.0) {
            return bad("delay_bound_scale must be > 0".into());
        }
        if !(self.delay_step > 0.0) || !(self.length_scale_step > 0.0) {
            return bad("step sizes must be > 0".into());
        }
        if !(self.smoothness >= 0.0) {
            return bad(format!("smoothness must be >= 0, got {}", self.smoothness));
        }
        if !(self.armijo > 0.0 && self.armijo < 1.0) {
            return bad("armijo constant must lie in (0, 1)".into());
        }
        if !(self.fd_step > 0.0) {
            return bad("fd_step must be > 0".into());
        }
        if let Some(j) = self.anneal_jitters.iter().find(|j| !(**j > 0.0)) {
            return bad(format!("anneal jitters must be > 0, got {j}"));
        }
        Ok(())
    }

    fn bound_for(&self, length_scale: f64) -> f64 {
        self.delay_bound
            .unwrap_or(self.delay_bound_scale * length_scale)
    }
}

/// One EM iteration in the fit log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub iteration: usize,
    /// `Q(Θᵏ | Θᵏ)`, plus the smoothness penalty when it is on.
    pub expected_loglik: f64,
    /// `Q(Θ' | Θᵏ)` after the expected-log-likelihood updates (factor
    /// analysis, length scales, and delays unless they follow the marginal
    /// likelihood), plus the penalty.
    pub expected_loglik_after: f64,
    /// `log p(Y | Θᵏ)`, plus the penalty.
    pub marginal_loglik: f64,
    pub delay_grad_norm: f64,
    pub length_scale_grad_norm: f64,
    /// Length scales after the M-step: across groups, then within groups.
    pub length_scales: Vec<f64>,
    /// Per across group, per region, time-averaged delay after the M-step.
    pub mean_delays: Vec<Vec<f64>>,
    pub elapsed_secs: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FitTrace {
    pub rows: Vec<TraceRow>,
    pub converged: bool,
}

impl FitTrace {
    /// Largest relative decrease of the M-step objective,
    /// `max(Q(Θᵏ|Θᵏ) − Q(Θᵏ⁺¹|Θᵏ)) / |Q(Θᵏ|Θᵏ)|`, and of the marginal
    /// likelihood between consecutive iterations.
    pub fn worst_decrease(&self) -> (f64, f64) {
        let q = self
            .rows
            .iter()
            .map(|r| (r.expected_loglik - r.expected_loglik_after) / r.expected_loglik.abs())
            .fold(f64::NEG_INFINITY, f64::max);
        let m = self
            .rows
            .windows(2)
            .map(|w| (w[0].marginal_loglik - w[1].marginal_loglik) / w[0].marginal_loglik.abs())
            .fold(f64::NEG_INFINITY, f64::max);
        (q, m)
    }
}

/// Smoothed moments summed over trials.
#[derive(Debug, Clone)]
pub struct SufficientStats {
    /// Smoothed means per step (`S × R`).
    pub means: Vec<DMatrix<f64>>,
    /// `Σ_r E[xₜxₜᵀ]`.
    pub second: Vec<DMatrix<f64>>,
    /// `Σ_r E[xₜxₜ₋₁ᵀ]`; entry 0 is zero.
    pub cross: Vec<DMatrix<f64>>,
    pub trials: usize,
}

impl SufficientStats {
    pub fn from_smoother(sm: &SmootherOutput) -> Self {
        let bins = sm.means.len();
        let r = sm.means.first().map_or(0, |m| m.ncols());
        let rf = r as f64;
        let second = (0..bins)
            .into_par_iter()
            .map(|t| rf * &sm.covs[t] + &sm.means[t] * sm.means[t].transpose())
            .collect();
        let cross = (0..bins)
            .into_par_iter()
            .map(|t| {
                if t == 0 {
                    DMatrix::zeros(sm.covs[0].nrows(), sm.covs[0].ncols())
                } else {
                    rf * &sm.cross_covs[t] + &sm.means[t] * sm.means[t - 1].transpose()
                }
            })
            .collect();
        Self {
            means: sm.means.clone(),
            second,
            cross,
            trials: r,
        }
    }

    fn bins(&self) -> usize {
        self.means.len()
    }

    /// Moments of an across group at step `t` (initial term for `t = 0`).
    pub fn across_step(&self, layout: &LatentLayout, group: usize, t: usize) -> StepMoments {
        let n = layout.regions;
        let np = n * layout.order;
        let o = layout.across_offset(group);
        let count = self.trials as f64;
        if t == 0 {
            return StepMoments::Initial(InitialMoments {
                ss: self.second[0].view((o, o), (np, np)).into_owned(),
                count,
            });
        }
        StepMoments::Transition(TransitionMoments {
            xx: self.second[t].view((o, o), (n, n)).into_owned(),
            xs: self.cross[t].view((o, o), (n, np)).into_owned(),
            ss: self.second[t - 1].view((o, o), (np, np)).into_owned(),
            count,
        })
    }

    /// Moments of a within group, pooled over regions and over steps
    /// (initial term and transition terms).
    pub fn within_pooled(&self, layout: &LatentLayout, group: usize) -> (InitialMoments, TransitionMoments) {
        let p = layout.order;
        let mut init = DMatrix::zeros(p, p);
        let mut xx = DMatrix::zeros(1, 1);
        let mut xs = DMatrix::zeros(1, p);
        let mut ss = DMatrix::zeros(p, p);
        for n in 0..layout.regions {
            let o = layout.within_offset(group, n);
            init += self.second[0].view((o, o), (p, p));
            for t in 1..self.bins() {
                xx += self.second[t].view((o, o), (1, 1));
                xs += self.cross[t].view((o, o), (1, p));
                ss += self.second[t - 1].view((o, o), (p, p));
            }
        }
        let rn = (self.trials * layout.regions) as f64;
        (
            InitialMoments { ss: init, count: rn },
            TransitionMoments {
                xx,
                xs,
                ss,
                count: rn * (self.bins() as f64 - 1.0),
            },
        )
    }
}

/// Closed-form factor-analysis update: per region, regress each channel on
/// the region's current latent values plus an intercept.
pub fn m_step_fa(
    layout: &LatentLayout,
    stats: &SufficientStats,
    trials: &[&DMatrix<f64>],
) -> Result<FaParams> {
    let m = layout.latents_per_region();
    let r = trials.len();
    let bins = stats.bins();
    let n_samples = (r * bins) as f64;
    let d = layout.obs_dim();
    let mut loadings = Vec::with_capacity(layout.regions);
    let mut bias = DVector::zeros(d);
    let mut noise = DVector::zeros(d);
    for i in 0..layout.regions {
        let rows = layout.region_rows(i);
        let coords: Vec<usize> = (0..m).map(|k| layout.current_coordinate(k, i)).collect();
        let (szz, syz, syy) = (0..bins)
            .into_par_iter()
            .map(|t| {
                let mut szz = DMatrix::zeros(m + 1, m + 1);
                let mut syz = DMatrix::zeros(rows.len(), m + 1);
                let mut syy = DVector::zeros(rows.len());
                let x = DMatrix::from_fn(m + 1, r, |a, k| {
                    if a < m {
                        stats.means[t][(coords[a], k)]
                    } else {
                        1.0
                    }
                });
                for a in 0..m {
                    for b in 0..m {
                        szz[(a, b)] = stats.second[t][(coords[a], coords[b])];
                    }
                    let s: f64 = x.row(a).sum();
                    szz[(a, m)] = s;
                    szz[(m, a)] = s;
                }
                szz[(m, m)] = r as f64;
                let y = DMatrix::from_fn(rows.len(), r, |a, k| trials[k][(rows.start + a, t)]);
                syz += &y * x.transpose();
                for a in 0..rows.len() {
                    syy[a] = y.row(a).norm_squared();
                }
                (szz, syz, syy)
            })
            .reduce(
                || {
                    (
                        DMatrix::zeros(m + 1, m + 1),
                        DMatrix::zeros(rows.len(), m + 1),
                        DVector::zeros(rows.len()),
                    )
                },
                |a, b| (a.0 + b.0, a.1 + b.1, a.2 + b.2),
            );
        let szz = linalg::symmetrized(szz);
        let chol = match szz.clone().cholesky() {
            Some(c) => c,
            None => linalg::jittered_cholesky(&szz, 1e-10, 1e-4)
                .map(|(c, _)| c)
                .ok_or_else(|| {
                    AdmError::Learning(format!(
                        "factor-analysis normal matrix of region {i} is singular"
                    ))
                })?,
        };
        // W = Syz Szz⁻¹
        let w = chol.solve(&syz.transpose()).transpose();
        let wszz = &w * &szz;
        let mut c = DMatrix::zeros(rows.len(), m);
        for (a, row) in rows.clone().enumerate() {
            c.row_mut(a).copy_from(&w.view((a, 0), (1, m)));
            bias[row] = w[(a, m)];
            let wr = w.row(a);
            let v = (syy[a] - 2.0 * wr.dot(&syz.row(a)) + wr.dot(&wszz.row(a))) / n_samples;
            noise[row] = v.max(1e-8);
        }
        loadings.push(c);
    }
    Ok(FaParams {
        loadings,
        bias,
        noise,
    })
}

/// Per-parameter step sizes carried across EM iterations.
#[derive(Debug, Clone)]
pub struct KernelStepState {
    pub delay_steps: Vec<Vec<f64>>,
    pub marginal_step: f64,
    pub across_l_steps: Vec<f64>,
    pub within_l_steps: Vec<f64>,
}

impl KernelStepState {
    pub fn new(layout: &LatentLayout, cfg: &FitConfig) -> Self {
        Self {
            delay_steps: vec![vec![cfg.delay_step; layout.bins]; layout.across],
            marginal_step: cfg.marginal_delay_step,
            across_l_steps: vec![cfg.length_scale_step; layout.across],
            within_l_steps: vec![cfg.length_scale_step; layout.within],
        }
    }
}

/// Result of [`m_step_kernel`].
#[derive(Debug, Clone)]
pub struct KernelUpdate {
    pub across: Vec<AcrossGroup>,
    pub within: Vec<WithinGroup>,
    pub delay_grad_norm: f64,
    pub length_scale_grad_norm: f64,
}

struct StepOutcome {
    delays: Vec<f64>,
    step: f64,
    grad_sq: f64,
}

fn penalty(
    cfg: &FitConfig,
    trials: f64,
    d: &[f64],
    prev: Option<&[f64]>,
    next: Option<&[f64]>,
) -> (f64, Vec<f64>) {
    let mut value = 0.0;
    let mut grad = vec![0.0; d.len()];
    if cfg.smoothness == 0.0 {
        return (0.0, grad);
    }
    let w = cfg.smoothness * trials;
    for nb in [prev, next].into_iter().flatten() {
        for k in 0..d.len() {
            let diff = d[k] - nb[k];
            value -= w * diff * diff;
            grad[k] -= 2.0 * w * diff;
        }
    }
    (value, grad)
}

#[allow(clippy::too_many_arguments)]
fn ascend_delay_step(
    cfg: &FitConfig,
    order: usize,
    mom: &StepMoments,
    delays: &[f64],
    length_scale: f64,
    prev: Option<&[f64]>,
    next: Option<&[f64]>,
    bound: f64,
    step: f64,
    count: f64,
) -> Result<StepOutcome> {
    let n = delays.len();
    let objective = |d: &[f64], grad: bool| -> Result<(f64, Vec<f64>)> {
        let params = MoseParams::new(d.to_vec(), length_scale);
        let (v, g) = objective::step_term(&params, order, &cfg.conversion, mom, cfg.gradient, cfg.fd_step, grad)?;
        let (pv, pg) = penalty(cfg, count, d, prev, next);
        let g = if grad {
            (0..n - 1).map(|k| g[k] + pg[k + 1]).collect()
        } else {
            g
        };
        Ok((v + pv, g))
    };
    let (f0, g) = objective(delays, true)?;
    let grad_sq: f64 = g.iter().map(|x| (x / count).powi(2)).sum();
    let mut alpha = step;
    for _ in 0..=cfg.max_backtracks {
        let mut cand = delays.to_vec();
        for k in 1..n {
            cand[k] = (delays[k] + alpha * g[k - 1] / count).clamp(-bound, bound);
        }
        let moved: f64 = (1..n).map(|k| (cand[k] - delays[k]) * g[k - 1]).sum();
        if moved <= 0.0 {
            break;
        }
        match objective(&cand, false) {
            Ok((f, _)) if f >= f0 + cfg.armijo * moved => {
                return Ok(StepOutcome {
                    delays: cand,
                    step: (alpha * 2.0).min(1e3),
                    grad_sq,
                });
            }
            _ => alpha *= 0.5,
        }
    }
    Ok(StepOutcome {
        delays: delays.to_vec(),
        step: alpha.max(1e-8),
        grad_sq,
    })
}

/// Value and `d/dl` of the full kernel objective of a group.
fn group_length_objective(
    cfg: &FitConfig,
    order: usize,
    steps: &[(MoseParams, StepMoments)],
    grad: bool,
) -> Result<(f64, f64)> {
    let parts: Vec<(f64, f64)> = steps
        .par_iter()
        .map(|(p, m)| {
            let (v, g) = objective::step_term(p, order, &cfg.conversion, m, cfg.gradient, cfg.fd_step, grad)?;
            Ok((v, g.last().copied().unwrap_or(0.0)))
        })
        .collect::<Result<_>>()?;
    Ok(parts
        .into_iter()
        .fold((0.0, 0.0), |acc, (v, g)| (acc.0 + v, acc.1 + g)))
}

/// Projected gradient ascent on `log l` with backtracking. Returns the new
/// length scale, new step and squared normalized gradient.
fn ascend_length_scale(
    cfg: &FitConfig,
    order: usize,
    make_steps: &(dyn Fn(f64) -> Vec<(MoseParams, StepMoments)> + Sync),
    length_scale: f64,
    max_abs_delay: f64,
    step: f64,
    count: f64,
) -> Result<(f64, f64, f64)> {
    let (f0, dl) = group_length_objective(cfg, order, &make_steps(length_scale), true)?;
    let g = length_scale * dl / count;
    let mut alpha = step;
    for _ in 0..=cfg.max_backtracks {
        let new_l = (length_scale * (alpha * g).exp()).clamp(0.05, 1e4);
        let du = (new_l / length_scale).ln();
        if du * g <= 0.0 {
            break;
        }
        if cfg.delay_bound.is_none() && max_abs_delay > cfg.delay_bound_scale * new_l {
            alpha *= 0.5;
            continue;
        }
        match group_length_objective(cfg, order, &make_steps(new_l), false) {
            Ok((f, _)) if f >= f0 + cfg.armijo * du * g * count => {
                return Ok((new_l, (alpha * 2.0).min(10.0), g * g));
            }
            _ => alpha *= 0.5,
        }
    }
    Ok((length_scale, alpha.max(1e-8), g * g))
}

/// Kernel M-step: ascend the expected complete-data log-likelihood in the
/// per-step delays of each across group (holding the anchor region at 0),
/// then in each group's length scale.
pub fn m_step_kernel(
    stats: &SufficientStats,
    model: &AdmModel,
    cfg: &FitConfig,
    state: &mut KernelStepState,
) -> Result<KernelUpdate> {
    let layout = model.layout().clone();
    let order = layout.order;
    let bins = layout.bins;
    let count = stats.trials as f64;
    let mut across: Vec<AcrossGroup> = model.across_groups().to_vec();
    let mut within: Vec<WithinGroup> = model.within_groups().to_vec();
    let mut delay_sq = 0.0;
    let mut l_sq = 0.0;

    for _ in 0..cfg.kernel_steps.max(1) {
        for g in 0..layout.across {
            let moments: Vec<StepMoments> = (0..bins)
                .into_par_iter()
                .map(|t| stats.across_step(&layout, g, t))
                .collect();
            if cfg.learn_delays && cfg.delay_objective == DelayObjective::Expected && layout.regions > 1 {
                let l = across[g].length_scale;
                let bound = cfg.bound_for(l);
                // Steps are independent without the smoothness penalty;
                // with it, even and odd steps alternate.
                let colors: Vec<Vec<usize>> = if cfg.smoothness > 0.0 {
                    vec![(0..bins).step_by(2).collect(), (1..bins).step_by(2).collect()]
                } else {
                    vec![(0..bins).collect()]
                };
                for color in colors {
                    let current = across[g].delays.clone();
                    let outcomes: Vec<(usize, StepOutcome)> = color
                        .par_iter()
                        .map(|&t| {
                            let prev = (t > 0).then(|| current[t - 1].as_slice());
                            let next = (t + 1 < bins).then(|| current[t + 1].as_slice());
                            ascend_delay_step(
                                cfg,
                                order,
                                &moments[t],
                                &current[t],
                                l,
                                prev,
                                next,
                                bound,
                                state.delay_steps[g][t],
                                count,
                            )
                            .map(|o| (t, o))
                        })
                        .collect::<Result<_>>()?;
                    for (t, o) in outcomes {
                        delay_sq += o.grad_sq;
                        across[g].delays[t] = o.delays;
                        state.delay_steps[g][t] = o.step;
                    }
                }
            }
            if cfg.learn_length_scales {
                let delays = across[g].delays.clone();
                let max_abs = delays
                    .iter()
                    .flat_map(|d| d.iter())
                    .fold(0.0f64, |a, b| a.max(b.abs()));
                let make = |l: f64| -> Vec<(MoseParams, StepMoments)> {
                    (0..bins)
                        .map(|t| (MoseParams::new(delays[t].clone(), l), moments[t].clone()))
                        .collect()
                };
                let (new_l, step, sq) = ascend_length_scale(
                    cfg,
                    order,
                    &make,
                    across[g].length_scale,
                    max_abs,
                    state.across_l_steps[g],
                    count * bins as f64,
                )?;
                across[g].length_scale = new_l;
                state.across_l_steps[g] = step;
                l_sq += sq;
            }
        }
        if cfg.learn_length_scales {
            for (w, grp) in within.iter_mut().enumerate() {
                let (init, trans) = stats.within_pooled(&layout, w);
                let total = init.count + trans.count;
                let make = |l: f64| -> Vec<(MoseParams, StepMoments)> {
                    let p = MoseParams::new(vec![0.0], l);
                    let mut v = vec![(p.clone(), StepMoments::Initial(init.clone()))];
                    if bins > 1 {
                        v.push((p, StepMoments::Transition(trans.clone())));
                    }
                    v
                };
                let (new_l, step, sq) = ascend_length_scale(
                    cfg,
                    order,
                    &make,
                    grp.length_scale,
                    0.0,
                    state.within_l_steps[w],
                    total,
                )?;
                grp.length_scale = new_l;
                state.within_l_steps[w] = step;
                l_sq += sq;
            }
        }
    }
    Ok(KernelUpdate {
        across,
        within,
        delay_grad_norm: delay_sq.sqrt(),
        length_scale_grad_norm: l_sq.sqrt(),
    })
}

/// Gradient of the expected log-likelihood (plus smoothness penalty) with
/// respect to every delay, evaluated at the parameters the moments were
/// computed under. There it equals the gradient of `log p(Y)`.
fn delay_gradients(stats: &SufficientStats, model: &AdmModel, cfg: &FitConfig) -> Result<Vec<Vec<Vec<f64>>>> {
    let layout = model.layout();
    model
        .across_groups()
        .iter()
        .enumerate()
        .map(|(g, grp)| {
            group_objective(stats, layout, GroupRef::Across(g), &grp.delays, grp.length_scale, cfg)
                .map(|(_, dd, _)| dd)
        })
        .collect()
}

fn smoothness_penalty(cfg: &FitConfig, trials: f64, across: &[AcrossGroup]) -> f64 {
    if cfg.smoothness == 0.0 {
        return 0.0;
    }
    across
        .iter()
        .flat_map(|g| g.delays.windows(2))
        .map(|w| {
            -cfg.smoothness
                * trials
                * w[0]
                    .iter()
                    .zip(&w[1])
                    .map(|(a, b)| (a - b).powi(2))
                    .sum::<f64>()
        })
        .sum()
}

fn marginal_objective(model: &AdmModel, refs: &[&DMatrix<f64>], cfg: &FitConfig) -> Result<f64> {
    let seq = GaussianSequence::from_model(model, refs)?;
    // Only the evidence is needed, which the sequential filter gives cheapest.
    let ll = inference::filter(&seq, Method::Sequential)?
        .total_log_evidence()
        .sum();
    Ok(ll + smoothness_penalty(cfg, refs.len() as f64, model.across_groups()))
}

/// Backtracking step of all delays along `grad`, accepted on the exact
/// marginal likelihood (plus penalty). Returns the updated model, its
/// objective and the step actually taken (zero if none was accepted).
fn marginal_delay_step(
    model: &AdmModel,
    base: f64,
    grad: &[Vec<Vec<f64>>],
    refs: &[&DMatrix<f64>],
    cfg: &FitConfig,
    step: f64,
) -> Result<(AdmModel, f64, f64)> {
    let count = refs.len() as f64;
    let mut alpha = step;
    for _ in 0..=cfg.max_backtracks {
        let mut across = model.across_groups().to_vec();
        let mut moved = 0.0;
        for (g, grp) in across.iter_mut().enumerate() {
            let bound = cfg.bound_for(grp.length_scale);
            for (t, d) in grp.delays.iter_mut().enumerate() {
                for k in 1..d.len() {
                    let new = (d[k] + alpha * grad[g][t][k] / count).clamp(-bound, bound);
                    moved += (new - d[k]) * grad[g][t][k];
                    d[k] = new;
                }
            }
        }
        if moved <= 0.0 {
            break;
        }
        let mut cand = model.clone();
        if cand
            .set_kernel_params(across, model.within_groups().to_vec())
            .is_ok()
        {
            if let Ok(f) = marginal_objective(&cand, refs, cfg) {
                if f >= base + cfg.armijo * moved {
                    return Ok((cand, f, alpha));
                }
            }
        }
        alpha *= 0.5;
    }
    Ok((model.clone(), base, 0.0))
}

/// Kernel part of the expected log-likelihood of one group and its gradient
/// with respect to every free delay (`T × N`, anchor column zero) and the
/// length scale. Includes the smoothness penalty.
pub fn group_objective(
    stats: &SufficientStats,
    layout: &LatentLayout,
    group: GroupRef,
    delays: &[Vec<f64>],
    length_scale: f64,
    cfg: &FitConfig,
) -> Result<(f64, Vec<Vec<f64>>, f64)> {
    let order = layout.order;
    match group {
        GroupRef::Across(g) => {
            let bins = layout.bins;
            let parts: Vec<(f64, Vec<f64>)> = (0..bins)
                .into_par_iter()
                .map(|t| {
                    let p = MoseParams::new(delays[t].clone(), length_scale);
                    objective::step_term(
                        &p,
                        order,
                        &cfg.conversion,
                        &stats.across_step(layout, g, t),
                        cfg.gradient,
                        cfg.fd_step,
                        true,
                    )
                })
                .collect::<Result<_>>()?;
            let n = layout.regions;
            let mut value = 0.0;
            let mut dl = 0.0;
            let mut dd = vec![vec![0.0; n]; bins];
            for (t, (v, g)) in parts.into_iter().enumerate() {
                value += v;
                dl += g[n - 1];
                for k in 1..n {
                    dd[t][k] += g[k - 1];
                }
                if t > 0 {
                    let (pv, pg) = penalty(cfg, stats.trials as f64, &delays[t], Some(&delays[t - 1]), None);
                    value += pv;
                    for k in 1..n {
                        dd[t][k] += pg[k];
                        dd[t - 1][k] -= pg[k];
                    }
                }
            }
            Ok((value, dd, dl))
        }
        GroupRef::Within(w) => {
            let (init, trans) = stats.within_pooled(layout, w);
            let p = MoseParams::new(vec![0.0], length_scale);
            let (v0, g0) = objective::step_term(
                &p,
                order,
                &cfg.conversion,
                &StepMoments::Initial(init),
                cfg.gradient,
                cfg.fd_step,
                true,
            )?;
            let (v1, g1) = objective::step_term(
                &p,
                order,
                &cfg.conversion,
                &StepMoments::Transition(trans),
                cfg.gradient,
                cfg.fd_step,
                true,
            )?;
            Ok((v0 + v1, Vec::new(), g0[0] + g1[0]))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GroupRef {
    Across(usize),
    Within(usize),
}

/// Initial model: per-region factor analysis, rotated so that the first
/// `m_a` latents of each region are the directions of strongest lagged
/// covariance with region 0; constant delays from the lag of that peak (or
/// zero); length scales from the decay of the latents' autocorrelation.
pub fn init_params(data: &TrialSet, cfg: &FitConfig) -> Result<AdmModel> {
    cfg.validate()?;
    data.validate()?;
    let layout = LatentLayout {
        regions: data.region_dims.len(),
        across: cfg.across,
        within: cfg.within,
        order: cfg.order,
        region_dims: data.region_dims.clone(),
        bins: data.bins(),
    };
    layout.validate()?;
    let rfa = init::region_fa(&layout, data)?;
    let all: Vec<usize> = (0..layout.latents_per_region()).collect();
    let pooled: Vec<DMatrix<f64>> = rfa.latents.iter().flatten().cloned().collect();
    let l0 = init::autocorrelation_length(&pooled, &all);
    let max_lag = match cfg.delay_bound {
        Some(b) => b.floor() as usize,
        None => (cfg.delay_bound_scale * l0).floor() as usize,
    }
    .clamp(1, layout.bins.saturating_sub(2).max(1));
    let (rotations, delays) = init::lagged_alignment(&rfa.latents, layout.across, max_lag);
    let rotated: Vec<Vec<DMatrix<f64>>> = rfa
        .latents
        .iter()
        .map(|trial| {
            trial
                .iter()
                .zip(&rotations)
                .map(|(z, r)| r.transpose() * z)
                .collect()
        })
        .collect();
    let region_latents = |k: usize| -> Vec<DMatrix<f64>> {
        rotated
            .iter()
            .flat_map(|trial| trial.iter().map(move |z| z.rows(k, 1).into_owned()))
            .collect()
    };
    let across = (0..layout.across)
        .map(|g| {
            let l = init::autocorrelation_length(&region_latents(g), &[0]);
            let d = match cfg.delay_init {
                DelayInit::Zero => vec![0.0; layout.regions],
                DelayInit::Lagged => {
                    let bound = cfg.bound_for(l);
                    delays[g].iter().map(|d| d.clamp(-bound, bound)).collect()
                }
            };
            AcrossGroup::constant(layout.regions, layout.bins, &d, l)
        })
        .collect::<Vec<_>>();
    let within = (0..layout.within)
        .map(|w| WithinGroup {
            length_scale: init::autocorrelation_length(&region_latents(layout.across + w), &[0]),
        })
        .collect::<Vec<_>>();
    debug!(
        "initial delays {:?}, length scales: across {:?}, within {:?}",
        delays,
        across.iter().map(|g| g.length_scale).collect::<Vec<_>>(),
        within.iter().map(|g| g.length_scale).collect::<Vec<_>>()
    );
    let fa = FaParams {
        loadings: rfa
            .loadings
            .iter()
            .zip(&rotations)
            .map(|(c, r)| c * r)
            .collect(),
        bias: rfa.mean.clone(),
        noise: rfa.noise.clone(),
    };
    AdmModel::new(layout, across, within, fa, cfg.conversion)
}

fn trace_row(
    iteration: usize,
    q_old: f64,
    q_new: f64,
    marginal: f64,
    ku: &KernelUpdate,
    start: Instant,
) -> TraceRow {
    let n = ku.across.first().map_or(0, |g| g.delays[0].len());
    TraceRow {
        iteration,
        expected_loglik: q_old,
        expected_loglik_after: q_new,
        marginal_loglik: marginal,
        delay_grad_norm: ku.delay_grad_norm,
        length_scale_grad_norm: ku.length_scale_grad_norm,
        length_scales: ku
            .across
            .iter()
            .map(|g| g.length_scale)
            .chain(ku.within.iter().map(|g| g.length_scale))
            .collect(),
        mean_delays: ku
            .across
            .iter()
            .map(|g| {
                (0..n)
                    .map(|k| g.delays.iter().map(|d| d[k]).sum::<f64>() / g.delays.len() as f64)
                    .collect()
            })
            .collect(),
        elapsed_secs: start.elapsed().as_secs_f64(),
    }
}

/// Run EM from [`init_params`], then the continuation stages of
/// `cfg.anneal_jitters`. The trace concatenates all stages. Continuation
/// stops at the first stage whose training marginal likelihood is below the
/// best so far, and the best stage's model is returned.
pub fn fit(data: &TrialSet, cfg: &FitConfig) -> Result<(AdmModel, FitTrace)> {
    let refs: Vec<&DMatrix<f64>> = data.trials.iter().collect();
    let score = |m: &AdmModel| -> Result<f64> { Ok(inference::observation_loglik(m, &refs, cfg.method)?.marginal) };
    let model = init_params(data, cfg)?;
    let (model, mut trace) = fit_from(model, data, cfg)?;
    let mut best = (score(&model)?, model);
    for &jitter in &cfg.anneal_jitters {
        let stage = FitConfig {
            conversion: ConversionOptions {
                jitter_start: jitter,
                ..cfg.conversion
            },
            max_iters: cfg.anneal_iters.min(cfg.max_iters),
            ..cfg.clone()
        };
        info!("continuing with relative jitter {jitter:e}");
        let offset = trace.rows.len();
        let elapsed = trace.rows.last().map_or(0.0, |r| r.elapsed_secs);
        let (next, t) = fit_from(best.1.clone(), data, &stage)?;
        trace.rows.extend(t.rows.into_iter().map(|mut r| {
            r.iteration += offset;
            r.elapsed_secs += elapsed;
            r
        }));
        let s = score(&next)?;
        if s < best.0 {
            info!("jitter {jitter:e} lowers the marginal likelihood ({s:.3} < {:.3}), keeping the previous stage", best.0);
            break;
        }
        trace.converged = t.converged;
        best = (s, next);
    }
    Ok((best.1, trace))
}

/// Run EM from a given model. The model is switched to `cfg.conversion`
/// first, since the kernel gradients are taken under those options.
pub fn fit_from(mut model: AdmModel, data: &TrialSet, cfg: &FitConfig) -> Result<(AdmModel, FitTrace)> {
    cfg.validate()?;
    if *model.options() != cfg.conversion {
        model.set_options(cfg.conversion)?;
    }
    let refs: Vec<&DMatrix<f64>> = data.trials.iter().collect();
    let mut state = KernelStepState::new(model.layout(), cfg);
    let mut trace = FitTrace::default();
    let start = Instant::now();
    for it in 0..cfg.max_iters {
        let wrap = |e: AdmError| AdmError::Iteration {
            iteration: it,
            source: Box::new(e),
        };
        let (seq, filt, sm) = inference::posterior(&model, &refs, cfg.method).map_err(wrap)?;
        let trials = refs.len() as f64;
        let pen_old = smoothness_penalty(cfg, trials, model.across_groups());
        let q_old = expected_loglik(&seq, &sm).map_err(wrap)? + pen_old;
        let marginal = filt.total_log_evidence().sum() + pen_old;
        drop(seq);
        drop(filt);
        let stats = SufficientStats::from_smoother(&sm);
        let mut candidate = model.clone();
        let fa = m_step_fa(model.layout(), &stats, &refs).map_err(wrap)?;
        candidate.set_fa(fa).map_err(wrap)?;
        let mut ku = m_step_kernel(&stats, &candidate, cfg, &mut state).map_err(wrap)?;
        candidate
            .set_kernel_params(ku.across.clone(), ku.within.clone())
            .map_err(wrap)?;
        let q_new = expected_loglik(
            &GaussianSequence::from_model(&candidate, &refs).map_err(wrap)?,
            &sm,
        )
        .map_err(wrap)?
            + smoothness_penalty(cfg, trials, candidate.across_groups());
        let mut marginal_gain = 0.0;
        if cfg.learn_delays
            && cfg.delay_objective == DelayObjective::Marginal
            && model.layout().regions > 1
        {
            let grad = delay_gradients(&stats, &model, cfg).map_err(wrap)?;
            ku.delay_grad_norm = grad
                .iter()
                .flatten()
                .flatten()
                .map(|x| (x / trials).powi(2))
                .sum::<f64>()
                .sqrt();
            let base = marginal_objective(&candidate, &refs, cfg).map_err(wrap)?;
            let (next, value, taken) =
                marginal_delay_step(&candidate, base, &grad, &refs, cfg, state.marginal_step).map_err(wrap)?;
            state.marginal_step = if taken > 0.0 {
                (taken * 2.0).min(1e3)
            } else {
                (state.marginal_step * 0.25).max(1e-8)
            };
            marginal_gain = (value - marginal) / marginal.abs();
            ku.across = next.across_groups().to_vec();
            candidate = next;
        }
        let row = trace_row(it, q_old, q_new, marginal, &ku, start);
        info!(
            "iter {it}: Q {q_old:.4} -> {q_new:.4}, log p(Y) {marginal:.4}, l {:?}",
            row.length_scales
        );
        trace.rows.push(row);
        if q_new < q_old - 1e-6 * q_old.abs() {
            warn!("iteration {it}: M-step decreased the expected log-likelihood ({q_old} -> {q_new})");
        }
        model = candidate;
        if (q_new - q_old) / q_old.abs() < cfg.loglik_rel_tol && marginal_gain < cfg.loglik_rel_tol {
            trace.converged = true;
            break;
        }
    }
    Ok((model, trace))
}

/// One cell of a cross-validated grid search.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridCell {
    pub across: usize,
    pub within: usize,
    pub order: usize,
    /// Mean validation plug-in log-likelihood per trial (NaN if failed).
    pub mean_loglik: f64,
    pub fold_logliks: Vec<f64>,
    /// Same for the exact marginal `log p(Y)` of the validation trials.
    pub mean_marginal: f64,
    pub fold_marginals: Vec<f64>,
    pub error: Option<String>,
}

/// Fit every `(m_a, m_w, P)` combination on `folds − 1` folds, score on the
/// held-out fold, and rank cells by mean validation marginal likelihood.
/// The plug-in score is reported too but not used for ranking: it smooths
/// the latents from the scored trials and rewards extra latents.
pub fn grid_evaluate(
    data: &TrialSet,
    across: &[usize],
    within: &[usize],
    orders: &[usize],
    folds: usize,
    base: &FitConfig,
) -> Result<Vec<GridCell>> {
    if across.is_empty() || within.is_empty() || orders.is_empty() {
        return Err(AdmError::Config("grid axes must be non-empty".into()));
    }
    if folds < 2 || folds > data.len() {
        return Err(AdmError::Config(format!(
            "need 2 <= folds <= trials ({}), got {folds}",
            data.len()
        )));
    }
    let mut order_idx: Vec<usize> = (0..data.len()).collect();
    order_idx.shuffle(&mut ChaCha8Rng::seed_from_u64(base.seed));
    let fold_of: Vec<Vec<usize>> = (0..folds)
        .map(|f| order_idx.iter().copied().skip(f).step_by(folds).collect())
        .collect();
    let mut cells = Vec::new();
    for &ma in across {
        for &mw in within {
            for &p in orders {
                let cfg = FitConfig {
                    across: ma,
                    within: mw,
                    order: p,
                    ..base.clone()
                };
                let result: Result<Vec<(f64, f64)>> = (0..folds)
                    .map(|f| {
                        let train: Vec<usize> = (0..folds)
                            .filter(|&g| g != f)
                            .flat_map(|g| fold_of[g].iter().copied())
                            .collect();
                        let (model, _) = fit(&data.subset(&train), &cfg)?;
                        let val = data.subset(&fold_of[f]);
                        let refs: Vec<&DMatrix<f64>> = val.trials.iter().collect();
                        let ll = inference::observation_loglik(&model, &refs, cfg.method)?;
                        let n = val.len() as f64;
                        Ok((ll.plug_in / n, ll.marginal / n))
                    })
                    .collect();
                let cell = match result {
                    Ok(v) => {
                        let (plug, marg): (Vec<f64>, Vec<f64>) = v.into_iter().unzip();
                        let mean = |x: &[f64]| x.iter().sum::<f64>() / x.len() as f64;
                        GridCell {
                            across: ma,
                            within: mw,
                            order: p,
                            mean_loglik: mean(&plug),
                            fold_logliks: plug,
                            mean_marginal: mean(&marg),
                            fold_marginals: marg,
                            error: None,
                        }
                    }
                    Err(e) => {
                        warn!("grid cell (m_a={ma}, m_w={mw}, P={p}) failed: {e}");
                        GridCell {
                            across: ma,
                            within: mw,
                            order: p,
                            mean_loglik: f64::NAN,
                            fold_logliks: Vec::new(),
                            mean_marginal: f64::NAN,
                            fold_marginals: Vec::new(),
                            error: Some(e.to_string()),
                        }
                    }
                };
                cells.push(cell);
            }
        }
    }
    cells.sort_by(|a, b| match (a.mean_marginal.is_nan(), b.mean_marginal.is_nan()) {
        (true, true) => std::cmp::Ordering::Equal,
        (true, false) => std::cmp::Ordering::Greater,
        (false, true) => std::cmp::Ordering::Less,
        _ => b.mean_marginal.total_cmp(&a.mean_marginal),
    });
    Ok(cells)
}
