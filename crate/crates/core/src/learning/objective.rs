//! Kernel-parameter part of the expected complete-data log-likelihood and
//! its gradient through the kernel → regression → companion chain.
//!
//! For one latent group the objective at step `t` is
//! `−½[n·log|Q| + Tr(Q⁻¹Σ)]` with
//! `Σ = Mxx − G̃Mxsᵀ − MxsG̃ᵀ + G̃MssG̃ᵀ`, where `G̃ = [A₁ … A_P]`, `Mxx` is
//! the summed second moment of the group's current values, `Mxs` the cross
//! moment with the previous stacked state and `Mss` the previous stacked
//! second moment. The stabilizer rows of the companion noise do not depend
//! on kernel parameters and are left out.

use nalgebra::DMatrix;

use crate::convert::{self, ConversionOptions, MultiOrderSsm};
use crate::error::{AdmError, Result};
use crate::kernels::{LagBlockKernel, MoseParams};
use crate::linalg;

/// Summed moments for one transition term.
#[derive(Debug, Clone)]
pub struct TransitionMoments {
    /// `Σ E[xₜxₜᵀ]` over current values (`N × N`).
    pub xx: DMatrix<f64>,
    /// `Σ E[xₜ sₜ₋₁ᵀ]` with the stacked previous state in companion order
    /// `[xₜ₋₁; …; xₜ₋P]` (`N × NP`).
    pub xs: DMatrix<f64>,
    /// `Σ E[sₜ₋₁ sₜ₋₁ᵀ]` (`NP × NP`).
    pub ss: DMatrix<f64>,
    /// Number of summed samples.
    pub count: f64,
}

/// Summed second moment of the stacked state at `t = 0`.
#[derive(Debug, Clone)]
pub struct InitialMoments {
    pub ss: DMatrix<f64>,
    pub count: f64,
}

/// How kernel gradients are obtained.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GradientMode {
    #[default]
    Analytic,
    ForwardDifference,
}

/// Reverse the order of the `n`-column blocks of `m`.
fn reverse_blocks(m: &DMatrix<f64>, n: usize) -> DMatrix<f64> {
    let p = m.ncols() / n;
    let mut out = DMatrix::zeros(m.nrows(), m.ncols());
    for b in 0..p {
        out.columns_mut((p - 1 - b) * n, n)
            .copy_from(&m.columns(b * n, n));
    }
    out
}

/// `dK(τ)` for `τ = 0…P`, one list per free parameter.
fn derivative_lags(params: &MoseParams, order: usize) -> Vec<Vec<DMatrix<f64>>> {
    let per_tau: Vec<Vec<DMatrix<f64>>> = (0..=order)
        .map(|tau| params.eval_derivatives(tau as f64))
        .collect();
    let count = per_tau[0].len();
    (0..count)
        .map(|k| per_tau.iter().map(|d| d[k].clone()).collect())
        .collect()
}

fn lag_block(lags: &[DMatrix<f64>], tau: isize) -> DMatrix<f64> {
    if tau >= 0 {
        lags[tau as usize].clone()
    } else {
        lags[(-tau) as usize].transpose()
    }
}

fn noise_inverse(ms: &MultiOrderSsm) -> Result<DMatrix<f64>> {
    let l3 = &ms.noise_factor;
    let n = l3.nrows();
    let mut inv = DMatrix::identity(n, n);
    if !l3.solve_lower_triangular_mut(&mut inv) {
        return Err(AdmError::Learning("singular process-noise factor".into()));
    }
    Ok(linalg::symmetrized(inv.transpose() * inv))
}

/// Value of one transition term and, optionally, its analytic gradient with
/// respect to `[d₁ … d_{N−1}, l]`.
pub fn transition_term(
    params: &MoseParams,
    order: usize,
    opts: &ConversionOptions,
    mom: &TransitionMoments,
    with_gradient: bool,
) -> Result<(f64, Vec<f64>)> {
    let n = params.outputs();
    let kernel = LagBlockKernel::MOSE(params.clone());
    let gb = convert::build_gram_blocks(&kernel, order)?;
    let nm = convert::assemble_normal_matrices(&gb);
    let ms = convert::solve_transition(&nm, opts)?;
    let g_companion = reverse_blocks(&ms.coefficients, n);
    let gx = &g_companion * mom.xs.transpose();
    let sigma = linalg::symmetrized(
        &mom.xx - &gx - gx.transpose() + &g_companion * &mom.ss * g_companion.transpose(),
    );
    let log_det_q = 2.0 * ms.noise_factor.diagonal().iter().map(|d| d.ln()).sum::<f64>();
    let q_inv = noise_inverse(&ms)?;
    let value = -0.5 * (mom.count * log_det_q + (&q_inv * &sigma).trace());
    if !value.is_finite() {
        return Err(AdmError::Learning(format!(
            "non-finite transition objective at delays {:?}, l = {}",
            params.delays, params.length_scale
        )));
    }
    if !with_gradient {
        return Ok((value, Vec::new()));
    }

    let q_inv_sigma_q_inv = &q_inv * &sigma * &q_inv;
    // Tr(Q⁻¹ (G̃ Mss − Mxs) dG̃ᵀ) = Σ (Q⁻¹(G̃Mss − Mxs)) ∘ dG̃
    let resid_weight = &q_inv * (&g_companion * &mom.ss - &mom.xs);
    let mut grad = Vec::new();
    for lags in derivative_lags(params, order) {
        let mut d_pred = DMatrix::zeros(n * order, n * order);
        for a in 0..order {
            for b in 0..order {
                d_pred
                    .view_mut((a * n, b * n), (n, n))
                    .copy_from(&lag_block(&lags, a as isize - b as isize));
            }
        }
        let mut d_cross = DMatrix::zeros(n, n * order);
        for b in 0..order {
            d_cross
                .view_mut((0, b * n), (n, n))
                .copy_from(&lags[order - b]);
        }
        let d_zero = linalg::symmetrized(lags[0].clone());
        let dg = ms.right_solve_predictor(&(&d_cross - &ms.coefficients * &d_pred));
        let dq = linalg::symmetrized(
            d_zero - &dg * nm.cross.transpose() - &ms.coefficients * d_cross.transpose(),
        );
        let dg_companion = reverse_blocks(&dg, n);
        let d = -0.5
            * (-(q_inv_sigma_q_inv.component_mul(&dq)).sum()
                + 2.0 * resid_weight.component_mul(&dg_companion).sum()
                + mom.count * (q_inv.component_mul(&dq)).sum());
        grad.push(d);
    }
    if grad.iter().any(|g| !g.is_finite()) {
        return Err(AdmError::Learning(format!(
            "non-finite kernel gradient at delays {:?}, l = {}: {grad:?}",
            params.delays, params.length_scale
        )));
    }
    Ok((value, grad))
}

/// Initial-state term `−½[n·log|P₀| + Tr(P₀⁻¹ M₀)]` and its gradient.
pub fn initial_term(
    params: &MoseParams,
    order: usize,
    jitter_rel: f64,
    mom: &InitialMoments,
    with_gradient: bool,
) -> Result<(f64, Vec<f64>)> {
    let n = params.outputs();
    let kernel = LagBlockKernel::MOSE(params.clone());
    let p0 = convert::stacked_state_covariance(&kernel, order, jitter_rel)?;
    let chol = p0.cholesky().ok_or_else(|| {
        AdmError::Learning(format!(
            "initial covariance not positive definite at delays {:?}, l = {}",
            params.delays, params.length_scale
        ))
    })?;
    let p0_inv = linalg::symmetrized(chol.inverse());
    let value = -0.5
        * (mom.count * linalg::log_det_from_cholesky(&chol) + (&p0_inv * &mom.ss).trace());
    if !with_gradient {
        return Ok((value, Vec::new()));
    }
    let weight = &p0_inv * &mom.ss * &p0_inv;
    let mut grad = Vec::new();
    for lags in derivative_lags(params, order) {
        let mut dp = DMatrix::zeros(n * order, n * order);
        for a in 0..order {
            for b in 0..order {
                dp.view_mut((a * n, b * n), (n, n))
                    .copy_from(&lag_block(&lags, b as isize - a as isize));
            }
        }
        let dp = linalg::symmetrized(dp);
        grad.push(-0.5 * (mom.count * p0_inv.component_mul(&dp).sum() - weight.component_mul(&dp).sum()));
    }
    Ok((value, grad))
}

/// One group/step contribution: transition or initial term.
#[derive(Debug, Clone)]
pub enum StepMoments {
    Initial(InitialMoments),
    Transition(TransitionMoments),
}

/// Evaluate a step term with the requested gradient mode.
pub fn step_term(
    params: &MoseParams,
    order: usize,
    opts: &ConversionOptions,
    mom: &StepMoments,
    mode: GradientMode,
    fd_step: f64,
    with_gradient: bool,
) -> Result<(f64, Vec<f64>)> {
    let eval = |p: &MoseParams, grad: bool| match mom {
        StepMoments::Initial(m) => initial_term(p, order, opts.jitter_start, m, grad),
        StepMoments::Transition(m) => transition_term(p, order, opts, m, grad),
    };
    match (with_gradient, mode) {
        (false, _) => eval(params, false),
        (true, GradientMode::Analytic) => eval(params, true),
        (true, GradientMode::ForwardDifference) => {
            let (v0, _) = eval(params, false)?;
            let n = params.outputs();
            let mut grad = Vec::with_capacity(n);
            for k in 1..n {
                let mut p = params.clone();
                let h = fd_step * (1.0 + p.delays[k].abs());
                p.delays[k] += h;
                grad.push((eval(&p, false)?.0 - v0) / h);
            }
            let mut p = params.clone();
            let h = fd_step * (1.0 + p.length_scale.abs());
            p.length_scale += h;
            grad.push((eval(&p, false)?.0 - v0) / h);
            Ok((v0, grad))
        }
    }
}
