//! Conversion of a stationary lag-block kernel into a companion-form
//! Markovian state-space model.
//!
//! The order-`P` vector autoregression `x_t = Σ_p A_p x_{t-p} + q_t` is
//! obtained from the population normal equations of the regression of
//! `x_t` on `[x_{t-P}, …, x_{t-1}]`, where every second moment is a kernel
//! lag block. The joint moment matrix is Cholesky-factored so that the
//! regression coefficients and the residual covariance both come out of one
//! factorization.

use log::warn;
use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{AdmError, Result};
use crate::kernels::{LagBlockKernel, MoseParams};
use crate::linalg;

/// Numerical knobs of the conversion.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConversionOptions {
    /// First diagonal jitter, relative to the mean diagonal of the joint
    /// moment matrix.
    pub jitter_start: f64,
    /// Largest relative jitter tried before giving up.
    pub jitter_limit: f64,
    /// Variance placed on the lagged (shift) coordinates of the companion
    /// process noise. It is injected into every lag and amplified by the
    /// top-row coefficients, so it has to stay well below the innovation
    /// variance `Q` (which is of the order of the jitter for smooth kernels).
    pub stabilizer: f64,
}

impl Default for ConversionOptions {
    fn default() -> Self {
        Self {
            jitter_start: 1e-6,
            jitter_limit: 1e-2,
            stabilizer: 1e-9,
        }
    }
}

/// Kernel lag blocks `K(τ)` for `τ ∈ [-P+1, P]`.
#[derive(Debug, Clone)]
pub struct GramBlocks {
    order: usize,
    outputs: usize,
    blocks: Vec<DMatrix<f64>>,
}

impl GramBlocks {
    pub fn from_fn(order: usize, outputs: usize, mut f: impl FnMut(f64) -> DMatrix<f64>) -> Self {
        let p = order as isize;
        let blocks = (-p + 1..=p).map(|tau| f(tau as f64)).collect();
        Self {
            order,
            outputs,
            blocks,
        }
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn outputs(&self) -> usize {
        self.outputs
    }

    /// Stored lags, ascending.
    pub fn lags(&self) -> std::ops::RangeInclusive<isize> {
        -(self.order as isize) + 1..=self.order as isize
    }

    pub fn lag(&self, tau: isize) -> &DMatrix<f64> {
        let idx = tau + self.order as isize - 1;
        assert!(
            idx >= 0 && (idx as usize) < self.blocks.len(),
            "lag {tau} outside stored range"
        );
        &self.blocks[idx as usize]
    }
}

pub fn build_gram_blocks(kernel: &LagBlockKernel, order: usize) -> Result<GramBlocks> {
    if order == 0 {
        return Err(AdmError::Conversion("order P must be at least 1".into()));
    }
    kernel.validate()?;
    Ok(GramBlocks::from_fn(order, kernel.outputs(), |tau| {
        kernel.eval_unchecked(tau)
    }))
}

/// Population normal-equation blocks of the order-`P` regression.
#[derive(Debug, Clone)]
pub struct NormalMatrices {
    /// `NP×NP` block-Toeplitz predictor moment matrix, block `(a, b) = K(a - b)`.
    pub predictor: DMatrix<f64>,
    /// `N×NP` target/predictor cross moments `[K(P) … K(1)]`.
    pub cross: DMatrix<f64>,
    /// `K(0)`.
    pub zero_lag: DMatrix<f64>,
}

impl NormalMatrices {
    pub fn outputs(&self) -> usize {
        self.zero_lag.nrows()
    }

    pub fn order(&self) -> usize {
        self.predictor.nrows() / self.outputs().max(1)
    }

    /// The joint matrix `[[Vg, Wgᵀ], [Wg, K0]]`.
    pub fn joint(&self) -> DMatrix<f64> {
        let np = self.predictor.nrows();
        let n = self.zero_lag.nrows();
        let mut d = DMatrix::zeros(np + n, np + n);
        d.view_mut((0, 0), (np, np)).copy_from(&self.predictor);
        d.view_mut((np, 0), (n, np)).copy_from(&self.cross);
        d.view_mut((0, np), (np, n)).copy_from(&self.cross.transpose());
        d.view_mut((np, np), (n, n)).copy_from(&self.zero_lag);
        d
    }
}

pub fn assemble_normal_matrices(gb: &GramBlocks) -> NormalMatrices {
    let n = gb.outputs();
    let p = gb.order();
    let mut predictor = DMatrix::zeros(n * p, n * p);
    for a in 0..p {
        for b in 0..p {
            let lag = a as isize - b as isize;
            predictor
                .view_mut((a * n, b * n), (n, n))
                .copy_from(gb.lag(lag));
        }
    }
    let mut cross = DMatrix::zeros(n, n * p);
    for b in 0..p {
        cross
            .view_mut((0, b * n), (n, n))
            .copy_from(gb.lag((p - b) as isize));
    }
    let mut zero_lag = gb.lag(0).clone();
    linalg::symmetrize(&mut zero_lag);
    NormalMatrices {
        predictor,
        cross,
        zero_lag,
    }
}

/// `x_t = Σ_p A_p x_{t-p} + q_t`, `q_t ~ N(0, Q)`.
#[derive(Debug, Clone)]
pub struct MultiOrderSsm {
    /// `A_1, …, A_P`.
    pub transitions: Vec<DMatrix<f64>>,
    /// Process noise `Q`.
    pub noise: DMatrix<f64>,
    /// Lower Cholesky factor of `Q` (the `L₃` block of the joint factor).
    pub noise_factor: DMatrix<f64>,
    /// Regression coefficients `[A_P … A_1]`.
    pub coefficients: DMatrix<f64>,
    /// Absolute diagonal jitter added to the joint moment matrix.
    pub jitter: f64,
    /// Lower Cholesky factor of the jittered predictor block (`L₁`).
    pub(crate) predictor_factor: DMatrix<f64>,
}

impl MultiOrderSsm {
    pub fn outputs(&self) -> usize {
        self.noise.nrows()
    }

    pub fn order(&self) -> usize {
        self.transitions.len()
    }

    /// `X (Vg + δI)⁻¹` for a matrix `X` with `NP` columns.
    pub(crate) fn right_solve_predictor(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        // X V⁻¹ = (V⁻¹ Xᵀ)ᵀ with V = L Lᵀ
        let mut y = x.transpose();
        let l = &self.predictor_factor;
        l.solve_lower_triangular_mut(&mut y);
        l.transpose().solve_upper_triangular_mut(&mut y);
        y.transpose()
    }
}

/// Least-squares solution of the order-`P` regression from population
/// moments.
///
/// Factors `D + δI = L Lᵀ` with `L = [[L₁, 0], [L₂, L₃]]`, then
/// `[A_P … A_1] = L₂ L₁⁻¹` and `Q = L₃ L₃ᵀ`. The jitter starts at
/// `opts.jitter_start` relative to the mean diagonal and escalates tenfold up
/// to `opts.jitter_limit`.
pub fn solve_transition(nm: &NormalMatrices, opts: &ConversionOptions) -> Result<MultiOrderSsm> {
    let n = nm.outputs();
    let np = nm.predictor.nrows();
    if n == 0 || np % n != 0 || nm.cross.shape() != (n, np) || nm.zero_lag.ncols() != n {
        return Err(AdmError::Conversion(format!(
            "inconsistent normal-matrix shapes: predictor {:?}, cross {:?}, zero lag {:?}",
            nm.predictor.shape(),
            nm.cross.shape(),
            nm.zero_lag.shape()
        )));
    }
    let p = np / n;
    let mut d = nm.joint();
    linalg::symmetrize(&mut d);
    if d.iter().any(|v| !v.is_finite()) {
        return Err(AdmError::Conversion("non-finite kernel moments".into()));
    }
    let (chol, jitter) = linalg::jittered_cholesky(&d, opts.jitter_start, opts.jitter_limit)
        .ok_or_else(|| {
            AdmError::Conversion(format!(
                "joint moment matrix not positive definite after jitter up to {:e} \
                 (order {p}, outputs {n}, K(0) = {:?})",
                opts.jitter_limit,
                nm.zero_lag.as_slice()
            ))
        })?;
    let l = chol.l();
    let l1 = l.view((0, 0), (np, np)).into_owned();
    let l2 = l.view((np, 0), (n, np)).into_owned();
    let l3 = l.view((np, np), (n, n)).into_owned();

    // G = L₂ L₁⁻¹  ⇔  L₁ᵀ Gᵀ = L₂ᵀ
    let mut gt = l2.transpose();
    l1.transpose().solve_upper_triangular_mut(&mut gt);
    let coefficients = gt.transpose();

    let mut noise = &l3 * l3.transpose();
    linalg::symmetrize(&mut noise);

    // coefficient blocks are ordered [A_P … A_1]
    let transitions = (1..=p)
        .map(|lag| {
            coefficients
                .view((0, (p - lag) * n), (n, n))
                .into_owned()
        })
        .collect();

    Ok(MultiOrderSsm {
        transitions,
        noise,
        noise_factor: l3,
        coefficients,
        jitter,
        predictor_factor: l1,
    })
}

/// First-order companion (controllable canonical) form of an order-`P`
/// model: state `[x_t; x_{t-1}; …; x_{t-P+1}]`.
#[derive(Debug, Clone)]
pub struct CompanionSsm {
    pub transition: DMatrix<f64>,
    pub noise: DMatrix<f64>,
    /// `[I_N 0]`.
    pub mask: DMatrix<f64>,
    /// Lower-triangular factor of `noise`.
    pub noise_factor: DMatrix<f64>,
    pub stabilizer: f64,
    pub outputs: usize,
    pub order: usize,
    pub spectral_radius: f64,
}

impl CompanionSsm {
    pub fn state_dim(&self) -> usize {
        self.outputs * self.order
    }
}

pub fn to_companion(m: &MultiOrderSsm, stabilizer: f64) -> Result<CompanionSsm> {
    if !(stabilizer > 0.0) || !stabilizer.is_finite() {
        return Err(AdmError::Conversion(format!(
            "stabilizer must be positive, got {stabilizer}"
        )));
    }
    let n = m.outputs();
    let p = m.order();
    if p == 0 || m.transitions.iter().any(|a| a.shape() != (n, n)) {
        return Err(AdmError::Conversion(format!(
            "transition blocks must all be {n}×{n} and at least one must be given"
        )));
    }
    let s = n * p;
    let mut transition = DMatrix::zeros(s, s);
    for (k, a) in m.transitions.iter().enumerate() {
        transition.view_mut((0, k * n), (n, n)).copy_from(a);
    }
    for k in 1..p {
        transition
            .view_mut((k * n, (k - 1) * n), (n, n))
            .fill_with_identity();
    }
    let mut noise = DMatrix::zeros(s, s);
    noise.view_mut((0, 0), (n, n)).copy_from(&m.noise);
    let mut noise_factor = DMatrix::zeros(s, s);
    noise_factor
        .view_mut((0, 0), (n, n))
        .copy_from(&m.noise_factor);
    let root = stabilizer.sqrt();
    for i in n..s {
        noise[(i, i)] = stabilizer;
        noise_factor[(i, i)] = root;
    }
    let mut mask = DMatrix::zeros(n, s);
    mask.view_mut((0, 0), (n, n)).fill_with_identity();

    let spectral_radius = linalg::spectral_radius(&transition);
    if spectral_radius >= 1.0 {
        warn!("companion transition has spectral radius {spectral_radius:.6} >= 1");
    }
    Ok(CompanionSsm {
        transition,
        noise,
        mask,
        noise_factor,
        stabilizer,
        outputs: n,
        order: p,
        spectral_radius,
    })
}

/// Multi-order model of a kernel, the step before the companion form.
pub fn kernel_to_multi_order(
    kernel: &LagBlockKernel,
    order: usize,
    opts: &ConversionOptions,
) -> Result<MultiOrderSsm> {
    let gb = build_gram_blocks(kernel, order)?;
    solve_transition(&assemble_normal_matrices(&gb), opts)
}

pub fn kernel_to_markovian(
    kernel: &LagBlockKernel,
    order: usize,
    opts: &ConversionOptions,
) -> Result<CompanionSsm> {
    let m = kernel_to_multi_order(kernel, order, opts)?;
    to_companion(&m, opts.stabilizer)
}

/// Companion models of the time-varying MOSE kernel, one per time step.
///
/// `delays[t]` holds the per-output delays at step `t`; the length scale is
/// shared over time.
pub fn time_varying_family(
    delays: &[Vec<f64>],
    length_scale: f64,
    order: usize,
    opts: &ConversionOptions,
) -> Result<Vec<CompanionSsm>> {
    delays
        .par_iter()
        .enumerate()
        .map(|(t, d)| {
            let kernel = LagBlockKernel::MOSE(MoseParams::new(d.clone(), length_scale));
            kernel_to_markovian(&kernel, order, opts).map_err(|e| AdmError::ConversionAt {
                index: t,
                source: Box::new(e),
            })
        })
        .collect()
}

/// Stationary covariance of the stacked companion state
/// `[x_t; …; x_{t-P+1}]`: block `(a, b)` is `K(b - a)`, plus the same
/// relative jitter the conversion starts from.
pub fn stacked_state_covariance(
    kernel: &LagBlockKernel,
    order: usize,
    jitter_rel: f64,
) -> Result<DMatrix<f64>> {
    kernel.validate()?;
    let n = kernel.outputs();
    let mut p0 = DMatrix::zeros(n * order, n * order);
    for a in 0..order {
        for b in 0..order {
            let block = kernel.eval_unchecked(b as f64 - a as f64);
            p0.view_mut((a * n, b * n), (n, n)).copy_from(&block);
        }
    }
    linalg::symmetrize(&mut p0);
    let jitter = jitter_rel * linalg::mean_diagonal(&p0);
    for i in 0..p0.nrows() {
        p0[(i, i)] += jitter;
    }
    Ok(p0)
}
