//! Stationary temporal kernels evaluated as `N×N` lag blocks.
//!
//! A kernel maps a real lag `τ` (in time bins) to the cross-covariance block
//! `K(τ)` with `K(τ)_{ij} = Cov(x_i(t + τ), x_j(t))`, so that
//! `K(-τ) = K(τ)ᵀ`. Single-output kinds return `1×1` blocks.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{AdmError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum KernelKind {
    Exp,
    Matern32,
    SE,
    RQ,
    SM,
    MOSE,
    MOSM,
    CSM,
    LMC,
}

impl KernelKind {
    pub const ALL: [KernelKind; 9] = [
        KernelKind::Exp,
        KernelKind::Matern32,
        KernelKind::SE,
        KernelKind::RQ,
        KernelKind::SM,
        KernelKind::MOSE,
        KernelKind::MOSM,
        KernelKind::CSM,
        KernelKind::LMC,
    ];

    pub fn name(self) -> &'static str {
        match self {
            KernelKind::Exp => "Exp",
            KernelKind::Matern32 => "Matern32",
            KernelKind::SE => "SE",
            KernelKind::RQ => "RQ",
            KernelKind::SM => "SM",
            KernelKind::MOSE => "MOSE",
            KernelKind::MOSM => "MOSM",
            KernelKind::CSM => "CSM",
            KernelKind::LMC => "LMC",
        }
    }

    pub fn is_multi_output(self) -> bool {
        matches!(
            self,
            KernelKind::MOSE | KernelKind::MOSM | KernelKind::CSM | KernelKind::LMC
        )
    }
}

impl std::fmt::Display for KernelKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for KernelKind {
    type Err = AdmError;

    fn from_str(s: &str) -> Result<Self> {
        KernelKind::ALL
            .iter()
            .copied()
            .find(|k| k.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| AdmError::Config(format!("unknown kernel kind `{s}`")))
    }
}

/// Autoregressive order that reproduces each kernel family well.
///
/// LMC assumes squared-exponential base kernels.
pub fn recommended_order(kind: KernelKind) -> usize {
    match kind {
        KernelKind::Exp => 1,
        KernelKind::Matern32 => 2,
        KernelKind::SE => 2,
        KernelKind::RQ => 4,
        KernelKind::SM => 2,
        KernelKind::MOSE => 2,
        KernelKind::MOSM => 2,
        KernelKind::CSM => 4,
        KernelKind::LMC => 2,
    }
}

/// Multi-output squared exponential with per-output delays and a shared
/// length scale; amplitude is fixed to one.
///
/// `K_ij(τ) = exp(-(τ + θ_ij)² / (2 l²))` with `θ_ij = d_j - d_i`.
/// Output `i` is the shared process delayed by `d_i` bins, so `d_0` is the
/// anchor and is expected to be zero.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MoseParams {
    pub delays: Vec<f64>,
    pub length_scale: f64,
}

impl MoseParams {
    pub fn new(delays: Vec<f64>, length_scale: f64) -> Self {
        Self {
            delays,
            length_scale,
        }
    }

    pub fn outputs(&self) -> usize {
        self.delays.len()
    }

    /// Pairwise delay `θ_ij = d_j - d_i`.
    pub fn pair_delay(&self, i: usize, j: usize) -> f64 {
        self.delays[j] - self.delays[i]
    }

    pub fn eval(&self, tau: f64) -> DMatrix<f64> {
        let n = self.outputs();
        let two_l2 = 2.0 * self.length_scale * self.length_scale;
        DMatrix::from_fn(n, n, |i, j| {
            let u = tau + self.pair_delay(i, j);
            (-u * u / two_l2).exp()
        })
    }

    /// Partial derivatives of `K(τ)` with respect to the free delays
    /// `d_1, …, d_{N-1}` (the anchor `d_0` is excluded) and the length scale,
    /// in that order.
    pub fn eval_derivatives(&self, tau: f64) -> Vec<DMatrix<f64>> {
        let n = self.outputs();
        let l = self.length_scale;
        let l2 = l * l;
        let k = self.eval(tau);
        let mut out = Vec::with_capacity(n);
        for free in 1..n {
            let mut dk = DMatrix::zeros(n, n);
            for i in 0..n {
                for j in 0..n {
                    if i == j {
                        continue;
                    }
                    let u = tau + self.pair_delay(i, j);
                    // du/dd_free = [j == free] - [i == free]
                    let du = (j == free) as i32 as f64 - (i == free) as i32 as f64;
                    if du != 0.0 {
                        dk[(i, j)] = -k[(i, j)] * u / l2 * du;
                    }
                }
            }
            out.push(dk);
        }
        out.push(DMatrix::from_fn(n, n, |i, j| {
            let u = tau + self.pair_delay(i, j);
            k[(i, j)] * u * u / (l2 * l)
        }));
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SmComponent {
    pub variance: f64,
    pub length_scale: f64,
    pub frequency: f64,
}

/// One spectral component shared by all outputs, with per-output weight,
/// delay and phase. Cross terms follow from time-shifting and phase-shifting
/// a common complex process, which keeps the kernel positive semidefinite.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MosmComponent {
    pub weights: Vec<f64>,
    pub delays: Vec<f64>,
    pub phases: Vec<f64>,
    pub length_scale: f64,
    pub frequency: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CsmRank {
    pub weights: Vec<f64>,
    pub phases: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CsmComponent {
    pub length_scale: f64,
    pub frequency: f64,
    pub ranks: Vec<CsmRank>,
}

/// `B_q ⊗ k_q` term of a linear model of coregionalization with a squared
/// exponential base kernel. `coregionalization` is stored row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LmcComponent {
    pub coregionalization: Vec<Vec<f64>>,
    pub length_scale: f64,
}

impl LmcComponent {
    pub fn matrix(&self) -> DMatrix<f64> {
        let n = self.coregionalization.len();
        DMatrix::from_fn(n, n, |i, j| self.coregionalization[i][j])
    }
}

/// A stationary kernel returning `N×N` lag blocks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind")]
pub enum LagBlockKernel {
    Exp {
        variance: f64,
        length_scale: f64,
    },
    Matern32 {
        variance: f64,
        length_scale: f64,
    },
    SE {
        variance: f64,
        length_scale: f64,
    },
    RQ {
        variance: f64,
        length_scale: f64,
        alpha: f64,
    },
    SM {
        components: Vec<SmComponent>,
    },
    MOSE(MoseParams),
    MOSM {
        components: Vec<MosmComponent>,
    },
    CSM {
        outputs: usize,
        components: Vec<CsmComponent>,
    },
    LMC {
        components: Vec<LmcComponent>,
    },
}

fn se(tau: f64, l: f64) -> f64 {
    (-tau * tau / (2.0 * l * l)).exp()
}

fn check_positive(name: &str, value: f64) -> Result<()> {
    if !value.is_finite() {
        return Err(AdmError::KernelParameter {
            name: name.to_string(),
            value,
            reason: "must be finite",
        });
    }
    if value <= 0.0 {
        return Err(AdmError::KernelParameter {
            name: name.to_string(),
            value,
            reason: "must be positive",
        });
    }
    Ok(())
}

fn check_finite(name: &str, value: f64) -> Result<()> {
    if value.is_finite() {
        Ok(())
    } else {
        Err(AdmError::KernelParameter {
            name: name.to_string(),
            value,
            reason: "must be finite",
        })
    }
}

fn check_len(name: &str, len: usize, expected: usize) -> Result<()> {
    if len == expected {
        Ok(())
    } else {
        Err(AdmError::KernelParameter {
            name: name.to_string(),
            value: len as f64,
            reason: "length does not match the number of outputs",
        })
    }
}

fn check_nonempty(name: &str, len: usize) -> Result<()> {
    if len == 0 {
        Err(AdmError::KernelParameter {
            name: name.to_string(),
            value: 0.0,
            reason: "mixture must have at least one component",
        })
    } else {
        Ok(())
    }
}

impl LagBlockKernel {
    pub fn squared_exponential(length_scale: f64) -> Self {
        LagBlockKernel::SE {
            variance: 1.0,
            length_scale,
        }
    }

    pub fn mose(delays: Vec<f64>, length_scale: f64) -> Self {
        LagBlockKernel::MOSE(MoseParams::new(delays, length_scale))
    }

    pub fn kind(&self) -> KernelKind {
        match self {
            LagBlockKernel::Exp { .. } => KernelKind::Exp,
            LagBlockKernel::Matern32 { .. } => KernelKind::Matern32,
            LagBlockKernel::SE { .. } => KernelKind::SE,
            LagBlockKernel::RQ { .. } => KernelKind::RQ,
            LagBlockKernel::SM { .. } => KernelKind::SM,
            LagBlockKernel::MOSE(_) => KernelKind::MOSE,
            LagBlockKernel::MOSM { .. } => KernelKind::MOSM,
            LagBlockKernel::CSM { .. } => KernelKind::CSM,
            LagBlockKernel::LMC { .. } => KernelKind::LMC,
        }
    }

    /// Number of outputs `N`.
    pub fn outputs(&self) -> usize {
        match self {
            LagBlockKernel::MOSE(p) => p.outputs(),
            LagBlockKernel::MOSM { components } => {
                components.first().map_or(0, |c| c.weights.len())
            }
            LagBlockKernel::CSM { outputs, .. } => *outputs,
            LagBlockKernel::LMC { components } => {
                components.first().map_or(0, |c| c.coregionalization.len())
            }
            _ => 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            LagBlockKernel::Exp {
                variance,
                length_scale,
            }
            | LagBlockKernel::Matern32 {
                variance,
                length_scale,
            }
            | LagBlockKernel::SE {
                variance,
                length_scale,
            } => {
                check_positive("variance", *variance)?;
                check_positive("length_scale", *length_scale)
            }
            LagBlockKernel::RQ {
                variance,
                length_scale,
                alpha,
            } => {
                check_positive("variance", *variance)?;
                check_positive("length_scale", *length_scale)?;
                check_positive("alpha", *alpha)
            }
            LagBlockKernel::SM { components } => {
                check_nonempty("components", components.len())?;
                for (q, c) in components.iter().enumerate() {
                    check_positive(&format!("components[{q}].variance"), c.variance)?;
                    check_positive(&format!("components[{q}].length_scale"), c.length_scale)?;
                    check_finite(&format!("components[{q}].frequency"), c.frequency)?;
                }
                Ok(())
            }
            LagBlockKernel::MOSE(p) => {
                check_nonempty("delays", p.delays.len())?;
                check_positive("length_scale", p.length_scale)?;
                for (i, d) in p.delays.iter().enumerate() {
                    check_finite(&format!("delays[{i}]"), *d)?;
                }
                Ok(())
            }
            LagBlockKernel::MOSM { components } => {
                check_nonempty("components", components.len())?;
                let n = components[0].weights.len();
                check_nonempty("weights", n)?;
                for (q, c) in components.iter().enumerate() {
                    check_len(&format!("components[{q}].weights"), c.weights.len(), n)?;
                    check_len(&format!("components[{q}].delays"), c.delays.len(), n)?;
                    check_len(&format!("components[{q}].phases"), c.phases.len(), n)?;
                    check_positive(&format!("components[{q}].length_scale"), c.length_scale)?;
                    check_finite(&format!("components[{q}].frequency"), c.frequency)?;
                    for (i, w) in c.weights.iter().enumerate() {
                        check_positive(&format!("components[{q}].weights[{i}]"), *w)?;
                    }
                    for v in c.delays.iter().chain(c.phases.iter()) {
                        check_finite(&format!("components[{q}]"), *v)?;
                    }
                }
                Ok(())
            }
            LagBlockKernel::CSM {
                outputs,
                components,
            } => {
                check_nonempty("components", components.len())?;
                check_nonempty("outputs", *outputs)?;
                for (q, c) in components.iter().enumerate() {
                    check_positive(&format!("components[{q}].length_scale"), c.length_scale)?;
                    check_finite(&format!("components[{q}].frequency"), c.frequency)?;
                    check_nonempty(&format!("components[{q}].ranks"), c.ranks.len())?;
                    for (r, rank) in c.ranks.iter().enumerate() {
                        let name = format!("components[{q}].ranks[{r}]");
                        check_len(&format!("{name}.weights"), rank.weights.len(), *outputs)?;
                        check_len(&format!("{name}.phases"), rank.phases.len(), *outputs)?;
                        for v in rank.weights.iter().chain(rank.phases.iter()) {
                            check_finite(&name, *v)?;
                        }
                    }
                }
                Ok(())
            }
            LagBlockKernel::LMC { components } => {
                check_nonempty("components", components.len())?;
                let n = components[0].coregionalization.len();
                check_nonempty("coregionalization", n)?;
                for (q, c) in components.iter().enumerate() {
                    check_positive(&format!("components[{q}].length_scale"), c.length_scale)?;
                    check_len(
                        &format!("components[{q}].coregionalization"),
                        c.coregionalization.len(),
                        n,
                    )?;
                    for row in &c.coregionalization {
                        check_len(&format!("components[{q}].coregionalization"), row.len(), n)?;
                        for v in row {
                            check_finite(&format!("components[{q}].coregionalization"), *v)?;
                        }
                    }
                    let b = c.matrix();
                    let asym = (&b - b.transpose()).abs().max();
                    if asym > 1e-12 * (1.0 + b.abs().max()) {
                        return Err(AdmError::KernelParameter {
                            name: format!("components[{q}].coregionalization"),
                            value: asym,
                            reason: "must be symmetric",
                        });
                    }
                    let min_eig = crate::linalg::min_eigenvalue(&b);
                    if min_eig < -1e-10 * (1.0 + b.abs().max()) {
                        return Err(AdmError::KernelParameter {
                            name: format!("components[{q}].coregionalization"),
                            value: min_eig,
                            reason: "must be positive semidefinite",
                        });
                    }
                }
                Ok(())
            }
        }
    }

    /// Evaluate the lag block `K(τ)`.
    pub fn eval_block(&self, tau: f64) -> Result<DMatrix<f64>> {
        self.validate()?;
        if !tau.is_finite() {
            return Err(AdmError::KernelParameter {
                name: "lag".into(),
                value: tau,
                reason: "must be finite",
            });
        }
        Ok(self.eval_unchecked(tau))
    }

    /// Evaluation without parameter validation; callers validate once.
    pub(crate) fn eval_unchecked(&self, tau: f64) -> DMatrix<f64> {
        let scalar = |v: f64| DMatrix::from_element(1, 1, v);
        match self {
            LagBlockKernel::Exp {
                variance,
                length_scale,
            } => scalar(variance * (-tau.abs() / length_scale).exp()),
            LagBlockKernel::Matern32 {
                variance,
                length_scale,
            } => {
                let r = 3f64.sqrt() * tau.abs() / length_scale;
                scalar(variance * (1.0 + r) * (-r).exp())
            }
            LagBlockKernel::SE {
                variance,
                length_scale,
            } => scalar(variance * se(tau, *length_scale)),
            LagBlockKernel::RQ {
                variance,
                length_scale,
                alpha,
            } => scalar(
                variance
                    * (1.0 + tau * tau / (2.0 * alpha * length_scale * length_scale))
                        .powf(-alpha),
            ),
            LagBlockKernel::SM { components } => scalar(
                components
                    .iter()
                    .map(|c| c.variance * se(tau, c.length_scale) * (c.frequency * tau).cos())
                    .sum(),
            ),
            LagBlockKernel::MOSE(p) => p.eval(tau),
            LagBlockKernel::MOSM { components } => {
                let n = self.outputs();
                let mut k = DMatrix::zeros(n, n);
                for c in components {
                    for i in 0..n {
                        for j in 0..n {
                            let u = tau + c.delays[j] - c.delays[i];
                            k[(i, j)] += c.weights[i]
                                * c.weights[j]
                                * se(u, c.length_scale)
                                * (c.frequency * u + c.phases[i] - c.phases[j]).cos();
                        }
                    }
                }
                k
            }
            LagBlockKernel::CSM {
                outputs,
                components,
            } => {
                let n = *outputs;
                let mut k = DMatrix::zeros(n, n);
                for c in components {
                    let envelope = se(tau, c.length_scale);
                    for rank in &c.ranks {
                        for i in 0..n {
                            for j in 0..n {
                                k[(i, j)] += rank.weights[i]
                                    * rank.weights[j]
                                    * envelope
                                    * (c.frequency * tau + rank.phases[i] - rank.phases[j])
                                        .cos();
                            }
                        }
                    }
                }
                k
            }
            LagBlockKernel::LMC { components } => {
                let n = self.outputs();
                let mut k = DMatrix::zeros(n, n);
                for c in components {
                    k += c.matrix() * se(tau, c.length_scale);
                }
                k
            }
        }
    }
}

/// Full `NT×NT` covariance of the kernel on a uniform time grid.
///
/// Block `(s, t)` is `K(times[s] - times[t])`.
pub fn gram_matrix(kernel: &LagBlockKernel, times: &[f64]) -> Result<DMatrix<f64>> {
    kernel.validate()?;
    check_uniform_grid(times)?;
    let n = kernel.outputs();
    let t = times.len();
    let mut out = DMatrix::zeros(n * t, n * t);
    if t == 0 {
        return Ok(out);
    }
    // Cache blocks by integer lag on the uniform grid.
    let step = if t > 1 { times[1] - times[0] } else { 1.0 };
    let mut cache: Vec<DMatrix<f64>> = Vec::with_capacity(t);
    for k in 0..t {
        cache.push(kernel.eval_unchecked(k as f64 * step));
    }
    for s in 0..t {
        for r in 0..t {
            let block = if s >= r {
                cache[s - r].clone()
            } else {
                cache[r - s].transpose()
            };
            out.view_mut((s * n, r * n), (n, n)).copy_from(&block);
        }
    }
    Ok(out)
}

/// Checks that `times` is strictly increasing with constant spacing.
pub fn check_uniform_grid(times: &[f64]) -> Result<()> {
    if times.len() < 2 {
        return Ok(());
    }
    let step = times[1] - times[0];
    if !(step > 0.0) || !step.is_finite() {
        return Err(AdmError::NonUniformGrid {
            index: 1,
            expected: step,
            found: step,
        });
    }
    for i in 2..times.len() {
        let d = times[i] - times[i - 1];
        if (d - step).abs() > 1e-9 * step.abs().max(1.0) {
            return Err(AdmError::NonUniformGrid {
                index: i,
                expected: step,
                found: d,
            });
        }
    }
    Ok(())
}
