//! The joint latent model: across-region MOSE groups with time-varying
//! delays, region-private squared-exponential groups, and a factor-analysis
//! emission.
//!
//! Joint state layout (dimension `S = (m_a + m_w)·N·P`):
//!
//! * across group `g` occupies `[g·N·P, (g+1)·N·P)`, ordered lag-major:
//!   coordinate `k·N + i` is region `i` at lag `k`;
//! * within group `w`, region `n` occupies a contiguous run of `P`
//!   coordinates after all across groups, lag 0 first.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::convert::{self, CompanionSsm, ConversionOptions};
use crate::error::{AdmError, Result};
use crate::kernels::LagBlockKernel;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LatentLayout {
    pub regions: usize,
    pub across: usize,
    pub within: usize,
    pub order: usize,
    pub region_dims: Vec<usize>,
    pub bins: usize,
}

impl LatentLayout {
    pub fn validate(&self) -> Result<()> {
        if self.regions == 0 {
            return Err(AdmError::Model("at least one region is required".into()));
        }
        if self.across + self.within == 0 {
            return Err(AdmError::Model(
                "at least one latent group (across or within) is required".into(),
            ));
        }
        if self.order == 0 {
            return Err(AdmError::Model("order P must be at least 1".into()));
        }
        if self.region_dims.len() != self.regions {
            return Err(AdmError::Model(format!(
                "{} region dims given for {} regions",
                self.region_dims.len(),
                self.regions
            )));
        }
        if self.region_dims.iter().any(|&d| d == 0) {
            return Err(AdmError::Model("every region needs at least one channel".into()));
        }
        if self.bins == 0 {
            return Err(AdmError::Model("at least one time bin is required".into()));
        }
        Ok(())
    }

    /// Latents per region, `M = m_a + m_w`.
    pub fn latents_per_region(&self) -> usize {
        self.across + self.within
    }

    pub fn obs_dim(&self) -> usize {
        self.region_dims.iter().sum()
    }

    pub fn state_dim(&self) -> usize {
        (self.across + self.within) * self.regions * self.order
    }

    pub fn across_offset(&self, group: usize) -> usize {
        group * self.regions * self.order
    }

    pub fn within_offset(&self, group: usize, region: usize) -> usize {
        self.across * self.regions * self.order + (group * self.regions + region) * self.order
    }

    /// Joint-state index of the current value of latent `m` in region `i`
    /// (`m < m_a` are across groups).
    pub fn current_coordinate(&self, latent: usize, region: usize) -> usize {
        if latent < self.across {
            self.across_offset(latent) + region
        } else {
            self.within_offset(latent - self.across, region)
        }
    }

    pub fn region_rows(&self, region: usize) -> std::ops::Range<usize> {
        let start: usize = self.region_dims[..region].iter().sum();
        start..start + self.region_dims[region]
    }
}

/// Factor-analysis emission `y = C x + d + ε`, `ε ~ N(0, diag(V))`, with
/// `C = blockdiag(C¹, …, Cᴺ)` and `Cⁱ` of shape `dims(i) × M`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FaParams {
    pub loadings: Vec<DMatrix<f64>>,
    pub bias: DVector<f64>,
    pub noise: DVector<f64>,
}

impl FaParams {
    pub fn validate(&self, layout: &LatentLayout) -> Result<()> {
        if self.loadings.len() != layout.regions {
            return Err(AdmError::Model(format!(
                "{} loading blocks for {} regions",
                self.loadings.len(),
                layout.regions
            )));
        }
        for (i, c) in self.loadings.iter().enumerate() {
            if c.shape() != (layout.region_dims[i], layout.latents_per_region()) {
                return Err(AdmError::Model(format!(
                    "loading block {i} has shape {:?}, expected {:?}",
                    c.shape(),
                    (layout.region_dims[i], layout.latents_per_region())
                )));
            }
        }
        let d = layout.obs_dim();
        if self.bias.len() != d || self.noise.len() != d {
            return Err(AdmError::Model(format!(
                "bias/noise lengths {}/{} do not match {d} channels",
                self.bias.len(),
                self.noise.len()
            )));
        }
        if let Some(k) = self.noise.iter().position(|v| !(*v > 0.0) || !v.is_finite()) {
            return Err(AdmError::Model(format!(
                "observation noise of channel {k} must be positive, got {}",
                self.noise[k]
            )));
        }
        Ok(())
    }

    /// Joint emission matrix `E = C · H_joint` (`D × S`).
    pub fn emission(&self, layout: &LatentLayout) -> DMatrix<f64> {
        let mut e = DMatrix::zeros(layout.obs_dim(), layout.state_dim());
        for i in 0..layout.regions {
            let rows = layout.region_rows(i);
            for m in 0..layout.latents_per_region() {
                let col = layout.current_coordinate(m, i);
                for (local, row) in rows.clone().enumerate() {
                    e[(row, col)] = self.loadings[i][(local, m)];
                }
            }
        }
        e
    }
}

/// Across-region group: per-step region delays (`delays[t][0] == 0`) and a
/// length scale shared over time and regions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AcrossGroup {
    pub delays: Vec<Vec<f64>>,
    pub length_scale: f64,
}

impl AcrossGroup {
    pub fn constant(regions: usize, bins: usize, delays: &[f64], length_scale: f64) -> Self {
        assert_eq!(delays.len(), regions);
        Self {
            delays: vec![delays.to_vec(); bins],
            length_scale,
        }
    }

    pub fn kernel_at(&self, t: usize) -> LagBlockKernel {
        LagBlockKernel::mose(self.delays[t].clone(), self.length_scale)
    }
}

/// Region-private group: one squared-exponential length scale shared by all
/// regions of the group.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WithinGroup {
    pub length_scale: f64,
}

impl WithinGroup {
    pub fn kernel(&self) -> LagBlockKernel {
        LagBlockKernel::squared_exponential(self.length_scale)
    }
}

/// The full adaptive-delay model with cached companion forms.
#[derive(Debug, Clone)]
pub struct AdmModel {
    layout: LatentLayout,
    across: Vec<AcrossGroup>,
    within: Vec<WithinGroup>,
    fa: FaParams,
    options: ConversionOptions,
    across_ssms: Vec<Vec<CompanionSsm>>,
    within_ssms: Vec<CompanionSsm>,
}

/// Joint transition and process noise at one time step.
#[derive(Debug, Clone)]
pub struct JointStep {
    pub transition: DMatrix<f64>,
    pub noise: DMatrix<f64>,
}

impl AdmModel {
    pub fn new(
        layout: LatentLayout,
        across: Vec<AcrossGroup>,
        within: Vec<WithinGroup>,
        fa: FaParams,
        options: ConversionOptions,
    ) -> Result<Self> {
        layout.validate()?;
        fa.validate(&layout)?;
        let mut model = Self {
            layout,
            across,
            within,
            fa,
            options,
            across_ssms: Vec::new(),
            within_ssms: Vec::new(),
        };
        model.check_kernel_params()?;
        model.rebuild_ssms()?;
        Ok(model)
    }

    fn check_kernel_params(&self) -> Result<()> {
        let l = &self.layout;
        if self.across.len() != l.across || self.within.len() != l.within {
            return Err(AdmError::Model(format!(
                "layout expects {} across and {} within groups, got {} and {}",
                l.across,
                l.within,
                self.across.len(),
                self.within.len()
            )));
        }
        for (g, grp) in self.across.iter().enumerate() {
            if grp.delays.len() != l.bins {
                return Err(AdmError::Model(format!(
                    "across group {g} has {} delay steps, expected {}",
                    grp.delays.len(),
                    l.bins
                )));
            }
            for (t, d) in grp.delays.iter().enumerate() {
                if d.len() != l.regions {
                    return Err(AdmError::Model(format!(
                        "across group {g} step {t} has {} delays for {} regions",
                        d.len(),
                        l.regions
                    )));
                }
                if d[0] != 0.0 {
                    return Err(AdmError::Model(format!(
                        "across group {g} step {t}: first region delay must be 0, got {}",
                        d[0]
                    )));
                }
            }
        }
        Ok(())
    }

    fn rebuild_ssms(&mut self) -> Result<()> {
        let order = self.layout.order;
        let opts = self.options;
        self.across_ssms = self
            .across
            .iter()
            .map(|g| convert::time_varying_family(&g.delays, g.length_scale, order, &opts))
            .collect::<Result<_>>()?;
        self.within_ssms = self
            .within
            .iter()
            .map(|w| convert::kernel_to_markovian(&w.kernel(), order, &opts))
            .collect::<Result<_>>()?;
        Ok(())
    }

    pub fn layout(&self) -> &LatentLayout {
        &self.layout
    }

    pub fn across_groups(&self) -> &[AcrossGroup] {
        &self.across
    }

    pub fn within_groups(&self) -> &[WithinGroup] {
        &self.within
    }

    pub fn fa(&self) -> &FaParams {
        &self.fa
    }

    pub fn options(&self) -> &ConversionOptions {
        &self.options
    }

    pub fn across_ssm(&self, group: usize, t: usize) -> &CompanionSsm {
        &self.across_ssms[group][t]
    }

    pub fn within_ssm(&self, group: usize) -> &CompanionSsm {
        &self.within_ssms[group]
    }

    /// Switch conversion options and rebuild the companion models.
    pub fn set_options(&mut self, options: ConversionOptions) -> Result<()> {
        let old = std::mem::replace(&mut self.options, options);
        let res = self.rebuild_ssms();
        if res.is_err() {
            self.options = old;
            self.rebuild_ssms()?;
        }
        res
    }

    pub fn set_fa(&mut self, fa: FaParams) -> Result<()> {
        fa.validate(&self.layout)?;
        self.fa = fa;
        Ok(())
    }

    /// Replace all kernel parameters and rebuild the companion models.
    pub fn set_kernel_params(
        &mut self,
        across: Vec<AcrossGroup>,
        within: Vec<WithinGroup>,
    ) -> Result<()> {
        let old_across = std::mem::replace(&mut self.across, across);
        let old_within = std::mem::replace(&mut self.within, within);
        let res = self.check_kernel_params().and_then(|_| self.rebuild_ssms());
        if res.is_err() {
            self.across = old_across;
            self.within = old_within;
        }
        res
    }

    pub fn emission(&self) -> DMatrix<f64> {
        self.fa.emission(&self.layout)
    }

    /// Block-diagonal joint transition and process noise at step `t`
    /// (the map from `t-1` to `t`).
    pub fn assemble_joint(&self, t: usize) -> Result<JointStep> {
        if t >= self.layout.bins {
            return Err(AdmError::Model(format!(
                "time index {t} out of range [0, {})",
                self.layout.bins
            )));
        }
        let s = self.layout.state_dim();
        let mut transition = DMatrix::zeros(s, s);
        let mut noise = DMatrix::zeros(s, s);
        self.for_each_block(t, |offset, ssm| {
            let k = ssm.state_dim();
            transition
                .view_mut((offset, offset), (k, k))
                .copy_from(&ssm.transition);
            noise.view_mut((offset, offset), (k, k)).copy_from(&ssm.noise);
        });
        Ok(JointStep { transition, noise })
    }

    /// Lower-triangular factor of the joint process noise at step `t`.
    pub fn joint_noise_factor(&self, t: usize) -> DMatrix<f64> {
        let s = self.layout.state_dim();
        let mut f = DMatrix::zeros(s, s);
        self.for_each_block(t, |offset, ssm| {
            let k = ssm.state_dim();
            f.view_mut((offset, offset), (k, k))
                .copy_from(&ssm.noise_factor);
        });
        f
    }

    fn for_each_block(&self, t: usize, mut f: impl FnMut(usize, &CompanionSsm)) {
        let l = &self.layout;
        for g in 0..l.across {
            f(l.across_offset(g), &self.across_ssms[g][t]);
        }
        for w in 0..l.within {
            for n in 0..l.regions {
                f(l.within_offset(w, n), &self.within_ssms[w]);
            }
        }
    }

    /// Prior of the joint state at `t = 0`: zero mean and, per group, the
    /// kernel Gram of lags `0…P-1` (delays taken at `t = 0`).
    pub fn stationary_initial(&self) -> Result<(DVector<f64>, DMatrix<f64>)> {
        let l = &self.layout;
        let s = l.state_dim();
        let mut p0 = DMatrix::zeros(s, s);
        let jitter = self.options.jitter_start;
        for (g, grp) in self.across.iter().enumerate() {
            let block = convert::stacked_state_covariance(&grp.kernel_at(0), l.order, jitter)?;
            let k = block.nrows();
            let o = l.across_offset(g);
            p0.view_mut((o, o), (k, k)).copy_from(&block);
        }
        for (w, grp) in self.within.iter().enumerate() {
            let block = convert::stacked_state_covariance(&grp.kernel(), l.order, jitter)?;
            for n in 0..l.regions {
                let o = l.within_offset(w, n);
                p0.view_mut((o, o), (l.order, l.order)).copy_from(&block);
            }
        }
        if p0.clone().cholesky().is_none() {
            return Err(AdmError::Model(
                "initial state covariance is not positive definite".into(),
            ));
        }
        Ok((DVector::zeros(s), p0))
    }

    /// Draw `trials` independent trials. Trial `r` uses its own ChaCha
    /// stream derived from `seed`, so results do not depend on scheduling.
    pub fn simulate(&self, trials: usize, seed: u64) -> Result<Simulation> {
        if trials == 0 {
            return Err(AdmError::Model("at least one trial must be simulated".into()));
        }
        let l = &self.layout;
        let (_, p0) = self.stationary_initial()?;
        let p0_factor = p0
            .cholesky()
            .ok_or_else(|| AdmError::Model("initial covariance factorization failed".into()))?
            .l();
        let steps: Vec<JointStep> = (0..l.bins)
            .map(|t| self.assemble_joint(t))
            .collect::<Result<_>>()?;
        let factors: Vec<DMatrix<f64>> = (0..l.bins).map(|t| self.joint_noise_factor(t)).collect();
        let emission = self.emission();
        let noise_sd = self.fa.noise.map(f64::sqrt);
        let s = l.state_dim();
        let d = l.obs_dim();

        let results: Vec<(DMatrix<f64>, DMatrix<f64>)> = (0..trials)
            .into_par_iter()
            .map(|r| {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                rng.set_stream(r as u64);
                let mut normal = |n: usize| -> DVector<f64> {
                    DVector::from_fn(n, |_, _| StandardNormal.sample(&mut rng))
                };
                let mut states = DMatrix::zeros(s, l.bins);
                let mut obs = DMatrix::zeros(d, l.bins);
                let mut x = &p0_factor * normal(s);
                for t in 0..l.bins {
                    if t > 0 {
                        x = &steps[t].transition * &x + &factors[t] * normal(s);
                    }
                    let eps = normal(d).component_mul(&noise_sd);
                    let y = &emission * &x + &self.fa.bias + eps;
                    states.set_column(t, &x);
                    obs.set_column(t, &y);
                }
                (obs, states)
            })
            .collect();
        let (observations, states): (Vec<_>, Vec<_>) = results.into_iter().unzip();
        Ok(Simulation {
            data: TrialSet::new(observations, 1.0, l.region_dims.clone())?,
            states,
        })
    }

    /// Current values of every latent (`M·N × T`, latent-major then region)
    /// from a stacked joint-state trajectory.
    pub fn current_latents(&self, states: &DMatrix<f64>) -> DMatrix<f64> {
        let l = &self.layout;
        let m = l.latents_per_region();
        DMatrix::from_fn(m * l.regions, states.ncols(), |row, t| {
            let (latent, region) = (row / l.regions, row % l.regions);
            states[(l.current_coordinate(latent, region), t)]
        })
    }
}

/// `R` trials of `D × T` observations.
#[derive(Debug, Clone, PartialEq)]
pub struct TrialSet {
    pub trials: Vec<DMatrix<f64>>,
    /// Seconds per bin.
    pub bin_width: f64,
    pub region_dims: Vec<usize>,
}

impl TrialSet {
    pub fn new(trials: Vec<DMatrix<f64>>, bin_width: f64, region_dims: Vec<usize>) -> Result<Self> {
        let set = Self {
            trials,
            bin_width,
            region_dims,
        };
        set.validate()?;
        Ok(set)
    }

    pub fn validate(&self) -> Result<()> {
        let d: usize = self.region_dims.iter().sum();
        let Some(first) = self.trials.first() else {
            return Err(AdmError::DimensionMismatch("trial set is empty".into()));
        };
        let t = first.ncols();
        for (r, trial) in self.trials.iter().enumerate() {
            if trial.shape() != (d, t) {
                return Err(AdmError::DimensionMismatch(format!(
                    "trial {r} has shape {:?}, expected ({d}, {t})",
                    trial.shape()
                )));
            }
            if let Some(pos) = trial.iter().position(|v| !v.is_finite()) {
                return Err(AdmError::Malformed(format!(
                    "trial {r} has a non-finite entry at flat index {pos}"
                )));
            }
        }
        if !(self.bin_width > 0.0) || !self.bin_width.is_finite() {
            return Err(AdmError::Malformed(format!(
                "bin width must be positive, got {}",
                self.bin_width
            )));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.trials.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trials.is_empty()
    }

    pub fn obs_dim(&self) -> usize {
        self.region_dims.iter().sum()
    }

    pub fn bins(&self) -> usize {
        self.trials.first().map_or(0, |t| t.ncols())
    }

    pub fn subset(&self, indices: &[usize]) -> TrialSet {
        TrialSet {
            trials: indices.iter().map(|&i| self.trials[i].clone()).collect(),
            bin_width: self.bin_width,
            region_dims: self.region_dims.clone(),
        }
    }
}

/// Output of [`AdmModel::simulate`]: data plus the stacked joint states
/// (`S × T` per trial).
#[derive(Debug, Clone)]
pub struct Simulation {
    pub data: TrialSet,
    pub states: Vec<DMatrix<f64>>,
}

/// Smallest valid emission for tests and presets: identity-like loadings.
pub fn identity_fa(layout: &LatentLayout, noise: f64) -> FaParams {
    let m = layout.latents_per_region();
    FaParams {
        loadings: layout
            .region_dims
            .iter()
            .map(|&d| DMatrix::from_fn(d, m, |r, c| if r == c { 1.0 } else { 0.0 }))
            .collect(),
        bias: DVector::zeros(layout.obs_dim()),
        noise: DVector::from_element(layout.obs_dim(), noise),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn layout(regions: usize, across: usize, within: usize, order: usize, bins: usize) -> LatentLayout {
        LatentLayout {
            regions,
            across,
            within,
            order,
            region_dims: vec![across + within; regions],
            bins,
        }
    }

    fn model(l: LatentLayout, delay: f64) -> AdmModel {
        let across = (0..l.across)
            .map(|_| {
                let mut d = vec![0.0; l.regions];
                if l.regions > 1 {
                    d[1] = delay;
                }
                AcrossGroup::constant(l.regions, l.bins, &d, 3.0)
            })
            .collect();
        let within = (0..l.within).map(|_| WithinGroup { length_scale: 2.0 }).collect();
        let fa = identity_fa(&l, 0.1);
        AdmModel::new(l, across, within, fa, ConversionOptions::default()).unwrap()
    }

    #[test]
    fn single_across_group_order_one() {
        let m = model(layout(2, 1, 0, 1, 4), 1.0);
        let j = m.assemble_joint(2).unwrap();
        assert_eq!(j.transition, m.across_ssm(0, 2).transition);
        assert_eq!(m.emission(), DMatrix::identity(2, 2));
    }

    #[test]
    fn within_groups_are_independent_blocks() {
        let m = model(layout(2, 0, 1, 2, 4), 0.0);
        let j = m.assemble_joint(1).unwrap();
        assert_eq!(j.transition.shape(), (4, 4));
        let block = &m.within_ssm(0).transition;
        assert_eq!(j.transition.view((0, 0), (2, 2)).into_owned(), *block);
        assert_eq!(j.transition.view((2, 2), (2, 2)).into_owned(), *block);
        assert_eq!(j.transition.view((0, 2), (2, 2)).abs().max(), 0.0);
        assert_eq!(j.noise.view((2, 0), (2, 2)).abs().max(), 0.0);
    }

    #[test]
    fn state_dimension_of_two_region_preset_layout() {
        let l = LatentLayout {
            regions: 2,
            across: 2,
            within: 1,
            order: 5,
            region_dims: vec![50, 50],
            bins: 200,
        };
        assert_eq!(l.state_dim(), 30);
    }

    #[test]
    fn out_of_range_step_rejected() {
        let m = model(layout(2, 1, 0, 1, 4), 1.0);
        assert!(m.assemble_joint(4).is_err());
    }

    #[test]
    fn initial_covariance_blocks() {
        let m = model(layout(1, 0, 1, 1, 3), 0.0);
        let (mu, p0) = m.stationary_initial().unwrap();
        assert_eq!(mu, DVector::zeros(1));
        assert!((p0[(0, 0)] - 1.0).abs() < 1e-5);

        let l = layout(1, 0, 1, 2, 3);
        let fa = identity_fa(&l, 0.1);
        let m = AdmModel::new(
            l,
            vec![],
            vec![WithinGroup { length_scale: 5.0 }],
            fa,
            ConversionOptions {
                jitter_start: 0.0,
                ..Default::default()
            },
        )
        .unwrap();
        let (_, p0) = m.stationary_initial().unwrap();
        let k1 = (-1.0f64 / 50.0).exp();
        assert_eq!(p0, DMatrix::from_row_slice(2, 2, &[1.0, k1, k1, 1.0]));
    }

    #[test]
    fn zero_delay_initial_block_is_swap_symmetric() {
        let m = model(layout(2, 1, 0, 2, 3), 0.0);
        let (_, p0) = m.stationary_initial().unwrap();
        let perm = DMatrix::from_fn(4, 4, |i, j| if i ^ 1 == j { 1.0 } else { 0.0 });
        assert_eq!(&perm * &p0 * &perm, p0);
    }

    #[test]
    fn nonzero_anchor_delay_rejected() {
        let l = layout(2, 1, 0, 1, 2);
        let fa = identity_fa(&l, 0.1);
        let across = vec![AcrossGroup::constant(2, 2, &[1.0, 2.0], 3.0)];
        assert!(AdmModel::new(l, across, vec![], fa, ConversionOptions::default()).is_err());
    }

    #[test]
    fn simulation_is_reproducible() {
        let m = model(layout(2, 1, 1, 2, 20), 1.0);
        let a = m.simulate(3, 7).unwrap();
        let b = m.simulate(3, 7).unwrap();
        assert_eq!(a.data, b.data);
        let c = m.simulate(3, 8).unwrap();
        assert_ne!(a.data, c.data);
    }

    #[test]
    fn noiseless_identity_emission_reproduces_latents() {
        let l = layout(2, 1, 0, 2, 15);
        let mut fa = identity_fa(&l, 1e-300);
        fa.noise.fill(f64::MIN_POSITIVE);
        let across = vec![AcrossGroup::constant(2, 15, &[0.0, 1.0], 3.0)];
        let m = AdmModel::new(l, across, vec![], fa, ConversionOptions::default()).unwrap();
        let sim = m.simulate(2, 1).unwrap();
        for (y, x) in sim.data.trials.iter().zip(&sim.states) {
            let lat = m.current_latents(x);
            assert!((y - lat).abs().max() < 1e-100);
        }
    }

    #[test]
    fn trial_set_rejects_ragged_trials() {
        let err = TrialSet::new(
            vec![DMatrix::zeros(2, 3), DMatrix::zeros(2, 4)],
            0.01,
            vec![1, 1],
        )
        .unwrap_err();
        assert!(matches!(err, AdmError::DimensionMismatch(_)));
    }
}
