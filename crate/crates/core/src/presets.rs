//! Built-in synthetic configurations.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::convert::ConversionOptions;
use crate::error::{AdmError, Result};
use crate::inference::Method;
use crate::learning::FitConfig;
use crate::model::{AcrossGroup, AdmModel, FaParams, LatentLayout, Simulation, WithinGroup};

/// Two regions with one feed-forward and one feedback across group whose
/// delays shrink during a window, plus one within-region group.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TwoRegionPreset {
    pub region_dims: Vec<usize>,
    pub order: usize,
    pub bins: usize,
    pub trials: usize,
    /// Delay of region 2 relative to region 1 for the forward group:
    /// `(outside window, inside window)`.
    pub forward_delays: (f64, f64),
    /// Inclusive window of the forward group's short delay.
    pub forward_window: (usize, usize),
    pub feedback_delays: (f64, f64),
    pub feedback_window: (usize, usize),
    pub across_length_scale: f64,
    pub within_length_scale: f64,
    /// Range of the uniform observation-noise variances.
    pub noise_range: (f64, f64),
}

impl Default for TwoRegionPreset {
    fn default() -> Self {
        Self {
            region_dims: vec![50, 50],
            order: 5,
            bins: 200,
            trials: 120,
            forward_delays: (5.0, 1.0),
            forward_window: (30, 70),
            feedback_delays: (-5.0, -1.0),
            feedback_window: (130, 170),
            across_length_scale: 5.0,
            within_length_scale: 2.5,
            noise_range: (0.5, 1.0),
        }
    }
}

/// Continuation schedule of the preset fit: one decade per stage down to
/// the conversion default.
pub const ANNEAL_JITTERS: [f64; 4] = [1e-3, 1e-4, 1e-5, 1e-6];

pub const TWO_REGION_NAME: &str = "synthetic-2region";

/// Look up a preset by name.
pub fn by_name(name: &str) -> Result<TwoRegionPreset> {
    match name {
        TWO_REGION_NAME => Ok(TwoRegionPreset::default()),
        other => Err(AdmError::Config(format!(
            "unknown preset `{other}` (available: {TWO_REGION_NAME})"
        ))),
    }
}

fn windowed(bins: usize, (outside, inside): (f64, f64), (lo, hi): (usize, usize)) -> Vec<Vec<f64>> {
    (0..bins)
        .map(|t| {
            let d = if (lo..=hi).contains(&t) { inside } else { outside };
            vec![0.0, d]
        })
        .collect()
}

impl TwoRegionPreset {
    pub fn layout(&self) -> LatentLayout {
        LatentLayout {
            regions: self.region_dims.len(),
            across: 2,
            within: 1,
            order: self.order,
            region_dims: self.region_dims.clone(),
            bins: self.bins,
        }
    }

    /// Ground-truth delay trajectories (`T × 2`) of the forward and feedback
    /// groups.
    pub fn true_delays(&self) -> [Vec<Vec<f64>>; 2] {
        [
            windowed(self.bins, self.forward_delays, self.forward_window),
            windowed(self.bins, self.feedback_delays, self.feedback_window),
        ]
    }

    /// Random but seeded emission: `C ~ N(0, 1)`, `d ~ N(0, 1)`,
    /// `V ~ U(noise_range)`.
    pub fn emission(&self, seed: u64) -> FaParams {
        let layout = self.layout();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_fa00);
        let m = layout.latents_per_region();
        let loadings = self
            .region_dims
            .iter()
            .map(|&d| DMatrix::from_fn(d, m, |_, _| rng.sample::<f64, _>(StandardNormal)))
            .collect();
        let dim = layout.obs_dim();
        let bias = DVector::from_fn(dim, |_, _| rng.sample::<f64, _>(StandardNormal));
        let (lo, hi) = self.noise_range;
        let noise = DVector::from_fn(dim, |_, _| rng.random_range(lo..hi));
        FaParams {
            loadings,
            bias,
            noise,
        }
    }

    pub fn model(&self, seed: u64) -> Result<AdmModel> {
        if self.region_dims.len() != 2 {
            return Err(AdmError::Config("the two-region preset needs exactly two regions".into()));
        }
        let [fwd, fb] = self.true_delays();
        let across = vec![
            AcrossGroup {
                delays: fwd,
                length_scale: self.across_length_scale,
            },
            AcrossGroup {
                delays: fb,
                length_scale: self.across_length_scale,
            },
        ];
        let within = vec![WithinGroup {
            length_scale: self.within_length_scale,
        }];
        AdmModel::new(
            self.layout(),
            across,
            within,
            self.emission(seed),
            ConversionOptions::default(),
        )
    }

    /// Fit configuration used for this preset: the true latent sizes and
    /// order, a light delay-smoothness penalty, sequential inference, and
    /// continuation down to the default conversion jitter.
    pub fn fit_config(&self, seed: u64) -> FitConfig {
        FitConfig {
            across: 2,
            within: 1,
            order: self.order,
            smoothness: 2.0,
            method: Method::Sequential,
            anneal_jitters: ANNEAL_JITTERS.to_vec(),
            seed,
            ..FitConfig::default()
        }
    }

    /// Ground-truth model and a simulated dataset.
    pub fn simulate(&self, seed: u64) -> Result<(AdmModel, Simulation)> {
        let model = self.model(seed)?;
        let sim = model.simulate(self.trials, seed)?;
        Ok((model, sim))
    }
}

/// Delay-recovery score of a fitted model against a preset's ground truth.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecoveryScore {
    /// Fitted group matched to each true group.
    pub assignment: Vec<usize>,
    /// Constant-delay bins within tolerance, per true group.
    pub hits: Vec<usize>,
    /// Constant-delay bins per true group.
    pub totals: Vec<usize>,
}

impl RecoveryScore {
    pub fn fraction(&self) -> f64 {
        let total: usize = self.totals.iter().sum();
        if total == 0 {
            return 0.0;
        }
        self.hits.iter().sum::<usize>() as f64 / total as f64
    }
}

/// Fraction of constant-delay bins (margin `margin`) where the fitted delay
/// of region 2 is within `tol` bins of the truth. Across groups are only
/// identified up to relabelling, so the best matching of fitted to true
/// groups is used.
pub fn score_recovery(
    truth: &[Vec<Vec<f64>>],
    fitted: &[AcrossGroup],
    margin: usize,
    tol: f64,
) -> RecoveryScore {
    let totals: Vec<usize> = truth
        .iter()
        .map(|d| constant_delay_bins(d, margin).len())
        .collect();
    let hit = |tg: usize, fg: usize| -> usize {
        constant_delay_bins(&truth[tg], margin)
            .into_iter()
            .filter(|&t| {
                (1..truth[tg][t].len())
                    .all(|k| (fitted[fg].delays[t][k] - truth[tg][t][k]).abs() <= tol)
            })
            .count()
    };
    let mut best: (usize, Vec<usize>) = (0, Vec::new());
    for perm in permutations(fitted.len(), truth.len()) {
        let total: usize = perm.iter().enumerate().map(|(tg, &fg)| hit(tg, fg)).sum();
        if best.1.is_empty() || total > best.0 {
            best = (total, perm);
        }
    }
    let hits = best.1.iter().enumerate().map(|(tg, &fg)| hit(tg, fg)).collect();
    RecoveryScore {
        assignment: best.1,
        hits,
        totals,
    }
}

/// Injective maps from `k` items into `n` slots.
fn permutations(n: usize, k: usize) -> Vec<Vec<usize>> {
    if k == 0 {
        return vec![Vec::new()];
    }
    let mut out = Vec::new();
    for head in permutations(n, k - 1) {
        for i in 0..n {
            if !head.contains(&i) {
                let mut p = head.clone();
                p.push(i);
                out.push(p);
            }
        }
    }
    out
}

/// Steps whose delay is constant over `[t − margin, t + margin]`.
pub fn constant_delay_bins(delays: &[Vec<f64>], margin: usize) -> Vec<usize> {
    let bins = delays.len();
    (0..bins)
        .filter(|&t| {
            let lo = t.saturating_sub(margin);
            let hi = (t + margin).min(bins - 1);
            (lo..=hi).all(|s| delays[s] == delays[t])
        })
        .collect()
}
