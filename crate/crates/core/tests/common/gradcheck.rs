use adm::inference::{self, Method};
use adm::learning::{self, group_objective, FitConfig, GroupRef, SufficientStats};
use adm::model::{identity_fa, AcrossGroup, AdmModel, LatentLayout, TrialSet, WithinGroup};
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Moments from the posterior of `model` given `data`.
pub fn posterior_stats(model: &AdmModel, data: &TrialSet) -> SufficientStats {
    let refs: Vec<&DMatrix<f64>> = data.trials.iter().collect();
    let (_, _, sm) = inference::posterior(model, &refs, Method::Sequential).unwrap();
    SufficientStats::from_smoother(&sm)
}

/// Random two-region model with one across and one within group, order 2,
/// eight steps, arbitrary per-step delays.
fn random_instance(seed: u64) -> (AdmModel, SufficientStats, Vec<Vec<f64>>, f64, f64, f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let bins = 8;
    let lay = LatentLayout {
        regions: 2,
        across: 1,
        within: 1,
        order: 2,
        region_dims: vec![3, 3],
        bins,
    };
    let truth: Vec<Vec<f64>> = (0..bins).map(|_| vec![0.0, rng.random_range(-2.0..2.0)]).collect();
    let across = vec![AcrossGroup {
        delays: truth,
        length_scale: rng.random_range(2.0..6.0),
    }];
    let within = vec![WithinGroup {
        length_scale: rng.random_range(1.5..4.0),
    }];
    let mut fa = identity_fa(&lay, 0.3);
    for c in &mut fa.loadings {
        c.iter_mut().for_each(|v| *v += rng.random_range(-0.5..0.5));
    }
    let model = AdmModel::new(lay, across, within, fa, learning::LEARNING_CONVERSION).unwrap();
    let sim = model.simulate(4, seed).unwrap();
    let stats = posterior_stats(&model, &sim.data);
    // Evaluate the objective away from the parameters that produced the
    // moments, so the gradient is not trivially small.
    let delays: Vec<Vec<f64>> = (0..bins).map(|_| vec![0.0, rng.random_range(-2.5..2.5)]).collect();
    let l_across = rng.random_range(2.0..6.0);
    let l_within = rng.random_range(1.5..4.0);
    let smoothness = rng.random_range(0.0..2.0);
    (model, stats, delays, l_across, l_within, smoothness)
}

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

/// Analytic gradient of every kernel parameter against central differences
/// with `h = 1e-4 (1 + |p|)`. Returns the worst relative error.
pub fn gradient_check(seed: u64) -> f64 {
    let (model, stats, delays, l_a, l_w, smoothness) = random_instance(seed);
    let lay = model.layout().clone();
    let cfg = FitConfig {
        smoothness,
        ..FitConfig::default()
    };
    let value = |d: &[Vec<f64>], l: f64, g: GroupRef| group_objective(&stats, &lay, g, d, l, &cfg).unwrap().0;
    let mut worst: f64 = 0.0;

    let (_, grad_d, grad_l) = group_objective(&stats, &lay, GroupRef::Across(0), &delays, l_a, &cfg).unwrap();
    for t in 0..lay.bins {
        assert_eq!(grad_d[t][0], 0.0, "anchor gradient must vanish");
        let h = 1e-4 * (1.0 + delays[t][1].abs());
        let mut up = delays.clone();
        up[t][1] += h;
        let mut dn = delays.clone();
        dn[t][1] -= h;
        let fd = (value(&up, l_a, GroupRef::Across(0)) - value(&dn, l_a, GroupRef::Across(0))) / (2.0 * h);
        worst = worst.max(rel_err(grad_d[t][1], fd));
    }
    let h = 1e-4 * (1.0 + l_a);
    let fd = (value(&delays, l_a + h, GroupRef::Across(0)) - value(&delays, l_a - h, GroupRef::Across(0))) / (2.0 * h);
    worst = worst.max(rel_err(grad_l, fd));

    let (_, _, grad_w) = group_objective(&stats, &lay, GroupRef::Within(0), &[], l_w, &cfg).unwrap();
    let h = 1e-4 * (1.0 + l_w);
    let fd = (value(&[], l_w + h, GroupRef::Within(0)) - value(&[], l_w - h, GroupRef::Within(0))) / (2.0 * h);
    worst.max(rel_err(grad_w, fd))
}

