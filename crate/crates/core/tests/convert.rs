mod common;

use adm::convert::{self, ConversionOptions};
use adm::kernels::{recommended_order, KernelKind, LagBlockKernel};
use adm::linalg;
use adm::oracle::zoo;
use adm::presets::TwoRegionPreset;
use common::{implied_lags, lyapunov, scaled_error};
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

#[test]
fn zoo_round_trip_through_lyapunov() {
    let opts = ConversionOptions::default();
    for kernel in zoo() {
        let p = recommended_order(kernel.kind());
        let ssm = convert::kernel_to_markovian(&kernel, p, &opts).unwrap();
        let lags = implied_lags(&ssm, p);
        let k0 = kernel.eval_block(0.0).unwrap();
        let e0 = scaled_error(&lags[0], &k0, &k0);
        assert!(e0 < 0.05, "{}: lag 0 error {e0}", kernel.kind());
        for (tau, c) in lags.iter().enumerate() {
            let e = scaled_error(c, &kernel.eval_block(tau as f64).unwrap(), &k0);
            assert!(e < 0.10, "{}: lag {tau} error {e}", kernel.kind());
        }
    }
}

#[test]
fn order_one_closed_form() {
    let opts = ConversionOptions {
        jitter_start: 1e-13,
        ..ConversionOptions::default()
    };
    let se = LagBlockKernel::squared_exponential(5.0);
    let m = convert::kernel_to_multi_order(&se, 1, &opts).unwrap();
    let k1 = (-1.0f64 / 50.0).exp();
    assert!((m.transitions[0][(0, 0)] - k1).abs() < 1e-10);
    assert!((m.noise[(0, 0)] - (1.0 - k1 * k1)).abs() < 1e-10);

    let mose = LagBlockKernel::mose(vec![0.0, 2.0], 5.0);
    let m = convert::kernel_to_multi_order(&mose, 1, &opts).unwrap();
    let k0 = mose.eval_block(0.0).unwrap();
    let k1 = mose.eval_block(1.0).unwrap();
    let k0_inv = k0.clone().try_inverse().unwrap();
    let a = &k1 * &k0_inv;
    let q = &k0 - &k1 * &k0_inv * k1.transpose();
    assert!(linalg::max_abs_diff(&m.transitions[0], &a) < 1e-8);
    assert!(linalg::max_abs_diff(&m.noise, &q) < 1e-8);
}

fn simulate_outputs(ssm: &convert::CompanionSsm, steps: usize, seed: u64) -> Vec<DVector<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s = ssm.state_dim();
    let l = ssm.noise.clone().cholesky().unwrap().l();
    let p0 = lyapunov(&ssm.transition, &ssm.noise);
    let l0 = linalg::jittered_cholesky(&p0, 1e-12, 1e-6).unwrap().0.l();
    let mut draw = || DVector::from_fn(s, |_, _| rng.sample::<f64, _>(StandardNormal));
    let mut x = &l0 * draw();
    (0..steps)
        .map(|_| {
            x = &ssm.transition * &x + &l * draw();
            x.rows(0, ssm.outputs).into_owned()
        })
        .collect()
}

#[test]
fn se_order_two_lag_one_monte_carlo() {
    let k = LagBlockKernel::squared_exponential(5.0);
    let ssm = convert::kernel_to_markovian(&k, 2, &ConversionOptions::default()).unwrap();
    assert!(ssm.spectral_radius < 1.0);
    let y = simulate_outputs(&ssm, 1_000_000, 11);
    let n = y.len() - 1;
    let c1: f64 = (0..n).map(|t| y[t + 1][0] * y[t][0]).sum::<f64>() / n as f64;
    let want = (-1.0f64 / 50.0).exp();
    assert!((c1 - want).abs() < 0.02 * want, "{c1} vs {want}");
}

#[test]
fn mose_cross_correlogram_peaks_at_delay() {
    let k = LagBlockKernel::mose(vec![0.0, 5.0], 5.0);
    let ssm = convert::kernel_to_markovian(&k, 5, &ConversionOptions::default()).unwrap();
    let y = simulate_outputs(&ssm, 100_000, 12);
    // Cov(x₂(t + k), x₁(t)): region 2 lags region 1 by 5 bins.
    let cov = |lag: isize| -> f64 {
        let n = y.len() as isize;
        let (mut acc, mut cnt) = (0.0, 0);
        for t in 0.max(-lag)..(n - lag.max(0)) {
            acc += y[(t + lag) as usize][1] * y[t as usize][0];
            cnt += 1;
        }
        acc / cnt as f64
    };
    let best = (-10..=10).max_by(|&a, &b| cov(a).total_cmp(&cov(b))).unwrap();
    assert!((4..=6).contains(&best), "peak at {best}");
}

#[test]
fn family_element_matches_direct_conversion() {
    let p = TwoRegionPreset::default();
    let [fwd, _] = p.true_delays();
    let opts = ConversionOptions::default();
    let family = convert::time_varying_family(&fwd, 5.0, 5, &opts).unwrap();
    assert_eq!(family.len(), 200);
    let direct = convert::kernel_to_markovian(&LagBlockKernel::mose(vec![0.0, 1.0], 5.0), 5, &opts).unwrap();
    assert_eq!(family[50].transition, direct.transition);
    assert_eq!(family[50].noise, direct.noise);
    let outside = convert::kernel_to_markovian(&LagBlockKernel::mose(vec![0.0, 5.0], 5.0), 5, &opts).unwrap();
    assert_eq!(family[10].transition, outside.transition);
}

#[test]
fn transition_is_continuous_in_delay() {
    let opts = ConversionOptions::default();
    let at = |d: f64| {
        convert::kernel_to_markovian(&LagBlockKernel::mose(vec![0.0, d], 4.0), 3, &opts)
            .unwrap()
            .transition
    };
    let base = at(1.3);
    let gaps: Vec<f64> = [1e-1, 1e-3, 1e-5]
        .iter()
        .map(|eps| (at(1.3 + eps) - &base).norm())
        .collect();
    assert!(gaps[0] > gaps[1] && gaps[1] > gaps[2], "{gaps:?}");
    assert!(gaps[2] < 1e-3, "{gaps:?}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn companion_noise_is_positive_definite(kind in 0usize..9, p in 1usize..5) {
        let kernel = zoo().into_iter().find(|k| k.kind() == KernelKind::ALL[kind]).unwrap();
        let ssm = convert::kernel_to_markovian(&kernel, p, &ConversionOptions::default()).unwrap();
        prop_assert!(linalg::min_eigenvalue(&ssm.noise) > 0.0);
        let n = ssm.outputs;
        // Companion layout: identity blocks below the top block row.
        for r in 1..p {
            let blk = ssm.transition.view((r * n, (r - 1) * n), (n, n)).into_owned();
            prop_assert_eq!(blk, DMatrix::identity(n, n));
        }
    }

    #[test]
    fn mose_family_lag_match(d in -4.0f64..4.0, l in 2.0f64..8.0) {
        let k = LagBlockKernel::mose(vec![0.0, d], l);
        let ssm = convert::kernel_to_markovian(&k, 2, &ConversionOptions::default()).unwrap();
        let lags = implied_lags(&ssm, 2);
        let k0 = k.eval_block(0.0).unwrap();
        for (tau, c) in lags.iter().enumerate() {
            prop_assert!(scaled_error(c, &k.eval_block(tau as f64).unwrap(), &k0) < 0.10);
        }
    }
}

