use adm::io::config::RunConfig;
use adm::io::dataset::{decode_dataset, encode_dataset, write_csv_matrix};
use adm::io::{self, ModelFile};
use adm::model::{AcrossGroup, AdmModel, TrialSet};
use adm::presets::TwoRegionPreset;
use adm::AdmError;
use nalgebra::DMatrix;
use proptest::prelude::*;

fn small_set(seed: u64) -> TrialSet {
    let preset = TwoRegionPreset {
        region_dims: vec![3, 2],
        bins: 12,
        trials: 4,
        ..TwoRegionPreset::default()
    };
    preset.simulate(seed).unwrap().1.data
}

#[test]
fn dataset_round_trip_is_bit_identical() {
    let set = small_set(1);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("d.adm");
    io::save_dataset(&set, &path).unwrap();
    let back = io::load_dataset(&path).unwrap();
    assert_eq!(back, set);
    assert_eq!(encode_dataset(&back).unwrap(), std::fs::read(&path).unwrap());
}

#[test]
fn header_layout_is_little_endian() {
    let set = TrialSet::new(vec![DMatrix::from_row_slice(2, 3, &[1., 2., 3., 4., 5., 6.])], 0.02, vec![1, 1]).unwrap();
    let b = encode_dataset(&set).unwrap();
    assert_eq!(&b[0..4], b"ADM1");
    assert_eq!(u16::from_le_bytes([b[4], b[5]]), 1);
    let u32_at = |i: usize| u32::from_le_bytes(b[i..i + 4].try_into().unwrap());
    assert_eq!((u32_at(6), u32_at(10), u32_at(14)), (1, 2, 3));
    assert_eq!(f64::from_le_bytes(b[18..26].try_into().unwrap()), 0.02);
    assert_eq!((u32_at(26), u32_at(30), u32_at(34)), (2, 1, 1));
    // channel-major, time-minor payload
    let vals: Vec<f64> = b[38..]
        .chunks(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    assert_eq!(vals, vec![1., 2., 3., 4., 5., 6.]);
}

#[test]
fn malformed_files_get_distinct_errors() {
    let good = encode_dataset(&small_set(2)).unwrap();

    let mut bad = good.clone();
    bad[0] = b'X';
    assert!(matches!(decode_dataset(&bad), Err(AdmError::BadMagic { .. })));

    let mut bad = good.clone();
    bad[4] = 7;
    assert!(matches!(decode_dataset(&bad), Err(AdmError::UnsupportedVersion { found: 7, .. })));

    let cut = &good[..good.len() - 5];
    match decode_dataset(cut) {
        Err(AdmError::Truncated { expected, actual }) => {
            assert_eq!(expected, good.len() as u64);
            assert_eq!(actual, cut.len() as u64);
        }
        other => panic!("{other:?}"),
    }
    assert!(matches!(decode_dataset(&good[..3]), Err(AdmError::Truncated { .. })));

    let mut bad = good.clone();
    bad[30] += 1; // first region dim no longer sums to D
    assert!(matches!(decode_dataset(&bad), Err(AdmError::DimensionMismatch(_))));

    let mut bad = good.clone();
    bad.push(0);
    assert!(matches!(decode_dataset(&bad), Err(AdmError::Malformed(_))));
}

#[test]
fn csv_import_matches_binary() {
    let set = small_set(3);
    let dir = tempfile::tempdir().unwrap();
    let paths: Vec<_> = (0..set.len()).map(|r| dir.path().join(format!("trial{r}.csv"))).collect();
    for (m, p) in set.trials.iter().zip(&paths) {
        write_csv_matrix(m, p).unwrap();
    }
    let bin = dir.path().join("d.adm");
    io::save_dataset(&set, &bin).unwrap();
    let refs: Vec<&std::path::Path> = paths.iter().map(|p| p.as_path()).collect();
    let from_csv = io::load_csv_trials(&refs, set.bin_width, set.region_dims.clone()).unwrap();
    assert_eq!(from_csv, io::load_dataset(&bin).unwrap());
}

#[test]
fn ragged_csv_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("t.csv");
    std::fs::write(&p, "1,2,3\n4,5\n").unwrap();
    assert!(matches!(io::load_csv_trials(&[&p], 1.0, vec![2]), Err(AdmError::Malformed(_))));
    std::fs::write(&p, "1,2\n4,x\n").unwrap();
    assert!(matches!(io::load_csv_trials(&[&p], 1.0, vec![2]), Err(AdmError::Malformed(_))));
}

#[test]
fn model_file_round_trips_bitwise() {
    let preset = TwoRegionPreset {
        region_dims: vec![3, 2],
        bins: 12,
        ..TwoRegionPreset::default()
    };
    let mut model = preset.model(5).unwrap();
    let mut across = model.across_groups().to_vec();
    across[0].delays[3][1] = 0.1 + 0.2; // not exactly representable in short decimal
    across[0].length_scale = std::f64::consts::PI;
    let within = model.within_groups().to_vec();
    model.set_kernel_params(across, within).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.json");
    io::save_model(&model, &path).unwrap();
    let back = io::load_model(&path).unwrap();
    assert_eq!(ModelFile::from_model(&back), ModelFile::from_model(&model));
    assert_eq!(back.across_ssm(0, 3).transition, model.across_ssm(0, 3).transition);
}

#[test]
fn model_file_version_is_checked() {
    let model = TwoRegionPreset {
        region_dims: vec![2, 2],
        bins: 6,
        ..TwoRegionPreset::default()
    }
    .model(0)
    .unwrap();
    let mut file = ModelFile::from_model(&model);
    file.format_version = 2;
    assert!(matches!(file.into_model(), Err(AdmError::UnsupportedVersion { .. })));
}

#[test]
fn split_is_seeded_partition() {
    let a = io::split_trials(120, [0.8, 0.1, 0.1], 3).unwrap();
    assert_eq!((a.train.len(), a.validation.len(), a.test.len()), (96, 12, 12));
    let mut all: Vec<usize> = a.train.iter().chain(&a.validation).chain(&a.test).copied().collect();
    all.sort();
    assert_eq!(all, (0..120).collect::<Vec<_>>());
    assert_eq!(a, io::split_trials(120, [0.8, 0.1, 0.1], 3).unwrap());
    assert_ne!(a, io::split_trials(120, [0.8, 0.1, 0.1], 4).unwrap());
    assert!(io::split_trials(120, [0.8, 0.1, 0.2], 3).is_err());
    assert!(io::split_trials(2, [0.8, 0.1, 0.1], 3).is_err());
}

fn network_model(delays: &[f64]) -> AdmModel {
    let preset = TwoRegionPreset {
        region_dims: vec![2, 2],
        bins: 80,
        ..TwoRegionPreset::default()
    };
    let mut model = preset.model(0).unwrap();
    let across = vec![AcrossGroup::constant(2, 80, delays, 5.0); 2];
    let within = model.within_groups().to_vec();
    model.set_kernel_params(across, within).unwrap();
    model
}

#[test]
fn ground_truth_network_at_step_50() {
    let model = TwoRegionPreset {
        region_dims: vec![2, 2],
        ..TwoRegionPreset::default()
    }
    .model(0)
    .unwrap();
    let edges = io::network_edges(&model, &[50]).unwrap();
    let fwd = edges
        .iter()
        .find(|e| e.group == 0 && e.region_i == 1 && e.region_j == 2)
        .unwrap();
    assert_eq!(fwd.delay, 1.0);
    assert_eq!(fwd.sign, 1);
    let fb = edges
        .iter()
        .find(|e| e.group == 1 && e.region_i == 1 && e.region_j == 2)
        .unwrap();
    assert_eq!(fb.delay, -5.0);
    assert_eq!(fb.sign, -1);
    let tsv = io::network_tsv(&edges);
    assert!(tsv.starts_with("# delay = d_j - d_i"));
    assert!(tsv.contains("50\t0\t1\t2\t1.0\tforward"));
}

#[test]
fn zero_delay_direction_is_undefined() {
    let edges = io::network_edges(&network_model(&[0.0, 0.0]), &[0, 79]).unwrap();
    assert!(edges.iter().all(|e| e.delay == 0.0 && e.sign == 0));
    assert!(io::network_tsv(&edges).contains("undefined"));
}

#[test]
fn out_of_range_step_is_rejected() {
    assert!(io::network_edges(&network_model(&[0.0, 1.0]), &[80]).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn network_is_antisymmetric(d in -6.0f64..6.0, t in 0usize..80) {
        let edges = io::network_edges(&network_model(&[0.0, d]), &[t]).unwrap();
        for e in &edges {
            let twin = edges
                .iter()
                .find(|f| f.group == e.group && f.region_i == e.region_j && f.region_j == e.region_i)
                .unwrap();
            prop_assert_eq!(twin.delay, -e.delay);
            prop_assert_eq!(twin.sign, -e.sign);
        }
    }

    #[test]
    fn random_datasets_round_trip(r in 1usize..4, dims in proptest::collection::vec(1usize..4, 1..3), t in 1usize..6, seed in any::<u64>()) {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let d: usize = dims.iter().sum();
        let trials = (0..r).map(|_| DMatrix::from_fn(d, t, |_, _| rng.random::<f64>() * 1e3 - 5e2)).collect();
        let set = TrialSet::new(trials, 0.01, dims).unwrap();
        prop_assert_eq!(decode_dataset(&encode_dataset(&set).unwrap()).unwrap(), set);
    }
}

#[test]
fn config_defaults_and_validation() {
    let cfg = RunConfig::from_toml("").unwrap();
    assert_eq!(cfg.data.split, [0.8, 0.1, 0.1]);
    let cfg = RunConfig::from_toml(
        "[data]\nseed = 4\nsplit = [0.6, 0.2, 0.2]\n[model]\nacross = 1\nwithin = 0\norder = 3\nsmoothness = 1.5\n[optimize]\nmax_iters = 7\nmethod = \"parallel\"\n",
    )
    .unwrap();
    let fit = cfg.fit_config();
    assert_eq!((fit.across, fit.within, fit.order, fit.max_iters, fit.seed), (1, 0, 3, 7, 4));
    assert_eq!(fit.smoothness, 1.5);
    assert!(matches!(
        RunConfig::from_toml("[data]\nsplit = [0.5, 0.1, 0.1]\n"),
        Err(AdmError::Config(_))
    ));
    assert!(matches!(RunConfig::from_toml("[data]\nbogus = 1\n"), Err(AdmError::Config(_))));
    assert!(matches!(RunConfig::from_toml("[model]\norder = 0\n"), Err(AdmError::Config(_))));
    let round = RunConfig::from_toml(&cfg.to_toml().unwrap()).unwrap();
    assert_eq!(round, cfg);
}

#[test]
fn config_rejects_missing_data_path() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("run.toml");
    std::fs::write(&p, "[data]\npath = \"missing.adm\"\n").unwrap();
    assert!(matches!(RunConfig::load(&p), Err(AdmError::Config(_))));
    std::fs::write(dir.path().join("missing.adm"), b"").unwrap();
    let cfg = RunConfig::load(&p).unwrap();
    assert_eq!(cfg.data.path.unwrap(), dir.path().join("missing.adm"));
}
