use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn adm(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_adm"))
        .args(args)
        .current_dir(dir)
        .env("ADM_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn write_config(dir: &Path, body: &str) -> String {
    let p = dir.join("run.toml");
    fs::write(&p, body).unwrap();
    p.to_string_lossy().into_owned()
}

const SMALL: &str = r#"
[data]
trials = 10
seed = 3
[model]
across = 2
within = 1
order = 2
[optimize]
max_iters = 2
anneal_jitters = []
[outputs]
directory = "out"
[eval]
seeds = [0, 1]
[perf]
bins = [16, 40]
trials = 2
repeats = 1
[gpbench]
points = 40
seeds = [0, 1]
"#;

#[test]
fn simulate_matches_preset_and_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "[outputs]\ndirectory = \"a\"\n");
    let out = adm(dir.path(), &["--config", &cfg, "--seed", "7", "simulate"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let first = fs::read(dir.path().join("a/data.adm")).unwrap();
    let set = adm::io::load_dataset(&dir.path().join("a/data.adm")).unwrap();
    assert_eq!((set.len(), set.obs_dim(), set.bins()), (120, 100, 200));

    let out = adm(dir.path(), &["--config", &cfg, "--seed", "7", "--out", "b", "simulate"]);
    assert!(out.status.success());
    assert_eq!(first, fs::read(dir.path().join("b/data.adm")).unwrap());

    let truth = fs::read_to_string(dir.path().join("a/truth_delays.tsv")).unwrap();
    assert!(truth.contains("\n50\t0\t0.0\t1.0\n"));
    assert!(truth.contains("\n29\t0\t0.0\t5.0\n"));
    assert!(truth.contains("\n150\t1\t0.0\t-1.0\n"));
}

#[test]
fn fit_eval_export_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL);
    let out = adm(dir.path(), &["--config", &cfg, "--threads", "1", "fit"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let model = dir.path().join("out/model.json");
    let trace = fs::read_to_string(dir.path().join("out/trace.csv")).unwrap();
    assert!(trace.starts_with("iteration,expected_loglik"));
    // Header plus two iterations; no continuation stages.
    assert_eq!(trace.lines().count(), 1 + 2);

    // Same seed, single thread: identical trace apart from timings.
    let out = adm(dir.path(), &["--config", &cfg, "--threads", "1", "--out", "again", "fit"]);
    assert!(out.status.success());
    let again = fs::read_to_string(dir.path().join("again/trace.csv")).unwrap();
    let strip = |s: &str| -> Vec<String> {
        s.lines()
            .map(|l| {
                let mut f: Vec<&str> = l.split(',').collect();
                f.remove(6);
                f.join(",")
            })
            .collect()
    };
    assert_eq!(strip(&trace), strip(&again));

    let m = model.to_string_lossy().into_owned();
    let out = adm(dir.path(), &["--config", &cfg, "eval", "--model", &m]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let metrics = fs::read_to_string(dir.path().join("out/metrics.json")).unwrap();
    for key in ["\"seeds\"", "\"plug_in\"", "\"marginal\"", "\"mean_plug_in\""] {
        assert!(metrics.contains(key), "{key}");
    }
    let first = metrics.clone();
    assert!(adm(dir.path(), &["--config", &cfg, "eval", "--model", &m]).status.success());
    assert_eq!(first, fs::read_to_string(dir.path().join("out/metrics.json")).unwrap());

    let out = adm(dir.path(), &["--config", &cfg, "export-network", "--model", &m, "--timesteps", "0,50"]);
    assert!(out.status.success());
    let net = fs::read_to_string(dir.path().join("out/network.tsv")).unwrap();
    assert!(net.starts_with('#'));
    assert_eq!(net.lines().filter(|l| !l.starts_with('#')).count(), 1 + 2 * 2 * 2);

    let out = adm(dir.path(), &["--config", &cfg, "export-network", "--model", &m, "--timesteps", "500"]);
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn gpbench_and_perf_write_tables() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL);
    assert!(adm(dir.path(), &["--config", &cfg, "gpbench"]).status.success());
    let table = fs::read_to_string(dir.path().join("out/parity.tsv")).unwrap();
    assert_eq!(table.lines().count(), 1 + 2 * 9);
    assert!(table.contains("SE\t2\tGP") && table.contains("SE\t2\tSSM"));

    assert!(adm(dir.path(), &["--config", &cfg, "perf"]).status.success());
    let perf = fs::read_to_string(dir.path().join("out/perf.tsv")).unwrap();
    let rows: Vec<Vec<&str>> = perf.lines().skip(1).map(|l| l.split('\t').collect()).collect();
    assert_eq!(rows.len(), 2);
    assert_eq!(rows[0][0], "16");
    assert_eq!(rows[0][3], "4");
    assert_eq!(rows[1][5], "6");
    assert!(rows.iter().all(|r| r[1].parse::<f64>().is_ok() && r[2].parse::<f64>().is_ok()));
}

#[test]
fn exit_codes_distinguish_failures() {
    let dir = tempfile::tempdir().unwrap();
    let bad = write_config(dir.path(), "[data]\nsplit = [0.9, 0.9, 0.1]\n");
    assert_eq!(adm(dir.path(), &["--config", &bad, "simulate"]).status.code(), Some(3));
    assert_eq!(adm(dir.path(), &["--preset", "nope", "simulate"]).status.code(), Some(3));

    fs::write(dir.path().join("junk.adm"), b"NOPE0000000000000000000000000000").unwrap();
    let cfg = write_config(dir.path(), "[data]\npath = \"junk.adm\"\n");
    let model_cfg = dir.path().join("m.json");
    fs::write(&model_cfg, "{}").unwrap();
    let out = adm(dir.path(), &["--config", &cfg, "fit"]);
    assert_eq!(out.status.code(), Some(4), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stderr).contains("magic"));

    let out = adm(dir.path(), &["eval", "--model", "m.json"]);
    assert_eq!(out.status.code(), Some(4));
    let out = adm(dir.path(), &["eval", "--model", "absent.json"]);
    assert_eq!(out.status.code(), Some(1));
}
