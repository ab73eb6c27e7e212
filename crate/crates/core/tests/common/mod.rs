//! Shared fixtures for the integration tests.
#![allow(dead_code)]

use std::collections::BTreeMap;
use std::path::Path;
use std::process::Command;

use dynloc::channel_sim::{generate_environment, ArrayConfig, Environment, Rect};
use dynloc::eval::read_percentiles;
use rand::RngExt;
use rand_chacha::ChaCha8Rng;

/// 20-cluster environment on the default array and area.
pub fn desk_env(seed: u64) -> Environment {
    generate_environment(seed, 20, ArrayConfig::default(), Rect::reference_default()).unwrap()
}

/// Network inputs of roughly the size real normalized fingerprints have.
pub fn random_inputs(n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-0.1..0.1)).collect()
}

/// Every regular file under `dir` (non-recursive), by name.
pub fn files_in(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.is_file())
        .map(|p| {
            (
                p.file_name().unwrap().to_string_lossy().into_owned(),
                std::fs::read(&p).unwrap(),
            )
        })
        .collect()
}

/// Runs the binary in `dir`; panics with its stderr on failure.
pub fn dynloc(bin: &str, dir: &Path, args: &[&str]) -> String {
    let out = Command::new(bin).args(args).current_dir(dir).output().unwrap();
    assert!(
        out.status.success(),
        "dynloc {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

/// 8-antenna, 8-subcarrier array at 5 MHz: small enough for seconds-long runs.
pub const SMALL_CONFIG: &str = r#"{
  "array": {"n_antennas": 8, "antenna_spacing": 0.5, "carrier_frequency": 3.6e9,
            "bandwidth": 5e6, "n_subcarriers": 8, "bs_position": [0.0, 0.0]},
  "n": 60, "test": 20, "epochs": 2, "batch": 20, "lr": 0.05, "samples": 50
}
"#;

/// The full protocol at toy scale, with relative paths inside `dir`:
/// three environments, three datasets, three trainings, nine evaluations
/// and two similarity estimates.
pub fn small_protocol(bin: &str, dir: &Path) {
    std::fs::write(dir.join("small.json"), SMALL_CONFIG).unwrap();
    let run = |args: &[&str]| {
        let mut all = vec!["--config", "small.json"];
        all.extend_from_slice(args);
        dynloc(bin, dir, &all)
    };
    run(&["gen-env", "--seed", "7", "--clusters", "20", "--out", "t1.json"]);
    run(&[
        "gen-env", "--base", "t1.json", "--remove", "random", "--seed", "1", "--out", "t2.json",
    ]);
    run(&[
        "gen-env", "--base", "t1.json", "--remove", "random", "--seed", "2", "--out", "t3.json",
    ]);
    run(&["gen-dataset", "--env", "t1.json", "--seed", "1", "--out", "s1.adcm"]);
    run(&[
        "gen-dataset",
        "--env",
        "t2.json",
        "--labels",
        "no",
        "--seed",
        "2",
        "--out",
        "u2.adcm",
    ]);
    run(&[
        "gen-dataset",
        "--env",
        "t3.json",
        "--labels",
        "no",
        "--seed",
        "3",
        "--out",
        "u3.adcm",
    ]);
    for m in ["baseline", "ae", "gr"] {
        let out = format!("{m}.model");
        run(&[
            "train", "--method", m, "--source", "s1.adcm", "--target", "u2.adcm", "--seed", "5", "--out", &out,
        ]);
        for test in ["s1", "u2", "u3"] {
            let t = format!("{test}.test.adcm");
            let r = format!("eval_{m}_{test}.csv");
            run(&["eval", "--model", &out, "--test", &t, "--out", &r]);
        }
    }
    for env in ["t2", "t3"] {
        let b = format!("{env}.json");
        let o = format!("sim_{env}.csv");
        run(&[
            "similarity",
            "--model",
            "baseline.model",
            "--env-a",
            "t1.json",
            "--env-b",
            &b,
            "--seed",
            "3",
            "--out",
            &o,
        ]);
    }
}

pub fn p80(report: &Path) -> f64 {
    read_percentiles(report)
        .unwrap()
        .into_iter()
        .find(|(q, _)| *q == 80.0)
        .map(|(_, v)| v)
        .unwrap()
}

/// 80th-percentile errors of one seed of the desk protocol.
#[derive(Debug, Clone, Copy)]
pub struct SeedResult {
    pub seed: u64,
    pub base_t1: f64,
    pub base_t2: f64,
    pub ae_t2: f64,
    pub gr_t2: f64,
}

/// The desk-scale protocol through the command line, in-process: t1 with 20
/// clusters, t2 and t3 each missing a distinct random triplet, 5000 / 5000
/// training samples, 1000 test samples, 150 epochs, one training per method
/// and seed. Datasets are shared across seeds.
pub fn desk_protocol(seeds: &[u64]) -> Vec<SeedResult> {
    let dir = tempfile::tempdir().unwrap();
    let p = |name: &str| dir.path().join(name).display().to_string();
    let run = |args: &[&str]| {
        let mut all = vec!["dynloc", "--desk"];
        all.extend_from_slice(args);
        assert_eq!(dynloc::cli::main_with(all.iter().copied()), 0, "{args:?}");
    };
    run(&["gen-env", "--seed", "7", "--clusters", "20", "--out", &p("t1.json")]);
    run(&[
        "gen-env",
        "--base",
        &p("t1.json"),
        "--remove",
        "random",
        "--seed",
        "1",
        "--out",
        &p("t2.json"),
    ]);
    run(&[
        "gen-env",
        "--base",
        &p("t1.json"),
        "--remove",
        "random",
        "--seed",
        "2",
        "--out",
        &p("t3.json"),
    ]);
    let env = |n: &str| Environment::load(&dir.path().join(n)).unwrap();
    let (t1, t2, t3) = (env("t1.json"), env("t2.json"), env("t3.json"));
    let shared = t1
        .shared_clusters(&t2)
        .len()
        .min(t1.shared_clusters(&t3).len())
        .min(t2.shared_clusters(&t3).len());
    println!(
        "  environments: 20 / {} / {} clusters, pairwise shared >= {shared}",
        t2.clusters.len(),
        t3.clusters.len()
    );
    assert!(shared >= 14);
    run(&[
        "gen-dataset",
        "--env",
        &p("t1.json"),
        "--seed",
        "1",
        "--out",
        &p("s1.adcm"),
    ]);
    run(&[
        "gen-dataset",
        "--env",
        &p("t2.json"),
        "--labels",
        "no",
        "--seed",
        "2",
        "--out",
        &p("u2.adcm"),
    ]);
    seeds
        .iter()
        .map(|&seed| {
            let s = seed.to_string();
            let mut p80s = BTreeMap::new();
            for m in ["baseline", "ae", "gr"] {
                let model = p(&format!("{m}{seed}.model"));
                run(&[
                    "train",
                    "--method",
                    m,
                    "--source",
                    &p("s1.adcm"),
                    "--target",
                    &p("u2.adcm"),
                    "--seed",
                    &s,
                    "--out",
                    &model,
                ]);
                for test in ["s1", "u2"] {
                    if m != "baseline" && test == "s1" {
                        continue;
                    }
                    let r = p(&format!("eval_{m}{seed}_{test}.csv"));
                    run(&[
                        "eval",
                        "--model",
                        &model,
                        "--test",
                        &p(&format!("{test}.test.adcm")),
                        "--out",
                        &r,
                    ]);
                    p80s.insert(format!("{m}_{test}"), p80(Path::new(&r)));
                }
            }
            SeedResult {
                seed,
                base_t1: p80s["baseline_s1"],
                base_t2: p80s["baseline_u2"],
                ae_t2: p80s["ae_u2"],
                gr_t2: p80s["gr_u2"],
            }
        })
        .collect()
}
