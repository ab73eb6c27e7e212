//! Command-line surface: environment generation, dataset synthesis,
//! training, evaluation and the similarity estimate.
//!
//! Every command is a pure function of its input files, flags and seed. Each
//! run also writes `<out>.run.json` holding the fully resolved settings.
//!
//! Settings resolve in this order, first hit wins: command-line flag,
//! `--config` file, `--desk` default, full-scale default.

use std::collections::BTreeSet;
use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::seq::IndexedRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::channel_sim::{derive_environment, generate_environment, ArrayConfig, Environment, Mutation, Point, Rect};
use crate::da::{
    generate_labeled, train, LabeledDataset, Method, Provenance, TrainConfig, TrainedModel, UnlabeledDataset,
};
use crate::error::{Error, Result};
use crate::eval::{localization_errors, similarity};
use crate::io::DatasetFile;
use crate::nn::Architecture;
use crate::Execution;

/// Clusters removed per random mutation.
pub const TRIPLET: usize = 3;

/// Desk-scale learning rate. The full-scale 0.0001 needs 1000 epochs over
/// 10^5 samples; at 5000 samples and 150 epochs SGD needs a larger step.
pub const DESK_LR: f64 = 0.1;

#[derive(Debug, Parser)]
#[command(
    name = "dynloc",
    version,
    about = "Fingerprint localization under environment change"
)]
pub struct Cli {
    /// Desk-scale defaults: 5000 train, 1000 test, 150 epochs.
    #[arg(long, global = true)]
    pub desk: bool,
    /// JSON file of setting overrides (keys as in `<out>.run.json`).
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate an environment, or derive one from --base.
    GenEnv(GenEnvArgs),
    /// Synthesize a dataset (and a labeled test set) from an environment.
    GenDataset(GenDatasetArgs),
    /// Train a baseline, ae or gr estimator.
    Train(TrainArgs),
    /// Localization error report of a model on a labeled dataset.
    Eval(EvalArgs),
    /// Sample-maximum prediction gap of a model between two environments.
    Similarity(SimilarityArgs),
}

#[derive(Debug, Args)]
pub struct GenEnvArgs {
    #[arg(long)]
    pub seed: Option<u64>,
    /// Cluster count for fresh generation.
    #[arg(long)]
    pub clusters: Option<usize>,
    /// Comma-separated ids, `random` for an unused triplet, or empty.
    #[arg(long)]
    pub remove: Option<String>,
    /// Moves as `id:dx:dy`, comma-separated.
    #[arg(long)]
    pub drift: Option<String>,
    /// Environment to mutate.
    #[arg(long)]
    pub base: Option<PathBuf>,
    /// Output JSON; its file stem becomes the time label.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Labels {
    Yes,
    No,
}

#[derive(Debug, Args)]
pub struct GenDatasetArgs {
    #[arg(long)]
    pub env: PathBuf,
    #[arg(long)]
    pub n: Option<usize>,
    /// Size of the labeled test set written to `<stem>.test.<ext>` (0: none).
    #[arg(long)]
    pub test: Option<usize>,
    #[arg(long, value_enum)]
    pub labels: Option<Labels>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub method: Option<String>,
    #[arg(long)]
    pub source: PathBuf,
    /// Unlabeled target dataset (ae and gr).
    #[arg(long)]
    pub target: Option<PathBuf>,
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub test: PathBuf,
    /// Percentile table; the CDF goes to `<stem>.cdf.<ext>`.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SimilarityArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long = "env-a")]
    pub env_a: PathBuf,
    #[arg(long = "env-b")]
    pub env_b: PathBuf,
    #[arg(long)]
    pub samples: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// CSV report; the value is also printed.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Contents of a `--config` file. Every key is optional.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub clusters: Option<usize>,
    pub remove: Option<String>,
    pub drift: Option<String>,
    pub array: Option<ArrayConfig>,
    pub area: Option<Rect>,
    pub n: Option<usize>,
    pub test: Option<usize>,
    pub labels: Option<Labels>,
    pub method: Option<String>,
    pub lambda: Option<f64>,
    pub lr: Option<f64>,
    pub epochs: Option<usize>,
    pub batch: Option<usize>,
    pub chunk_size: Option<usize>,
    pub samples: Option<usize>,
}

impl Overrides {
    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }
}

/// What every run records next to its outputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig<T> {
    pub command: String,
    pub desk: bool,
    pub config_file: Option<String>,
    pub inputs: Vec<String>,
    pub outputs: Vec<String>,
    pub resolved: T,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenEnvSettings {
    pub time_label: String,
    pub seed: u64,
    pub clusters: Option<usize>,
    pub removed: Vec<u32>,
    pub drift: Vec<(u32, Point)>,
    pub array: ArrayConfig,
    pub area: Rect,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenDatasetSettings {
    pub time_label: String,
    pub n: usize,
    pub test: usize,
    pub labels: Labels,
    pub seed: u64,
    pub train_seed: u64,
    pub test_seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSettings {
    pub train: TrainConfig,
    pub area: Rect,
    pub n_source: usize,
    pub n_target: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSettings {
    pub n_test: usize,
    pub p80_m: f64,
    pub mean_m: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimilaritySettings {
    pub samples: usize,
    pub seed: u64,
    pub sigma_m: f64,
}

/// Parses `args` (program name first), runs the command and returns the
/// process exit code. Errors are printed as `error[category]: message`.
pub fn main_with<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = e.exit_code();
            let _ = e.print();
            return code;
        }
    };
    match run(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error[{}]: {e}", e.category());
            1
        }
    }
}

pub fn run(cli: &Cli) -> Result<()> {
    let ov = match &cli.config {
        Some(p) => Overrides::load(p)?,
        None => Overrides::default(),
    };
    let ctx = Ctx { cli, ov };
    match &cli.command {
        Command::GenEnv(a) => gen_env(&ctx, a),
        Command::GenDataset(a) => gen_dataset(&ctx, a),
        Command::Train(a) => train_cmd(&ctx, a),
        Command::Eval(a) => eval_cmd(&ctx, a),
        Command::Similarity(a) => similarity_cmd(&ctx, a),
    }
}

struct Ctx<'a> {
    cli: &'a Cli,
    ov: Overrides,
}

impl Ctx<'_> {
    fn record<T: Serialize>(&self, command: &str, inputs: &[&Path], outputs: &[&Path], resolved: T) -> Result<()> {
        let Some(first) = outputs.first() else {
            return Ok(());
        };
        let rc = RunConfig {
            command: command.to_string(),
            desk: self.cli.desk,
            config_file: self.cli.config.as_ref().map(|p| p.display().to_string()),
            inputs: inputs.iter().map(|p| p.display().to_string()).collect(),
            outputs: outputs.iter().map(|p| p.display().to_string()).collect(),
            resolved,
        };
        std::fs::write(run_path(first), serde_json::to_string_pretty(&rc)? + "\n")?;
        Ok(())
    }

    fn pick<T>(&self, flag: Option<T>, config: Option<T>, desk: T, full: T) -> T {
        flag.or(config).unwrap_or(if self.cli.desk { desk } else { full })
    }
}

/// `<path>.run.json`.
pub fn run_path(out: &Path) -> PathBuf {
    let mut s = out.as_os_str().to_owned();
    s.push(".run.json");
    PathBuf::from(s)
}

/// `dir/stem.<infix>.ext`, or `dir/name.<infix>` without an extension.
pub fn with_infix(path: &Path, infix: &str) -> PathBuf {
    let stem = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    let name = match path.extension() {
        Some(ext) => format!("{stem}.{infix}.{}", ext.to_string_lossy()),
        None => format!("{stem}.{infix}"),
    };
    path.with_file_name(name)
}

/// Triplets already removed from the environment at `base`.
pub fn exclusion_path(base: &Path) -> PathBuf {
    let mut s = base.as_os_str().to_owned();
    s.push(".removed.json");
    PathBuf::from(s)
}

#[derive(Debug, Default, Serialize, Deserialize)]
struct Exclusions {
    removed: Vec<Vec<u32>>,
}

fn parse_ids(s: &str) -> Result<Vec<u32>> {
    s.split(',')
        .map(str::trim)
        .filter(|t| !t.is_empty())
        .map(|t| t.parse().map_err(|_| Error::invalid(format!("bad cluster id `{t}`"))))
        .collect()
}

fn parse_drift(s: &str) -> Result<Vec<(u32, Point)>> {
    s.split(',')
        .map(str::trim)
        .filter(|t| !t.is_empty())
        .map(|t| {
            let bad = || Error::invalid(format!("bad drift `{t}` (want id:dx:dy)"));
            let parts: Vec<&str> = t.split(':').collect();
            let [id, dx, dy] = parts.as_slice() else {
                return Err(bad());
            };
            Ok((
                id.parse().map_err(|_| bad())?,
                [dx.parse().map_err(|_| bad())?, dy.parse().map_err(|_| bad())?],
            ))
        })
        .collect()
}

fn time_label(out: &Path) -> Result<String> {
    out.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .filter(|s| !s.is_empty())
        .ok_or_else(|| Error::invalid(format!("cannot derive a time label from `{}`", out.display())))
}

/// Uniform draw among the `TRIPLET`-subsets of `ids` not yet in `used`.
fn random_triplet(ids: &[u32], used: &BTreeSet<Vec<u32>>, seed: u64) -> Result<Vec<u32>> {
    let mut sorted = ids.to_vec();
    sorted.sort_unstable();
    let n = sorted.len();
    let mut free = Vec::new();
    for a in 0..n {
        for b in a + 1..n {
            for c in b + 1..n {
                let t = vec![sorted[a], sorted[b], sorted[c]];
                if !used.contains(&t) {
                    free.push(t);
                }
            }
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    free.choose(&mut rng)
        .cloned()
        .ok_or_else(|| Error::invalid("every cluster triplet of the base environment has been removed already"))
}

fn gen_env(ctx: &Ctx, a: &GenEnvArgs) -> Result<()> {
    let ov = &ctx.ov;
    let label = time_label(&a.out)?;
    let seed = a.seed.or(ov.seed).unwrap_or(0);
    let remove = a.remove.clone().or(ov.remove.clone());
    let drift = parse_drift(a.drift.as_deref().or(ov.drift.as_deref()).unwrap_or(""))?;
    let (env, settings, inputs) = match &a.base {
        None => {
            if remove.is_some() || !drift.is_empty() {
                return Err(Error::invalid("--remove and --drift need --base"));
            }
            let clusters = a.clusters.or(ov.clusters).unwrap_or(20);
            let array = ov.array.clone().unwrap_or_default();
            let area = ov.area.unwrap_or_else(Rect::reference_default);
            let mut env = generate_environment(seed, clusters, array.clone(), area)?;
            env.time_label = label.clone();
            let s = GenEnvSettings {
                time_label: label,
                seed,
                clusters: Some(clusters),
                removed: Vec::new(),
                drift: Vec::new(),
                array,
                area,
            };
            (env, s, vec![])
        }
        Some(base_path) => {
            if a.clusters.is_some() {
                return Err(Error::invalid("--clusters applies to fresh generation only"));
            }
            let base = Environment::load(base_path)?;
            let side = exclusion_path(base_path);
            let mut excl: Exclusions = if side.exists() {
                serde_json::from_str(&std::fs::read_to_string(&side)?)?
            } else {
                Exclusions::default()
            };
            let used: BTreeSet<Vec<u32>> = excl.removed.iter().cloned().collect();
            let removed = match remove.as_deref().map(str::trim) {
                None | Some("") => Vec::new(),
                Some("random") => random_triplet(&base.cluster_ids(), &used, seed)?,
                Some(list) => {
                    let mut ids = parse_ids(list)?;
                    ids.sort_unstable();
                    if used.contains(&ids) {
                        return Err(Error::invalid(format!(
                            "clusters {ids:?} were already removed from this base"
                        )));
                    }
                    ids
                }
            };
            let mut env = derive_environment(&base, &Mutation::Remove(removed.clone()), &label)?;
            if !drift.is_empty() {
                env = derive_environment(&env, &Mutation::Drift(drift.clone()), &label)?;
            }
            if !removed.is_empty() {
                excl.removed.push(removed.clone());
                std::fs::write(&side, serde_json::to_string_pretty(&excl)? + "\n")?;
            }
            let s = GenEnvSettings {
                time_label: label,
                seed,
                clusters: None,
                removed,
                drift,
                array: env.array.clone(),
                area: env.area,
            };
            (env, s, vec![base_path.as_path()])
        }
    };
    env.save(&a.out)?;
    println!("{}: {} clusters", a.out.display(), env.clusters.len());
    ctx.record("gen-env", &inputs, &[&a.out], settings)
}

fn gen_dataset(ctx: &Ctx, a: &GenDatasetArgs) -> Result<()> {
    let ov = &ctx.ov;
    let env = Environment::load(&a.env)?;
    let n = ctx.pick(a.n, ov.n, 5000, 100_000);
    let test = ctx.pick(a.test, ov.test, 1000, 10_000);
    let labels = a.labels.or(ov.labels).unwrap_or(Labels::Yes);
    let seed = a.seed.or(ov.seed).unwrap_or(0);
    // Disjoint position streams for the training and test draws.
    let train_seed = seed.wrapping_mul(2);
    let test_seed = seed.wrapping_mul(2).wrapping_add(1);
    let exec = Execution::default();
    let ds = generate_labeled(&env, n, train_seed, exec)?;
    match labels {
        Labels::Yes => ds.to_file().save(&a.out)?,
        Labels::No => ds.strip_labels().to_file().save(&a.out)?,
    }
    let mut outputs = vec![a.out.clone()];
    if test > 0 {
        let path = with_infix(&a.out, "test");
        generate_labeled(&env, test, test_seed, exec)?.to_file().save(&path)?;
        outputs.push(path);
    }
    for p in &outputs {
        println!("{}", p.display());
    }
    let settings = GenDatasetSettings {
        time_label: env.time_label.clone(),
        n,
        test,
        labels,
        seed,
        train_seed,
        test_seed,
    };
    let outs: Vec<&Path> = outputs.iter().map(PathBuf::as_path).collect();
    ctx.record("gen-dataset", &[&a.env], &outs, settings)
}

fn provenance(path: &Path) -> Provenance {
    Provenance {
        time_label: path.display().to_string(),
        seed: 0,
    }
}

/// Tight box around the source locations, used to normalize targets.
fn location_box(ds: &LabeledDataset) -> Result<Rect> {
    let mut min = [f64::INFINITY; 2];
    let mut max = [f64::NEG_INFINITY; 2];
    for p in &ds.locations {
        for d in 0..2 {
            min[d] = min[d].min(p[d]);
            max[d] = max[d].max(p[d]);
        }
    }
    Rect::new(min, max).map_err(|_| Error::invalid("source locations span no area"))
}

fn train_cmd(ctx: &Ctx, a: &TrainArgs) -> Result<()> {
    let ov = &ctx.ov;
    let method: Method = a
        .method
        .as_deref()
        .or(ov.method.as_deref())
        .ok_or_else(|| Error::invalid("--method is required"))?
        .parse()?;
    let seed = a.seed.or(ov.seed).unwrap_or(0);
    let full = TrainConfig::reference(method, seed);
    let cfg = TrainConfig {
        method,
        lr: ctx.pick(a.lr, ov.lr, DESK_LR, full.lr),
        epochs: ctx.pick(a.epochs, ov.epochs, 150, full.epochs),
        batch_size: a.batch.or(ov.batch).unwrap_or(full.batch_size),
        lambda: a.lambda.or(ov.lambda).unwrap_or(full.lambda),
        seed,
        chunk_size: ov.chunk_size.unwrap_or(full.chunk_size),
    };
    let source = LabeledDataset::from_file(DatasetFile::load(&a.source)?, provenance(&a.source))?;
    let mut inputs = vec![a.source.as_path()];
    let target = match (method.uses_target(), &a.target) {
        (true, None) => return Err(Error::invalid(format!("--target is required for {method}"))),
        (true, Some(p)) => {
            inputs.push(p.as_path());
            Some(UnlabeledDataset::from_file(DatasetFile::load(p)?, provenance(p))?)
        }
        (false, _) => None,
    };
    let area = match ov.area {
        Some(r) => r,
        None => location_box(&source)?,
    };
    let (l, k) = source.dims();
    let arch = Architecture::reference(l, k);
    let model = train(&source, target.as_ref(), &arch, &area, &cfg, Execution::default())?;
    model.save(&a.out)?;
    let last = model.history.last();
    println!(
        "{}: {method}, {} epochs, final loc {:.6} aux {:.6}",
        a.out.display(),
        model.history.len(),
        last.map_or(f64::NAN, |h| h.loc),
        last.map_or(f64::NAN, |h| h.aux)
    );
    let settings = TrainSettings {
        train: cfg,
        area,
        n_source: source.len(),
        n_target: target.as_ref().map_or(0, |t| t.len()),
    };
    let header = crate::da::header_path(&a.out);
    let history = crate::da::history_path(&a.out);
    ctx.record("train", &inputs, &[&a.out, &header, &history], settings)
}

fn eval_cmd(ctx: &Ctx, a: &EvalArgs) -> Result<()> {
    let model = TrainedModel::load(&a.model)?;
    let test = LabeledDataset::from_file(DatasetFile::load(&a.test)?, provenance(&a.test))?;
    let report = localization_errors(&model, &test, Execution::default())?;
    report.write_percentiles(&a.out)?;
    let cdf = with_infix(&a.out, "cdf");
    report.write_cdf(&cdf)?;
    let settings = EvalSettings {
        n_test: report.len(),
        p80_m: report.percentile(80.0)?,
        mean_m: report.mean(),
    };
    println!(
        "{}: p80 {:.4} m, mean {:.4} m",
        a.out.display(),
        settings.p80_m,
        settings.mean_m
    );
    ctx.record("eval", &[&a.model, &a.test], &[&a.out, &cdf], settings)
}

fn similarity_cmd(ctx: &Ctx, a: &SimilarityArgs) -> Result<()> {
    let model = TrainedModel::load(&a.model)?;
    let env_a = Environment::load(&a.env_a)?;
    let env_b = Environment::load(&a.env_b)?;
    let samples = a.samples.or(ctx.ov.samples).unwrap_or(5000);
    let seed = a.seed.or(ctx.ov.seed).unwrap_or(0);
    let est = similarity(&model, &env_a, &env_b, samples, seed, Execution::default())?;
    println!(
        "sigma({}, {}) = {} m over {} samples",
        est.env_a, est.env_b, est.value, est.n_samples
    );
    let settings = SimilaritySettings {
        samples,
        seed,
        sigma_m: est.value,
    };
    match &a.out {
        Some(out) => {
            est.write_csv(out)?;
            ctx.record("similarity", &[&a.model, &a.env_a, &a.env_b], &[out], settings)
        }
        None => Ok(()),
    }
}
