//! Localization error distributions and the environment similarity estimate.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::channel_sim::{sample_positions, synthesize_many, Environment, Point};
use crate::da::{LabeledDataset, TrainedModel};
use crate::error::{Error, Result};
use crate::exec::{self, Execution};
use crate::fingerprint::AdcmTransform;

/// Percentiles written by [`ErrorReport::write_percentiles`].
pub const REPORT_PERCENTILES: [f64; 12] = [0.0, 10.0, 20.0, 30.0, 40.0, 50.0, 60.0, 70.0, 80.0, 90.0, 95.0, 100.0];

/// `q`-th percentile of ascending `sorted` by linear interpolation between
/// order statistics at position `q / 100 * (n - 1)`.
pub fn percentile(sorted: &[f64], q: f64) -> Result<f64> {
    if sorted.is_empty() {
        return Err(Error::invalid("percentile of an empty sample"));
    }
    if !(0.0..=100.0).contains(&q) {
        return Err(Error::invalid(format!("percentile {q} outside [0, 100]")));
    }
    let pos = q / 100.0 * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    Ok(if lo == hi {
        sorted[lo]
    } else {
        sorted[lo] + frac * (sorted[hi] - sorted[lo])
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ErrorReport {
    /// Absolute errors in meters, ascending.
    errors: Vec<f64>,
    pub model_id: String,
    pub dataset_id: String,
}

impl ErrorReport {
    pub fn new(mut errors: Vec<f64>, model_id: impl Into<String>, dataset_id: impl Into<String>) -> Result<Self> {
        if errors.is_empty() {
            return Err(Error::invalid("error report needs at least one sample"));
        }
        if errors.iter().any(|e| !(e.is_finite() && *e >= 0.0)) {
            return Err(Error::NonFinite("errors must be finite and non-negative".into()));
        }
        errors.sort_by(f64::total_cmp);
        Ok(ErrorReport {
            errors,
            model_id: model_id.into(),
            dataset_id: dataset_id.into(),
        })
    }

    pub fn errors(&self) -> &[f64] {
        &self.errors
    }

    pub fn len(&self) -> usize {
        self.errors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.errors.is_empty()
    }

    pub fn percentile(&self, q: f64) -> Result<f64> {
        percentile(&self.errors, q)
    }

    pub fn mean(&self) -> f64 {
        self.errors.iter().sum::<f64>() / self.errors.len() as f64
    }

    pub fn percentile_table(&self) -> Vec<(f64, f64)> {
        REPORT_PERCENTILES
            .iter()
            .map(|&q| (q, self.percentile(q).expect("non-empty, q in range")))
            .collect()
    }

    /// `error_m,cdf` rows; row `i` has cumulative fraction `(i + 1) / n`.
    pub fn write_cdf(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["error_m", "cdf"])?;
        let n = self.errors.len() as f64;
        for (i, e) in self.errors.iter().enumerate() {
            w.write_record([e.to_string(), ((i + 1) as f64 / n).to_string()])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn write_percentiles(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["percentile", "error_m"])?;
        for (q, v) in self.percentile_table() {
            w.write_record([q.to_string(), v.to_string()])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Reads a table written by [`ErrorReport::write_percentiles`].
pub fn read_percentiles(path: &Path) -> Result<Vec<(f64, f64)>> {
    let mut r = csv::Reader::from_path(path)?;
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let num = |i: usize| -> Result<f64> {
            rec.get(i)
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| Error::Format("bad percentile row".into()))
        };
        out.push((num(0)?, num(1)?));
    }
    Ok(out)
}

/// Reads the error column of a CDF written by [`ErrorReport::write_cdf`].
pub fn read_cdf(path: &Path) -> Result<Vec<(f64, f64)>> {
    read_percentiles(path)
}

fn distance(a: Point, b: Point) -> f64 {
    (a[0] - b[0]).hypot(a[1] - b[1])
}

/// Per-sample `|| P_i - predict(H_i) ||` over a labeled test set.
pub fn localization_errors(model: &TrainedModel, test: &LabeledDataset, exec: Execution) -> Result<ErrorReport> {
    let pred = model.predict_batch(&test.fingerprints, exec)?;
    let errors = pred
        .iter()
        .zip(&test.locations)
        .map(|(&p, &t)| distance(p, t))
        .collect();
    ErrorReport::new(
        errors,
        format!("{}:seed{}", model.method, model.train.seed),
        format!("{}:seed{}", test.provenance.time_label, test.provenance.seed),
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SimilarityMode {
    /// Seeded uniform positions.
    MonteCarlo,
    /// Cell centers of a uniform lattice over the area.
    Grid,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimilarityEstimate {
    /// Largest prediction gap in meters.
    pub value: f64,
    pub n_samples: usize,
    pub mode: SimilarityMode,
    pub env_a: String,
    pub env_b: String,
    pub seed: u64,
    /// Running maximum after each sample.
    pub running_max: Vec<f64>,
    /// Largest `||g(H)||` seen on either environment.
    pub max_prediction_norm: f64,
}

impl SimilarityEstimate {
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["mode", "env_a", "env_b", "n_samples", "seed", "sigma_m"])?;
        let mode = match self.mode {
            SimilarityMode::MonteCarlo => "monte-carlo",
            SimilarityMode::Grid => "grid",
        };
        w.write_record([
            mode.to_string(),
            self.env_a.clone(),
            self.env_b.clone(),
            self.n_samples.to_string(),
            self.seed.to_string(),
            self.value.to_string(),
        ])?;
        w.flush()?;
        Ok(())
    }
}

fn gap_estimate(
    model: &TrainedModel,
    env_a: &Environment,
    env_b: &Environment,
    positions: &[Point],
    mode: SimilarityMode,
    seed: u64,
    exec: Execution,
) -> Result<SimilarityEstimate> {
    if env_a.array != env_b.array {
        return Err(Error::Incompatible("environments use different arrays".into()));
    }
    if (env_a.array.n_antennas, env_a.array.n_subcarriers) != model.dims() {
        return Err(Error::Incompatible(
            "model and environment fingerprint sizes differ".into(),
        ));
    }
    let t = AdcmTransform::new(env_a.array.n_antennas, env_a.array.n_subcarriers)?;
    let fingerprints = |env: &Environment| -> Result<Vec<_>> {
        let ch = synthesize_many(env, positions, exec)?;
        exec::try_map_indexed(exec, ch.len(), |i| t.forward(&ch[i].entries))
    };
    let pa = model.predict_batch(&fingerprints(env_a)?, exec)?;
    let pb = if env_a == env_b {
        pa.clone()
    } else {
        model.predict_batch(&fingerprints(env_b)?, exec)?
    };
    let mut running_max = Vec::with_capacity(positions.len());
    let mut best = 0.0f64;
    for (a, b) in pa.iter().zip(&pb) {
        best = best.max(distance(*a, *b));
        running_max.push(best);
    }
    let norm = |p: &Point| p[0].hypot(p[1]);
    let max_prediction_norm = pa.iter().chain(&pb).map(norm).fold(0.0, f64::max);
    Ok(SimilarityEstimate {
        value: best,
        n_samples: positions.len(),
        mode,
        env_a: env_a.time_label.clone(),
        env_b: env_b.time_label.clone(),
        seed,
        running_max,
        max_prediction_norm,
    })
}

/// Sample maximum of `|| g(H_a(P)) - g(H_b(P)) ||` over `n_samples` seeded
/// uniform positions in `env_a`'s area.
pub fn similarity(
    model: &TrainedModel,
    env_a: &Environment,
    env_b: &Environment,
    n_samples: usize,
    seed: u64,
    exec: Execution,
) -> Result<SimilarityEstimate> {
    let positions = sample_positions(&env_a.area, n_samples, seed)?;
    gap_estimate(model, env_a, env_b, &positions, SimilarityMode::MonteCarlo, seed, exec)
}

/// Same gap maximized over the centers of an `nx x ny` lattice.
pub fn similarity_grid(
    model: &TrainedModel,
    env_a: &Environment,
    env_b: &Environment,
    nx: usize,
    ny: usize,
    exec: Execution,
) -> Result<SimilarityEstimate> {
    if nx == 0 || ny == 0 {
        return Err(Error::invalid("grid needs at least one cell per axis"));
    }
    let a = &env_a.area;
    let positions: Vec<Point> = (0..ny)
        .flat_map(|j| {
            (0..nx).map(move |i| {
                [
                    a.min[0] + (i as f64 + 0.5) * a.width() / nx as f64,
                    a.min[1] + (j as f64 + 0.5) * a.height() / ny as f64,
                ]
            })
        })
        .collect();
    gap_estimate(model, env_a, env_b, &positions, SimilarityMode::Grid, 0, exec)
}
