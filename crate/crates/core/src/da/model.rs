use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::dataset::{real_inputs, AreaMap};
use super::objective::Method;
use super::train::{EpochStats, TrainConfig};
use crate::autodiff::{read_checkpoint, write_checkpoint, ParamStore, Tape};
use crate::channel_sim::{Point, Rect};
use crate::cmatrix::CMatrix;
use crate::error::{Error, Result};
use crate::exec::{self, Execution};
use crate::nn::{estimator_forward, extractor_forward, Architecture, Role};

/// Rows per inference tape.
const PREDICT_CHUNK: usize = 64;

/// A trained estimator: extractor + location head, plus whichever auxiliary
/// network its method trained alongside (kept for inspection only).
#[derive(Debug, Clone, PartialEq)]
pub struct TrainedModel {
    pub method: Method,
    pub arch: Architecture,
    pub params: ParamStore,
    /// Source-data normalization divisor applied to every input.
    pub scale: f64,
    pub area: Rect,
    pub train: TrainConfig,
    pub history: Vec<EpochStats>,
}

/// The JSON header stored next to the parameter checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelHeader {
    pub format: String,
    pub method: Method,
    pub arch: Architecture,
    pub scale: f64,
    pub area: Rect,
    pub train: TrainConfig,
    pub epochs_run: usize,
}

const HEADER_FORMAT: &str = "dynloc-model-1";

fn sidecar(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

/// Header path for a checkpoint at `path`.
pub fn header_path(path: &Path) -> PathBuf {
    sidecar(path, ".json")
}

/// Loss-history path for a checkpoint at `path`.
pub fn history_path(path: &Path) -> PathBuf {
    sidecar(path, ".history.csv")
}

impl TrainedModel {
    fn inference_params(&self) -> ParamStore {
        self.params
            .filtered(|n| Role::Extractor.owns(n) || Role::Estimator.owns(n))
    }

    /// Copy with the decoder / classifier removed.
    pub fn without_aux(&self) -> TrainedModel {
        TrainedModel {
            params: self.inference_params(),
            ..self.clone()
        }
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.arch.extractor.height, self.arch.extractor.width)
    }

    /// Locations in meters, in input order.
    pub fn predict_batch(&self, fps: &[CMatrix], exec: Execution) -> Result<Vec<Point>> {
        if fps.is_empty() {
            return Ok(Vec::new());
        }
        if let Some(m) = fps.iter().find(|m| m.dims() != self.dims()) {
            return Err(Error::Incompatible(format!(
                "model expects {:?} fingerprints, got {:?}",
                self.dims(),
                m.dims()
            )));
        }
        let params = self.inference_params();
        let map = AreaMap::new(&self.area)?;
        let e = &self.arch.extractor;
        let n_chunks = fps.len().div_ceil(PREDICT_CHUNK);
        let parts = exec::try_map_indexed(exec, n_chunks, |c| {
            let rows = &fps[c * PREDICT_CHUNK..((c + 1) * PREDICT_CHUNK).min(fps.len())];
            let x = real_inputs(rows, self.scale, Execution::Sequential)?;
            let mut tape = Tape::new();
            let p = params.bind_frozen(&mut tape);
            let xi = tape.constant(vec![rows.len(), e.in_channels, e.height, e.width], x)?;
            let z = extractor_forward(&mut tape, xi, &p, e)?;
            let y = estimator_forward(&mut tape, z, &p, &self.arch.head)?;
            Ok::<_, Error>(
                tape.value(y)
                    .chunks(2)
                    .map(|q| map.denormalize([q[0], q[1]]))
                    .collect::<Vec<_>>(),
            )
        })?;
        Ok(parts.concat())
    }

    pub fn predict(&self, fp: &CMatrix) -> Result<Point> {
        Ok(self.predict_batch(std::slice::from_ref(fp), Execution::Sequential)?[0])
    }

    pub fn header(&self) -> ModelHeader {
        ModelHeader {
            format: HEADER_FORMAT.into(),
            method: self.method,
            arch: self.arch.clone(),
            scale: self.scale,
            area: self.area,
            train: self.train.clone(),
            epochs_run: self.history.len(),
        }
    }

    /// Writes the checkpoint at `path`, its header and its loss history.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        write_checkpoint(&mut w, &self.params)?;
        w.flush()?;
        std::fs::write(header_path(path), serde_json::to_string_pretty(&self.header())? + "\n")?;
        let mut csv = csv::Writer::from_path(history_path(path))?;
        csv.write_record(["epoch", "loc", "aux", "total"])?;
        for h in &self.history {
            csv.write_record([
                h.epoch.to_string(),
                h.loc.to_string(),
                h.aux.to_string(),
                h.total().to_string(),
            ])?;
        }
        csv.flush()?;
        Ok(())
    }

    /// Reads a checkpoint and its header; the history is loaded when present.
    pub fn load(path: &Path) -> Result<Self> {
        let header: ModelHeader = serde_json::from_str(&std::fs::read_to_string(header_path(path))?)?;
        if header.format != HEADER_FORMAT {
            return Err(Error::Format(format!("unknown model format `{}`", header.format)));
        }
        header.arch.validate()?;
        let params = read_checkpoint(&mut BufReader::new(File::open(path)?))?;
        for role in [Role::Extractor, Role::Estimator] {
            if !params.iter().any(|(n, _)| role.owns(n)) {
                return Err(Error::Format(format!("checkpoint has no {} parameters", role.prefix())));
            }
        }
        let mut history = Vec::new();
        let hp = history_path(path);
        if hp.exists() {
            let mut r = csv::Reader::from_path(hp)?;
            for rec in r.records() {
                let rec = rec?;
                let num = |i: usize| -> Result<f64> {
                    rec.get(i)
                        .and_then(|v| v.parse().ok())
                        .ok_or_else(|| Error::Format("bad history row".into()))
                };
                history.push(EpochStats {
                    epoch: num(0)? as usize,
                    loc: num(1)?,
                    aux: num(2)?,
                });
            }
        }
        Ok(TrainedModel {
            method: header.method,
            arch: header.arch,
            params,
            scale: header.scale,
            area: header.area,
            train: header.train,
            history,
        })
    }
}
