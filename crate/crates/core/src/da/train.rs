use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::dataset::{real_inputs, AreaMap, LabeledDataset, UnlabeledDataset};
use super::model::TrainedModel;
use super::objective::{chunk_graph, Method};
use crate::autodiff::{sgd_step, sum_grad_sets, Tape};
use crate::channel_sim::Rect;
use crate::error::{Error, Result};
use crate::exec::{self, Execution};
use crate::nn::{init_all, Architecture};

/// Rows per independent tape inside a minibatch. Fixed, so gradients do not
/// depend on the thread count.
pub const DEFAULT_CHUNK: usize = 25;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub method: Method,
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Gradient reversal strength (gr only).
    pub lambda: f64,
    pub seed: u64,
    pub chunk_size: usize,
}

impl TrainConfig {
    /// lr 0.0001, 1000 epochs, batch 200, lambda 1.
    pub fn reference(method: Method, seed: u64) -> Self {
        TrainConfig {
            method,
            lr: 1e-4,
            epochs: 1000,
            batch_size: 200,
            lambda: 1.0,
            seed,
            chunk_size: DEFAULT_CHUNK,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::invalid(format!(
                "learning rate must be positive, got {}",
                self.lr
            )));
        }
        if self.batch_size == 0 || self.chunk_size == 0 {
            return Err(Error::invalid("batch and chunk sizes must be at least 1"));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::invalid(format!(
                "lambda must be finite and >= 0, got {}",
                self.lambda
            )));
        }
        Ok(())
    }
}

/// Mean losses over one epoch. `aux` is the reconstruction error (ae) or the
/// domain BCE (gr), per domain-batch row.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub loc: f64,
    pub aux: f64,
}

impl EpochStats {
    pub fn total(&self) -> f64 {
        self.loc + self.aux
    }
}

/// Cycles through a shuffled index order, reshuffling on wrap.
struct Stream {
    order: Vec<usize>,
    pos: usize,
    rng: ChaCha8Rng,
}

impl Stream {
    fn new(n: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        Stream { order, pos: 0, rng }
    }

    fn take(&mut self, k: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(k);
        while out.len() < k {
            if self.pos == self.order.len() {
                self.order.shuffle(&mut self.rng);
                self.pos = 0;
            }
            out.push(self.order[self.pos]);
            self.pos += 1;
        }
        out
    }
}

fn gather(data: &[f64], width: usize, rows: &[usize]) -> Vec<f64> {
    let mut out = Vec::with_capacity(rows.len() * width);
    for &r in rows {
        out.extend_from_slice(&data[r * width..(r + 1) * width]);
    }
    out
}

const SOURCE_STREAM: u64 = 0x5eed_0001;
const TARGET_STREAM: u64 = 0x5eed_0002;

/// Trains `cfg.method` on labeled `source` and, for the adaptation methods,
/// unlabeled `target`. Both are normalized by the source scale.
pub fn train(
    source: &LabeledDataset,
    target: Option<&UnlabeledDataset>,
    arch: &Architecture,
    area: &Rect,
    cfg: &TrainConfig,
    exec: Execution,
) -> Result<TrainedModel> {
    train_with(source, target, arch, area, cfg, exec, |_| {})
}

/// [`train`] with a callback after each epoch.
#[allow(clippy::too_many_arguments)]
pub fn train_with(
    source: &LabeledDataset,
    target: Option<&UnlabeledDataset>,
    arch: &Architecture,
    area: &Rect,
    cfg: &TrainConfig,
    exec: Execution,
    mut on_epoch: impl FnMut(&EpochStats),
) -> Result<TrainedModel> {
    cfg.validate()?;
    arch.validate()?;
    let method = cfg.method;
    let (l, k) = source.dims();
    if (arch.extractor.height, arch.extractor.width) != (l, k) {
        return Err(Error::Incompatible(format!(
            "architecture expects {}x{} fingerprints, source has {l}x{k}",
            arch.extractor.height, arch.extractor.width
        )));
    }
    let target = match (method.uses_target(), target) {
        (true, None) => return Err(Error::invalid(format!("method {method} needs a target dataset"))),
        (true, Some(t)) if t.dims() != (l, k) => {
            return Err(Error::Incompatible("source and target fingerprint sizes differ".into()))
        }
        (true, Some(t)) => Some(t),
        (false, _) => None,
    };
    let map = AreaMap::new(area)?;
    let scale = source.scale;
    let width = 2 * l * k;
    let xs = real_inputs(&source.fingerprints, scale, exec)?;
    let ys: Vec<f64> = source.locations.iter().flat_map(|&p| map.normalize(p)).collect();
    let xt = match target {
        Some(t) => real_inputs(&t.fingerprints, scale, exec)?,
        None => Vec::new(),
    };

    let mut params = init_all(arch, cfg.seed, method == Method::Ae, method == Method::Gr)?;
    let n_s = source.len();
    let mut src = Stream::new(n_s, cfg.seed ^ SOURCE_STREAM);
    let mut tgt = target.map(|t| Stream::new(t.len(), cfg.seed ^ TARGET_STREAM));
    let mut history = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        let (mut loc_total, mut aux_total, mut dom_total) = (0.0, 0.0, 0usize);
        let mut remaining = n_s;
        while remaining > 0 {
            let b = remaining.min(cfg.batch_size);
            remaining -= b;
            let rows = src.take(b);
            let chunks: Vec<&[usize]> = rows.chunks(cfg.chunk_size).collect();
            let halves: Vec<usize> = chunks.iter().map(|c| c.len().div_ceil(2)).collect();
            let dom_rows = 2 * halves.iter().sum::<usize>();
            let tgt_rows: Vec<Vec<usize>> = match &mut tgt {
                Some(s) => halves.iter().map(|&h| s.take(h)).collect(),
                None => vec![Vec::new(); chunks.len()],
            };
            let results = exec::try_map_indexed(exec, chunks.len(), |c| {
                let x_src = gather(&xs, width, chunks[c]);
                let y_src = gather(&ys, 2, chunks[c]);
                let x_tgt = gather(&xt, width, &tgt_rows[c]);
                let mut tape = Tape::new();
                let bound = params.bind(&mut tape);
                let g = chunk_graph(
                    &mut tape, &bound, arch, method, cfg.lambda, &x_src, &y_src, &x_tgt, halves[c], b, dom_rows,
                )?;
                let mut grads = tape.backward(g.total)?;
                Ok::<_, Error>((params.collect_grads(&bound, &mut grads), g.loc_sum, g.aux_sum))
            })?;
            let mut sets = Vec::with_capacity(results.len());
            for (set, loc, aux) in results {
                loc_total += loc;
                aux_total += aux;
                sets.push(set);
            }
            dom_total += dom_rows;
            if !(loc_total.is_finite() && aux_total.is_finite()) {
                return Err(Error::Divergence {
                    epoch,
                    loss: loc_total + aux_total,
                });
            }
            let grads = sum_grad_sets(sets).expect("at least one chunk");
            if grads.iter().flatten().any(|g| !g.is_finite()) {
                return Err(Error::Divergence {
                    epoch,
                    loss: loc_total + aux_total,
                });
            }
            params.accumulate_grads(&grads)?;
            sgd_step(&mut params, cfg.lr)?;
        }
        let stats = EpochStats {
            epoch,
            loc: loc_total / n_s as f64,
            aux: if method.uses_target() {
                aux_total / dom_total as f64
            } else {
                0.0
            },
        };
        on_epoch(&stats);
        history.push(stats);
    }

    Ok(TrainedModel {
        method,
        arch: arch.clone(),
        params,
        scale,
        area: *area,
        train: cfg.clone(),
        history,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::channel_sim::{generate_environment, ArrayConfig};
    use crate::da::dataset::generate_labeled;
    use crate::nn::{ConvLayer, EstimatorConfig, ExtractorConfig, SaConfig};

    fn small_arch() -> Architecture {
        let layer = ConvLayer {
            filters: 4,
            kernel: 6,
            stride: 2,
            padding: 2,
        };
        Architecture {
            extractor: ExtractorConfig {
                in_channels: 2,
                height: 8,
                width: 8,
                conv: vec![layer; 2],
                sa: Some(SaConfig::new(2, 4).unwrap()),
                output_dim: 8,
            },
            head: EstimatorConfig {
                input_dim: 8,
                widths: vec![8, 2],
            },
        }
    }

    fn data() -> (LabeledDataset, UnlabeledDataset, Rect) {
        let array = ArrayConfig {
            n_antennas: 8,
            n_subcarriers: 8,
            bandwidth: 5e6,
            ..ArrayConfig::default()
        };
        let area = Rect::reference_default();
        let env = generate_environment(1, 20, array, area).unwrap();
        let s = generate_labeled(&env, 30, 1, Execution::Sequential).unwrap();
        let t = generate_labeled(&env, 20, 2, Execution::Sequential)
            .unwrap()
            .strip_labels();
        (s, t, area)
    }

    fn cfg(method: Method) -> TrainConfig {
        TrainConfig {
            method,
            lr: 0.05,
            epochs: 3,
            batch_size: 12,
            lambda: 1.0,
            seed: 4,
            chunk_size: 5,
        }
    }

    #[test]
    fn zero_epochs_returns_initialization() {
        let (s, t, area) = data();
        let arch = small_arch();
        let mut c = cfg(Method::Ae);
        c.epochs = 0;
        let m = train(&s, Some(&t), &arch, &area, &c, Execution::Sequential).unwrap();
        assert!(m.history.is_empty());
        assert_eq!(m.params, init_all(&arch, 4, true, false).unwrap());
    }

    #[test]
    fn deterministic_and_mode_independent() {
        let (s, t, area) = data();
        let arch = small_arch();
        for method in [Method::Baseline, Method::Ae, Method::Gr] {
            let a = train(&s, Some(&t), &arch, &area, &cfg(method), Execution::Sequential).unwrap();
            let b = train(&s, Some(&t), &arch, &area, &cfg(method), Execution::Parallel).unwrap();
            assert_eq!(a.params, b.params, "{method}");
            assert_eq!(a.history, b.history, "{method}");
            assert_eq!(a.history.len(), 3);
        }
    }

    #[test]
    fn gr_without_reversal_tracks_baseline_exactly() {
        let (s, t, area) = data();
        let arch = small_arch();
        let base = train(&s, None, &arch, &area, &cfg(Method::Baseline), Execution::Sequential).unwrap();
        let mut c = cfg(Method::Gr);
        c.lambda = 0.0;
        let gr = train(&s, Some(&t), &arch, &area, &c, Execution::Sequential).unwrap();
        let loc = |m: &TrainedModel| m.history.iter().map(|h| h.loc).collect::<Vec<_>>();
        assert_eq!(loc(&base), loc(&gr));
        for (name, tensor) in base.params.iter() {
            assert_eq!(gr.params.get(name).unwrap().data(), tensor.data(), "{name}");
        }
        c.lambda = 1.0;
        let gr1 = train(&s, Some(&t), &arch, &area, &c, Execution::Sequential).unwrap();
        assert_ne!(loc(&base), loc(&gr1));
    }

    #[test]
    fn rejects_bad_inputs() {
        let (s, t, area) = data();
        let arch = small_arch();
        assert!(train(&s, None, &arch, &area, &cfg(Method::Gr), Execution::Sequential).is_err());
        let mut c = cfg(Method::Baseline);
        c.lr = 0.0;
        assert!(train(&s, Some(&t), &arch, &area, &c, Execution::Sequential).is_err());
        let full = Architecture::reference(16, 32);
        assert!(matches!(
            train(&s, None, &full, &area, &cfg(Method::Baseline), Execution::Sequential),
            Err(Error::Incompatible(_))
        ));
    }

    #[test]
    fn divergence_reports_epoch() {
        let (s, t, area) = data();
        let arch = small_arch();
        let mut c = cfg(Method::Baseline);
        c.lr = 1e200;
        c.epochs = 5;
        match train(&s, Some(&t), &arch, &area, &c, Execution::Sequential) {
            Err(Error::Divergence { epoch, .. }) => assert!(epoch < 5),
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn stream_wraps_and_covers() {
        let mut s = Stream::new(5, 1);
        let mut first = s.take(5);
        first.sort();
        assert_eq!(first, vec![0, 1, 2, 3, 4]);
        assert_eq!(s.take(7).len(), 7);
    }
}
