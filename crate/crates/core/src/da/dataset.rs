use serde::{Deserialize, Serialize};

use crate::channel_sim::{sample_positions, synthesize_many, Environment, Point, Rect};
use crate::cmatrix::CMatrix;
use crate::error::{Error, Result};
use crate::exec::{self, Execution};
use crate::fingerprint::{mean_frobenius_norm, to_adcm, write_real_channels, AdcmTransform};
use crate::io::DatasetFile;

/// Where a dataset came from.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Provenance {
    pub time_label: String,
    pub seed: u64,
}

/// Fingerprints with their true positions: source training data and test sets.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    pub fingerprints: Vec<CMatrix>,
    pub locations: Vec<Point>,
    /// Mean Frobenius norm of these fingerprints.
    pub scale: f64,
    pub provenance: Provenance,
}

/// Fingerprints only. There is no way to recover positions from this type,
/// so code that consumes target-domain training data cannot read them.
#[derive(Debug, Clone, PartialEq)]
pub struct UnlabeledDataset {
    pub fingerprints: Vec<CMatrix>,
    pub scale: f64,
    pub provenance: Provenance,
}

fn check_dims(fps: &[CMatrix]) -> Result<(usize, usize)> {
    let first = fps.first().ok_or_else(|| Error::invalid("dataset is empty"))?.dims();
    if fps.iter().any(|m| m.dims() != first) {
        return Err(Error::shape("fingerprints of different sizes in one dataset"));
    }
    Ok(first)
}

impl LabeledDataset {
    pub fn new(fingerprints: Vec<CMatrix>, locations: Vec<Point>, provenance: Provenance) -> Result<Self> {
        check_dims(&fingerprints)?;
        if locations.len() != fingerprints.len() {
            return Err(Error::shape("one location per fingerprint"));
        }
        let scale = mean_frobenius_norm(&fingerprints)?;
        Ok(LabeledDataset {
            fingerprints,
            locations,
            scale,
            provenance,
        })
    }

    pub fn len(&self) -> usize {
        self.fingerprints.len()
    }

    pub fn is_empty(&self) -> bool {
        self.fingerprints.is_empty()
    }

    /// `(L, K)`.
    pub fn dims(&self) -> (usize, usize) {
        self.fingerprints[0].dims()
    }

    pub fn strip_labels(self) -> UnlabeledDataset {
        UnlabeledDataset {
            fingerprints: self.fingerprints,
            scale: self.scale,
            provenance: self.provenance,
        }
    }

    pub fn from_file(file: DatasetFile, provenance: Provenance) -> Result<Self> {
        let Some(locations) = file.locations else {
            return Err(Error::MissingLabel("dataset file carries no locations".into()));
        };
        check_dims(&file.fingerprints)?;
        Ok(LabeledDataset {
            fingerprints: file.fingerprints,
            locations,
            scale: file.scale,
            provenance,
        })
    }

    pub fn to_file(&self) -> DatasetFile {
        let (l, k) = self.dims();
        DatasetFile {
            n_antennas: l,
            n_subcarriers: k,
            scale: self.scale,
            fingerprints: self.fingerprints.clone(),
            locations: Some(self.locations.clone()),
        }
    }
}

impl UnlabeledDataset {
    pub fn len(&self) -> usize {
        self.fingerprints.len()
    }

    pub fn is_empty(&self) -> bool {
        self.fingerprints.is_empty()
    }

    pub fn dims(&self) -> (usize, usize) {
        self.fingerprints[0].dims()
    }

    /// Rejects files that still carry positions.
    pub fn from_file(file: DatasetFile, provenance: Provenance) -> Result<Self> {
        if file.has_locations() {
            return Err(Error::UnexpectedLabel(
                "target training data must not carry locations".into(),
            ));
        }
        check_dims(&file.fingerprints)?;
        Ok(UnlabeledDataset {
            fingerprints: file.fingerprints,
            scale: file.scale,
            provenance,
        })
    }

    pub fn to_file(&self) -> DatasetFile {
        let (l, k) = self.dims();
        DatasetFile {
            n_antennas: l,
            n_subcarriers: k,
            scale: self.scale,
            fingerprints: self.fingerprints.clone(),
            locations: None,
        }
    }
}

/// Samples `n` uniform positions in `env.area` and returns their fingerprints.
pub fn generate_labeled(env: &Environment, n: usize, seed: u64, exec: Execution) -> Result<LabeledDataset> {
    let positions = sample_positions(&env.area, n, seed)?;
    let channels = synthesize_many(env, &positions, exec)?;
    let t = AdcmTransform::new(env.array.n_antennas, env.array.n_subcarriers)?;
    let fps = exec::try_map_indexed(exec, channels.len(), |i| t.forward(&channels[i].entries))?;
    let provenance = Provenance {
        time_label: env.time_label.clone(),
        seed,
    };
    LabeledDataset::new(fps, positions, provenance)
}

/// Training and test splits for one adaptation experiment.
#[derive(Debug, Clone)]
pub struct Splits {
    pub source: LabeledDataset,
    pub target: UnlabeledDataset,
    pub test_source: LabeledDataset,
    pub test_target: LabeledDataset,
}

/// Independent position draws per split, keyed off `seed`.
pub fn build_datasets(
    env_s: &Environment,
    env_t: &Environment,
    n_s: usize,
    n_t: usize,
    n_test: usize,
    seed: u64,
    exec: Execution,
) -> Result<Splits> {
    if env_s.array != env_t.array {
        return Err(Error::Incompatible("source and target arrays differ".into()));
    }
    let sub = |i: u64| seed.wrapping_mul(4).wrapping_add(i);
    Ok(Splits {
        source: generate_labeled(env_s, n_s, sub(0), exec)?,
        target: generate_labeled(env_t, n_t, sub(1), exec)?.strip_labels(),
        test_source: generate_labeled(env_s, n_test, sub(2), exec)?,
        test_target: generate_labeled(env_t, n_test, sub(3), exec)?,
    })
}

/// Flattens fingerprints into `[n, 2, L, K]` real tensors divided by `scale`.
pub fn real_inputs(fps: &[CMatrix], scale: f64, exec: Execution) -> Result<Vec<f64>> {
    if !(scale > 0.0 && scale.is_finite()) {
        return Err(Error::invalid(format!("scale must be positive, got {scale}")));
    }
    let (l, k) = check_dims(fps)?;
    let per = 2 * l * k;
    let rows = exec::map_indexed(exec, fps.len(), |i| {
        let mut out = vec![0.0; per];
        write_real_channels(&fps[i], scale, &mut out);
        out
    });
    Ok(rows.concat())
}

/// Affine map from the service area to `[-1, 1]^2`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AreaMap {
    pub center: Point,
    pub half_extent: Point,
}

impl AreaMap {
    pub fn new(area: &Rect) -> Result<Self> {
        area.validate()?;
        Ok(AreaMap {
            center: area.center(),
            half_extent: [area.width() / 2.0, area.height() / 2.0],
        })
    }

    pub fn normalize(&self, p: Point) -> Point {
        [
            (p[0] - self.center[0]) / self.half_extent[0],
            (p[1] - self.center[1]) / self.half_extent[1],
        ]
    }

    pub fn denormalize(&self, q: Point) -> Point {
        [
            self.center[0] + q[0] * self.half_extent[0],
            self.center[1] + q[1] * self.half_extent[1],
        ]
    }
}

/// Converts one channel draw into a fingerprint without the dataset wrapper.
pub fn fingerprint_at(env: &Environment, position: Point) -> Result<CMatrix> {
    let ch = crate::channel_sim::synthesize_channel(env, position)?;
    Ok(to_adcm(&ch)?.entries)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::channel_sim::{generate_environment, ArrayConfig};

    fn env(seed: u64) -> Environment {
        generate_environment(seed, 20, ArrayConfig::default(), Rect::reference_default()).unwrap()
    }

    #[test]
    fn area_map_round_trip() {
        let m = AreaMap::new(&Rect::reference_default()).unwrap();
        assert_eq!(m.normalize([-20.0, 40.0]), [-1.0, -1.0]);
        assert_eq!(m.normalize([20.0, 80.0]), [1.0, 1.0]);
        assert_eq!(m.normalize([0.0, 60.0]), [0.0, 0.0]);
        let p = [3.25, 71.5];
        let q = m.denormalize(m.normalize(p));
        assert!((q[0] - p[0]).abs() < 1e-12 && (q[1] - p[1]).abs() < 1e-12);
    }

    #[test]
    fn splits_have_requested_sizes_and_scale() {
        let e = env(1);
        let s = build_datasets(&e, &e, 12, 10, 5, 3, Execution::Sequential).unwrap();
        assert_eq!(
            (s.source.len(), s.target.len(), s.test_source.len(), s.test_target.len()),
            (12, 10, 5, 5)
        );
        let want = mean_frobenius_norm(&s.source.fingerprints).unwrap();
        assert_eq!(s.source.scale, want);
        assert_eq!(s.source.dims(), (16, 32));
        assert!(s.source.locations.iter().all(|&p| e.area.contains(p)));
    }

    #[test]
    fn generation_is_deterministic_across_execution_modes() {
        let e = env(2);
        let a = generate_labeled(&e, 6, 9, Execution::Sequential).unwrap();
        let b = generate_labeled(&e, 6, 9, Execution::Parallel).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.fingerprints[2], fingerprint_at(&e, a.locations[2]).unwrap());
    }

    #[test]
    fn real_inputs_layout() {
        let m = CMatrix::from_fn(2, 2, |i, j| num_complex::Complex64::new(i as f64, j as f64 + 1.0));
        let v = real_inputs(&[m.clone(), m], 2.0, Execution::Sequential).unwrap();
        assert_eq!(&v[..8], &[0.0, 0.0, 0.5, 0.5, 0.5, 1.0, 0.5, 1.0]);
        assert_eq!(v.len(), 16);
    }

    #[test]
    fn label_presence_is_enforced() {
        let e = env(3);
        let d = generate_labeled(&e, 3, 1, Execution::Sequential).unwrap();
        let file = d.to_file();
        assert!(matches!(
            UnlabeledDataset::from_file(file.clone(), Provenance::default()),
            Err(Error::UnexpectedLabel(_))
        ));
        let stripped = d.clone().strip_labels().to_file();
        assert!(!stripped.has_locations());
        assert!(matches!(
            LabeledDataset::from_file(stripped, Provenance::default()),
            Err(Error::MissingLabel(_))
        ));
        assert_eq!(LabeledDataset::from_file(file, d.provenance.clone()).unwrap(), d);
    }
}
