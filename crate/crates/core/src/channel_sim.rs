//! Deterministic two-bounce geometric channel model.
//!
//! An [`Environment`] is a fixed set of scattering clusters. Each cluster is a
//! first-bounce scatterer (FBS) and a last-bounce scatterer (LBS); energy
//! travels UE -> FBS -> LBS -> BS. Because the scatterer geometry is frozen
//! per environment, nearby UE positions see nearby delays, angles and powers,
//! and two environments that share a cluster produce identical contributions
//! from it.
//!
//! The BS carries a uniform linear array along the x axis with broadside
//! pointing along +y, so the angle of arrival `theta` of a path satisfies
//! `sin(theta) = (lbs.x - bs.x) / |lbs - bs|`.

use std::collections::HashSet;
use std::f64::consts::PI;

use num_complex::Complex64;
use rand::{Rng, RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::cmatrix::CMatrix;
use crate::error::{Error, Result};
use crate::exec::{self, Execution};

/// Speed of light in m/s.
pub const SPEED_OF_LIGHT: f64 = 299_792_458.0;

/// A 2D point in meters.
pub type Point = [f64; 2];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArrayConfig {
    /// Number of ULA elements, `L`.
    pub n_antennas: usize,
    /// Element spacing in wavelengths.
    pub antenna_spacing: f64,
    /// Hz.
    pub carrier_frequency: f64,
    /// Hz.
    pub bandwidth: f64,
    /// Number of OFDM subcarriers, `K`.
    pub n_subcarriers: usize,
    pub bs_position: Point,
}

impl Default for ArrayConfig {
    /// 16-element half-wavelength ULA at 3.6 GHz, 20 MHz over 32 subcarriers,
    /// BS at the origin.
    fn default() -> Self {
        ArrayConfig {
            n_antennas: 16,
            antenna_spacing: 0.5,
            carrier_frequency: 3.6e9,
            bandwidth: 20e6,
            n_subcarriers: 32,
            bs_position: [0.0, 0.0],
        }
    }
}

impl ArrayConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_antennas == 0 || self.n_subcarriers == 0 {
            return Err(Error::invalid("array needs at least one antenna and one subcarrier"));
        }
        if !(self.bandwidth > 0.0 && self.bandwidth.is_finite()) {
            return Err(Error::invalid(format!(
                "bandwidth must be positive, got {}",
                self.bandwidth
            )));
        }
        if !(self.carrier_frequency > 0.0 && self.carrier_frequency.is_finite()) {
            return Err(Error::invalid("carrier frequency must be positive"));
        }
        if !self.antenna_spacing.is_finite() || !self.bs_position.iter().all(|v| v.is_finite()) {
            return Err(Error::invalid("array geometry must be finite"));
        }
        Ok(())
    }

    /// Subcarrier spacing `bandwidth / K`.
    pub fn subcarrier_spacing(&self) -> f64 {
        self.bandwidth / self.n_subcarriers as f64
    }

    /// Longest delay that does not alias in the OFDM delay domain, `K / bandwidth`.
    pub fn delay_window(&self) -> f64 {
        self.n_subcarriers as f64 / self.bandwidth
    }

    pub fn wavelength(&self) -> f64 {
        SPEED_OF_LIGHT / self.carrier_frequency
    }

    /// ULA response `exp(-j 2 pi spacing l sin(theta))` for `l = 0..L`.
    pub fn steering_vector(&self, sin_theta: f64) -> Vec<Complex64> {
        (0..self.n_antennas)
            .map(|l| Complex64::from_polar(1.0, -2.0 * PI * self.antenna_spacing * l as f64 * sin_theta))
            .collect()
    }

    /// Per-subcarrier phase ramp `exp(-j 2 pi k df tau)` for `k = 0..K`.
    pub fn delay_tone(&self, delay_s: f64) -> Vec<Complex64> {
        let df = self.subcarrier_spacing();
        (0..self.n_subcarriers)
            .map(|k| Complex64::from_polar(1.0, -2.0 * PI * k as f64 * df * delay_s))
            .collect()
    }
}

/// Axis-aligned rectangle in meters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Rect {
    pub min: Point,
    pub max: Point,
}

impl Rect {
    pub fn new(min: Point, max: Point) -> Result<Self> {
        let r = Rect { min, max };
        r.validate()?;
        Ok(r)
    }

    pub fn centered(center: Point, width: f64, height: f64) -> Result<Self> {
        Rect::new(
            [center[0] - width / 2.0, center[1] - height / 2.0],
            [center[0] + width / 2.0, center[1] + height / 2.0],
        )
    }

    /// 40 m x 40 m square centered at (0, 60).
    pub fn reference_default() -> Self {
        Rect {
            min: [-20.0, 40.0],
            max: [20.0, 80.0],
        }
    }

    pub fn validate(&self) -> Result<()> {
        let finite = self.min.iter().chain(&self.max).all(|v| v.is_finite());
        if !finite || self.width() <= 0.0 || self.height() <= 0.0 {
            return Err(Error::invalid(format!(
                "degenerate area {:?}..{:?}",
                self.min, self.max
            )));
        }
        Ok(())
    }

    pub fn width(&self) -> f64 {
        self.max[0] - self.min[0]
    }

    pub fn height(&self) -> f64 {
        self.max[1] - self.min[1]
    }

    pub fn center(&self) -> Point {
        [(self.min[0] + self.max[0]) / 2.0, (self.min[1] + self.max[1]) / 2.0]
    }

    pub fn contains(&self, p: Point) -> bool {
        p[0] >= self.min[0] && p[0] <= self.max[0] && p[1] >= self.min[1] && p[1] <= self.max[1]
    }

    /// Grows the rectangle by `margin` on every side.
    pub fn expanded(&self, margin: f64) -> Rect {
        Rect {
            min: [self.min[0] - margin, self.min[1] - margin],
            max: [self.max[0] + margin, self.max[1] + margin],
        }
    }

    /// Smallest rectangle containing `self` and `p`.
    pub fn including(&self, p: Point) -> Rect {
        Rect {
            min: [self.min[0].min(p[0]), self.min[1].min(p[1])],
            max: [self.max[0].max(p[0]), self.max[1].max(p[1])],
        }
    }

    fn sample(&self, rng: &mut impl Rng) -> Point {
        let u: f64 = rng.random();
        let v: f64 = rng.random();
        [self.min[0] + u * self.width(), self.min[1] + v * self.height()]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cluster {
    pub cluster_id: u32,
    pub fbs_position: Point,
    pub lbs_position: Point,
    pub power_scale: f64,
    /// Seeds the subpath phases and intra-cluster offsets.
    pub phase_seed: u64,
    pub n_subpaths: u32,
    /// Standard deviation (m) of the per-subpath scatterer offsets.
    pub subpath_spread: f64,
}

/// One resolved propagation path of a cluster.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Subpath {
    pub fbs: Point,
    pub lbs: Point,
    /// Phase of the complex gain, uniform in `[0, 2 pi)`.
    pub phase: f64,
}

impl Cluster {
    fn validate(&self) -> Result<()> {
        let finite = self
            .fbs_position
            .iter()
            .chain(&self.lbs_position)
            .all(|v| v.is_finite());
        if !finite {
            return Err(Error::invalid(format!(
                "cluster {}: non-finite position",
                self.cluster_id
            )));
        }
        if !(self.power_scale > 0.0 && self.power_scale.is_finite()) {
            return Err(Error::invalid(format!(
                "cluster {}: power_scale must be > 0",
                self.cluster_id
            )));
        }
        if self.n_subpaths == 0 {
            return Err(Error::invalid(format!(
                "cluster {}: needs at least one subpath",
                self.cluster_id
            )));
        }
        if !(self.subpath_spread >= 0.0 && self.subpath_spread.is_finite()) {
            return Err(Error::invalid(format!(
                "cluster {}: subpath_spread must be >= 0",
                self.cluster_id
            )));
        }
        Ok(())
    }

    /// Expands the cluster into its subpaths. Deterministic in `phase_seed`.
    pub fn subpaths(&self) -> Vec<Subpath> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.phase_seed);
        (0..self.n_subpaths)
            .map(|_| {
                let phase = 2.0 * PI * rng.random::<f64>();
                let mut jitter = || -> f64 { self.subpath_spread * rng.sample::<f64, _>(StandardNormal) };
                let fbs = [self.fbs_position[0] + jitter(), self.fbs_position[1] + jitter()];
                let lbs = [self.lbs_position[0] + jitter(), self.lbs_position[1] + jitter()];
                Subpath { fbs, lbs, phase }
            })
            .collect()
    }
}

/// Knobs for how clusters are drawn.
#[derive(Debug, Clone, PartialEq)]
pub struct ClusterModel {
    pub n_subpaths: u32,
    pub subpath_spread: f64,
    pub path_loss_exponent: f64,
    /// Clusters are drawn in the bounding box of the BS and the area, grown by this many meters.
    pub placement_margin: f64,
    /// `power_scale` is log-uniform in this range.
    pub power_range: (f64, f64),
}

impl Default for ClusterModel {
    fn default() -> Self {
        ClusterModel {
            n_subpaths: 4,
            subpath_spread: 0.5,
            path_loss_exponent: 2.0,
            placement_margin: 10.0,
            power_range: (0.1, 1.0),
        }
    }
}

impl ClusterModel {
    fn draw(&self, id: u32, bbox: &Rect, rng: &mut ChaCha8Rng) -> Cluster {
        let fbs_position = bbox.sample(rng);
        let lbs_position = bbox.sample(rng);
        let (lo, hi) = self.power_range;
        let u: f64 = rng.random();
        let power_scale = (lo.ln() + u * (hi.ln() - lo.ln())).exp();
        let phase_seed = rng.next_u64();
        Cluster {
            cluster_id: id,
            fbs_position,
            lbs_position,
            power_scale,
            phase_seed,
            n_subpaths: self.n_subpaths,
            subpath_spread: self.subpath_spread,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Environment {
    pub time_label: String,
    pub rng_seed: u64,
    pub path_loss_exponent: f64,
    pub area: Rect,
    pub array: ArrayConfig,
    pub clusters: Vec<Cluster>,
}

impl Environment {
    pub fn validate(&self) -> Result<()> {
        self.array.validate()?;
        self.area.validate()?;
        if self.clusters.is_empty() {
            return Err(Error::invalid("environment has no clusters"));
        }
        if !self.path_loss_exponent.is_finite() {
            return Err(Error::invalid("path loss exponent must be finite"));
        }
        let mut seen = HashSet::new();
        for c in &self.clusters {
            c.validate()?;
            if !seen.insert(c.cluster_id) {
                return Err(Error::invalid(format!("duplicate cluster id {}", c.cluster_id)));
            }
        }
        Ok(())
    }

    pub fn cluster_ids(&self) -> Vec<u32> {
        self.clusters.iter().map(|c| c.cluster_id).collect()
    }

    pub fn cluster(&self, id: u32) -> Option<&Cluster> {
        self.clusters.iter().find(|c| c.cluster_id == id)
    }

    /// Ids present in both environments with bit-identical cluster records.
    pub fn shared_clusters(&self, other: &Environment) -> Vec<u32> {
        self.clusters
            .iter()
            .filter(|c| other.cluster(c.cluster_id) == Some(c))
            .map(|c| c.cluster_id)
            .collect()
    }

    /// Region in which scatterers are placed.
    pub fn placement_box(array: &ArrayConfig, area: &Rect, margin: f64) -> Rect {
        area.including(array.bs_position).expanded(margin)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let env: Environment = serde_json::from_str(s)?;
        env.validate()?;
        Ok(env)
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        std::fs::write(path, self.to_json()? + "\n")?;
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        Environment::from_json(&std::fs::read_to_string(path)?)
    }
}

/// Draws a fresh environment with the default [`ClusterModel`].
pub fn generate_environment(seed: u64, n_clusters: usize, array: ArrayConfig, area: Rect) -> Result<Environment> {
    generate_environment_with(seed, n_clusters, array, area, &ClusterModel::default())
}

pub fn generate_environment_with(
    seed: u64,
    n_clusters: usize,
    array: ArrayConfig,
    area: Rect,
    model: &ClusterModel,
) -> Result<Environment> {
    if n_clusters == 0 {
        return Err(Error::invalid("n_clusters must be at least 1"));
    }
    array.validate()?;
    area.validate()?;
    let bbox = Environment::placement_box(&array, &area, model.placement_margin);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let clusters = (0..n_clusters as u32)
        .map(|id| model.draw(id, &bbox, &mut rng))
        .collect();
    let env = Environment {
        time_label: "t1".to_string(),
        rng_seed: seed,
        path_loss_exponent: model.path_loss_exponent,
        area,
        array,
        clusters,
    };
    env.validate()?;
    Ok(env)
}

/// A change applied to an environment between two time points.
#[derive(Debug, Clone, PartialEq)]
pub enum Mutation {
    /// Cluster death.
    Remove(Vec<u32>),
    /// Cluster drift: both scatterers of a cluster move by the offset.
    Drift(Vec<(u32, Point)>),
    /// Cluster birth, drawn from `seed` with fresh ids.
    Add { count: usize, seed: u64 },
}

/// Applies `mutation`; clusters it does not touch are copied unchanged.
pub fn derive_environment(env: &Environment, mutation: &Mutation, time_label: &str) -> Result<Environment> {
    let mut out = env.clone();
    out.time_label = time_label.to_string();
    match mutation {
        Mutation::Remove(ids) => {
            let mut unique = HashSet::new();
            for id in ids {
                if env.cluster(*id).is_none() {
                    return Err(Error::invalid(format!("unknown cluster id {id}")));
                }
                if !unique.insert(*id) {
                    return Err(Error::invalid(format!("cluster id {id} listed twice")));
                }
            }
            out.clusters.retain(|c| !unique.contains(&c.cluster_id));
            if out.clusters.is_empty() {
                return Err(Error::invalid("cannot remove every cluster"));
            }
        }
        Mutation::Drift(moves) => {
            for (id, offset) in moves {
                if !offset.iter().all(|v| v.is_finite()) {
                    return Err(Error::invalid(format!("non-finite drift for cluster {id}")));
                }
                let c = out
                    .clusters
                    .iter_mut()
                    .find(|c| c.cluster_id == *id)
                    .ok_or_else(|| Error::invalid(format!("unknown cluster id {id}")))?;
                for (axis, d) in offset.iter().enumerate() {
                    c.fbs_position[axis] += d;
                    c.lbs_position[axis] += d;
                }
            }
        }
        Mutation::Add { count, seed } => {
            let template = &env.clusters[0];
            let model = ClusterModel {
                n_subpaths: template.n_subpaths,
                subpath_spread: template.subpath_spread,
                ..ClusterModel::default()
            };
            let bbox = Environment::placement_box(&env.array, &env.area, model.placement_margin);
            let mut rng = ChaCha8Rng::seed_from_u64(*seed);
            let next_id = env.clusters.iter().map(|c| c.cluster_id).max().map_or(0, |m| m + 1);
            for i in 0..*count as u32 {
                out.clusters.push(model.draw(next_id + i, &bbox, &mut rng));
            }
        }
    }
    out.validate()?;
    Ok(out)
}

/// Space-frequency channel `H~` (L x K) observed for a UE at `position`.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelMatrix {
    pub entries: CMatrix,
    pub position: Point,
}

fn dist(a: Point, b: Point) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}

/// Delay, AoA and complex gain of one subpath for a UE at `position`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PathParams {
    pub delay_s: f64,
    pub sin_aoa: f64,
    pub gain: Complex64,
}

impl Environment {
    /// Resolves every subpath of every cluster for a UE at `position`.
    pub fn path_params(&self, position: Point) -> Result<Vec<(u32, PathParams)>> {
        let bs = self.array.bs_position;
        let window = self.array.delay_window();
        let mut out = Vec::new();
        for c in &self.clusters {
            let per_path_power = c.power_scale / c.n_subpaths as f64;
            for sp in c.subpaths() {
                let to_bs = dist(sp.lbs, bs);
                let length = dist(position, sp.fbs) + dist(sp.fbs, sp.lbs) + to_bs;
                let delay_s = length / SPEED_OF_LIGHT;
                if delay_s >= window {
                    return Err(Error::DelayWindow {
                        cluster_id: c.cluster_id,
                        delay_s,
                        window_s: window,
                    });
                }
                let sin_aoa = if to_bs > 0.0 { (sp.lbs[0] - bs[0]) / to_bs } else { 0.0 };
                let amplitude = (per_path_power * length.powf(-self.path_loss_exponent)).sqrt();
                out.push((
                    c.cluster_id,
                    PathParams {
                        delay_s,
                        sin_aoa,
                        gain: Complex64::from_polar(amplitude, sp.phase),
                    },
                ));
            }
        }
        Ok(out)
    }
}

/// Sums every subpath's rank-one contribution `g a(theta) b(tau)^T`.
///
/// Positions outside `env.area` are accepted; the model is defined everywhere.
pub fn synthesize_channel(env: &Environment, position: Point) -> Result<ChannelMatrix> {
    if !position.iter().all(|v| v.is_finite()) {
        return Err(Error::invalid("UE position must be finite"));
    }
    let array = &env.array;
    let (l_dim, k_dim) = (array.n_antennas, array.n_subcarriers);
    let mut entries = CMatrix::zeros(l_dim, k_dim);
    let data = entries.as_mut_slice();
    for (_, p) in env.path_params(position)? {
        let steer = array.steering_vector(p.sin_aoa);
        let tone = array.delay_tone(p.delay_s);
        for (l, a) in steer.iter().enumerate() {
            let ga = p.gain * a;
            let row = &mut data[l * k_dim..(l + 1) * k_dim];
            for (h, b) in row.iter_mut().zip(&tone) {
                *h += ga * b;
            }
        }
    }
    Ok(ChannelMatrix { entries, position })
}

/// Adds circularly-symmetric complex Gaussian noise at `snr_db` relative to
/// the mean entry power of `channel`.
pub fn add_awgn(channel: &mut ChannelMatrix, snr_db: f64, rng: &mut impl Rng) {
    let n = channel.entries.as_slice().len() as f64;
    let signal = channel.entries.as_slice().iter().map(|z| z.norm_sqr()).sum::<f64>() / n;
    let sigma = (signal / 10f64.powf(snr_db / 10.0) / 2.0).sqrt();
    for z in channel.entries.as_mut_slice() {
        let re: f64 = rng.sample(StandardNormal);
        let im: f64 = rng.sample(StandardNormal);
        *z += Complex64::new(sigma * re, sigma * im);
    }
}

/// `n` i.i.d. uniform positions in `area`. The first `m` positions of a draw
/// of size `n >= m` equal a draw of size `m` with the same seed.
pub fn sample_positions(area: &Rect, n: usize, seed: u64) -> Result<Vec<Point>> {
    if n == 0 {
        return Err(Error::invalid("need at least one position"));
    }
    area.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..n).map(|_| area.sample(&mut rng)).collect())
}

/// Synthesizes channels for many positions, in input order.
pub fn synthesize_many(env: &Environment, positions: &[Point], exec: Execution) -> Result<Vec<ChannelMatrix>> {
    exec::try_map_indexed(exec, positions.len(), |i| synthesize_channel(env, positions[i]))
}
