//! Angle-delay channel matrix (ADCM) fingerprints.
//!
//! `H = V^H H~ F` maps the antenna axis to angle-of-arrival bins through the
//! half-shifted DFT `V` and the subcarrier axis to delay taps through the
//! unitary DFT `F`. Both transforms are unitary, so the map preserves the
//! Frobenius norm and is inverted by `V H F^H`.

use std::f64::consts::PI;

use num_complex::Complex64;

use crate::channel_sim::{ChannelMatrix, Point};
use crate::cmatrix::CMatrix;
use crate::error::{Error, Result};

/// `[F]_{i,j} = exp(-j 2 pi i j / K) / sqrt(K)`.
pub fn unitary_dft(k: usize) -> Result<CMatrix> {
    if k == 0 {
        return Err(Error::invalid("DFT size must be at least 1"));
    }
    let norm = 1.0 / (k as f64).sqrt();
    Ok(CMatrix::from_fn(k, k, |i, j| {
        // Reduce i*j mod K first so large sizes keep full phase precision.
        let ij = (i * j) % k;
        Complex64::from_polar(norm, -2.0 * PI * ij as f64 / k as f64)
    }))
}

/// `[V]_{i,j} = exp(-j 2 pi i (j - L/2) / L) / sqrt(L)`; `L` must be even.
pub fn shifted_dft(l: usize) -> Result<CMatrix> {
    if l == 0 || !l.is_multiple_of(2) {
        return Err(Error::invalid(format!("shifted DFT needs an even size, got {l}")));
    }
    let norm = 1.0 / (l as f64).sqrt();
    let half = (l / 2) as i64;
    Ok(CMatrix::from_fn(l, l, |i, j| {
        let m = (i as i64 * (j as i64 - half)).rem_euclid(l as i64);
        Complex64::from_polar(norm, -2.0 * PI * m as f64 / l as f64)
    }))
}

/// Precomputed `V^H` and `F` for one array size.
#[derive(Debug, Clone)]
pub struct AdcmTransform {
    v: CMatrix,
    v_adj: CMatrix,
    f: CMatrix,
    f_adj: CMatrix,
}

impl AdcmTransform {
    pub fn new(n_antennas: usize, n_subcarriers: usize) -> Result<Self> {
        let v = shifted_dft(n_antennas)?;
        let f = unitary_dft(n_subcarriers)?;
        Ok(AdcmTransform {
            v_adj: v.adjoint(),
            f_adj: f.adjoint(),
            v,
            f,
        })
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.v.rows(), self.f.rows())
    }

    fn check(&self, m: &CMatrix) -> Result<()> {
        if m.dims() != self.dims() {
            return Err(Error::shape(format!(
                "expected {:?} channel, got {:?}",
                self.dims(),
                m.dims()
            )));
        }
        Ok(())
    }

    /// `V^H H~ F`.
    pub fn forward(&self, h_tilde: &CMatrix) -> Result<CMatrix> {
        self.check(h_tilde)?;
        self.v_adj.matmul(h_tilde)?.matmul(&self.f)
    }

    /// `V H F^H`.
    pub fn inverse(&self, h: &CMatrix) -> Result<CMatrix> {
        self.check(h)?;
        self.v.matmul(h)?.matmul(&self.f_adj)
    }
}

/// An ADCM with optional location and domain label (0 = source, 1 = target).
#[derive(Debug, Clone, PartialEq)]
pub struct Fingerprint {
    pub entries: CMatrix,
    pub position: Option<Point>,
    pub domain_label: Option<u8>,
}

impl Fingerprint {
    pub fn unlabeled(entries: CMatrix) -> Self {
        Fingerprint {
            entries,
            position: None,
            domain_label: None,
        }
    }
}

/// Converts a space-frequency channel into its ADCM fingerprint, keeping the
/// generating position.
pub fn to_adcm(channel: &ChannelMatrix) -> Result<Fingerprint> {
    let (l, k) = channel.entries.dims();
    let t = AdcmTransform::new(l, k)?;
    to_adcm_with(&t, channel)
}

pub fn to_adcm_with(transform: &AdcmTransform, channel: &ChannelMatrix) -> Result<Fingerprint> {
    Ok(Fingerprint {
        entries: transform.forward(&channel.entries)?,
        position: Some(channel.position),
        domain_label: None,
    })
}

/// Real `2 x L x K` view of a fingerprint: channel 0 holds real parts and
/// channel 1 imaginary parts, both divided by `scale`.
#[derive(Debug, Clone, PartialEq)]
pub struct RealFingerprintTensor {
    pub n_rows: usize,
    pub n_cols: usize,
    pub values: Vec<f64>,
    pub scale: f64,
}

impl RealFingerprintTensor {
    pub fn shape(&self) -> [usize; 3] {
        [2, self.n_rows, self.n_cols]
    }

    /// Multiplies back by `scale` to recover the complex entries.
    pub fn to_complex(&self) -> CMatrix {
        let n = self.n_rows * self.n_cols;
        let data = (0..n)
            .map(|i| Complex64::new(self.values[i] * self.scale, self.values[n + i] * self.scale))
            .collect();
        CMatrix::from_vec(self.n_rows, self.n_cols, data).expect("dims consistent by construction")
    }
}

pub fn to_real_tensor(h: &CMatrix, scale: f64) -> Result<RealFingerprintTensor> {
    if !(scale > 0.0 && scale.is_finite()) {
        return Err(Error::invalid(format!("scale must be positive, got {scale}")));
    }
    let mut values = vec![0.0; 2 * h.as_slice().len()];
    write_real_channels(h, scale, &mut values);
    Ok(RealFingerprintTensor {
        n_rows: h.rows(),
        n_cols: h.cols(),
        values,
        scale,
    })
}

/// Writes the two-channel layout of `h / scale` into `out` (length `2 L K`).
pub fn write_real_channels(h: &CMatrix, scale: f64, out: &mut [f64]) {
    let n = h.as_slice().len();
    debug_assert_eq!(out.len(), 2 * n);
    let (re, im) = out.split_at_mut(n);
    for ((z, r), i) in h.as_slice().iter().zip(re).zip(im) {
        *r = z.re / scale;
        *i = z.im / scale;
    }
}

/// Mean Frobenius norm over a set of fingerprints.
pub fn mean_frobenius_norm<'a>(items: impl IntoIterator<Item = &'a CMatrix>) -> Result<f64> {
    let (sum, n) = items
        .into_iter()
        .fold((0.0, 0usize), |(s, n), m| (s + m.frobenius_norm(), n + 1));
    if n == 0 {
        return Err(Error::invalid("cannot compute a scale from zero fingerprints"));
    }
    Ok(sum / n as f64)
}
