//! Binary dataset files.
//!
//! Layout, all little-endian:
//!
//! ```text
//! magic        4 bytes  "ADCM"
//! version      u32
//! L, K         u32, u32
//! N            u64
//! has_loc      u8
//! scale        f64
//! N records:   L*K complex entries as (re, im) f64 pairs, row-major,
//!              then (x, y) f64 meters when has_loc = 1
//! ```
//!
//! Entries are the raw angle-delay matrices; `scale` is the mean Frobenius
//! norm of the file's own samples.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use num_complex::Complex64;

use crate::channel_sim::Point;
use crate::cmatrix::CMatrix;
use crate::error::{Error, Result};

pub const DATASET_MAGIC: &[u8; 4] = b"ADCM";
pub const DATASET_VERSION: u32 = 1;
pub const HEADER_BYTES: u64 = 4 + 4 + 4 + 4 + 8 + 1 + 8;

/// Bytes per sample for an `L x K` fingerprint.
pub fn record_bytes(n_antennas: usize, n_subcarriers: usize, has_locations: bool) -> u64 {
    16 * (n_antennas * n_subcarriers) as u64 + if has_locations { 16 } else { 0 }
}

pub fn file_bytes(n_antennas: usize, n_subcarriers: usize, n: usize, has_locations: bool) -> u64 {
    HEADER_BYTES + n as u64 * record_bytes(n_antennas, n_subcarriers, has_locations)
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetFile {
    pub n_antennas: usize,
    pub n_subcarriers: usize,
    pub scale: f64,
    pub fingerprints: Vec<CMatrix>,
    pub locations: Option<Vec<Point>>,
}

impl DatasetFile {
    pub fn len(&self) -> usize {
        self.fingerprints.len()
    }

    pub fn is_empty(&self) -> bool {
        self.fingerprints.is_empty()
    }

    pub fn has_locations(&self) -> bool {
        self.locations.is_some()
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.scale > 0.0 && self.scale.is_finite()) {
            return Err(Error::Format(format!("scale must be positive, got {}", self.scale)));
        }
        let dims = (self.n_antennas, self.n_subcarriers);
        if let Some(m) = self.fingerprints.iter().find(|m| m.dims() != dims) {
            return Err(Error::shape(format!(
                "fingerprint {:?} in a {dims:?} dataset",
                m.dims()
            )));
        }
        if let Some(loc) = &self.locations {
            if loc.len() != self.fingerprints.len() {
                return Err(Error::Format(format!(
                    "{} locations for {} fingerprints",
                    loc.len(),
                    self.fingerprints.len()
                )));
            }
        }
        Ok(())
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        self.validate()?;
        w.write_all(DATASET_MAGIC)?;
        w.write_all(&DATASET_VERSION.to_le_bytes())?;
        w.write_all(
            &u32::try_from(self.n_antennas)
                .map_err(|_| Error::invalid("L too large"))?
                .to_le_bytes(),
        )?;
        w.write_all(
            &u32::try_from(self.n_subcarriers)
                .map_err(|_| Error::invalid("K too large"))?
                .to_le_bytes(),
        )?;
        w.write_all(&(self.len() as u64).to_le_bytes())?;
        w.write_all(&[u8::from(self.has_locations())])?;
        w.write_all(&self.scale.to_le_bytes())?;
        for (i, m) in self.fingerprints.iter().enumerate() {
            for z in m.as_slice() {
                w.write_all(&z.re.to_le_bytes())?;
                w.write_all(&z.im.to_le_bytes())?;
            }
            if let Some(loc) = &self.locations {
                w.write_all(&loc[i][0].to_le_bytes())?;
                w.write_all(&loc[i][1].to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).map_err(truncated)?;
        if &magic != DATASET_MAGIC {
            return Err(Error::Format("not a dataset file (bad magic)".into()));
        }
        let version = read_u32(r)?;
        if version != DATASET_VERSION {
            return Err(Error::Format(format!("unsupported dataset version {version}")));
        }
        let l = read_u32(r)? as usize;
        let k = read_u32(r)? as usize;
        let n = usize::try_from(read_u64(r)?).map_err(|_| Error::Format("sample count overflows".into()))?;
        let mut flag = [0u8; 1];
        r.read_exact(&mut flag).map_err(truncated)?;
        let has_loc = match flag[0] {
            0 => false,
            1 => true,
            b => return Err(Error::Format(format!("has_locations byte is {b}"))),
        };
        let scale = read_f64(r)?;
        let mut fingerprints = Vec::with_capacity(n.min(1 << 20));
        let mut locations = has_loc.then(Vec::new);
        let mut buf = vec![0u8; 16 * l * k];
        for _ in 0..n {
            r.read_exact(&mut buf).map_err(truncated)?;
            let data = buf
                .chunks_exact(16)
                .map(|c| Complex64::new(f64_at(c, 0), f64_at(c, 8)))
                .collect();
            fingerprints.push(CMatrix::from_vec(l, k, data)?);
            if let Some(loc) = &mut locations {
                loc.push([read_f64(r)?, read_f64(r)?]);
            }
        }
        let mut rest = [0u8; 1];
        if r.read(&mut rest)? != 0 {
            return Err(Error::Format("trailing bytes after the last record".into()));
        }
        let file = DatasetFile {
            n_antennas: l,
            n_subcarriers: k,
            scale,
            fingerprints,
            locations,
        };
        file.validate()?;
        Ok(file)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut r = BufReader::new(File::open(path)?);
        Self::read_from(&mut r)
    }
}

fn truncated(e: std::io::Error) -> Error {
    if e.kind() == std::io::ErrorKind::UnexpectedEof {
        Error::Format("file ends mid-record".into())
    } else {
        Error::Io(e)
    }
}

fn f64_at(b: &[u8], at: usize) -> f64 {
    f64::from_le_bytes(b[at..at + 8].try_into().expect("8 bytes"))
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b).map_err(truncated)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut impl Read) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b).map_err(truncated)?;
    Ok(u64::from_le_bytes(b))
}

fn read_f64(r: &mut impl Read) -> Result<f64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b).map_err(truncated)?;
    Ok(f64::from_le_bytes(b))
}
