use std::path::Path;

use rand::Rng;
use rand_distr::StandardNormal;

use super::Dataset;
use crate::autodiff::Tensor;
use crate::binio::{read_file, write_atomic, ByteReader, ByteWriter};
use crate::error::{Error, Result};
use crate::rng::stream;

const MAGIC: &[u8; 8] = b"HKDDATA\0";
const VERSION: u32 = 1;

/// Class-conditional Gaussians with diagonal covariance.
///
/// Means sit at `separation·e_c` when `classes <= dim`, otherwise on a sphere of
/// radius `separation`. Per-class, per-axis standard deviations are
/// `exp(spread·z)` for standard normal `z`, so `spread = 0` is isotropic.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianMixture {
    pub means: Tensor,
    pub scales: Tensor,
}

impl GaussianMixture {
    pub fn new(classes: usize, dim: usize, separation: f64, spread: f64, seed: u64) -> Result<Self> {
        if classes == 0 || dim == 0 {
            return Err(Error::config("data", "classes and dim must be positive"));
        }
        if !(separation > 0.0 && separation.is_finite()) {
            return Err(Error::config("data.separation", "must be positive"));
        }
        if !(spread >= 0.0 && spread.is_finite()) {
            return Err(Error::config("data.spread", "must be non-negative"));
        }
        let mut rng = stream(seed, "data.mixture");
        let mut means = vec![0.0; classes * dim];
        if classes <= dim {
            for c in 0..classes {
                means[c * dim + c] = separation;
            }
        } else {
            for row in means.chunks_mut(dim) {
                let z: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
                let norm = z.iter().map(|v| v * v).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
                for (m, v) in row.iter_mut().zip(z) {
                    *m = separation * v / norm;
                }
            }
        }
        let scales = (0..classes * dim)
            .map(|_| (spread * rng.sample::<f64, _>(StandardNormal)).exp())
            .collect();
        Ok(Self {
            means: Tensor::new(vec![classes, dim], means)?,
            scales: Tensor::new(vec![classes, dim], scales)?,
        })
    }

    pub fn class_count(&self) -> usize {
        self.means.matrix_dims().0
    }

    pub fn dim(&self) -> usize {
        self.means.matrix_dims().1
    }

    /// `per_class` samples of every class, classes interleaved, ids `0..n`.
    pub fn sample(&self, per_class: usize, rng: &mut impl Rng) -> Result<Dataset> {
        let (classes, dim) = (self.class_count(), self.dim());
        let mut data = Vec::with_capacity(classes * per_class * dim);
        let mut labels = Vec::with_capacity(classes * per_class);
        for _ in 0..per_class {
            for c in 0..classes {
                let mean = self.means.row(c);
                let scale = self.scales.row(c);
                for d in 0..dim {
                    let z: f64 = rng.sample(StandardNormal);
                    data.push(mean[d] + scale[d] * z);
                }
                labels.push(c);
            }
        }
        Dataset::new(Tensor::new(vec![labels.len(), dim], data)?, labels, classes, vec![dim])
    }
}

/// Isotropic mixture sample; deterministic per seed.
pub fn synth_gaussians(
    classes: usize,
    dim: usize,
    per_class: usize,
    separation: f64,
    seed: u64,
) -> Result<Dataset> {
    GaussianMixture::new(classes, dim, separation, 0.0, seed)?.sample(per_class, &mut stream(seed, "data.train"))
}

impl Dataset {
    /// Versioned little-endian encoding that round-trips exactly.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = ByteWriter::new();
        w.bytes(MAGIC);
        w.u32(VERSION);
        w.u64(self.class_count as u64);
        w.u32(self.sample_shape.len() as u32);
        for &d in &self.sample_shape {
            w.u64(d as u64);
        }
        w.u64(self.len() as u64);
        for r in 0..self.len() {
            w.u64(self.ids[r]);
            w.u64(self.labels[r] as u64);
            for &v in self.features.row(r) {
                w.f64(v);
            }
        }
        w.into_bytes()
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let mut r = ByteReader::new(bytes, path);
        r.expect(MAGIC, "dataset magic")?;
        let at = r.offset();
        let version = r.u32("version")?;
        if version != VERSION {
            return Err(Error::parse(path, at, format!("unsupported dataset version {version}")));
        }
        let classes = r.usize("class count")?;
        let rank = r.u32("sample rank")? as usize;
        if rank == 0 || rank > 3 {
            return Err(r.error(format!("sample rank {rank} is not 1 to 3")));
        }
        let shape = (0..rank).map(|_| r.usize("sample shape")).collect::<Result<Vec<_>>>()?;
        let dim: usize = shape.iter().product();
        let n = r.usize("sample count")?;
        let record = 16 + 8 * dim;
        let remaining = bytes.len() as u64 - r.offset();
        if n.checked_mul(record).map(|b| b as u64) != Some(remaining) {
            return Err(r.error(format!("{n} records of {record} bytes do not fill {remaining} bytes")));
        }
        let mut ids = Vec::with_capacity(n);
        let mut labels = Vec::with_capacity(n);
        let mut data = Vec::with_capacity(n * dim);
        for _ in 0..n {
            ids.push(r.u64("sample id")?);
            let at = r.offset();
            let label = r.usize("label")?;
            if label >= classes {
                return Err(Error::parse(path, at, format!("label {label} out of range for {classes} classes")));
            }
            labels.push(label);
            for _ in 0..dim {
                let at = r.offset();
                let v = r.f64("feature")?;
                if !v.is_finite() {
                    return Err(Error::parse(path, at, "non-finite feature"));
                }
                data.push(v);
            }
        }
        Dataset::with_ids(Tensor::new(vec![n, dim], data)?, labels, ids, classes, shape)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&read_file(path)?, path)
    }
}
