//! Synthetic 2-D Gaussian-mixture targets and an IDX image reader.

use std::f64::consts::PI;
use std::path::Path;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub enum TargetSpec {
    /// `modes` components of scale `sigma` equally spaced on a circle.
    Ring { modes: usize, radius: f64, sigma: f64 },
    /// `side × side` components on a square lattice centered at the origin.
    Grid { side: usize, spacing: f64, sigma: f64 },
    /// Two interleaved half-circles, each covered by `per_moon` components.
    TwoMoons { per_moon: usize, sigma: f64 },
}

impl Default for TargetSpec {
    fn default() -> Self {
        TargetSpec::Ring {
            modes: 8,
            radius: 4.0,
            sigma: 0.3,
        }
    }
}

impl TargetSpec {
    pub fn build(&self) -> Result<SyntheticTarget> {
        match *self {
            TargetSpec::Ring { modes, radius, sigma } => {
                if modes == 0 || !(radius >= 0.0) {
                    return Err(Error::InvalidParameter("ring needs modes >= 1 and radius >= 0".into()));
                }
                let centers = (0..modes)
                    .map(|k| {
                        let a = 2.0 * PI * k as f64 / modes as f64;
                        vec![radius * a.cos(), radius * a.sin()]
                    })
                    .collect();
                SyntheticTarget::equal_weights("ring", centers, sigma)
            }
            TargetSpec::Grid { side, spacing, sigma } => {
                if side == 0 || !(spacing > 0.0) {
                    return Err(Error::InvalidParameter("grid needs side >= 1 and spacing > 0".into()));
                }
                let off = (side as f64 - 1.0) / 2.0;
                let centers = (0..side * side)
                    .map(|k| {
                        vec![
                            ((k % side) as f64 - off) * spacing,
                            ((k / side) as f64 - off) * spacing,
                        ]
                    })
                    .collect();
                SyntheticTarget::equal_weights("grid", centers, sigma)
            }
            TargetSpec::TwoMoons { per_moon, sigma } => {
                if per_moon < 2 {
                    return Err(Error::InvalidParameter("two-moons needs at least 2 components per moon".into()));
                }
                let mut centers = Vec::with_capacity(2 * per_moon);
                for k in 0..per_moon {
                    let a = PI * k as f64 / (per_moon - 1) as f64;
                    centers.push(vec![2.0 * (a.cos() - 0.5), 2.0 * (a.sin() - 0.25)]);
                    centers.push(vec![2.0 * (0.5 - a.cos()), 2.0 * (0.25 - a.sin())]);
                }
                SyntheticTarget::equal_weights("two-moons", centers, sigma)
            }
        }
    }
}

/// Isotropic Gaussian mixture with exact log-density and sampler.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticTarget {
    pub kind: String,
    pub centers: Vec<Vec<f64>>,
    pub weights: Vec<f64>,
    pub scales: Vec<f64>,
}

impl SyntheticTarget {
    pub fn new(kind: &str, centers: Vec<Vec<f64>>, weights: Vec<f64>, scales: Vec<f64>) -> Result<Self> {
        let k = centers.len();
        if k == 0 || weights.len() != k || scales.len() != k {
            return Err(Error::InvalidParameter(
                "mixture needs matching nonempty centers, weights and scales".into(),
            ));
        }
        let d = centers[0].len();
        if d == 0 || centers.iter().any(|c| c.len() != d) {
            return Err(Error::InvalidParameter("mixture centers must share a positive dimension".into()));
        }
        if weights.iter().any(|&w| !(w >= 0.0)) || (weights.iter().sum::<f64>() - 1.0).abs() > 1e-12 {
            return Err(Error::InvalidParameter("mixture weights must be non-negative and sum to 1".into()));
        }
        if scales.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
            return Err(Error::InvalidParameter("component scales must be positive".into()));
        }
        Ok(Self {
            kind: kind.to_string(),
            centers,
            weights,
            scales,
        })
    }

    fn equal_weights(kind: &str, centers: Vec<Vec<f64>>, sigma: f64) -> Result<Self> {
        let k = centers.len();
        Self::new(kind, centers, vec![1.0 / k as f64; k], vec![sigma; k])
    }

    /// A single isotropic Gaussian.
    pub fn gaussian(mean: Vec<f64>, sigma: f64) -> Result<Self> {
        Self::new("gaussian", vec![mean], vec![1.0], vec![sigma])
    }

    pub fn dim(&self) -> usize {
        self.centers[0].len()
    }

    pub fn log_density(&self, x: &[f64]) -> f64 {
        let d = self.dim() as f64;
        let terms: Vec<f64> = self
            .centers
            .iter()
            .zip(&self.weights)
            .zip(&self.scales)
            .map(|((c, &w), &s)| {
                let r2: f64 = c.iter().zip(x).map(|(a, b)| (a - b).powi(2)).sum();
                w.ln() - 0.5 * r2 / (s * s) - d * (s.ln() + 0.5 * (2.0 * PI).ln())
            })
            .collect();
        let peak = terms.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if peak == f64::NEG_INFINITY {
            return peak;
        }
        peak + terms.iter().map(|t| (t - peak).exp()).sum::<f64>().ln()
    }

    pub fn log_density_batch(&self, x: &Tensor) -> Vec<f64> {
        (0..x.rows()).map(|i| self.log_density(x.row_slice(i))).collect()
    }

    /// Index of the component with the highest responsibility for `x`.
    pub fn nearest_component(&self, x: &[f64]) -> usize {
        (0..self.centers.len())
            .min_by(|&a, &b| {
                let da: f64 = self.centers[a].iter().zip(x).map(|(c, v)| (c - v).powi(2)).sum();
                let db: f64 = self.centers[b].iter().zip(x).map(|(c, v)| (c - v).powi(2)).sum();
                da.total_cmp(&db)
            })
            .expect("nonempty mixture")
    }

    pub fn sample<R: Rng + ?Sized>(&self, count: usize, rng: &mut R) -> Tensor {
        let d = self.dim();
        let mut data = Vec::with_capacity(count * d);
        for _ in 0..count {
            let u: f64 = rng.random();
            let mut acc = 0.0;
            let mut k = self.weights.len() - 1;
            for (i, w) in self.weights.iter().enumerate() {
                acc += w;
                if u < acc {
                    k = i;
                    break;
                }
            }
            for j in 0..d {
                let e: f64 = rng.sample(StandardNormal);
                data.push(self.centers[k][j] + self.scales[k] * e);
            }
        }
        Tensor::new(vec![count, d], data).expect("sample shape")
    }

    pub fn mean(&self) -> Vec<f64> {
        (0..self.dim())
            .map(|j| self.centers.iter().zip(&self.weights).map(|(c, w)| w * c[j]).sum())
            .collect()
    }

    /// Covariance `Σ_k w_k (s_k² I + μ_k μ_kᵀ) − μ μᵀ`, row-major.
    pub fn covariance(&self) -> Vec<f64> {
        let d = self.dim();
        let mu = self.mean();
        let mut cov = vec![0.0; d * d];
        for ((c, &w), &s) in self.centers.iter().zip(&self.weights).zip(&self.scales) {
            for a in 0..d {
                for b in 0..d {
                    cov[a * d + b] += w * (c[a] * c[b] + if a == b { s * s } else { 0.0 });
                }
            }
        }
        for a in 0..d {
            for b in 0..d {
                cov[a * d + b] -= mu[a] * mu[b];
            }
        }
        cov
    }
}

pub const IDX_IMAGE_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABEL_MAGIC: u32 = 0x0000_0801;

/// Images flattened row-major, pixels mapped from `0..=255` to `[-1, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct IdxImages {
    pub height: usize,
    pub width: usize,
    /// `[count, height·width]`.
    pub pixels: Tensor,
}

impl IdxImages {
    pub fn count(&self) -> usize {
        self.pixels.rows()
    }

    /// Block-averages `factor × factor` patches; trailing rows/columns that do
    /// not fill a block are dropped.
    pub fn downscale(&self, factor: usize) -> Result<IdxImages> {
        if factor == 0 || factor > self.height || factor > self.width {
            return Err(Error::InvalidParameter(format!(
                "downscale factor {factor} invalid for {}x{} images",
                self.height, self.width
            )));
        }
        let (h, w) = (self.height / factor, self.width / factor);
        let norm = (factor * factor) as f64;
        let mut out = Vec::with_capacity(self.count() * h * w);
        for i in 0..self.count() {
            let img = self.pixels.row_slice(i);
            for r in 0..h {
                for c in 0..w {
                    let mut s = 0.0;
                    for dr in 0..factor {
                        for dc in 0..factor {
                            s += img[(r * factor + dr) * self.width + c * factor + dc];
                        }
                    }
                    out.push(s / norm);
                }
            }
        }
        Ok(IdxImages {
            height: h,
            width: w,
            pixels: Tensor::new(vec![self.count(), h * w], out)?,
        })
    }
}

fn idx_header(bytes: &[u8], path: &Path, magic: u32, rank: usize) -> Result<(Vec<usize>, usize)> {
    let fmt = |detail: String| Error::Format {
        path: path.to_path_buf(),
        detail,
    };
    let header_len = 4 + 4 * rank;
    if bytes.len() < header_len {
        return Err(fmt(format!("truncated header: {} bytes", bytes.len())));
    }
    let word = |i: usize| u32::from_be_bytes([bytes[i], bytes[i + 1], bytes[i + 2], bytes[i + 3]]);
    let found = word(0);
    if found != magic {
        return Err(fmt(format!("bad magic 0x{found:08x}, expected 0x{magic:08x}")));
    }
    let dims: Vec<usize> = (0..rank).map(|k| word(4 + 4 * k) as usize).collect();
    let total = dims
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| fmt(format!("dimension overflow {dims:?}")))?;
    if bytes.len() - header_len < total {
        return Err(fmt(format!(
            "truncated payload: expected {total} bytes, found {}",
            bytes.len() - header_len
        )));
    }
    Ok((dims, header_len))
}

/// Parses an IDX3 unsigned-byte image file already read into memory.
pub fn parse_idx_images(bytes: &[u8], path: &Path) -> Result<IdxImages> {
    let (dims, off) = idx_header(bytes, path, IDX_IMAGE_MAGIC, 3)?;
    let (n, h, w) = (dims[0], dims[1], dims[2]);
    if n == 0 || h == 0 || w == 0 {
        return Err(Error::Format {
            path: path.to_path_buf(),
            detail: format!("empty image set {dims:?}"),
        });
    }
    let data = bytes[off..off + n * h * w]
        .iter()
        .map(|&b| b as f64 / 127.5 - 1.0)
        .collect();
    Ok(IdxImages {
        height: h,
        width: w,
        pixels: Tensor::new(vec![n, h * w], data)?,
    })
}

pub fn parse_idx_labels(bytes: &[u8], path: &Path) -> Result<Vec<u8>> {
    let (dims, off) = idx_header(bytes, path, IDX_LABEL_MAGIC, 1)?;
    Ok(bytes[off..off + dims[0]].to_vec())
}

fn read(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn load_idx(path: &Path) -> Result<IdxImages> {
    parse_idx_images(&read(path)?, path)
}

pub fn load_idx_labels(path: &Path) -> Result<Vec<u8>> {
    parse_idx_labels(&read(path)?, path)
}
