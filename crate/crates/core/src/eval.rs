//! Reconstruction and distribution metrics, codebook usage reports and the
//! token file format.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{DMatrix, SymmetricEigen};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::binio::{read_file, write_atomic, ByteReader};
use crate::error::{Error, Result};
use crate::lfq::{CodeUsage, TokenGrid};
use crate::tensor::Tensor;

/// Reported when the two images are identical.
pub const PSNR_CAP: f64 = 99.0;
/// Peak-to-peak range of images normalized to `[-1, 1]`.
pub const UNIT_PEAK: f64 = 2.0;

pub fn mse(a: &Tensor, b: &Tensor) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::Shape {
            op: "mse",
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    if a.numel() == 0 {
        return Err(Error::invalid("mse", "empty images"));
    }
    let s: f64 = a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y)).sum();
    Ok(s / a.numel() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Psnr {
    pub db: f64,
    /// Set when the error was exactly zero and `db` is the cap.
    pub exact: bool,
}

pub fn psnr_from_mse(mse: f64, peak: f64) -> Psnr {
    if mse == 0.0 {
        Psnr {
            db: PSNR_CAP,
            exact: true,
        }
    } else {
        Psnr {
            db: 10.0 * (peak * peak / mse).log10(),
            exact: false,
        }
    }
}

pub fn psnr(a: &Tensor, b: &Tensor, peak: f64) -> Result<Psnr> {
    if !(peak > 0.0) {
        return Err(Error::invalid("psnr", "peak must be positive"));
    }
    Ok(psnr_from_mse(mse(a, b)?, peak))
}

/// Mean and covariance of a feature set.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureSummary {
    pub mean: Vec<f64>,
    /// Row-major `d x d`.
    pub cov: Vec<f64>,
}

impl FeatureSummary {
    pub fn new(mean: Vec<f64>, cov: Vec<f64>) -> Result<Self> {
        let d = mean.len();
        if cov.len() != d * d {
            return Err(Error::invalid(
                "feature summary",
                format!("covariance has {} entries for dimension {d}", cov.len()),
            ));
        }
        Ok(Self { mean, cov })
    }

    /// Sample mean and unbiased covariance (zero for a single sample).
    pub fn from_features(features: &[Vec<f64>]) -> Result<Self> {
        let Some(first) = features.first() else {
            return Err(Error::invalid("feature summary", "no features"));
        };
        let d = first.len();
        if features.iter().any(|f| f.len() != d) {
            return Err(Error::invalid("feature summary", "ragged feature vectors"));
        }
        let n = features.len() as f64;
        let mut mean = vec![0.0; d];
        for f in features {
            for (m, v) in mean.iter_mut().zip(f) {
                *m += v / n;
            }
        }
        let mut cov = vec![0.0; d * d];
        if features.len() > 1 {
            for f in features {
                for i in 0..d {
                    let di = f[i] - mean[i];
                    for j in 0..d {
                        cov[i * d + j] += di * (f[j] - mean[j]);
                    }
                }
            }
            cov.iter_mut().for_each(|c| *c /= n - 1.0);
        }
        Ok(Self { mean, cov })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    fn matrix(&self) -> DMatrix<f64> {
        let d = self.dim();
        let m = DMatrix::from_row_slice(d, d, &self.cov);
        (&m + m.transpose()) * 0.5
    }
}

fn sqrt_psd(m: DMatrix<f64>) -> DMatrix<f64> {
    let eig = SymmetricEigen::new(m);
    let roots = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&roots) * eig.eigenvectors.transpose()
}

/// `|mu_a - mu_b|^2 + tr(S_a + S_b - 2 (S_a S_b)^{1/2})`. The trace of the
/// cross term is taken as `tr((S_a^{1/2} S_b S_a^{1/2})^{1/2})`, which is
/// equal and keeps every matrix symmetric.
pub fn frechet_gaussian(a: &FeatureSummary, b: &FeatureSummary) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::Shape {
            op: "frechet_gaussian",
            lhs: vec![a.dim()],
            rhs: vec![b.dim()],
        });
    }
    let mean_term: f64 = a.mean.iter().zip(&b.mean).map(|(x, y)| (x - y) * (x - y)).sum();
    let sa = a.matrix();
    let sb = b.matrix();
    let ra = sqrt_psd(sa.clone());
    let inner = &ra * &sb * &ra;
    let inner = (&inner + inner.transpose()) * 0.5;
    let eig = SymmetricEigen::new(inner);
    let cross: f64 = eig.eigenvalues.iter().map(|l| l.max(0.0).sqrt()).sum();
    Ok((mean_term + sa.trace() + sb.trace() - 2.0 * cross).max(0.0))
}

/// Fixed random feature map for images: average-pool to a 4x4 grid per
/// channel, project with a seeded Gaussian matrix, squash with tanh.
#[derive(Clone, Debug)]
pub struct FeatureNet {
    pub dim: usize,
    weights: Tensor,
}

pub const FEATURE_POOL: usize = 4;

impl FeatureNet {
    pub fn new(channels: usize, dim: usize, seed: u64) -> Self {
        let inputs = channels * FEATURE_POOL * FEATURE_POOL;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self {
            dim,
            weights: Tensor::randn(&[inputs, dim], 1.0 / (inputs as f64).sqrt(), &mut rng),
        }
    }

    /// One feature vector per image of `[B, C, H, W]`.
    pub fn features(&self, images: &Tensor) -> Result<Vec<Vec<f64>>> {
        let [b, c, h, w] = images.shape()[..] else {
            return Err(Error::invalid("features", format!("expects [B,C,H,W], got {:?}", images.shape())));
        };
        let inputs = self.weights.shape()[0];
        if c * FEATURE_POOL * FEATURE_POOL != inputs || h % FEATURE_POOL != 0 || w % FEATURE_POOL != 0 {
            return Err(Error::invalid(
                "features",
                format!("image {c}x{h}x{w} does not fit the {FEATURE_POOL}x{FEATURE_POOL} pooled feature net"),
            ));
        }
        let (ph, pw) = (h / FEATURE_POOL, w / FEATURE_POOL);
        let d = images.data();
        let wt = self.weights.data();
        let mut out = Vec::with_capacity(b);
        for n in 0..b {
            let mut pooled = vec![0.0; inputs];
            for ch in 0..c {
                for y in 0..h {
                    for x in 0..w {
                        let cell = (ch * FEATURE_POOL + y / ph) * FEATURE_POOL + x / pw;
                        pooled[cell] += d[((n * c + ch) * h + y) * w + x];
                    }
                }
            }
            let area = (ph * pw) as f64;
            let mut f = vec![0.0; self.dim];
            for (i, p) in pooled.iter().enumerate() {
                for (j, fj) in f.iter_mut().enumerate() {
                    *fj += p / area * wt[i * self.dim + j];
                }
            }
            out.push(f.into_iter().map(f64::tanh).collect());
        }
        Ok(out)
    }
}

/// Named scalar metrics with a sample count and a configuration
/// fingerprint, printed in sorted key order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetricReport {
    pub metrics: BTreeMap<String, f64>,
    pub samples: u64,
    pub fingerprint: String,
}

impl MetricReport {
    pub fn new(fingerprint: impl Into<String>) -> Self {
        Self {
            fingerprint: fingerprint.into(),
            ..Default::default()
        }
    }

    pub fn set(&mut self, key: impl Into<String>, v: f64) {
        self.metrics.insert(key.into(), v);
    }

    pub fn get(&self, key: &str) -> Option<f64> {
        self.metrics.get(key).copied()
    }

    pub fn to_text(&self) -> String {
        let mut entries: BTreeMap<String, String> = self
            .metrics
            .iter()
            .map(|(k, v)| (k.clone(), format!("{v:?}")))
            .collect();
        entries.insert("fingerprint".into(), self.fingerprint.clone());
        entries.insert("samples".into(), self.samples.to_string());
        let mut s = String::new();
        for (k, v) in entries {
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }
}

/// Short hex digest identifying a configuration text.
pub fn fingerprint(config: &str) -> String {
    Sha256::digest(config.as_bytes())
        .iter()
        .take(8)
        .map(|b| format!("{b:02x}"))
        .collect()
}

/// Token occurrence counts for a codebook of `2^bits` entries; shards merge
/// by adding counts.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct UsageReport {
    pub bits: usize,
    pub usage: CodeUsage,
}

pub const USAGE_TOP: usize = 16;

pub fn usage_report(grids: &[TokenGrid], bits: usize) -> Result<UsageReport> {
    let mut usage = CodeUsage::new();
    for g in grids {
        g.check_range(bits)?;
        usage.record(&g.indices);
    }
    Ok(UsageReport { bits, usage })
}

impl UsageReport {
    pub fn merge(&mut self, other: &UsageReport) -> Result<()> {
        if self.bits != other.bits {
            return Err(Error::invalid("usage report", "cannot merge different codebook sizes"));
        }
        self.usage.merge(&other.usage);
        Ok(())
    }

    /// `usage` fraction, `usage.distinct`, and the `USAGE_TOP` most frequent
    /// indices as `usage.top.NN.index` / `usage.top.NN.count`.
    pub fn metrics(&self, fingerprint: &str) -> MetricReport {
        let mut r = MetricReport::new(fingerprint);
        r.samples = self.usage.total();
        r.set("usage", self.usage.fraction(self.bits));
        r.set("usage.distinct", self.usage.distinct() as f64);
        let mut top: Vec<(u32, u64)> = self.usage.counts().iter().map(|(&i, &c)| (i, c)).collect();
        top.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
        for (rank, (i, c)) in top.into_iter().take(USAGE_TOP).enumerate() {
            r.set(format!("usage.top.{rank:02}.index"), i as f64);
            r.set(format!("usage.top.{rank:02}.count"), c as f64);
        }
        r
    }
}

const TOKEN_MAGIC: &[u8; 4] = b"LFQT";
const TOKEN_VERSION: u32 = 1;

/// Token grids with the codebook width they were produced under.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenFile {
    pub bits: usize,
    pub grid: TokenGrid,
}

impl TokenFile {
    pub fn to_bytes(&self) -> Vec<u8> {
        let g = &self.grid;
        let mut b = Vec::with_capacity(24 + 4 * g.indices.len());
        b.extend_from_slice(TOKEN_MAGIC);
        for v in [TOKEN_VERSION, self.bits as u32, g.height as u32, g.width as u32, g.batch as u32] {
            b.extend_from_slice(&v.to_le_bytes());
        }
        for &i in &g.indices {
            b.extend_from_slice(&i.to_le_bytes());
        }
        b
    }

    pub fn from_bytes(path: &Path, bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(path, bytes);
        r.magic(TOKEN_MAGIC)?;
        let version = r.u32()?;
        if version != TOKEN_VERSION {
            return Err(r.fail(format!("token file version {version} unsupported")));
        }
        let bits = r.u32()? as usize;
        let (h, w, count) = (r.u32()? as usize, r.u32()? as usize, r.u32()? as usize);
        let n = count
            .checked_mul(h)
            .and_then(|v| v.checked_mul(w))
            .and_then(|v| v.checked_mul(4))
            .ok_or_else(|| r.fail("dimensions overflow"))?;
        let indices = r
            .take(n)?
            .chunks_exact(4)
            .map(|c| u32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        r.finish()?;
        if bits == 0 || bits > crate::lfq::MAX_BITS {
            return Err(r.fail(format!("codebook width {bits} unsupported")));
        }
        let grid = TokenGrid::new(count, h, w, indices)?;
        grid.check_range(bits).map_err(|e| r.fail(e.to_string()))?;
        Ok(Self { bits, grid })
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_bytes(path, &read_file(path)?)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes())
    }
}
