//! Descriptor post-processing: PCA, L2 normalization, concatenation, and
//! the persisted [`FeatureStore`].

use std::collections::HashMap;
use std::path::Path;

use crate::binio::{read_file, ByteReader, ByteWriter};
use crate::error::{Error, Result};

/// Principal-component projection fitted on a sample matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct PcaModel {
    pub in_dim: usize,
    pub out_dim: usize,
    pub mean: Vec<f64>,
    /// `out_dim` orthonormal rows of length `in_dim`, row-major.
    pub basis: Vec<f64>,
    /// Variances along each basis row, non-increasing.
    pub eigenvalues: Vec<f64>,
}

/// Cyclic Jacobi diagonalization of a symmetric `n x n` matrix.
///
/// Returns eigenvalues and the matrix whose columns are the eigenvectors.
fn jacobi_eigen(mut a: Vec<f64>, n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut v = vec![0.0; n * n];
    for i in 0..n {
        v[i * n + i] = 1.0;
    }
    let scale: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    for _sweep in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| a[i * n + j] * a[i * n + j])
            .sum::<f64>()
            .sqrt();
        if off <= 1e-15 * scale.max(f64::MIN_POSITIVE) {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = a[p * n + q];
                if apq == 0.0 {
                    continue;
                }
                let app = a[p * n + p];
                let aqq = a[q * n + q];
                let theta = (aqq - app) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = a[k * n + p];
                    let akq = a[k * n + q];
                    a[k * n + p] = c * akp - s * akq;
                    a[k * n + q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[p * n + k];
                    let aqk = a[q * n + k];
                    a[p * n + k] = c * apk - s * aqk;
                    a[q * n + k] = s * apk + c * aqk;
                }
                for k in 0..n {
                    let vkp = v[k * n + p];
                    let vkq = v[k * n + q];
                    v[k * n + p] = c * vkp - s * vkq;
                    v[k * n + q] = s * vkp + c * vkq;
                }
            }
        }
    }
    ((0..n).map(|i| a[i * n + i]).collect(), v)
}

impl PcaModel {
    /// Fits on `samples` (one row per sample) keeping `out_dim` components.
    ///
    /// The covariance uses the `n - 1` denominator. Each basis vector is
    /// signed so that its largest-magnitude entry is positive.
    pub fn fit(samples: &[Vec<f64>], out_dim: usize) -> Result<Self> {
        let n = samples.len();
        if n < 2 {
            return Err(Error::Config(format!("PCA needs at least 2 samples, got {n}")));
        }
        let in_dim = samples[0].len();
        if samples.iter().any(|s| s.len() != in_dim) {
            return Err(Error::contract("PCA samples differ in length"));
        }
        if out_dim == 0 || out_dim > in_dim.min(n - 1) {
            return Err(Error::Config(format!(
                "cannot keep {out_dim} components from {n} samples of dimension {in_dim}"
            )));
        }
        let mut mean = vec![0.0; in_dim];
        for s in samples {
            for (m, v) in mean.iter_mut().zip(s) {
                *m += v;
            }
        }
        for m in &mut mean {
            *m /= n as f64;
        }
        let cov = covariance(samples, &mean);
        let (values, vectors) = jacobi_eigen(cov, in_dim);
        let mut order: Vec<usize> = (0..in_dim).collect();
        order.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));

        let mut basis = Vec::with_capacity(out_dim * in_dim);
        let mut eigenvalues = Vec::with_capacity(out_dim);
        for &j in order.iter().take(out_dim) {
            let mut col: Vec<f64> = (0..in_dim).map(|i| vectors[i * in_dim + j]).collect();
            let pivot = col
                .iter()
                .enumerate()
                .fold(0, |best, (i, v)| if v.abs() > col[best].abs() { i } else { best });
            if col[pivot] < 0.0 {
                col.iter_mut().for_each(|v| *v = -*v);
            }
            basis.extend(col);
            eigenvalues.push(values[j]);
        }
        Ok(Self {
            in_dim,
            out_dim,
            mean,
            basis,
            eigenvalues,
        })
    }

    pub fn component(&self, i: usize) -> &[f64] {
        &self.basis[i * self.in_dim..(i + 1) * self.in_dim]
    }

    /// `basis * (x - mean)`.
    pub fn transform(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.in_dim {
            return Err(Error::contract(format!(
                "PCA expects length {}, got {}",
                self.in_dim,
                x.len()
            )));
        }
        let centered: Vec<f64> = x.iter().zip(&self.mean).map(|(a, m)| a - m).collect();
        Ok((0..self.out_dim)
            .map(|i| self.component(i).iter().zip(&centered).map(|(b, c)| b * c).sum())
            .collect())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = ByteWriter::new();
        w.magic(PCA_MAGIC);
        w.u32(PCA_VERSION);
        w.u32(self.in_dim as u32);
        w.u32(self.out_dim as u32);
        w.f64s(&self.mean);
        w.f64s(&self.eigenvalues);
        w.f64s(&self.basis);
        w.into_bytes()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes);
        r.expect_magic(PCA_MAGIC)?;
        r.expect_version(PCA_VERSION)?;
        let in_dim = r.u32()? as usize;
        let out_dim = r.u32()? as usize;
        let mean = r.f64s(in_dim)?;
        let eigenvalues = r.f64s(out_dim)?;
        let basis = r.f64s(in_dim * out_dim)?;
        r.finish()?;
        Ok(Self {
            in_dim,
            out_dim,
            mean,
            basis,
            eigenvalues,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&read_file(path)?)
    }
}

const PCA_MAGIC: &[u8; 4] = b"PCAM";
const PCA_VERSION: u32 = 1;

fn covariance(samples: &[Vec<f64>], mean: &[f64]) -> Vec<f64> {
    let d = mean.len();
    let mut cov = vec![0.0; d * d];
    for s in samples {
        let c: Vec<f64> = s.iter().zip(mean).map(|(a, m)| a - m).collect();
        for i in 0..d {
            for j in i..d {
                cov[i * d + j] += c[i] * c[j];
            }
        }
    }
    let denom = (samples.len() - 1) as f64;
    for i in 0..d {
        for j in i..d {
            cov[i * d + j] /= denom;
            cov[j * d + i] = cov[i * d + j];
        }
    }
    cov
}

/// `x / ||x||`; vectors with norm at most `1e-12` are returned unchanged.
pub fn l2_normalize(x: &[f64]) -> Vec<f64> {
    let norm = x.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm > 1e-12 {
        x.iter().map(|v| v / norm).collect()
    } else {
        x.to_vec()
    }
}

/// `a` followed by `b`.
pub fn concat(a: &[f64], b: &[f64]) -> Vec<f64> {
    let mut out = Vec::with_capacity(a.len() + b.len());
    out.extend_from_slice(a);
    out.extend_from_slice(b);
    out
}

pub fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

const STORE_MAGIC: &[u8; 4] = b"FSTR";
const STORE_VERSION: u32 = 1;

/// Fixed-width descriptors keyed by unique image id, in insertion order.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureStore {
    dim: usize,
    ids: Vec<String>,
    rows: Vec<f64>,
    index: HashMap<String, usize>,
}

impl FeatureStore {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            ids: Vec::new(),
            rows: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn push(&mut self, id: impl Into<String>, row: &[f64]) -> Result<()> {
        let id = id.into();
        if row.len() != self.dim {
            return Err(Error::contract(format!(
                "row for {id} has length {}, store dimension is {}",
                row.len(),
                self.dim
            )));
        }
        if self.index.contains_key(&id) {
            return Err(Error::Data(format!("duplicate id {id}")));
        }
        self.index.insert(id.clone(), self.ids.len());
        self.ids.push(id);
        self.rows.extend_from_slice(row);
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.rows[i * self.dim..(i + 1) * self.dim]
    }

    pub fn position(&self, id: &str) -> Option<usize> {
        self.index.get(id).copied()
    }

    pub fn get(&self, id: &str) -> Option<&[f64]> {
        self.position(id).map(|i| self.row(i))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &[f64])> {
        self.ids.iter().enumerate().map(|(i, id)| (id.as_str(), self.row(i)))
    }

    /// `"FSTR" | version u32 | dim u32 | count u64 | ids (u32 length + UTF-8) | rows f64`.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = ByteWriter::new();
        w.magic(STORE_MAGIC);
        w.u32(STORE_VERSION);
        w.u32(self.dim as u32);
        w.u64(self.ids.len() as u64);
        for id in &self.ids {
            w.str(id);
        }
        w.f64s(&self.rows);
        w.into_bytes()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes);
        r.expect_magic(STORE_MAGIC)?;
        r.expect_version(STORE_VERSION)?;
        let dim = r.u32()? as usize;
        let at = r.offset();
        let count = r.u64()?;
        // every id needs at least its 4-byte length prefix
        if count > (bytes.len() as u64) / 4 {
            return Err(Error::format(at, format!("row count {count} exceeds file size")));
        }
        let mut store = FeatureStore::new(dim);
        let mut ids = Vec::with_capacity(count as usize);
        for _ in 0..count {
            let at = r.offset();
            let id = r.str()?;
            if store.index.insert(id.clone(), ids.len()).is_some() {
                return Err(Error::format(at, format!("duplicate id {id}")));
            }
            ids.push(id);
        }
        store.rows = r.f64s(ids.len() * dim)?;
        store.ids = ids;
        r.finish()?;
        Ok(store)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&read_file(path)?)
    }
}
