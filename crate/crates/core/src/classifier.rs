//! One-vs-rest linear SVM that routes images to a coarse category.
//!
//! Each category gets a binary hinge-loss problem with L2 regularization,
//! solved by stochastic subgradient descent with step size
//! `lr / (lambda * t)`. The bias is learned as the weight of a constant
//! input feature and is regularized like the others.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::binio::{read_file, ByteReader, ByteWriter};
use crate::error::{Error, Result};

pub const DEFAULT_LAMBDA: f64 = 1e-4;
pub const DEFAULT_EPOCHS: usize = 20;

#[derive(Debug, Clone, PartialEq)]
pub struct SvmConfig {
    pub lambda: f64,
    pub epochs: usize,
    /// Multiplier on the `1 / (lambda * t)` schedule.
    pub lr: f64,
    pub seed: u64,
}

impl Default for SvmConfig {
    fn default() -> Self {
        Self {
            lambda: DEFAULT_LAMBDA,
            epochs: DEFAULT_EPOCHS,
            lr: 1.0,
            seed: 0,
        }
    }
}

/// `W` weight rows over `dim` features with one bias each.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearClassifier {
    pub labels: Vec<String>,
    pub dim: usize,
    /// Row-major `W x dim`.
    pub weights: Vec<f64>,
    pub biases: Vec<f64>,
}

/// Classifier plus the regularized hinge objective after every epoch.
#[derive(Debug, Clone)]
pub struct SvmFit {
    pub classifier: LinearClassifier,
    pub objective: Vec<f64>,
}

/// Mean over categories of `lambda/2 |w|^2 + mean_i max(0, 1 - y_i (w.x_i + b))`.
pub fn hinge_objective(clf: &LinearClassifier, features: &[Vec<f64>], labels: &[usize], lambda: f64) -> f64 {
    let w_count = clf.labels.len();
    let mut total = 0.0;
    for k in 0..w_count {
        let row = clf.row(k);
        let reg = row.iter().map(|v| v * v).sum::<f64>() + clf.biases[k] * clf.biases[k];
        let hinge: f64 = features
            .iter()
            .zip(labels)
            .map(|(x, &y)| {
                let sign = if y == k { 1.0 } else { -1.0 };
                (1.0 - sign * clf.score(k, x)).max(0.0)
            })
            .sum();
        total += lambda / 2.0 * reg + hinge / features.len() as f64;
    }
    total / w_count as f64
}

/// Trains one binary problem per category.
pub fn svm_train(
    features: &[Vec<f64>],
    labels: &[usize],
    label_names: &[String],
    cfg: &SvmConfig,
) -> Result<SvmFit> {
    let w_count = label_names.len();
    if w_count == 0 {
        return Err(Error::Data("no categories".into()));
    }
    if features.len() != labels.len() || features.is_empty() {
        return Err(Error::Data(format!(
            "{} feature rows for {} labels",
            features.len(),
            labels.len()
        )));
    }
    if !(cfg.lambda > 0.0) || cfg.epochs == 0 || !(cfg.lr > 0.0) {
        return Err(Error::Config(format!("invalid SVM settings {cfg:?}")));
    }
    let dim = features[0].len();
    if features.iter().any(|f| f.len() != dim) {
        return Err(Error::contract("feature rows differ in length"));
    }
    let mut counts = vec![0usize; w_count];
    for &l in labels {
        if l >= w_count {
            return Err(Error::Data(format!("label {l} outside [0, {w_count})")));
        }
        counts[l] += 1;
    }
    if let Some(k) = counts.iter().position(|&c| c == 0) {
        return Err(Error::Data(format!("category {} has no samples", label_names[k])));
    }

    let mut clf = LinearClassifier {
        labels: label_names.to_vec(),
        dim,
        weights: vec![0.0; w_count * dim],
        biases: vec![0.0; w_count],
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..features.len()).collect();
    let mut objective = Vec::with_capacity(cfg.epochs);
    let mut t = 0usize;
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for &i in &order {
            t += 1;
            let eta = cfg.lr / (cfg.lambda * t as f64);
            let shrink = 1.0 - eta * cfg.lambda;
            let x = &features[i];
            for k in 0..w_count {
                let y = if labels[i] == k { 1.0 } else { -1.0 };
                let margin = y * clf.score(k, x);
                let row = &mut clf.weights[k * dim..(k + 1) * dim];
                for w in row.iter_mut() {
                    *w *= shrink;
                }
                clf.biases[k] *= shrink;
                if margin < 1.0 {
                    for (w, v) in row.iter_mut().zip(x) {
                        *w += eta * y * v;
                    }
                    clf.biases[k] += eta * y;
                }
            }
        }
        objective.push(hinge_objective(&clf, features, labels, cfg.lambda));
    }
    Ok(SvmFit {
        classifier: clf,
        objective,
    })
}

impl LinearClassifier {
    pub fn row(&self, k: usize) -> &[f64] {
        &self.weights[k * self.dim..(k + 1) * self.dim]
    }

    fn score(&self, k: usize, x: &[f64]) -> f64 {
        self.row(k).iter().zip(x).map(|(w, v)| w * v).sum::<f64>() + self.biases[k]
    }

    /// All category scores `w.x + b`.
    pub fn scores(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.dim {
            return Err(Error::contract(format!(
                "classifier expects length {}, got {}",
                self.dim,
                x.len()
            )));
        }
        Ok((0..self.labels.len()).map(|k| self.score(k, x)).collect())
    }

    /// Highest-scoring category; ties go to the lowest index.
    pub fn predict(&self, x: &[f64]) -> Result<(usize, Vec<f64>)> {
        let scores = self.scores(x)?;
        Ok((argmax(&scores), scores))
    }

    /// `"LSVM" | version u32 | W u32 | dim u32 | labels (u32 length + UTF-8) | weights f64 | biases f64`.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = ByteWriter::new();
        w.magic(MAGIC);
        w.u32(VERSION);
        w.u32(self.labels.len() as u32);
        w.u32(self.dim as u32);
        for l in &self.labels {
            w.str(l);
        }
        w.f64s(&self.weights);
        w.f64s(&self.biases);
        w.into_bytes()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes);
        r.expect_magic(MAGIC)?;
        r.expect_version(VERSION)?;
        let at = r.offset();
        let w_count = r.u32()? as usize;
        if w_count > bytes.len() {
            return Err(Error::format(at, format!("implausible category count {w_count}")));
        }
        let dim = r.u32()? as usize;
        let labels = (0..w_count).map(|_| r.str()).collect::<Result<Vec<_>>>()?;
        let weights = r.f64s(w_count * dim)?;
        let biases = r.f64s(w_count)?;
        r.finish()?;
        Ok(Self {
            labels,
            dim,
            weights,
            biases,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&read_file(path)?)
    }
}

const MAGIC: &[u8; 4] = b"LSVM";
const VERSION: u32 = 1;

fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}
