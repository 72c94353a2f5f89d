//! Helpers shared by the integration tests.
#![allow(dead_code)]

pub mod grad;
pub mod oracle;

use finegrain::classifier::{svm_train, SvmConfig};
use finegrain::cnnets::{CnNets, NetworkConfig};
use finegrain::engine::{CategoryModels, EngineIndex, ModelSet, RetrievalConfig};
use finegrain::features::{l2_normalize, FeatureStore, PcaModel};
use finegrain::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(rng: &mut impl Rng, len: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..len).map(|_| rng.gen_range(lo..hi)).collect()
}

pub fn tensor(rng: &mut impl Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let len = shape.iter().product();
    Tensor::new(shape.to_vec(), uniform(rng, len, lo, hi)).unwrap()
}

pub fn unit_vector(rng: &mut impl Rng, dim: usize) -> Vec<f64> {
    l2_normalize(&uniform(rng, dim, -1.0, 1.0))
}

/// Central differences of `f` at `x` with step `h`.
pub fn central_diff(f: impl Fn(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = probe[i];
            probe[i] = orig + h;
            let up = f(&probe);
            probe[i] = orig - h;
            let down = f(&probe);
            probe[i] = orig;
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// Largest elementwise `|a - b| / max(|a|, |b|, 1e-6)`.
pub fn max_rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(1e-6))
        .fold(0.0, f64::max)
}

/// `sum(weights * values)`, the scalar loss used to probe a layer's backward pass.
pub fn weighted_sum(values: &[f64], weights: &[f64]) -> f64 {
    values.iter().zip(weights).map(|(v, w)| v * w).sum()
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Correlated samples: random mixing of independent coordinates.
pub fn correlated_samples(r: &mut impl Rng, n: usize, dim: usize) -> Vec<Vec<f64>> {
    let mix: Vec<Vec<f64>> = (0..dim).map(|_| uniform(r, dim, -1.0, 1.0)).collect();
    (0..n)
        .map(|_| {
            let z = uniform(r, dim, -1.0, 1.0);
            mix.iter().map(|row| dot(row, &z)).collect()
        })
        .collect()
}

pub fn covariance(data: &[Vec<f64>], mean: &[f64]) -> Vec<Vec<f64>> {
    let d = mean.len();
    let mut c = vec![vec![0.0; d]; d];
    for x in data {
        for i in 0..d {
            for j in 0..d {
                c[i][j] += (x[i] - mean[i]) * (x[j] - mean[j]);
            }
        }
    }
    let denom = (data.len() - 1) as f64;
    c.iter_mut().flatten().for_each(|v| *v /= denom);
    c
}

/// Small untrained networks, PCA models fitted on random data and a
/// classifier, matching the requested descriptor widths.
///
/// `coarse_dim` must be below 8 (the coarse net emits 8 channels) and
/// `part_dim` below 12.
pub fn tiny_models(seed: u64, coarse_dim: usize, part_dim: usize, categories: usize) -> ModelSet {
    tiny_models_with(seed, 8, coarse_dim, part_dim, categories)
}

pub fn tiny_models_with(seed: u64, coarse_width: usize, coarse_dim: usize, part_dim: usize, categories: usize) -> ModelSet {
    let mut r = rng(seed);
    let net = |trunk: Vec<usize>, seed: u64| {
        CnNets::new(NetworkConfig {
            input_size: 8,
            in_channels: 1,
            feature_channels: *trunk.last().unwrap(),
            trunk,
            shared_depth: 1,
            num_species: 2,
            seed,
        })
        .unwrap()
    };
    let coarse = net(vec![coarse_width], seed);
    let samples = |r: &mut ChaCha8Rng, dim: usize, n: usize| -> Vec<Vec<f64>> {
        (0..n).map(|_| uniform(r, dim, -1.0, 1.0)).collect()
    };
    let coarse_pca = PcaModel::fit(&samples(&mut r, coarse_width, coarse_width + 8), coarse_dim).unwrap();
    let names: Vec<String> = (0..categories).map(|k| format!("cat{k}")).collect();
    let descriptors: Vec<Vec<f64>> = (0..4 * categories).map(|_| unit_vector(&mut r, coarse_dim)).collect();
    let labels: Vec<usize> = (0..4 * categories).map(|i| i % categories).collect();
    let classifier = svm_train(&descriptors, &labels, &names, &SvmConfig::default())
        .unwrap()
        .classifier;
    let categories = names
        .iter()
        .enumerate()
        .map(|(k, name)| CategoryModels {
            name: name.clone(),
            net: net(vec![4, 6], seed + 1 + k as u64),
            image_pca: PcaModel::fit(&samples(&mut r, 12, 20), part_dim).unwrap(),
            region_pca: PcaModel::fit(&samples(&mut r, 12, 20), part_dim).unwrap(),
        })
        .collect();
    ModelSet {
        coarse,
        coarse_pca,
        classifier,
        categories,
    }
}

/// An index over `n` random unit descriptors. When `duplicates` is set,
/// some rows repeat earlier ones so ties occur.
pub fn random_index(seed: u64, n: usize, coarse_dim: usize, part_dim: usize, duplicates: bool) -> EngineIndex {
    index_over(tiny_models(seed, coarse_dim, part_dim, 2), seed, n, duplicates)
}

/// Fills stores matching `models` with `n` random unit rows.
pub fn index_over(models: ModelSet, seed: u64, n: usize, duplicates: bool) -> EngineIndex {
    let coarse_dim = models.coarse_dim();
    let part_dim = models.fine_dim_per_part();
    let mut r = rng(seed ^ 0x5eed);
    let mut coarse = FeatureStore::new(coarse_dim);
    let mut fine = FeatureStore::new(2 * part_dim);
    let mut rows: Vec<(Vec<f64>, Vec<f64>)> = Vec::new();
    for i in 0..n {
        let row = if duplicates && i > 0 && r.gen_bool(0.25) {
            rows[r.gen_range(0..rows.len())].clone()
        } else {
            let mut f = unit_vector(&mut r, part_dim);
            f.extend(unit_vector(&mut r, part_dim));
            (unit_vector(&mut r, coarse_dim), f)
        };
        // ids deliberately out of insertion order
        let id = format!("img{:07}", (i * 7919) % 10_000_000);
        coarse.push(id.clone(), &row.0).unwrap();
        fine.push(id, &row.1).unwrap();
        if duplicates {
            rows.push(row);
        }
    }
    EngineIndex::from_parts(RetrievalConfig::default(), models, coarse, fine).unwrap()
}
