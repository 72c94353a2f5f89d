//! End-to-end lifecycle: train, fit, index and evaluate on a manifest.
//!
//! Auxiliary images are split per species: every `holdout_every`-th image is
//! held out from all fitting and only used to score the coarse classifier.

use std::collections::{BTreeSet, HashMap, HashSet};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;

use crate::classifier::{svm_train, SvmConfig};
use crate::cnnets::{select_confidence_map, CnNets, NetworkConfig, Sample, TrainConfig, TrainReport};
use crate::engine::{build_index, network_input, CategoryModels, EngineIndex, IndexItem, ModelSet, RetrievalConfig, Stages};
use crate::error::{Error, Result};
use crate::eval::{
    average_precision, branch_map_stds, histogram_from_stds, mean_average_precision, timing_report, EvalReport,
    QueryAp,
};
use crate::features::{l2_normalize, PcaModel};
use crate::region::{extract_region, Map2d};
use crate::synth::{manifest_path, DatasetManifest, Generated, Record, Role};
use crate::tensor::Tensor;

/// Seed of the pinned desk benchmark.
pub const BENCHMARK_SEED: u64 = 20_170_401;

/// Architecture of one network family.
#[derive(Debug, Clone, PartialEq)]
pub struct NetSpec {
    pub input_size: usize,
    pub trunk: Vec<usize>,
    pub shared_depth: usize,
}

impl NetSpec {
    fn config(&self, in_channels: usize, num_species: usize, seed: u64) -> NetworkConfig {
        NetworkConfig {
            input_size: self.input_size,
            in_channels,
            trunk: self.trunk.clone(),
            shared_depth: self.shared_depth,
            feature_channels: self.trunk.last().copied().unwrap_or(0),
            num_species,
            seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    pub coarse_net: NetSpec,
    pub category_net: NetSpec,
    pub coarse_train: TrainConfig,
    pub category_train: TrainConfig,
    pub svm: SvmConfig,
    pub retrieval: RetrievalConfig,
    /// Every n-th auxiliary image of a species is held out; 0 disables.
    pub holdout_every: usize,
    pub hist_bins: usize,
    pub seed: u64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self::with_seed(BENCHMARK_SEED)
    }
}

impl PipelineConfig {
    pub fn with_seed(seed: u64) -> Self {
        Self {
            coarse_net: NetSpec {
                input_size: 32,
                trunk: vec![16, 32],
                shared_depth: 1,
            },
            category_net: NetSpec {
                input_size: 64,
                trunk: vec![8, 16, 32],
                shared_depth: 2,
            },
            coarse_train: TrainConfig {
                epochs: 40,
                batch_size: 16,
                learning_rate: 0.1,
                seed,
            },
            // Category nets see far fewer images per epoch than the coarse net.
            category_train: TrainConfig {
                epochs: 80,
                batch_size: 16,
                learning_rate: 0.1,
                seed,
            },
            svm: SvmConfig {
                seed,
                ..SvmConfig::default()
            },
            retrieval: RetrievalConfig::default(),
            holdout_every: 5,
            hist_bins: 20,
            seed,
        }
    }

    /// Sets every derived seed from one value.
    pub fn reseed(&mut self, seed: u64) {
        self.seed = seed;
        self.coarse_train.seed = seed;
        self.category_train.seed = seed;
        self.svm.seed = seed;
    }
}

/// A manifest with its decoded images, index-aligned with the records.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub root: PathBuf,
    pub manifest: DatasetManifest,
    pub images: Vec<Tensor>,
}

impl Dataset {
    /// Reads `manifest.tsv` and every image under `root`.
    pub fn load(root: &Path) -> Result<Self> {
        let manifest = DatasetManifest::read(&manifest_path(root))?;
        let images = manifest
            .records
            .par_iter()
            .map(|r| DatasetManifest::load_image(root, r))
            .collect::<Result<_>>()?;
        Ok(Self {
            root: root.to_path_buf(),
            manifest,
            images,
        })
    }

    pub fn from_generated(generated: Vec<Generated>) -> Result<Self> {
        let (records, images) = generated.into_iter().map(|g| (g.record, g.image)).unzip();
        let manifest = DatasetManifest { records };
        manifest.validate()?;
        Ok(Self {
            root: PathBuf::new(),
            manifest,
            images,
        })
    }

    pub fn records(&self) -> &[Record] {
        &self.manifest.records
    }

    fn in_channels(&self) -> Result<usize> {
        self.images
            .first()
            .map(|t| t.shape()[0])
            .ok_or_else(|| Error::Data("dataset has no images".into()))
    }

    /// Indices of auxiliary records, split into (fit, holdout).
    pub fn auxiliary_split(&self, holdout_every: usize) -> (Vec<usize>, Vec<usize>) {
        let mut seen: HashMap<&str, usize> = HashMap::new();
        let (mut fit, mut hold) = (Vec::new(), Vec::new());
        for (i, r) in self.records().iter().enumerate() {
            if r.role != Role::Auxiliary {
                continue;
            }
            let k = seen.entry(r.fine.as_str()).or_default();
            if holdout_every > 0 && *k % holdout_every == holdout_every - 1 {
                hold.push(i);
            } else {
                fit.push(i);
            }
            *k += 1;
        }
        (fit, hold)
    }

    /// Sorted coarse categories present in the auxiliary split.
    pub fn categories(&self) -> Vec<String> {
        let set: BTreeSet<&str> = self.manifest.with_role(Role::Auxiliary).map(|r| r.coarse.as_str()).collect();
        set.into_iter().map(String::from).collect()
    }
}

fn labelled(ds: &Dataset, idx: &[usize], label_of: impl Fn(&Record) -> String) -> (Vec<String>, Vec<Sample>) {
    let names: Vec<String> = idx
        .iter()
        .map(|&i| label_of(&ds.records()[i]))
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let samples = idx
        .iter()
        .map(|&i| {
            let r = &ds.records()[i];
            let label = names.binary_search(&label_of(r)).expect("label collected above");
            (r.id.clone(), i, label)
        })
        .map(|(id, i, label)| Sample {
            id,
            image: ds.images[i].clone(),
            label,
        })
        .collect();
    (names, samples)
}

fn resized(samples: Vec<Sample>, size: usize) -> Result<Vec<Sample>> {
    samples
        .into_iter()
        .map(|s| {
            Ok(Sample {
                image: network_input(&s.image, size)?,
                ..s
            })
        })
        .collect()
}

/// Networks after training, with their loss curves.
#[derive(Debug, Clone)]
pub struct TrainedModels {
    pub coarse: CnNets,
    pub coarse_report: TrainReport,
    /// `(category, model, report)` in sorted category order.
    pub categories: Vec<(String, CnNets, TrainReport)>,
}

/// Trains the coarse network on all auxiliary species and one network per
/// category on that category's auxiliary species.
///
/// Networks are trained concurrently; each one is single-threaded and
/// deterministic.
pub fn train_models(ds: &Dataset, cfg: &PipelineConfig) -> Result<TrainedModels> {
    let (fit_idx, _) = ds.auxiliary_split(cfg.holdout_every);
    let channels = ds.in_channels()?;
    let categories = ds.categories();
    let mut jobs: Vec<(Option<String>, NetworkConfig, Vec<Sample>, &TrainConfig)> = Vec::new();

    let (species, samples) = labelled(ds, &fit_idx, |r| r.fine.clone());
    let s = cfg.coarse_net.input_size;
    jobs.push((
        None,
        cfg.coarse_net.config(channels, species.len(), cfg.seed),
        resized(samples, s)?,
        &cfg.coarse_train,
    ));
    for (k, cat) in categories.iter().enumerate() {
        let idx: Vec<usize> = fit_idx
            .iter()
            .copied()
            .filter(|&i| &ds.records()[i].coarse == cat)
            .collect();
        let (species, samples) = labelled(ds, &idx, |r| r.fine.clone());
        if species.len() < 2 {
            return Err(Error::Data(format!(
                "category {cat} needs at least 2 auxiliary species, found {}",
                species.len()
            )));
        }
        let s = cfg.category_net.input_size;
        jobs.push((
            Some(cat.clone()),
            cfg.category_net.config(channels, species.len(), cfg.seed.wrapping_add(1 + k as u64)),
            resized(samples, s)?,
            &cfg.category_train,
        ));
    }

    let trained = jobs
        .into_par_iter()
        .map(|(name, net_cfg, samples, tc)| {
            let mut net = CnNets::new(net_cfg)?;
            let report = net.train(&samples, tc)?;
            log::info!(
                "trained {} model: loss {:.4} -> {:.4}",
                name.as_deref().unwrap_or("coarse"),
                report.epoch_loss.first().copied().unwrap_or(f64::NAN),
                report.epoch_loss.last().copied().unwrap_or(f64::NAN)
            );
            Ok((name, net, report))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut iter = trained.into_iter();
    let (_, coarse, coarse_report) = iter.next().expect("coarse job");
    Ok(TrainedModels {
        coarse,
        coarse_report,
        categories: iter.map(|(n, net, r)| (n.expect("category job"), net, r)).collect(),
    })
}

/// Crop chosen by the coarse model's strongest map, as on the query path.
fn region_crop(coarse: &CnNets, image: &Tensor, retrieval: &RetrievalConfig) -> Result<Tensor> {
    let s = coarse.config().input_size;
    let (_, maps) = coarse.extract_conv_feature(&network_input(image, s)?)?;
    let (_, map) = select_confidence_map(&maps)?;
    Ok(extract_region(image, &Map2d::from_tensor(&map)?, retrieval.threshold, retrieval.min_fraction)?.crop)
}

/// Output of [`fit_models`].
#[derive(Debug, Clone)]
pub struct FitOutput {
    pub models: ModelSet,
    /// Classifier accuracy on held-out auxiliary images, if any were held out.
    pub holdout_accuracy: Option<f64>,
    pub holdout_count: usize,
    pub svm_objective: Vec<f64>,
}

fn clamp_dim(what: &str, requested: usize, in_dim: usize, samples: usize) -> usize {
    let dim = requested.min(in_dim).min(samples.saturating_sub(1)).max(1);
    if dim < requested {
        log::warn!("{what} PCA reduced to {dim} dimensions ({in_dim} inputs, {samples} samples)");
    }
    dim
}

/// Fits the coarse PCA, the classifier and per-category PCA models on the
/// auxiliary fit split.
pub fn fit_models(ds: &Dataset, trained: &TrainedModels, cfg: &PipelineConfig) -> Result<FitOutput> {
    let (fit_idx, hold_idx) = ds.auxiliary_split(cfg.holdout_every);
    let categories: Vec<String> = trained.categories.iter().map(|(n, _, _)| n.clone()).collect();
    let coarse = &trained.coarse;
    let cs = coarse.config().input_size;
    let coarse_feature = |i: &usize| -> Result<Vec<f64>> {
        Ok(coarse.extract_conv_feature(&network_input(&ds.images[*i], cs)?)?.0)
    };

    let raw: Vec<Vec<f64>> = fit_idx.par_iter().map(coarse_feature).collect::<Result<_>>()?;
    let coarse_dim = clamp_dim("coarse", cfg.retrieval.coarse_dim, coarse.config().feature_channels, raw.len());
    let coarse_pca = PcaModel::fit(&raw, coarse_dim)?;
    let describe = |f: &Vec<f64>| coarse_pca.transform(f).map(|v| l2_normalize(&v));
    let descriptors: Vec<Vec<f64>> = raw.iter().map(describe).collect::<Result<_>>()?;
    let label_of = |i: usize| -> Result<usize> {
        let coarse = &ds.records()[i].coarse;
        categories
            .iter()
            .position(|c| c == coarse)
            .ok_or_else(|| Error::Data(format!("record {} has unknown category {coarse}", ds.records()[i].id)))
    };
    let labels: Vec<usize> = fit_idx.iter().map(|&i| label_of(i)).collect::<Result<_>>()?;
    let fit = svm_train(&descriptors, &labels, &categories, &cfg.svm)?;

    let holdout_accuracy = if hold_idx.is_empty() {
        None
    } else {
        let hits = hold_idx
            .par_iter()
            .map(|i| {
                let d = describe(&coarse_feature(i)?)?;
                Ok(usize::from(fit.classifier.predict(&d)?.0 == label_of(*i)?))
            })
            .collect::<Result<Vec<usize>>>()?;
        Some(hits.iter().sum::<usize>() as f64 / hold_idx.len() as f64)
    };

    // whole-image and region f_CN per category
    let mut parts = Vec::new();
    for (name, net, _) in &trained.categories {
        let s = net.config().input_size;
        let idx: Vec<usize> = fit_idx
            .iter()
            .copied()
            .filter(|&i| &ds.records()[i].coarse == name)
            .collect();
        let feats: Vec<(Vec<f64>, Vec<f64>)> = idx
            .par_iter()
            .map(|&i| {
                let image = &ds.images[i];
                let crop = region_crop(coarse, image, &cfg.retrieval)?;
                Ok((
                    net.extract_cn_feature(&network_input(image, s)?)?,
                    net.extract_cn_feature(&network_input(&crop, s)?)?,
                ))
            })
            .collect::<Result<_>>()?;
        parts.push(feats.into_iter().unzip::<_, _, Vec<_>, Vec<_>>());
    }
    let part_dim = trained
        .categories
        .iter()
        .zip(&parts)
        .map(|((name, net, _), (whole, _))| {
            clamp_dim(name, cfg.retrieval.fine_dim_per_part, 2 * net.config().feature_channels, whole.len())
        })
        .min()
        .unwrap_or(1);
    let category_models = trained
        .categories
        .iter()
        .zip(parts)
        .map(|((name, net, _), (whole, region))| {
            Ok(CategoryModels {
                name: name.clone(),
                net: net.clone(),
                image_pca: PcaModel::fit(&whole, part_dim)?,
                region_pca: PcaModel::fit(&region, part_dim)?,
            })
        })
        .collect::<Result<_>>()?;

    Ok(FitOutput {
        models: ModelSet {
            coarse: coarse.clone(),
            coarse_pca,
            classifier: fit.classifier,
            categories: category_models,
        },
        holdout_accuracy,
        holdout_count: hold_idx.len(),
        svm_objective: fit.objective,
    })
}

/// Indexes every database and distractor image.
pub fn index_dataset(ds: &Dataset, models: ModelSet, retrieval: RetrievalConfig) -> Result<EngineIndex> {
    let items: Vec<IndexItem> = ds
        .records()
        .iter()
        .zip(&ds.images)
        .filter(|(r, _)| r.role.is_searchable())
        .map(|(r, image)| IndexItem {
            id: r.id.clone(),
            image: image.clone(),
        })
        .collect();
    build_index(&items, models, retrieval)
}

/// Per-image selected-map deviations of every category model on its
/// category's auxiliary images.
pub fn auxiliary_map_stds(ds: &Dataset, models: &ModelSet) -> Result<(Vec<f64>, Vec<f64>)> {
    let (mut conv, mut norm) = (Vec::new(), Vec::new());
    for cat in &models.categories {
        let s = cat.net.config().input_size;
        let images: Vec<Tensor> = ds
            .records()
            .iter()
            .zip(&ds.images)
            .filter(|(r, _)| r.role == Role::Auxiliary && r.coarse == cat.name)
            .map(|(_, im)| network_input(im, s))
            .collect::<Result<_>>()?;
        let (c, n) = branch_map_stds(&cat.net, &images)?;
        conv.extend(c);
        norm.extend(n);
    }
    Ok((conv, norm))
}

/// Runs every query of the manifest through the index.
///
/// A database image is relevant when it carries the query's fine label.
/// Queries run one at a time so stage timings are not contended.
pub fn evaluate(index: &EngineIndex, ds: &Dataset, stages: Stages, hist_bins: usize) -> Result<EvalReport> {
    let mut by_species: HashMap<&str, HashSet<String>> = HashMap::new();
    for r in ds.manifest.with_role(Role::Database) {
        by_species.entry(r.fine.as_str()).or_default().insert(r.id.clone());
    }
    let empty = HashSet::new();
    let mut queries = Vec::new();
    let mut timings = Vec::new();
    for (r, image) in ds.records().iter().zip(&ds.images) {
        if r.role != Role::Query {
            continue;
        }
        let relevant = by_species.get(r.fine.as_str()).unwrap_or(&empty);
        let outcome = index.full_query(image, stages)?;
        queries.push(QueryAp {
            query_id: r.id.clone(),
            ap: average_precision(outcome.full_ids(), relevant),
            relevant: relevant.len(),
        });
        timings.push(outcome.timings);
    }
    let summary = mean_average_precision(&queries)?;
    let histogram = if hist_bins > 0 {
        let (conv, norm) = auxiliary_map_stds(ds, &index.models)?;
        Some(histogram_from_stds(&conv, &norm, hist_bins)?)
    } else {
        None
    };
    Ok(EvalReport {
        stages,
        queries,
        summary,
        timing: timing_report(&timings)?,
        histogram,
    })
}

fn category_model_file(name: &str) -> String {
    format!("category_{name}.cnnt")
}

/// Writes trained networks and a `training.tsv` loss log.
pub fn save_trained(dir: &Path, trained: &TrainedModels) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    trained.coarse.save(&dir.join("coarse.cnnt"))?;
    let mut log = String::from("model\tepoch\tloss\taccuracy\n");
    let mut add = |name: &str, r: &TrainReport| {
        for (e, (l, a)) in r.epoch_loss.iter().zip(&r.epoch_accuracy).enumerate() {
            let _ = writeln!(log, "{name}\t{}\t{l:.9}\t{a:.6}", e + 1);
        }
    };
    add("coarse", &trained.coarse_report);
    for (name, net, report) in &trained.categories {
        net.save(&dir.join(category_model_file(name)))?;
        add(name, report);
    }
    let path = dir.join("training.tsv");
    fs::write(&path, log).map_err(|e| Error::io(&path, e))
}

/// Reads networks written by [`save_trained`] for the given categories.
pub fn load_trained(dir: &Path, categories: &[String]) -> Result<TrainedModels> {
    Ok(TrainedModels {
        coarse: CnNets::load(&dir.join("coarse.cnnt"))?,
        coarse_report: TrainReport::default(),
        categories: categories
            .iter()
            .map(|c| Ok((c.clone(), CnNets::load(&dir.join(category_model_file(c)))?, TrainReport::default())))
            .collect::<Result<_>>()?,
    })
}

/// Writes PCA models, the classifier and a `fit.txt` summary.
pub fn save_fit(dir: &Path, fit: &FitOutput) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let m = &fit.models;
    m.coarse_pca.save(&dir.join("coarse.pca"))?;
    m.classifier.save(&dir.join("classifier.lsvm"))?;
    for cat in &m.categories {
        cat.image_pca.save(&dir.join(format!("image_{}.pca", cat.name)))?;
        cat.region_pca.save(&dir.join(format!("region_{}.pca", cat.name)))?;
    }
    let mut text = format!(
        "coarse_dim {}\nfine_dim_per_part {}\nholdout_images {}\n",
        m.coarse_dim(),
        m.fine_dim_per_part(),
        fit.holdout_count
    );
    if let Some(acc) = fit.holdout_accuracy {
        text += &format!("holdout_accuracy {acc:.6}\n");
    }
    let path = dir.join("fit.txt");
    fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

/// Reads a complete [`ModelSet`] from a models directory.
pub fn load_model_set(dir: &Path, categories: &[String]) -> Result<ModelSet> {
    let trained = load_trained(dir, categories)?;
    let models = ModelSet {
        coarse: trained.coarse,
        coarse_pca: PcaModel::load(&dir.join("coarse.pca"))?,
        classifier: crate::classifier::LinearClassifier::load(&dir.join("classifier.lsvm"))?,
        categories: trained
            .categories
            .into_iter()
            .map(|(name, net, _)| {
                Ok(CategoryModels {
                    image_pca: PcaModel::load(&dir.join(format!("image_{name}.pca")))?,
                    region_pca: PcaModel::load(&dir.join(format!("region_{name}.pca")))?,
                    name,
                    net,
                })
            })
            .collect::<Result<_>>()?,
    };
    models.validate()?;
    Ok(models)
}
