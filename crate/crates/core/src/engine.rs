//! Coarse-to-fine retrieval: offline indexing and the online query path.
//!
//! Every image, stored or queried, goes through the same [`ModelSet::describe`]
//! chain so that query and database descriptors live in the same space:
//!
//! 1. coarse descriptor: `l2(pca_coarse(f_conv))` from the coarse model;
//! 2. routing: the classifier's category for that descriptor;
//! 3. region: the coarse model's strongest confidence map, thresholded and cropped;
//! 4. fine descriptor: `[l2(pca_img(f_cn(image))), l2(pca_reg(f_cn(region)))]`
//!    from the routed category model.
//!
//! Rankings sort by `(distance, id)`, so ties resolve by ascending id and
//! every output is reproducible bit for bit.

use std::cmp::Ordering;
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;
use std::time::{Duration, Instant};

use rayon::prelude::*;

use crate::classifier::LinearClassifier;
use crate::cnnets::{select_confidence_map, CnNets};
use crate::error::{Error, Result};
use crate::features::{concat, euclidean, l2_normalize, FeatureStore, PcaModel};
use crate::region::{extract_region, resize_image, Map2d, RegionResult, DEFAULT_MIN_FRACTION, DEFAULT_THRESHOLD};
use crate::tensor::Tensor;

pub const DEFAULT_COARSE_DIM: usize = 32;
pub const DEFAULT_FINE_DIM_PER_PART: usize = 512;
pub const DEFAULT_MAX_TOP_K: usize = 10_000;
pub const DEFAULT_QE_K: usize = 5;

#[derive(Debug, Clone, PartialEq)]
pub struct RetrievalConfig {
    pub coarse_dim: usize,
    pub fine_dim_per_part: usize,
    /// Coarse cut `K`; `None` means `min(10000, database size)`.
    pub top_k: Option<usize>,
    pub qe_k: usize,
    pub threshold: f64,
    pub min_fraction: f64,
}

impl Default for RetrievalConfig {
    fn default() -> Self {
        Self {
            coarse_dim: DEFAULT_COARSE_DIM,
            fine_dim_per_part: DEFAULT_FINE_DIM_PER_PART,
            top_k: None,
            qe_k: DEFAULT_QE_K,
            threshold: DEFAULT_THRESHOLD,
            min_fraction: DEFAULT_MIN_FRACTION,
        }
    }
}

impl RetrievalConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.coarse_dim == 0 || self.fine_dim_per_part == 0 {
            return bad("descriptor dimensions must be positive".into());
        }
        if self.top_k == Some(0) {
            return bad("K must be at least 1".into());
        }
        if self.qe_k == 0 || self.top_k.is_some_and(|k| self.qe_k > k) {
            return bad(format!("query-expansion depth {} must lie in [1, K]", self.qe_k));
        }
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return bad(format!("threshold {} outside (0, 1)", self.threshold));
        }
        if !(0.0..1.0).contains(&self.min_fraction) {
            return bad(format!("minimum region fraction {} outside [0, 1)", self.min_fraction));
        }
        Ok(())
    }

    /// The cut actually applied to a database of `db_len` images.
    pub fn effective_k(&self, db_len: usize) -> usize {
        self.top_k.unwrap_or(DEFAULT_MAX_TOP_K).min(db_len)
    }
}

/// How far the online pipeline runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Stages {
    Coarse,
    Fine,
    FineQe,
}

impl Stages {
    pub const ALL: [Stages; 3] = [Stages::Coarse, Stages::Fine, Stages::FineQe];
}

impl fmt::Display for Stages {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Stages::Coarse => "coarse",
            Stages::Fine => "fine",
            Stages::FineQe => "fine+qe",
        })
    }
}

impl FromStr for Stages {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "coarse" => Ok(Stages::Coarse),
            "fine" => Ok(Stages::Fine),
            "fine+qe" => Ok(Stages::FineQe),
            other => Err(Error::Config(format!("unknown stages {other:?}, expected coarse, fine or fine+qe"))),
        }
    }
}

/// `(id, distance)` pairs sorted by distance, then id.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RankedList {
    entries: Vec<(String, f64)>,
}

impl RankedList {
    /// Sorts arbitrary pairs into ranking order. Ids must be unique.
    pub fn from_unsorted(mut entries: Vec<(String, f64)>) -> Self {
        entries.sort_by(|a, b| rank_order(a.1, &a.0, b.1, &b.0));
        Self { entries }
    }

    pub fn entries(&self) -> &[(String, f64)] {
        &self.entries
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(id, _)| id.as_str())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn first(&self) -> Option<&(String, f64)> {
        self.entries.first()
    }
}

fn rank_order(da: f64, ia: &str, db: f64, ib: &str) -> Ordering {
    da.total_cmp(&db).then_with(|| ia.cmp(ib))
}

/// Ranks the given store rows against `q`, keeping the best `k`.
fn rank_rows(store: &FeatureStore, rows: impl Iterator<Item = usize>, q: &[f64], k: usize) -> RankedList {
    let mut scored: Vec<(f64, usize)> = rows.map(|i| (euclidean(store.row(i), q), i)).collect();
    let ids = store.ids();
    let cmp = |a: &(f64, usize), b: &(f64, usize)| rank_order(a.0, &ids[a.1], b.0, &ids[b.1]);
    if k < scored.len() {
        if k > 0 {
            scored.select_nth_unstable_by(k - 1, cmp);
        }
        scored.truncate(k);
    }
    scored.sort_unstable_by(cmp);
    RankedList {
        entries: scored.into_iter().map(|(d, i)| (ids[i].clone(), d)).collect(),
    }
}

/// Resizes an image to a network's input extent and standardizes each
/// channel to zero mean and unit variance.
///
/// Flat channels are only centered.
pub fn network_input(image: &Tensor, size: usize) -> Result<Tensor> {
    let mut t = resize_image(image, size, size)?;
    let plane = size * size;
    for ch in t.data_mut().chunks_exact_mut(plane) {
        let mean = ch.iter().sum::<f64>() / plane as f64;
        let var = ch.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / plane as f64;
        let scale = if var > 1e-12 { 1.0 / var.sqrt() } else { 1.0 };
        for v in ch.iter_mut() {
            *v = (*v - mean) * scale;
        }
    }
    Ok(t)
}

/// Models for one coarse category.
#[derive(Debug, Clone, PartialEq)]
pub struct CategoryModels {
    pub name: String,
    pub net: CnNets,
    pub image_pca: PcaModel,
    pub region_pca: PcaModel,
}

/// Everything needed to describe an image.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelSet {
    pub coarse: CnNets,
    pub coarse_pca: PcaModel,
    pub classifier: LinearClassifier,
    /// In classifier label order.
    pub categories: Vec<CategoryModels>,
}

/// Wall-clock time of each online stage.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct StageTimings {
    pub coarse_extract: Duration,
    pub coarse_retrieval: Duration,
    pub classify: Duration,
    pub fine_extract: Duration,
    pub fine_retrieval: Duration,
}

impl StageTimings {
    pub const NAMES: [&'static str; 5] = [
        "coarse_feature_extraction",
        "coarse_retrieval",
        "classifier",
        "fine_feature_extraction",
        "fine_retrieval",
    ];

    pub fn as_array(&self) -> [Duration; 5] {
        [
            self.coarse_extract,
            self.coarse_retrieval,
            self.classify,
            self.fine_extract,
            self.fine_retrieval,
        ]
    }

    pub fn total(&self) -> Duration {
        self.as_array().iter().sum()
    }
}

/// Descriptors and intermediate results for one image.
#[derive(Debug, Clone)]
pub struct Description {
    pub coarse: Vec<f64>,
    pub category: usize,
    pub category_scores: Vec<f64>,
    /// Index of the selected coarse confidence map.
    pub map_index: usize,
    pub region: RegionResult,
    pub fine: Vec<f64>,
}

impl ModelSet {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Data(m));
        let n = self.coarse.config().feature_channels;
        if self.coarse_pca.in_dim != n {
            return bad(format!("coarse PCA expects {} inputs, coarse model emits {n}", self.coarse_pca.in_dim));
        }
        if self.classifier.dim != self.coarse_pca.out_dim {
            return bad(format!(
                "classifier expects {} inputs, coarse descriptor has {}",
                self.classifier.dim, self.coarse_pca.out_dim
            ));
        }
        let names: Vec<&str> = self.categories.iter().map(|c| c.name.as_str()).collect();
        if names != self.classifier.labels.iter().map(String::as_str).collect::<Vec<_>>() {
            return bad(format!(
                "category models {names:?} do not match classifier labels {:?}",
                self.classifier.labels
            ));
        }
        let part = self.fine_dim_per_part();
        for cat in &self.categories {
            let cfg = cat.net.config();
            if cfg.in_channels != self.coarse.config().in_channels {
                return bad(format!("category {} model has a different channel count", cat.name));
            }
            for pca in [&cat.image_pca, &cat.region_pca] {
                if pca.in_dim != 2 * cfg.feature_channels || pca.out_dim != part {
                    return bad(format!(
                        "category {} PCA maps {} -> {}, expected {} -> {part}",
                        cat.name,
                        pca.in_dim,
                        pca.out_dim,
                        2 * cfg.feature_channels
                    ));
                }
            }
        }
        Ok(())
    }

    pub fn coarse_dim(&self) -> usize {
        self.coarse_pca.out_dim
    }

    pub fn fine_dim_per_part(&self) -> usize {
        self.categories.first().map_or(0, |c| c.image_pca.out_dim)
    }

    pub fn fine_dim(&self) -> usize {
        2 * self.fine_dim_per_part()
    }

    /// Coarse descriptor and coarse confidence maps for a `[c, h, w]` image.
    pub fn coarse_descriptor(&self, image: &Tensor) -> Result<(Vec<f64>, Tensor)> {
        let s = self.coarse.config().input_size;
        let (f_conv, maps) = self.coarse.extract_conv_feature(&network_input(image, s)?)?;
        Ok((l2_normalize(&self.coarse_pca.transform(&f_conv)?), maps))
    }

    /// Fine descriptor from the routed category model plus the region used.
    pub fn fine_descriptor(
        &self,
        image: &Tensor,
        category: usize,
        coarse_maps: &Tensor,
        cfg: &RetrievalConfig,
    ) -> Result<(Vec<f64>, usize, RegionResult)> {
        let cat = self
            .categories
            .get(category)
            .ok_or_else(|| Error::contract(format!("no model for category {category}")))?;
        let (map_index, map) = select_confidence_map(coarse_maps)?;
        let region = extract_region(image, &Map2d::from_tensor(&map)?, cfg.threshold, cfg.min_fraction)?;
        let s = cat.net.config().input_size;
        let whole = cat.net.extract_cn_feature(&network_input(image, s)?)?;
        let part = cat.net.extract_cn_feature(&network_input(&region.crop, s)?)?;
        let fine = concat(
            &l2_normalize(&cat.image_pca.transform(&whole)?),
            &l2_normalize(&cat.region_pca.transform(&part)?),
        );
        Ok((fine, map_index, region))
    }

    /// Runs the full description chain on one image.
    pub fn describe(&self, image: &Tensor, cfg: &RetrievalConfig) -> Result<Description> {
        let (coarse, maps) = self.coarse_descriptor(image)?;
        let (category, category_scores) = self.classifier.predict(&coarse)?;
        let (fine, map_index, region) = self.fine_descriptor(image, category, &maps, cfg)?;
        Ok(Description {
            coarse,
            category,
            category_scores,
            map_index,
            region,
            fine,
        })
    }
}

/// Immutable searchable index.
#[derive(Debug, Clone, PartialEq)]
pub struct EngineIndex {
    pub config: RetrievalConfig,
    pub models: ModelSet,
    coarse: FeatureStore,
    fine: FeatureStore,
    /// Routed category of every stored image, in store order.
    categories: Vec<usize>,
}

/// A database image handed to [`build_index`].
#[derive(Debug, Clone)]
pub struct IndexItem {
    pub id: String,
    pub image: Tensor,
}

/// Describes every database image and stores its descriptors.
///
/// Images are processed in parallel; stores keep the input order.
pub fn build_index(items: &[IndexItem], models: ModelSet, cfg: RetrievalConfig) -> Result<EngineIndex> {
    cfg.validate()?;
    models.validate()?;
    let described: Vec<Description> = items
        .par_iter()
        .map(|item| models.describe(&item.image, &cfg))
        .collect::<Result<_>>()?;
    let mut coarse = FeatureStore::new(models.coarse_dim());
    let mut fine = FeatureStore::new(models.fine_dim());
    let mut categories = Vec::with_capacity(items.len());
    let mut fallbacks = 0;
    for (item, d) in items.iter().zip(described) {
        coarse.push(item.id.clone(), &d.coarse)?;
        fine.push(item.id.clone(), &d.fine)?;
        categories.push(d.category);
        fallbacks += usize::from(!d.region.found);
    }
    if fallbacks > 0 {
        log::info!("{fallbacks} of {} database images fell back to the full image region", items.len());
    }
    Ok(EngineIndex {
        config: cfg,
        models,
        coarse,
        fine,
        categories,
    })
}

/// Result of one online query.
#[derive(Debug, Clone)]
pub struct QueryOutcome {
    /// The top-`K` block in its final order.
    pub ranked: RankedList,
    /// Images beyond `K`, in coarse order with their coarse distances.
    pub tail: RankedList,
    pub category: usize,
    pub description: Option<Description>,
    pub timings: StageTimings,
}

impl QueryOutcome {
    /// Every database id in final order: the ranked block, then the tail.
    pub fn full_ids(&self) -> Vec<&str> {
        self.ranked.ids().chain(self.tail.ids()).collect()
    }
}

impl EngineIndex {
    /// Assembles an index from precomputed parts; routing is recomputed from
    /// the coarse store.
    pub fn from_parts(
        config: RetrievalConfig,
        models: ModelSet,
        coarse: FeatureStore,
        fine: FeatureStore,
    ) -> Result<Self> {
        config.validate()?;
        models.validate()?;
        if coarse.ids() != fine.ids() {
            return Err(Error::Data("coarse and fine stores hold different ids".into()));
        }
        if coarse.dim() != models.coarse_dim() || fine.dim() != models.fine_dim() {
            return Err(Error::Data(format!(
                "store dimensions {}/{} do not match models {}/{}",
                coarse.dim(),
                fine.dim(),
                models.coarse_dim(),
                models.fine_dim()
            )));
        }
        let categories = (0..coarse.len())
            .map(|i| models.classifier.predict(coarse.row(i)).map(|p| p.0))
            .collect::<Result<_>>()?;
        Ok(Self {
            config,
            models,
            coarse,
            fine,
            categories,
        })
    }

    pub fn len(&self) -> usize {
        self.coarse.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coarse.is_empty()
    }

    pub fn coarse_store(&self) -> &FeatureStore {
        &self.coarse
    }

    pub fn fine_store(&self) -> &FeatureStore {
        &self.fine
    }

    pub fn categories(&self) -> &[usize] {
        &self.categories
    }

    pub fn effective_k(&self) -> usize {
        self.config.effective_k(self.len())
    }

    /// Exhaustive Euclidean scan over the coarse store, truncated at `k`.
    pub fn coarse_query(&self, q_coarse: &[f64], k: usize) -> Result<RankedList> {
        check_len("coarse query", q_coarse.len(), self.coarse.dim())?;
        Ok(rank_rows(&self.coarse, 0..self.coarse.len(), q_coarse, k))
    }

    /// Re-ranks exactly `ids` by fine-descriptor distance.
    pub fn fine_rerank<'a>(&self, ids: impl IntoIterator<Item = &'a str>, q_fine: &[f64]) -> Result<RankedList> {
        check_len("fine query", q_fine.len(), self.fine.dim())?;
        let rows = ids
            .into_iter()
            .map(|id| {
                self.fine
                    .position(id)
                    .ok_or_else(|| Error::contract(format!("id {id} is not in the index")))
            })
            .collect::<Result<Vec<_>>>()?;
        let n = rows.len();
        Ok(rank_rows(&self.fine, rows.into_iter(), q_fine, n))
    }

    /// Re-queries the same block with the normalized mean of its first
    /// `min(qe_k, len)` stored fine descriptors.
    pub fn query_expand(&self, reranked: &RankedList, qe_k: usize) -> Result<RankedList> {
        if reranked.is_empty() {
            return Ok(RankedList::default());
        }
        let take = qe_k.max(1).min(reranked.len());
        let mut mean = vec![0.0; self.fine.dim()];
        for id in reranked.ids().take(take) {
            let row = self
                .fine
                .get(id)
                .ok_or_else(|| Error::contract(format!("id {id} is not in the index")))?;
            for (m, v) in mean.iter_mut().zip(row) {
                *m += v;
            }
        }
        for m in &mut mean {
            *m /= take as f64;
        }
        self.fine_rerank(reranked.ids(), &l2_normalize(&mean))
    }

    /// Runs the online pipeline on a `[c, h, w]` query image.
    pub fn full_query(&self, image: &Tensor, stages: Stages) -> Result<QueryOutcome> {
        let mut timings = StageTimings::default();
        let models = &self.models;

        let t = Instant::now();
        let (q_coarse, maps) = models.coarse_descriptor(image)?;
        timings.coarse_extract = t.elapsed();

        let t = Instant::now();
        let all = self.coarse_query(&q_coarse, self.len())?;
        let k = self.effective_k();
        let (block, tail) = split_at(all, k);
        timings.coarse_retrieval = t.elapsed();

        let t = Instant::now();
        let (category, category_scores) = models.classifier.predict(&q_coarse)?;
        timings.classify = t.elapsed();

        if stages == Stages::Coarse {
            return Ok(QueryOutcome {
                ranked: block,
                tail,
                category,
                description: None,
                timings,
            });
        }

        let t = Instant::now();
        let (fine, map_index, region) = models.fine_descriptor(image, category, &maps, &self.config)?;
        timings.fine_extract = t.elapsed();

        let t = Instant::now();
        let mut ranked = self.fine_rerank(block.ids(), &fine)?;
        if stages == Stages::FineQe {
            ranked = self.query_expand(&ranked, self.config.qe_k)?;
        }
        timings.fine_retrieval = t.elapsed();

        Ok(QueryOutcome {
            ranked,
            tail,
            category,
            description: Some(Description {
                coarse: q_coarse,
                category,
                category_scores,
                map_index,
                region,
                fine,
            }),
            timings,
        })
    }
}

fn split_at(list: RankedList, k: usize) -> (RankedList, RankedList) {
    let mut entries = list.entries;
    let tail = entries.split_off(k.min(entries.len()));
    (RankedList { entries }, RankedList { entries: tail })
}

fn check_len(what: &str, got: usize, want: usize) -> Result<()> {
    if got != want {
        return Err(Error::contract(format!("{what} has length {got}, index expects {want}")));
    }
    Ok(())
}

const META_FILE: &str = "meta.txt";
const META_HEADER: &str = "finegrain-index";
const META_VERSION: u32 = 1;
const COARSE_STORE: &str = "coarse.fstr";
const FINE_STORE: &str = "fine.fstr";
const CLASSIFIER: &str = "classifier.lsvm";
const COARSE_MODEL: &str = "coarse.cnnt";
const COARSE_PCA: &str = "coarse.pca";

fn category_files(name: &str) -> [String; 3] {
    [
        format!("category_{name}.cnnt"),
        format!("image_{name}.pca"),
        format!("region_{name}.pca"),
    ]
}

impl EngineIndex {
    /// Writes stores, models, classifier, PCA files and `meta.txt` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        self.coarse.save(&dir.join(COARSE_STORE))?;
        self.fine.save(&dir.join(FINE_STORE))?;
        self.models.classifier.save(&dir.join(CLASSIFIER))?;
        self.models.coarse.save(&dir.join(COARSE_MODEL))?;
        self.models.coarse_pca.save(&dir.join(COARSE_PCA))?;
        for cat in &self.models.categories {
            let [net, img, reg] = category_files(&cat.name);
            cat.net.save(&dir.join(net))?;
            cat.image_pca.save(&dir.join(img))?;
            cat.region_pca.save(&dir.join(reg))?;
        }
        let path = dir.join(META_FILE);
        fs::write(&path, self.meta_text()).map_err(|e| Error::io(&path, e))
    }

    fn meta_text(&self) -> String {
        let c = &self.config;
        let mut s = format!("{META_HEADER} {META_VERSION}\n");
        s += &format!("coarse_dim {}\n", c.coarse_dim);
        s += &format!("fine_dim_per_part {}\n", c.fine_dim_per_part);
        s += &format!("top_k {}\n", c.top_k.map_or("auto".to_string(), |k| k.to_string()));
        s += &format!("qe_k {}\n", c.qe_k);
        s += &format!("threshold {}\n", c.threshold);
        s += &format!("min_fraction {}\n", c.min_fraction);
        s += &format!("images {}\n", self.len());
        s += &format!("coarse_store_dim {}\n", self.coarse.dim());
        s += &format!("fine_store_dim {}\n", self.fine.dim());
        s += &format!("coarse_store {COARSE_STORE}\n");
        s += &format!("fine_store {FINE_STORE}\n");
        s += &format!("classifier {CLASSIFIER}\n");
        s += &format!("coarse_model {COARSE_MODEL}\n");
        s += &format!("coarse_pca {COARSE_PCA}\n");
        for cat in &self.models.categories {
            let [net, img, reg] = category_files(&cat.name);
            s += &format!("category {} {net} {img} {reg}\n", cat.name);
        }
        s
    }

    /// Reads an index written by [`EngineIndex::save`].
    pub fn load(dir: &Path) -> Result<Self> {
        let meta_path = dir.join(META_FILE);
        let text = fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
        let meta = Meta::parse(&text)?;
        let models = ModelSet {
            coarse: CnNets::load(&dir.join(&meta.coarse_model))?,
            coarse_pca: PcaModel::load(&dir.join(&meta.coarse_pca))?,
            classifier: LinearClassifier::load(&dir.join(&meta.classifier))?,
            categories: meta
                .categories
                .iter()
                .map(|(name, [net, img, reg])| {
                    Ok(CategoryModels {
                        name: name.clone(),
                        net: CnNets::load(&dir.join(net))?,
                        image_pca: PcaModel::load(&dir.join(img))?,
                        region_pca: PcaModel::load(&dir.join(reg))?,
                    })
                })
                .collect::<Result<_>>()?,
        };
        let coarse = FeatureStore::load(&dir.join(&meta.coarse_store))?;
        let fine = FeatureStore::load(&dir.join(&meta.fine_store))?;
        if coarse.len() != meta.images {
            return Err(Error::Data(format!(
                "meta.txt lists {} images, stores hold {}",
                meta.images,
                coarse.len()
            )));
        }
        EngineIndex::from_parts(meta.config, models, coarse, fine)
    }
}

struct Meta {
    config: RetrievalConfig,
    images: usize,
    coarse_store: String,
    fine_store: String,
    classifier: String,
    coarse_model: String,
    coarse_pca: String,
    categories: Vec<(String, [String; 3])>,
}

impl Meta {
    fn parse(text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));
        let (_, header) = lines.next().ok_or(Error::Parse {
            line: 1,
            message: "empty metadata file".into(),
        })?;
        if header != format!("{META_HEADER} {META_VERSION}") {
            return Err(Error::Parse {
                line: 1,
                message: format!("expected header {META_HEADER:?} version {META_VERSION}, found {header:?}"),
            });
        }
        let mut config = RetrievalConfig::default();
        let mut images = None;
        let mut files: [Option<String>; 5] = Default::default();
        let mut categories = Vec::new();
        for (line, text) in lines {
            if text.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = text.split_whitespace().collect();
            let err = |message: String| Error::Parse { line, message };
            let value = |i: usize| fields.get(i).copied().ok_or_else(|| err(format!("missing value in {text:?}")));
            fn num<T: FromStr>(s: &str, line: usize) -> Result<T> {
                s.parse().map_err(|_| Error::Parse {
                    line,
                    message: format!("invalid number {s:?}"),
                })
            }
            match fields[0] {
                "coarse_dim" => config.coarse_dim = num(value(1)?, line)?,
                "fine_dim_per_part" => config.fine_dim_per_part = num(value(1)?, line)?,
                "top_k" => {
                    config.top_k = match value(1)? {
                        "auto" => None,
                        v => Some(num(v, line)?),
                    }
                }
                "qe_k" => config.qe_k = num(value(1)?, line)?,
                "threshold" => config.threshold = num(value(1)?, line)?,
                "min_fraction" => config.min_fraction = num(value(1)?, line)?,
                "images" => images = Some(num(value(1)?, line)?),
                "coarse_store_dim" | "fine_store_dim" => {
                    num::<usize>(value(1)?, line)?;
                }
                "coarse_store" => files[0] = Some(value(1)?.to_string()),
                "fine_store" => files[1] = Some(value(1)?.to_string()),
                "classifier" => files[2] = Some(value(1)?.to_string()),
                "coarse_model" => files[3] = Some(value(1)?.to_string()),
                "coarse_pca" => files[4] = Some(value(1)?.to_string()),
                "category" => {
                    if fields.len() != 5 {
                        return Err(err(format!("category line needs 4 fields, found {}", fields.len() - 1)));
                    }
                    categories.push((
                        fields[1].to_string(),
                        [fields[2].to_string(), fields[3].to_string(), fields[4].to_string()],
                    ));
                }
                key => return Err(err(format!("unknown key {key:?}"))),
            }
        }
        let last = text.lines().count();
        let missing = |what: &str| Error::Parse {
            line: last,
            message: format!("metadata lacks {what}"),
        };
        let [coarse_store, fine_store, classifier, coarse_model, coarse_pca] = files;
        Ok(Self {
            config,
            images: images.ok_or_else(|| missing("images"))?,
            coarse_store: coarse_store.ok_or_else(|| missing("coarse_store"))?,
            fine_store: fine_store.ok_or_else(|| missing("fine_store"))?,
            classifier: classifier.ok_or_else(|| missing("classifier"))?,
            coarse_model: coarse_model.ok_or_else(|| missing("coarse_model"))?,
            coarse_pca: coarse_pca.ok_or_else(|| missing("coarse_pca"))?,
            categories,
        })
    }
}
