//! `finegrain`: synthesize, train, fit, index, query, evaluate and inspect.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use finegrain::engine::{EngineIndex, RetrievalConfig, Stages};
use finegrain::pipeline::{
    evaluate, fit_models, index_dataset, load_model_set, load_trained, save_fit, save_trained, train_models, Dataset,
    PipelineConfig, BENCHMARK_SEED,
};
use finegrain::region::{write_map_pgm, write_mask_pgm};
use finegrain::synth::{generate_dataset, Family, SynthSpec};
use finegrain::{pgm, Error, Result};

const EXIT_CODES: &str = "\
Exit codes:
  0  success
  2  usage error (unknown subcommand, missing or invalid option)
  3  data or format error (bad manifest, corrupt model or index file)
  4  numeric contract violation
  5  I/O error";

#[derive(Debug, Parser)]
#[command(name = "finegrain", version, about = "Coarse-to-fine fine-grained image retrieval", after_help = EXIT_CODES)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic dataset with a manifest.
    Synth(SynthArgs),
    /// Train the coarse network and one network per coarse category.
    Train(TrainArgs),
    /// Fit PCA models and the coarse classifier on auxiliary features.
    Fit(FitArgs),
    /// Describe every searchable image and persist the index.
    Index(IndexArgs),
    /// Rank the database for one query image.
    Query(QueryArgs),
    /// Run every manifest query and write report files.
    Eval(EvalArgs),
    /// Write the confidence map, mask and region crop for one image.
    Inspect(InspectArgs),
}

#[derive(Debug, Args)]
struct SynthArgs {
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = BENCHMARK_SEED)]
    seed: u64,
    /// Comma-separated families.
    #[arg(long, value_delimiter = ',', default_value = "stripes,checks,blobs")]
    families: Vec<Family>,
    /// Database species per family.
    #[arg(long, default_value_t = 6)]
    database_species: usize,
    /// Auxiliary species per family.
    #[arg(long, default_value_t = 4)]
    auxiliary_species: usize,
    #[arg(long, default_value_t = 40)]
    images_per_species: usize,
    /// Share of each database species used as queries.
    #[arg(long, default_value_t = 0.1)]
    query_fraction: f64,
    #[arg(long, default_value_t = 200)]
    distractors: usize,
    #[arg(long, default_value_t = 64)]
    image_size: usize,
}

/// Options shared by every stage that reads the dataset and models.
#[derive(Debug, Args)]
struct Lifecycle {
    /// Dataset directory holding manifest.tsv.
    #[arg(long)]
    data: PathBuf,
    /// Model directory.
    #[arg(long)]
    models: PathBuf,
    #[arg(long, default_value_t = BENCHMARK_SEED)]
    seed: u64,
    /// Every n-th auxiliary image of a species is held out (0 keeps all).
    #[arg(long, default_value_t = 5)]
    holdout_every: usize,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[command(flatten)]
    common: Lifecycle,
    #[arg(long)]
    coarse_epochs: Option<usize>,
    #[arg(long)]
    category_epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    coarse_lr: Option<f64>,
    #[arg(long)]
    category_lr: Option<f64>,
}

/// Region-extraction options; they must agree between `fit` and `index`.
#[derive(Debug, Args)]
struct RegionArgs {
    /// Binarization threshold on the normalized confidence map.
    #[arg(long, default_value_t = finegrain::region::DEFAULT_THRESHOLD)]
    threshold: f64,
    /// Minimum share of pixels the dominant region must cover.
    #[arg(long, default_value_t = finegrain::region::DEFAULT_MIN_FRACTION)]
    min_fraction: f64,
}

#[derive(Debug, Args)]
struct FitArgs {
    #[command(flatten)]
    common: Lifecycle,
    #[command(flatten)]
    region: RegionArgs,
    #[arg(long, default_value_t = finegrain::engine::DEFAULT_COARSE_DIM)]
    coarse_dim: usize,
    /// Requested PCA size of each fine part; clamped to what the data supports.
    #[arg(long, default_value_t = finegrain::engine::DEFAULT_FINE_DIM_PER_PART)]
    fine_dim: usize,
    #[arg(long)]
    svm_lambda: Option<f64>,
    #[arg(long)]
    svm_epochs: Option<usize>,
}

/// Query-time options.
#[derive(Debug, Args)]
struct SearchArgs {
    /// Coarse cut K (default: min(10000, database size)).
    #[arg(long)]
    top_k: Option<usize>,
    /// Number of top results averaged by query expansion.
    #[arg(long)]
    qe_k: Option<usize>,
}

#[derive(Debug, Args)]
struct IndexArgs {
    #[command(flatten)]
    common: Lifecycle,
    #[command(flatten)]
    region: RegionArgs,
    #[command(flatten)]
    search: SearchArgs,
    /// Index directory to write.
    #[arg(long)]
    index: PathBuf,
}

#[derive(Debug, Args)]
struct QueryArgs {
    #[arg(long)]
    index: PathBuf,
    /// Query image (binary PGM).
    #[arg(long)]
    image: PathBuf,
    /// coarse, fine or fine+qe.
    #[arg(long, default_value = "fine+qe")]
    stages: Stages,
    #[command(flatten)]
    search: SearchArgs,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    index: PathBuf,
    /// Report directory.
    #[arg(long)]
    reports: PathBuf,
    #[arg(long, default_value = "fine+qe")]
    stages: Stages,
    /// Bins of the map-deviation histogram.
    #[arg(long, default_value_t = 20, value_parser = clap::value_parser!(u32).range(1..))]
    bins: u32,
    #[command(flatten)]
    search: SearchArgs,
}

#[derive(Debug, Args)]
struct InspectArgs {
    #[arg(long)]
    index: PathBuf,
    #[arg(long)]
    image: PathBuf,
    /// Directory for map.pgm, mask.pgm and crop.pgm.
    #[arg(long)]
    out: PathBuf,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Synth(a) => synth(a),
        Command::Train(a) => train(a),
        Command::Fit(a) => fit(a),
        Command::Index(a) => index(a),
        Command::Query(a) => query(a),
        Command::Eval(a) => eval(a),
        Command::Inspect(a) => inspect(a),
    }
}

fn synth(a: SynthArgs) -> Result<()> {
    let spec = SynthSpec {
        families: a.families,
        database_species: a.database_species,
        auxiliary_species: a.auxiliary_species,
        images_per_species: a.images_per_species,
        query_fraction: a.query_fraction,
        distractors: a.distractors,
        image_size: a.image_size,
        seed: a.seed,
    };
    let manifest = generate_dataset(&spec, &a.out)?;
    log::info!("wrote {} images to {}", manifest.records.len(), a.out.display());
    Ok(())
}

fn pipeline_config(c: &Lifecycle) -> PipelineConfig {
    let mut cfg = PipelineConfig::with_seed(c.seed);
    cfg.holdout_every = c.holdout_every;
    cfg
}

fn apply_region(cfg: &mut RetrievalConfig, r: &RegionArgs) {
    cfg.threshold = r.threshold;
    cfg.min_fraction = r.min_fraction;
}

fn apply_search(cfg: &mut RetrievalConfig, s: &SearchArgs) -> Result<()> {
    if s.top_k.is_some() {
        cfg.top_k = s.top_k;
    }
    if let Some(k) = s.qe_k {
        cfg.qe_k = k;
    }
    cfg.validate()
}

fn train(a: TrainArgs) -> Result<()> {
    let mut cfg = pipeline_config(&a.common);
    let set = |slot: &mut usize, v: Option<usize>| *slot = v.unwrap_or(*slot);
    set(&mut cfg.coarse_train.epochs, a.coarse_epochs);
    set(&mut cfg.category_train.epochs, a.category_epochs);
    set(&mut cfg.coarse_train.batch_size, a.batch_size);
    set(&mut cfg.category_train.batch_size, a.batch_size);
    cfg.coarse_train.learning_rate = a.coarse_lr.unwrap_or(cfg.coarse_train.learning_rate);
    cfg.category_train.learning_rate = a.category_lr.unwrap_or(cfg.category_train.learning_rate);
    cfg.coarse_train.validate()?;
    cfg.category_train.validate()?;
    let ds = Dataset::load(&a.common.data)?;
    let trained = train_models(&ds, &cfg)?;
    save_trained(&a.common.models, &trained)
}

fn fit(a: FitArgs) -> Result<()> {
    let mut cfg = pipeline_config(&a.common);
    apply_region(&mut cfg.retrieval, &a.region);
    cfg.retrieval.coarse_dim = a.coarse_dim;
    cfg.retrieval.fine_dim_per_part = a.fine_dim;
    cfg.svm.lambda = a.svm_lambda.unwrap_or(cfg.svm.lambda);
    cfg.svm.epochs = a.svm_epochs.unwrap_or(cfg.svm.epochs);
    cfg.retrieval.validate()?;
    let ds = Dataset::load(&a.common.data)?;
    let trained = load_trained(&a.common.models, &ds.categories())?;
    let out = fit_models(&ds, &trained, &cfg)?;
    if let Some(acc) = out.holdout_accuracy {
        log::info!("classifier accuracy on {} held-out images: {acc:.4}", out.holdout_count);
    }
    save_fit(&a.common.models, &out)
}

fn index(a: IndexArgs) -> Result<()> {
    let mut retrieval = RetrievalConfig::default();
    apply_region(&mut retrieval, &a.region);
    apply_search(&mut retrieval, &a.search)?;
    let ds = Dataset::load(&a.common.data)?;
    let models = load_model_set(&a.common.models, &ds.categories())?;
    let index = index_dataset(&ds, models, retrieval)?;
    index.save(&a.index)?;
    log::info!("indexed {} images into {}", index.len(), a.index.display());
    Ok(())
}

fn load_index(dir: &Path, search: &SearchArgs) -> Result<EngineIndex> {
    let mut index = EngineIndex::load(dir)?;
    apply_search(&mut index.config, search)?;
    Ok(index)
}

fn query(a: QueryArgs) -> Result<()> {
    let index = load_index(&a.index, &a.search)?;
    let image = pgm::read(&a.image)?;
    let outcome = index.full_query(&image, a.stages)?;
    let mut out = String::new();
    for (id, d) in outcome.ranked.entries().iter().chain(outcome.tail.entries()) {
        out.push_str(id);
        out.push('\t');
        out.push_str(&significant9(*d));
        out.push('\n');
    }
    print!("{out}");
    Ok(())
}

fn eval(a: EvalArgs) -> Result<()> {
    let index = load_index(&a.index, &a.search)?;
    let ds = Dataset::load(&a.data)?;
    let report = evaluate(&index, &ds, a.stages, a.bins as usize)?;
    report.write_to(&a.reports)?;
    log::info!(
        "MAP {:.6} over {} queries ({} excluded), stages {}",
        report.summary.map,
        report.summary.included,
        report.summary.excluded,
        a.stages
    );
    Ok(())
}

fn inspect(a: InspectArgs) -> Result<()> {
    let index = EngineIndex::load(&a.index)?;
    let image = pgm::read(&a.image)?;
    let d = index.models.describe(&image, &index.config)?;
    fs::create_dir_all(&a.out).map_err(|e| Error::Io {
        path: a.out.clone(),
        source: e,
    })?;
    let region = &d.region;
    match &region.map {
        Some(map) => write_map_pgm(map.map(), &a.out.join("map.pgm"))?,
        None => log::warn!("confidence map is degenerate; map.pgm not written"),
    }
    match &region.mask {
        Some(mask) => write_mask_pgm(mask, &a.out.join("mask.pgm"))?,
        None => log::warn!("no mask; mask.pgm not written"),
    }
    pgm::write(&region.crop, &a.out.join("crop.pgm"))?;
    let b = &region.bbox;
    println!("category\t{}", index.models.categories[d.category].name);
    println!("map\t{}", d.map_index);
    println!("region\t{}", if region.found { "found" } else { "fallback" });
    println!("bbox\t{} {} {} {}", b.row0, b.col0, b.row1, b.col1);
    Ok(())
}

/// Formats `v` with exactly nine significant digits, in positional notation
/// for moderate magnitudes and scientific notation otherwise.
fn significant9(v: f64) -> String {
    if !v.is_finite() {
        return v.to_string();
    }
    let sci = format!("{:.8e}", v.abs());
    let (mantissa, exp) = sci.split_once('e').expect("scientific format");
    let exp: i32 = exp.parse().expect("integer exponent");
    let digits: String = mantissa.chars().filter(char::is_ascii_digit).collect();
    let sign = if v.is_sign_negative() && v != 0.0 { "-" } else { "" };
    let body = if v == 0.0 {
        "0.00000000".to_string()
    } else if (0..8).contains(&exp) {
        let point = exp as usize + 1;
        format!("{}.{}", &digits[..point], &digits[point..])
    } else if exp == 8 {
        digits
    } else if (-5..0).contains(&exp) {
        format!("0.{}{digits}", "0".repeat((-exp - 1) as usize))
    } else {
        format!("{mantissa}e{exp}")
    };
    format!("{sign}{body}")
}
