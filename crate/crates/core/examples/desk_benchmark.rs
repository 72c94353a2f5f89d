//! Runs the pinned desk benchmark end to end and prints its headline numbers.
//!
//! `cargo run --release -p finegrain --example desk_benchmark [seed]`

use std::time::Instant;

use finegrain::engine::Stages;
use finegrain::pipeline::{evaluate, fit_models, index_dataset, train_models, Dataset, PipelineConfig};
use finegrain::synth::{generate, SynthSpec};

fn main() -> finegrain::Result<()> {
    let mut cfg = PipelineConfig::default();
    if let Some(seed) = std::env::args().nth(1).and_then(|s| s.parse().ok()) {
        cfg.reseed(seed);
    }
    let start = Instant::now();
    let spec = SynthSpec {
        seed: cfg.seed,
        ..SynthSpec::default()
    };
    let ds = Dataset::from_generated(generate(&spec)?)?;
    println!("synth      {:>8.1?}  {} images", start.elapsed(), ds.images.len());

    let t = Instant::now();
    let trained = train_models(&ds, &cfg)?;
    println!("train      {:>8.1?}", t.elapsed());
    for (name, r) in std::iter::once(("coarse", &trained.coarse_report))
        .chain(trained.categories.iter().map(|(n, _, r)| (n.as_str(), r)))
    {
        println!(
            "  {name:<8} loss {:.3} -> {:.3}  acc {:.3}",
            r.epoch_loss[0],
            r.epoch_loss.last().unwrap(),
            r.epoch_accuracy.last().unwrap()
        );
    }

    let t = Instant::now();
    let fit = fit_models(&ds, &trained, &cfg)?;
    println!(
        "fit        {:>8.1?}  holdout accuracy {:.4} ({} images)",
        t.elapsed(),
        fit.holdout_accuracy.unwrap_or(f64::NAN),
        fit.holdout_count
    );

    let t = Instant::now();
    let index = index_dataset(&ds, fit.models, cfg.retrieval.clone())?;
    println!("index      {:>8.1?}  {} images", t.elapsed(), index.len());

    for stages in Stages::ALL {
        let t = Instant::now();
        let report = evaluate(&index, &ds, stages, cfg.hist_bins)?;
        let h = report.histogram.as_ref().unwrap();
        println!(
            "eval {:<8} {:>8.1?}  MAP {:.4}  (std conv {:.4}, norm {:.4})",
            stages.to_string(),
            t.elapsed(),
            report.summary.map,
            h.conv_mean,
            h.norm_mean
        );
    }
    println!("total      {:>8.1?}", start.elapsed());
    Ok(())
}
