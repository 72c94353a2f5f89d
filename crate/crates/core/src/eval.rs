//! Retrieval metrics and report files.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::time::Duration;

use crate::cnnets::{select_confidence_map, CnNets};
use crate::engine::{StageTimings, Stages};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Average precision of a ranked id list.
///
/// Returns `None` when `relevant` is empty. `R` counts only relevant ids
/// that occur in the list.
pub fn average_precision<'a>(ranked: impl IntoIterator<Item = &'a str>, relevant: &HashSet<String>) -> Option<f64> {
    if relevant.is_empty() {
        return None;
    }
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (i, id) in ranked.into_iter().enumerate() {
        if relevant.contains(id) {
            hits += 1;
            sum += hits as f64 / (i + 1) as f64;
        }
    }
    Some(if hits == 0 { 0.0 } else { sum / hits as f64 })
}

/// Per-query outcome in an evaluation run.
#[derive(Debug, Clone, PartialEq)]
pub struct QueryAp {
    pub query_id: String,
    /// `None` when the query's species has no database images.
    pub ap: Option<f64>,
    pub relevant: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MapSummary {
    pub map: f64,
    pub included: usize,
    pub excluded: usize,
}

/// Mean AP over queries with a defined AP; the others are counted as excluded.
pub fn mean_average_precision(aps: &[QueryAp]) -> Result<MapSummary> {
    let defined: Vec<f64> = aps.iter().filter_map(|q| q.ap).collect();
    if defined.is_empty() {
        return Err(Error::Data("no query has relevant database images".into()));
    }
    Ok(MapSummary {
        map: defined.iter().sum::<f64>() / defined.len() as f64,
        included: defined.len(),
        excluded: aps.len() - defined.len(),
    })
}

/// Population standard deviation.
pub fn population_std(values: &[f64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    (values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n).sqrt()
}

/// Equal-width histograms of per-image map deviations for both branches.
#[derive(Debug, Clone, PartialEq)]
pub struct StdHistogram {
    /// Lower edge of each bin.
    pub edges: Vec<f64>,
    pub width: f64,
    pub conv_counts: Vec<usize>,
    pub norm_counts: Vec<usize>,
    pub conv_mean: f64,
    pub norm_mean: f64,
}

/// Bins both samples over `[0, max of either]`.
pub fn histogram_from_stds(conv: &[f64], norm: &[f64], bins: usize) -> Result<StdHistogram> {
    if bins == 0 {
        return Err(Error::Config("histogram needs at least one bin".into()));
    }
    let max = conv.iter().chain(norm).fold(0.0f64, |m, &v| m.max(v));
    let width = max / bins as f64;
    let count = |values: &[f64]| {
        let mut counts = vec![0usize; bins];
        for &v in values {
            let bin = if width > 0.0 { ((v / width) as usize).min(bins - 1) } else { 0 };
            counts[bin] += 1;
        }
        counts
    };
    let mean = |v: &[f64]| if v.is_empty() { 0.0 } else { v.iter().sum::<f64>() / v.len() as f64 };
    Ok(StdHistogram {
        edges: (0..bins).map(|i| i as f64 * width).collect(),
        width,
        conv_counts: count(conv),
        norm_counts: count(norm),
        conv_mean: mean(conv),
        norm_mean: mean(norm),
    })
}

/// Deviation of the selected inference-phase map of each branch, per image.
pub fn branch_map_stds(model: &CnNets, images: &[Tensor]) -> Result<(Vec<f64>, Vec<f64>)> {
    let mut conv = Vec::with_capacity(images.len());
    let mut norm = Vec::with_capacity(images.len());
    for image in images {
        let (c, n) = model.confidence_maps(image)?;
        conv.push(population_std(select_confidence_map(&c)?.1.data()));
        norm.push(population_std(select_confidence_map(&n)?.1.data()));
    }
    Ok((conv, norm))
}

pub fn std_histogram(model: &CnNets, images: &[Tensor], bins: usize) -> Result<StdHistogram> {
    let (conv, norm) = branch_map_stds(model, images)?;
    histogram_from_stds(&conv, &norm, bins)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TimingRow {
    pub stage: &'static str,
    pub mean: Duration,
    pub median: Duration,
    pub max: Duration,
}

/// Mean, median and max per stage; the last row is the per-query total.
pub fn timing_report(timings: &[StageTimings]) -> Result<Vec<TimingRow>> {
    if timings.is_empty() {
        return Err(Error::Data("no timed queries".into()));
    }
    let summarize = |stage: &'static str, mut values: Vec<Duration>| {
        values.sort();
        let n = values.len();
        let median = if n % 2 == 1 {
            values[n / 2]
        } else {
            (values[n / 2 - 1] + values[n / 2]) / 2
        };
        TimingRow {
            stage,
            mean: values.iter().sum::<Duration>() / n as u32,
            median,
            max: values[n - 1],
        }
    };
    let mut rows: Vec<TimingRow> = StageTimings::NAMES
        .iter()
        .enumerate()
        .map(|(i, name)| summarize(name, timings.iter().map(|t| t.as_array()[i]).collect()))
        .collect();
    rows.push(summarize("total", timings.iter().map(StageTimings::total).collect()));
    Ok(rows)
}

/// Everything `eval` writes.
#[derive(Debug, Clone)]
pub struct EvalReport {
    pub stages: Stages,
    pub queries: Vec<QueryAp>,
    pub summary: MapSummary,
    pub timing: Vec<TimingRow>,
    pub histogram: Option<StdHistogram>,
}

fn write(path: &Path, text: String) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

impl EvalReport {
    /// Writes `ap.csv`, `map.txt`, `timing.csv` and, when present, `std_hist.csv`.
    pub fn write_to(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut ap = String::from("query_id,ap,relevant_count\n");
        for q in &self.queries {
            let value = q.ap.map_or(String::new(), |v| format!("{v:.9}"));
            let _ = writeln!(ap, "{},{value},{}", q.query_id, q.relevant);
        }
        write(&dir.join("ap.csv"), ap)?;
        write(
            &dir.join("map.txt"),
            format!(
                "map {:.9}\nstages {}\nqueries_included {}\nqueries_excluded {}\n",
                self.summary.map, self.stages, self.summary.included, self.summary.excluded
            ),
        )?;
        let ms = |d: Duration| d.as_secs_f64() * 1e3;
        let mut timing = String::from("stage,mean_ms,median_ms,max_ms\n");
        for r in &self.timing {
            let _ = writeln!(timing, "{},{:.6},{:.6},{:.6}", r.stage, ms(r.mean), ms(r.median), ms(r.max));
        }
        write(&dir.join("timing.csv"), timing)?;
        if let Some(h) = &self.histogram {
            let mut csv = String::from("bin_lower_edge,conv_count,norm_count\n");
            for i in 0..h.edges.len() {
                let _ = writeln!(csv, "{:.9},{},{}", h.edges[i], h.conv_counts[i], h.norm_counts[i]);
            }
            write(&dir.join("std_hist.csv"), csv)?;
        }
        Ok(())
    }
}

/// Reads the MAP value from a `map.txt` file.
pub fn read_map_file(path: &Path) -> Result<f64> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let first = text.lines().next().unwrap_or_default();
    first
        .strip_prefix("map ")
        .and_then(|v| v.trim().parse().ok())
        .ok_or_else(|| Error::Parse {
            line: 1,
            message: format!("expected `map <value>`, found {first:?}"),
        })
}
