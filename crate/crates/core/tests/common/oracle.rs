//! Independent reference implementations.

use std::collections::{BTreeSet, HashSet};

use finegrain::region::BinaryMask;
use rand::seq::SliceRandom;
use rand::Rng;

pub type PixelSets = BTreeSet<BTreeSet<(usize, usize)>>;

/// 4-connected components by iterative depth-first flood fill.
pub fn flood_fill(mask: &BinaryMask) -> PixelSets {
    let (w, h) = (mask.width, mask.height);
    let mut seen = vec![false; w * h];
    let mut out = BTreeSet::new();
    for r in 0..h {
        for c in 0..w {
            if !mask.get(r, c) || seen[r * w + c] {
                continue;
            }
            let mut comp = BTreeSet::new();
            let mut stack = vec![(r, c)];
            seen[r * w + c] = true;
            while let Some((y, x)) = stack.pop() {
                comp.insert((y, x));
                let mut next = Vec::new();
                if y > 0 {
                    next.push((y - 1, x));
                }
                if y + 1 < h {
                    next.push((y + 1, x));
                }
                if x > 0 {
                    next.push((y, x - 1));
                }
                if x + 1 < w {
                    next.push((y, x + 1));
                }
                for (ny, nx) in next {
                    if mask.get(ny, nx) && !seen[ny * w + nx] {
                        seen[ny * w + nx] = true;
                        stack.push((ny, nx));
                    }
                }
            }
            out.insert(comp);
        }
    }
    out
}

pub fn distance(a: &[f64], b: &[f64]) -> f64 {
    let mut s = 0.0;
    for i in 0..a.len() {
        let d = a[i] - b[i];
        s += d * d;
    }
    s.sqrt()
}

/// Every distance, sorted by (distance, id).
pub fn brute_force<'a>(rows: impl Iterator<Item = (&'a str, &'a [f64])>, q: &[f64]) -> Vec<(String, f64)> {
    let mut all: Vec<(String, f64)> = rows.map(|(id, row)| (id.to_string(), distance(row, q))).collect();
    all.sort_by(|a, b| a.1.partial_cmp(&b.1).unwrap().then_with(|| a.0.cmp(&b.0)));
    all
}

/// Ranked entries with distances as raw bits, for exact comparison.
pub fn bits(list: &[(String, f64)]) -> Vec<(String, u64)> {
    list.iter().map(|(id, d)| (id.clone(), d.to_bits())).collect()
}

/// AP straight from its definition: mean over relevant hits of precision at
/// that rank, with precision recounted from scratch at every hit.
pub fn average_precision(ranked: &[String], relevant: &HashSet<String>) -> Option<f64> {
    if relevant.is_empty() {
        return None;
    }
    let mut precisions = Vec::new();
    for k in 0..ranked.len() {
        if relevant.contains(&ranked[k]) {
            let hits = ranked[..=k].iter().filter(|id| relevant.contains(*id)).count();
            precisions.push(hits as f64 / (k + 1) as f64);
        }
    }
    if precisions.is_empty() {
        return Some(0.0);
    }
    let mut sum = 0.0;
    for p in &precisions {
        sum += p;
    }
    Some(sum / precisions.len() as f64)
}

pub fn random_mask(r: &mut impl Rng, w: usize, h: usize) -> BinaryMask {
    let density = r.gen_range(0.1..0.9);
    BinaryMask::new(w, h, (0..w * h).map(|_| r.gen_bool(density)).collect()).unwrap()
}

/// A shuffled ranking with a random relevant subset, sometimes including an
/// id that never appears in the ranking.
pub fn random_ap_case(r: &mut impl Rng) -> (Vec<String>, HashSet<String>) {
    let n = r.gen_range(1..60);
    let mut ids: Vec<String> = (0..n).map(|i| format!("d{i}")).collect();
    ids.shuffle(r);
    let p = r.gen_range(0.0..1.0);
    let mut relevant: HashSet<String> = ids.iter().filter(|_| r.gen_bool(p)).cloned().collect();
    if r.gen_bool(0.2) {
        relevant.insert("absent".into());
    }
    (ids, relevant)
}
