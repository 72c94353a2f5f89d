//! Procedural fine-grained benchmark and its manifest.
//!
//! Each family draws a textured disc on a noisy background. A species is
//! one value of the family's fine parameter; auxiliary and database species
//! take interleaved values, so they never coincide but cover the same range.
//! The parameter is measured relative to the disc, so the texture scales with
//! the object. Per image the disc's position, size, orientation, phase,
//! contrast and the background vary at random.

use std::collections::{HashMap, HashSet};
use std::f64::consts::PI;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::pgm;
use crate::tensor::Tensor;

pub const MANIFEST_FILE: &str = "manifest.tsv";
pub const MANIFEST_HEADER: &str = "id\tpath\tcoarse\tfine\trole";
/// Coarse and fine labels of distractor records.
pub const DISTRACTOR_COARSE: &str = "-";
pub const DISTRACTOR_FINE: &str = "distractor";

/// A coarse pattern generator.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Family {
    /// Straight sinusoidal grating; the parameter sets cycles per diameter.
    Stripes,
    /// Product of two orthogonal gratings; the parameter sets cycles per diameter.
    Checks,
    /// Scattered Gaussian spots; the parameter sets spot size per radius.
    Blobs,
}

impl Family {
    pub const ALL: [Family; 3] = [Family::Stripes, Family::Checks, Family::Blobs];

    pub fn name(self) -> &'static str {
        match self {
            Family::Stripes => "stripes",
            Family::Checks => "checks",
            Family::Blobs => "blobs",
        }
    }
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Family {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Family::ALL
            .into_iter()
            .find(|f| f.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown family {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthSpec {
    pub families: Vec<Family>,
    pub database_species: usize,
    pub auxiliary_species: usize,
    pub images_per_species: usize,
    /// Share of each database species' images held out as queries.
    pub query_fraction: f64,
    pub distractors: usize,
    pub image_size: usize,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            families: Family::ALL.to_vec(),
            database_species: 6,
            auxiliary_species: 4,
            images_per_species: 40,
            query_fraction: 0.1,
            distractors: 200,
            image_size: 64,
            seed: 0,
        }
    }
}

/// One species and its generating parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct SpeciesSpec {
    pub family: Family,
    /// Position along the family's parameter axis.
    pub slot: usize,
    /// Generating parameter in `[0, 1]`.
    pub param: f64,
    pub auxiliary: bool,
}

impl SpeciesSpec {
    pub fn label(&self) -> String {
        format!("{}_{:02}", self.family, self.slot)
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.families.is_empty() {
            return bad("at least one family is required");
        }
        if self.families.iter().collect::<HashSet<_>>().len() != self.families.len() {
            return bad("families must be distinct");
        }
        if self.database_species == 0 || self.auxiliary_species == 0 || self.images_per_species == 0 {
            return bad("species and image counts must be at least 1");
        }
        if !(0.0..1.0).contains(&self.query_fraction) {
            return bad("query fraction must lie in [0, 1)");
        }
        if self.image_size < 8 {
            return bad("images must be at least 8 pixels wide");
        }
        Ok(())
    }

    /// Queries drawn from each database species.
    pub fn queries_per_species(&self) -> usize {
        let n = self.images_per_species;
        ((self.query_fraction * n as f64).round() as usize).min(n - 1)
    }

    /// All species of all families. Auxiliary slots are spread evenly over
    /// the parameter axis with database slots in between.
    pub fn species(&self) -> Vec<SpeciesSpec> {
        let total = self.database_species + self.auxiliary_species;
        let aux_slots: HashSet<usize> = (0..self.auxiliary_species)
            .map(|i| {
                if self.auxiliary_species == 1 {
                    0
                } else {
                    (i * (total - 1) + (self.auxiliary_species - 1) / 2) / (self.auxiliary_species - 1)
                }
            })
            .collect();
        let mut out = Vec::new();
        for &family in &self.families {
            for slot in 0..total {
                out.push(SpeciesSpec {
                    family,
                    slot,
                    param: if total == 1 { 0.5 } else { slot as f64 / (total - 1) as f64 },
                    auxiliary: aux_slots.contains(&slot),
                });
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Role {
    Auxiliary,
    Database,
    Query,
    Distractor,
}

impl Role {
    pub fn as_str(self) -> &'static str {
        match self {
            Role::Auxiliary => "auxiliary",
            Role::Database => "database",
            Role::Query => "query",
            Role::Distractor => "distractor",
        }
    }

    /// Whether images with this role are indexed for search.
    pub fn is_searchable(self) -> bool {
        matches!(self, Role::Database | Role::Distractor)
    }
}

impl FromStr for Role {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "auxiliary" => Ok(Role::Auxiliary),
            "database" => Ok(Role::Database),
            "query" => Ok(Role::Query),
            "distractor" => Ok(Role::Distractor),
            other => Err(format!("unknown role {other:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Record {
    pub id: String,
    /// Relative to the dataset directory.
    pub path: String,
    pub coarse: String,
    pub fine: String,
    pub role: Role,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct DatasetManifest {
    pub records: Vec<Record>,
}

impl DatasetManifest {
    pub fn with_role(&self, role: Role) -> impl Iterator<Item = &Record> {
        self.records.iter().filter(move |r| r.role == role)
    }

    /// Checks label invariants that span records.
    pub fn validate(&self) -> Result<()> {
        let mut ids = HashSet::new();
        for r in &self.records {
            if !ids.insert(r.id.as_str()) {
                return Err(Error::Data(format!("duplicate id {}", r.id)));
            }
            if r.role != Role::Distractor && (r.coarse == DISTRACTOR_COARSE || r.fine == DISTRACTOR_FINE) {
                return Err(Error::Data(format!("record {} lacks species labels", r.id)));
            }
        }
        let aux: HashSet<&str> = self.with_role(Role::Auxiliary).map(|r| r.fine.as_str()).collect();
        if let Some(r) = self
            .records
            .iter()
            .find(|r| matches!(r.role, Role::Database | Role::Query) && aux.contains(r.fine.as_str()))
        {
            return Err(Error::Data(format!(
                "record {} reuses auxiliary species {}",
                r.id, r.fine
            )));
        }
        Ok(())
    }

    pub fn to_tsv(&self) -> String {
        let mut s = String::from(MANIFEST_HEADER);
        s.push('\n');
        for r in &self.records {
            s += &format!("{}\t{}\t{}\t{}\t{}\n", r.id, r.path, r.coarse, r.fine, r.role.as_str());
        }
        s
    }

    /// Parses manifest text; errors name the offending 1-based line.
    pub fn parse(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        match lines.next() {
            Some(MANIFEST_HEADER) => {}
            other => {
                return Err(Error::Parse {
                    line: 1,
                    message: format!("expected header {MANIFEST_HEADER:?}, found {:?}", other.unwrap_or("")),
                })
            }
        }
        let mut records = Vec::new();
        let mut seen = HashSet::new();
        for (i, line) in lines.enumerate() {
            let line_no = i + 2;
            let err = |message: String| Error::Parse { line: line_no, message };
            let fields: Vec<&str> = line.split('\t').collect();
            if fields.len() != 5 {
                return Err(err(format!("expected 5 tab-separated fields, found {}", fields.len())));
            }
            if let Some(pos) = fields.iter().position(|f| f.is_empty()) {
                return Err(err(format!("field {} is empty", pos + 1)));
            }
            let role = fields[4].parse::<Role>().map_err(err)?;
            if !seen.insert(fields[0]) {
                return Err(err(format!("duplicate id {}", fields[0])));
            }
            records.push(Record {
                id: fields[0].into(),
                path: fields[1].into(),
                coarse: fields[2].into(),
                fine: fields[3].into(),
                role,
            });
        }
        Ok(Self { records })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_tsv()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let manifest = Self::parse(&text)?;
        manifest.validate()?;
        Ok(manifest)
    }

    /// Loads a record's image relative to `root`.
    pub fn load_image(root: &Path, record: &Record) -> Result<Tensor> {
        pgm::read(&root.join(&record.path))
    }
}

/// Per-image nuisance draws.
struct Pose {
    cx: f64,
    cy: f64,
    radius: f64,
    angle: f64,
    phase: f64,
    contrast: f64,
    background: f64,
}

fn draw_pose(rng: &mut ChaCha8Rng, size: f64) -> Pose {
    Pose {
        cx: size / 2.0 + rng.gen_range(-0.12..0.12) * size,
        cy: size / 2.0 + rng.gen_range(-0.12..0.12) * size,
        radius: rng.gen_range(0.20..0.40) * size,
        angle: rng.gen_range(0.0..PI),
        phase: rng.gen_range(0.0..2.0 * PI),
        contrast: rng.gen_range(0.30..0.45),
        background: rng.gen_range(0.35..0.60),
    }
}

/// Grating cycles across the disc diameter.
fn cycles_per_diameter(param: f64) -> f64 {
    2.5 + 4.0 * param
}

const NOISE_SIGMA: f64 = 0.05;

fn render(species: &SpeciesSpec, size: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let s = size as f64;
    let pose = draw_pose(rng, s);
    let (sin, cos) = pose.angle.sin_cos();
    let spots: Vec<(f64, f64)> = match species.family {
        Family::Blobs => {
            let n = rng.gen_range(6..10);
            (0..n)
                .map(|_| {
                    let r = pose.radius * rng.gen_range(0.0f64..0.8).sqrt();
                    let a = rng.gen_range(0.0..2.0 * PI);
                    (pose.cx + r * a.cos(), pose.cy + r * a.sin())
                })
                .collect()
        }
        _ => Vec::new(),
    };
    let sigma = (0.05 + 0.12 * species.param) * pose.radius;
    let f = cycles_per_diameter(species.param) / (2.0 * pose.radius);
    let noise = Normal::new(0.0, NOISE_SIGMA).expect("valid sigma");
    let mut data = Vec::with_capacity(size * size);
    for y in 0..size {
        for x in 0..size {
            let (dx, dy) = (x as f64 + 0.5 - pose.cx, y as f64 + 0.5 - pose.cy);
            let r = (dx * dx + dy * dy).sqrt();
            // soft-edged disc
            let inside = ((pose.radius - r) / 2.0 + 0.5).clamp(0.0, 1.0);
            let pattern = match species.family {
                Family::Stripes => (2.0 * PI * f * (dx * cos + dy * sin) + pose.phase).cos(),
                Family::Checks => {
                    let u = 2.0 * PI * f * (dx * cos + dy * sin) + pose.phase;
                    let v = 2.0 * PI * f * (dy * cos - dx * sin);
                    u.cos() * v.cos()
                }
                Family::Blobs => {
                    let v: f64 = spots
                        .iter()
                        .map(|&(bx, by)| {
                            let d2 = (x as f64 + 0.5 - bx).powi(2) + (y as f64 + 0.5 - by).powi(2);
                            (-d2 / (2.0 * sigma * sigma)).exp()
                        })
                        .sum();
                    2.0 * v.min(1.0) - 1.0
                }
            };
            let v = pose.background + inside * pose.contrast * pattern + noise.sample(rng);
            data.push(quantize(v));
        }
    }
    Tensor::new(vec![1, size, size], data).expect("shape matches")
}

fn render_distractor(size: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let mean = rng.gen_range(0.3..0.7);
    let spread = Normal::new(0.0, rng.gen_range(0.05..0.2)).expect("valid sigma");
    let data = (0..size * size).map(|_| quantize(mean + spread.sample(rng))).collect();
    Tensor::new(vec![1, size, size], data).expect("shape matches")
}

/// Snaps to the 8-bit grid so stored and in-memory images agree exactly.
fn quantize(v: f64) -> f64 {
    (v.clamp(0.0, 1.0) * 255.0).round() / 255.0
}

/// A generated image before it is written.
pub struct Generated {
    pub record: Record,
    pub image: Tensor,
}

/// Renders the whole benchmark in memory, in manifest order.
pub fn generate(spec: &SynthSpec) -> Result<Vec<Generated>> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut out = Vec::new();
    let mut next_id = 0usize;
    let mut push = |out: &mut Vec<Generated>, coarse: String, fine: String, role: Role, image: Tensor| {
        let id = format!("{next_id:06}");
        next_id += 1;
        out.push(Generated {
            record: Record {
                path: format!("images/{id}.pgm"),
                id,
                coarse,
                fine,
                role,
            },
            image,
        });
    };
    let queries = spec.queries_per_species();
    for species in spec.species() {
        for i in 0..spec.images_per_species {
            let role = match (species.auxiliary, i < queries) {
                (true, _) => Role::Auxiliary,
                (false, true) => Role::Query,
                (false, false) => Role::Database,
            };
            let image = render(&species, spec.image_size, &mut rng);
            push(&mut out, species.family.name().into(), species.label(), role, image);
        }
    }
    for _ in 0..spec.distractors {
        let image = render_distractor(spec.image_size, &mut rng);
        push(
            &mut out,
            DISTRACTOR_COARSE.into(),
            DISTRACTOR_FINE.into(),
            Role::Distractor,
            image,
        );
    }
    Ok(out)
}

/// Writes the benchmark images and `manifest.tsv` under `out_dir`.
pub fn generate_dataset(spec: &SynthSpec, out_dir: &Path) -> Result<DatasetManifest> {
    let generated = generate(spec)?;
    let images = out_dir.join("images");
    fs::create_dir_all(&images).map_err(|e| Error::io(&images, e))?;
    for g in &generated {
        pgm::write(&g.image, &out_dir.join(&g.record.path))?;
    }
    let manifest = DatasetManifest {
        records: generated.into_iter().map(|g| g.record).collect(),
    };
    manifest.write(&out_dir.join(MANIFEST_FILE))?;
    Ok(manifest)
}

/// Fine label to coarse label for every non-distractor record.
pub fn species_families(manifest: &DatasetManifest) -> HashMap<&str, &str> {
    manifest
        .records
        .iter()
        .filter(|r| r.role != Role::Distractor)
        .map(|r| (r.fine.as_str(), r.coarse.as_str()))
        .collect()
}

pub fn manifest_path(dir: &Path) -> PathBuf {
    dir.join(MANIFEST_FILE)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SynthSpec {
        SynthSpec {
            database_species: 2,
            auxiliary_species: 2,
            images_per_species: 5,
            query_fraction: 0.2,
            distractors: 3,
            image_size: 16,
            seed: 9,
            ..SynthSpec::default()
        }
    }

    #[test]
    fn default_slots_interleave() {
        let aux: Vec<usize> = SynthSpec::default()
            .species()
            .iter()
            .filter(|s| s.family == Family::Stripes && s.auxiliary)
            .map(|s| s.slot)
            .collect();
        assert_eq!(aux, [0, 3, 6, 9]);
    }

    #[test]
    fn counts_match_spec() {
        let spec = small();
        let g = generate(&spec).unwrap();
        let count = |role| g.iter().filter(|x| x.record.role == role).count();
        assert_eq!(count(Role::Auxiliary), 3 * 2 * 5);
        assert_eq!(count(Role::Query), 3 * 2);
        assert_eq!(count(Role::Database), 3 * 2 * 4);
        assert_eq!(count(Role::Distractor), 3);
    }

    #[test]
    fn manifest_round_trip_and_errors() {
        let spec = small();
        let m = DatasetManifest {
            records: generate(&spec).unwrap().into_iter().map(|g| g.record).collect(),
        };
        m.validate().unwrap();
        assert_eq!(DatasetManifest::parse(&m.to_tsv()).unwrap(), m);
        let empty = DatasetManifest::parse(&format!("{MANIFEST_HEADER}\n")).unwrap();
        assert!(empty.records.is_empty());
        let bad = format!("{MANIFEST_HEADER}\n000001\timages/a.pgm\tstripes\tquery\n");
        assert!(matches!(DatasetManifest::parse(&bad), Err(Error::Parse { line: 2, .. })));
    }
}
