use std::collections::{HashMap, HashSet};

use finegrain::synth::{generate, generate_dataset, DatasetManifest, Family, Record, Role, SynthSpec};
use proptest::prelude::*;

fn small(seed: u64) -> SynthSpec {
    SynthSpec {
        database_species: 3,
        auxiliary_species: 2,
        images_per_species: 6,
        distractors: 4,
        image_size: 16,
        seed,
        ..SynthSpec::default()
    }
}

#[test]
fn species_parameters_are_disjoint_within_a_family() {
    let spec = SynthSpec::default();
    let species = spec.species();
    for family in Family::ALL {
        let params: Vec<f64> = species.iter().filter(|s| s.family == family).map(|s| s.param).collect();
        assert_eq!(params.len(), 10);
        let distinct: HashSet<u64> = params.iter().map(|p| p.to_bits()).collect();
        assert_eq!(distinct.len(), params.len());
        let aux = species.iter().filter(|s| s.family == family && s.auxiliary).count();
        assert_eq!(aux, 4);
    }
    let labels: HashSet<String> = species.iter().map(|s| s.label()).collect();
    assert_eq!(labels.len(), species.len());
}

#[test]
fn images_of_one_species_differ() {
    let data = generate(&small(3)).unwrap();
    let mut seen: HashMap<&str, Vec<&finegrain::Tensor>> = HashMap::new();
    for g in &data {
        if g.record.role != Role::Distractor {
            seen.entry(g.record.fine.as_str()).or_default().push(&g.image);
        }
    }
    for images in seen.values() {
        for pair in images.windows(2) {
            assert_ne!(pair[0], pair[1]);
        }
    }
}

#[test]
fn generation_is_a_pure_function_of_the_spec() {
    let a = generate(&small(9)).unwrap();
    let b = generate(&small(9)).unwrap();
    let c = generate(&small(10)).unwrap();
    assert!(a.iter().zip(&b).all(|(x, y)| x.record == y.record && x.image == y.image));
    assert!(a.iter().zip(&c).any(|(x, y)| x.image != y.image));
}

#[test]
fn default_counts() {
    let spec = SynthSpec::default();
    let data = generate(&spec).unwrap();
    let count = |role| data.iter().filter(|g| g.record.role == role).count();
    assert_eq!(count(Role::Auxiliary), 3 * 4 * 40);
    assert_eq!(count(Role::Query), 3 * 6 * 4);
    assert_eq!(count(Role::Database), 3 * 6 * 36);
    assert_eq!(count(Role::Distractor), 200);
}

#[test]
fn written_dataset_reads_back_identically() {
    let dir = tempfile::tempdir().unwrap();
    let spec = small(4);
    let manifest = generate_dataset(&spec, dir.path()).unwrap();
    let data = generate(&spec).unwrap();
    let read = DatasetManifest::read(&finegrain::synth::manifest_path(dir.path())).unwrap();
    assert_eq!(read, manifest);
    for (g, r) in data.iter().zip(&read.records) {
        assert_eq!(&DatasetManifest::load_image(dir.path(), r).unwrap(), &g.image);
    }
}

#[test]
fn manifest_rejects_bad_rows() {
    let header = "id\tpath\tcoarse\tfine\trole\n";
    assert!(DatasetManifest::parse("wrong\n").is_err());
    assert!(DatasetManifest::parse(&format!("{header}a\tp\tc\tf\n")).is_err());
    assert!(DatasetManifest::parse(&format!("{header}a\tp\tc\tf\tboss\n")).is_err());
    let dup = format!("{header}a\tp\tc\tf\tdatabase\na\tq\tc\tf\tdatabase\n");
    assert!(DatasetManifest::parse(&dup).and_then(|m| m.validate()).is_err());
}

fn role() -> impl Strategy<Value = Role> {
    prop_oneof![Just(Role::Auxiliary), Just(Role::Database), Just(Role::Query), Just(Role::Distractor)]
}

proptest! {
    #[test]
    fn manifest_tsv_round_trips(rows in prop::collection::vec(("[a-z0-9]{1,8}", "[a-z_]{1,6}", "[a-z_]{1,6}", role()), 0..20)) {
        let records: Vec<Record> = rows
            .iter()
            .enumerate()
            .map(|(i, (id, coarse, fine, role))| Record {
                id: format!("{id}{i}"),
                path: format!("images/{id}{i}.pgm"),
                coarse: coarse.clone(),
                fine: fine.clone(),
                role: *role,
            })
            .collect();
        let m = DatasetManifest { records };
        prop_assert_eq!(DatasetManifest::parse(&m.to_tsv()).unwrap(), m);
    }
}
