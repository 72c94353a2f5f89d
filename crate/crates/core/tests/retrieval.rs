mod common;

use std::collections::BTreeSet;

use common::oracle::{bits, brute_force, distance};
use common::{random_index, rng, tensor, tiny_models, unit_vector};
use finegrain::engine::{EngineIndex, RankedList, RetrievalConfig, Stages};
use finegrain::features::{l2_normalize, FeatureStore};
use proptest::prelude::*;
use rand::Rng;

#[test]
fn rankings_match_brute_force() {
    let mut r = rng(31);
    for case in 0..100 {
        let n = r.gen_range(1..60);
        let index = random_index(case, n, 4, 3, case % 2 == 0);
        let q = unit_vector(&mut r, 4);
        let k = r.gen_range(1..=n);
        let coarse = index.coarse_query(&q, k).unwrap();
        let mut expected = brute_force(index.coarse_store().iter(), &q);
        expected.truncate(k);
        assert_eq!(bits(coarse.entries()), bits(&expected));

        let qf = unit_vector(&mut r, 6);
        let fine = index.fine_rerank(coarse.ids(), &qf).unwrap();
        let block: BTreeSet<&str> = coarse.ids().collect();
        let expected = brute_force(index.fine_store().iter().filter(|(id, _)| block.contains(id)), &qf);
        assert_eq!(bits(fine.entries()), bits(&expected));
    }
}

#[test]
fn exact_match_ranks_first() {
    let index = random_index(5, 40, 4, 3, false);
    let id = index.coarse_store().ids()[17].clone();
    let q = index.coarse_store().get(&id).unwrap().to_vec();
    let top = index.coarse_query(&q, 5).unwrap();
    assert_eq!(top.first().unwrap(), &(id.clone(), 0.0));
    let f = index.fine_store().get(&id).unwrap().to_vec();
    let reranked = index.fine_rerank(top.ids(), &f).unwrap();
    assert_eq!(reranked.first().unwrap().0, id);
    // with one expansion neighbour the descriptor is the top hit itself
    assert_eq!(index.query_expand(&reranked, 1).unwrap().first().unwrap().0, id);
}

#[test]
fn expansion_averages_then_normalizes() {
    let models = tiny_models(3, 2, 1, 2);
    let mut coarse = FeatureStore::new(2);
    let mut fine = FeatureStore::new(2);
    let rows = [("a", [1.0, 0.0]), ("b", [0.0, 1.0]), ("c", [0.6, -0.8])];
    for (id, row) in rows {
        coarse.push(id, &[1.0, 0.0]).unwrap();
        fine.push(id, &row).unwrap();
    }
    let index = EngineIndex::from_parts(RetrievalConfig::default(), models, coarse, fine).unwrap();
    let first = index.fine_rerank(["a", "b", "c"], &[0.9, 0.9]).unwrap();
    assert_eq!(first.ids().take(2).collect::<Vec<_>>(), ["a", "b"]);
    let expanded = index.query_expand(&first, 2).unwrap();
    let d = [std::f64::consts::FRAC_1_SQRT_2; 2];
    for (id, dist) in expanded.entries() {
        let row = index.fine_store().get(id).unwrap();
        assert!((dist - distance(row, &d)).abs() < 1e-15);
    }
    assert!(index.query_expand(&RankedList::default(), 2).unwrap().is_empty());
}

#[test]
fn full_query_keeps_the_tail_in_coarse_order() {
    let mut index = random_index(8, 30, 4, 3, true);
    index.config.top_k = Some(7);
    index.config.qe_k = 3;
    let image = tensor(&mut rng(2), &[1, 12, 12], 0.0, 1.0);
    for stages in Stages::ALL {
        let out = index.full_query(&image, stages).unwrap();
        let d = out.description.as_ref().map(|d| d.coarse.clone());
        let q = match d {
            Some(q) => q,
            None => index.models.coarse_descriptor(&image).unwrap().0,
        };
        let coarse = index.coarse_query(&q, index.len()).unwrap();
        let ids = out.full_ids();
        assert_eq!(ids.len(), index.len());
        assert_eq!(out.ranked.len(), 7);
        let block: BTreeSet<&str> = coarse.ids().take(7).collect();
        assert_eq!(out.ranked.ids().collect::<BTreeSet<_>>(), block);
        assert_eq!(out.tail.ids().collect::<Vec<_>>(), coarse.ids().skip(7).collect::<Vec<_>>());
        assert_eq!(stages == Stages::Coarse, out.description.is_none());
    }
}

#[test]
fn unknown_ids_are_rejected() {
    let index = random_index(1, 5, 4, 3, false);
    assert!(index.fine_rerank(["nope"], &[0.0; 6]).is_err());
    assert!(index.coarse_query(&[0.0; 3], 2).is_err());
}

fn sorted(list: &RankedList) -> bool {
    list.entries()
        .windows(2)
        .all(|w| w[0].1 < w[1].1 || (w[0].1 == w[1].1 && w[0].0 < w[1].0))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn stages_never_change_the_block(seed in any::<u64>(), n in 2usize..40, k in 1usize..40, qe in 1usize..8) {
        let index = random_index(seed, n, 4, 3, true);
        let mut r = rng(seed);
        let k = k.min(n);
        let coarse = index.coarse_query(&unit_vector(&mut r, 4), k).unwrap();
        let fine = index.fine_rerank(coarse.ids(), &unit_vector(&mut r, 6)).unwrap();
        let expanded = index.query_expand(&fine, qe).unwrap();
        let block: BTreeSet<&str> = coarse.ids().collect();
        for list in [&coarse, &fine, &expanded] {
            prop_assert_eq!(list.len(), k);
            prop_assert_eq!(list.ids().collect::<BTreeSet<_>>(), block.clone());
            prop_assert!(sorted(list));
        }
    }

    #[test]
    fn common_rescaling_keeps_the_order(seed in any::<u64>(), scale in 0.01f64..100.0) {
        let index = random_index(seed, 25, 4, 3, false);
        let mut r = rng(seed ^ 1);
        let q = unit_vector(&mut r, 6);
        let ids: Vec<&str> = index.fine_store().ids().iter().map(String::as_str).collect();
        let base = index.fine_rerank(ids.iter().copied(), &q).unwrap();

        let mut fine = FeatureStore::new(6);
        for (id, row) in index.fine_store().iter() {
            fine.push(id, &row.iter().map(|v| v * scale).collect::<Vec<_>>()).unwrap();
        }
        let scaled = EngineIndex::from_parts(index.config.clone(), index.models.clone(), index.coarse_store().clone(), fine).unwrap();
        let qs: Vec<f64> = q.iter().map(|v| v * scale).collect();
        let order = scaled.fine_rerank(ids.iter().copied(), &qs).unwrap();
        prop_assert_eq!(order.ids().collect::<Vec<_>>(), base.ids().collect::<Vec<_>>());

        // re-normalizing restores the original distances
        let mut renorm = FeatureStore::new(6);
        for (id, row) in scaled.fine_store().iter() {
            let (a, b) = row.split_at(3);
            let mut v = l2_normalize(a);
            v.extend(l2_normalize(b));
            renorm.push(id, &v).unwrap();
        }
        for (id, row) in renorm.iter() {
            let orig = index.fine_store().get(id).unwrap();
            prop_assert!(row.iter().zip(orig).all(|(a, b)| (a - b).abs() < 1e-12));
        }
    }
}
