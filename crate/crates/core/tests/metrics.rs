mod common;

use common::oracle;

use std::collections::HashSet;

use finegrain::eval::{average_precision, histogram_from_stds, mean_average_precision, QueryAp};
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::Rng;

fn ap(ranked: &[String], relevant: &HashSet<String>) -> Option<f64> {
    average_precision(ranked.iter().map(String::as_str), relevant)
}

#[test]
fn ap_matches_the_definition() {
    let mut r = common::rng(51);
    for _ in 0..200 {
        let (ranked, relevant) = oracle::random_ap_case(&mut r);
        assert_eq!(ap(&ranked, &relevant), oracle::average_precision(&ranked, &relevant));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn tail_order_of_non_relevant_items_is_irrelevant(seed in any::<u64>()) {
        let mut r = common::rng(seed);
        let (mut ranked, relevant) = oracle::random_ap_case(&mut r);
        let before = ap(&ranked, &relevant);
        let last = ranked.iter().rposition(|id| relevant.contains(id)).map_or(0, |p| p + 1);
        ranked[last..].shuffle(&mut r);
        prop_assert_eq!(ap(&ranked, &relevant), before);
    }

    #[test]
    fn promoting_a_relevant_item_raises_ap(seed in any::<u64>()) {
        let mut r = common::rng(seed);
        let (mut ranked, relevant) = oracle::random_ap_case(&mut r);
        let swaps: Vec<usize> = (1..ranked.len())
            .filter(|&i| relevant.contains(&ranked[i]) && !relevant.contains(&ranked[i - 1]))
            .collect();
        prop_assume!(!swaps.is_empty());
        let i = swaps[r.gen_range(0..swaps.len())];
        let before = oracle::average_precision(&ranked, &relevant).unwrap();
        ranked.swap(i - 1, i);
        let after = ap(&ranked, &relevant).unwrap();
        prop_assert!(after > before);
        prop_assert_eq!(Some(after), oracle::average_precision(&ranked, &relevant));
    }

    #[test]
    fn map_lies_in_unit_interval(seed in any::<u64>(), queries in 1usize..20) {
        let mut r = common::rng(seed);
        let aps: Vec<QueryAp> = (0..queries)
            .map(|i| {
                let (ranked, relevant) = oracle::random_ap_case(&mut r);
                QueryAp { query_id: format!("q{i}"), ap: ap(&ranked, &relevant), relevant: relevant.len() }
            })
            .collect();
        if aps.iter().all(|q| q.ap.is_none()) {
            prop_assert!(mean_average_precision(&aps).is_err());
            return Ok(());
        }
        let s = mean_average_precision(&aps).unwrap();
        prop_assert!((0.0..=1.0).contains(&s.map));
        prop_assert_eq!(s.included + s.excluded, queries);
    }

    #[test]
    fn histogram_conserves_counts(
        conv in prop::collection::vec(0.0f64..10.0, 0..50),
        norm in prop::collection::vec(0.0f64..10.0, 0..50),
        bins in 1usize..30,
    ) {
        let h = histogram_from_stds(&conv, &norm, bins).unwrap();
        prop_assert_eq!(h.conv_counts.iter().sum::<usize>(), conv.len());
        prop_assert_eq!(h.norm_counts.iter().sum::<usize>(), norm.len());
        prop_assert_eq!(h.edges.len(), bins);
    }
}
