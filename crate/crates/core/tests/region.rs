mod common;

use common::oracle;

use std::collections::BTreeSet;

use finegrain::region::{
    binarize, crop_region, dominant_region, extract_region, label_components, min_enclosing_rect, normalize_map,
    BinaryMask, Map2d,
};
use finegrain::Tensor;
use proptest::prelude::*;

#[test]
fn labelling_matches_flood_fill() {
    let mut r = common::rng(21);
    for _ in 0..500 {
        let mask = oracle::random_mask(&mut r, 16, 16);
        let comps = label_components(&mask);
        let ours: BTreeSet<BTreeSet<(usize, usize)>> = comps
            .regions
            .iter()
            .map(|reg| reg.pixels.iter().copied().collect())
            .collect();
        assert_eq!(ours, oracle::flood_fill(&mask));
        for reg in &comps.regions {
            for &(y, x) in &reg.pixels {
                assert_eq!(comps.labels[y * 16 + x], Some(reg.label));
            }
        }
    }
}

#[test]
fn crop_uses_outward_rounding() {
    let image = Tensor::new(vec![1, 10, 10], (0..100).map(|v| v as f64).collect()).unwrap();
    let mask = BinaryMask::new(3, 3, vec![false, false, false, false, true, false, false, false, false]).unwrap();
    let comps = label_components(&mask);
    let bbox = min_enclosing_rect(&comps.regions[0]).unwrap();
    let crop = crop_region(&image, &bbox, 3, 3).unwrap();
    // map cell 1 of 3 covers image pixels 3.33..6.67, widened to 3..=6
    assert_eq!(crop.shape(), &[1, 4, 4]);
    assert_eq!(crop.data()[0], 33.0);
}

#[test]
fn flat_map_falls_back_to_the_whole_image() {
    let image = Tensor::full(&[1, 6, 6], 0.5);
    let map = Map2d::new(3, 3, vec![0.0; 9]).unwrap();
    let res = extract_region(&image, &map, 0.5, 0.01).unwrap();
    assert!(!res.found);
    assert_eq!(res.crop, image);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn mask_is_scale_invariant(seed in any::<u64>(), scale in 1e-3f64..1e3, t in 0.05f64..0.95) {
        let mut r = common::rng(seed);
        let values = common::uniform(&mut r, 64, -0.2, 1.0);
        let map = Map2d::new(8, 8, values.clone()).unwrap();
        let scaled = Map2d::new(8, 8, values.iter().map(|v| v * scale).collect()).unwrap();
        prop_assume!(map.max() > 1e-6);
        let a = binarize(&normalize_map(&map).unwrap(), t).unwrap();
        let b = binarize(&normalize_map(&scaled).unwrap(), t).unwrap();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn boxes_enclose_their_regions(seed in any::<u64>(), w in 1usize..20, h in 1usize..20) {
        let mut r = common::rng(seed);
        let comps = label_components(&oracle::random_mask(&mut r, w, h));
        for reg in &comps.regions {
            let b = min_enclosing_rect(reg).unwrap();
            prop_assert!(reg.pixels.iter().all(|&(y, x)| b.contains(y, x)));
            // tight: every edge touches a pixel
            prop_assert!(reg.pixels.iter().any(|p| p.0 == b.row0) && reg.pixels.iter().any(|p| p.0 == b.row1));
            prop_assert!(reg.pixels.iter().any(|p| p.1 == b.col0) && reg.pixels.iter().any(|p| p.1 == b.col1));
        }
    }

    #[test]
    fn dominant_region_is_largest_survivor(seed in any::<u64>(), frac in 0.0f64..0.2) {
        let mut r = common::rng(seed);
        let comps = label_components(&oracle::random_mask(&mut r, 12, 12));
        let cutoff = frac * 144.0;
        match dominant_region(&comps, frac) {
            Ok(best) => {
                prop_assert!(best.size() as f64 >= cutoff);
                for reg in comps.regions.iter().filter(|reg| reg.size() as f64 >= cutoff) {
                    prop_assert!(best.size() >= reg.size());
                }
            }
            Err(_) => prop_assert!(comps.regions.iter().all(|reg| (reg.size() as f64) < cutoff)),
        }
    }

    #[test]
    fn mirroring_preserves_components(seed in any::<u64>(), w in 1usize..16, h in 1usize..16) {
        let mut r = common::rng(seed);
        let mask = oracle::random_mask(&mut r, w, h);
        let flipped = BinaryMask::new(
            w,
            h,
            (0..h).flat_map(|y| (0..w).map(move |x| (y, x))).map(|(y, x)| mask.get(y, w - 1 - x)).collect(),
        )
        .unwrap();
        let a = label_components(&mask);
        let b = label_components(&flipped);
        let mirrored: BTreeSet<BTreeSet<(usize, usize)>> = a
            .regions
            .iter()
            .map(|reg| reg.pixels.iter().map(|&(y, x)| (y, w - 1 - x)).collect())
            .collect();
        let direct: BTreeSet<BTreeSet<(usize, usize)>> =
            b.regions.iter().map(|reg| reg.pixels.iter().copied().collect()).collect();
        prop_assert_eq!(mirrored, direct);
        let mut sa: Vec<usize> = a.regions.iter().map(|r| r.size()).collect();
        let mut sb: Vec<usize> = b.regions.iter().map(|r| r.size()).collect();
        sa.sort_unstable();
        sb.sort_unstable();
        prop_assert_eq!(sa, sb);
    }

    #[test]
    fn normalized_maps_lie_in_unit_interval(seed in any::<u64>()) {
        let mut r = common::rng(seed);
        let map = Map2d::new(5, 7, common::uniform(&mut r, 35, -1.0, 1.0)).unwrap();
        prop_assume!(map.max() > 1e-6);
        let conf = normalize_map(&map).unwrap();
        prop_assert!(conf.map().values.iter().all(|v| (0.0..=1.0).contains(v)));
        prop_assert!(conf.map().values.iter().any(|&v| v == 1.0));
    }
}
