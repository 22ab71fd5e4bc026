//! Library results against straightforward reference implementations.

#[path = "common/oracles.rs"]
#[allow(dead_code)]
mod oracles;

use bgmatte_core::metrics::{make_trimap, make_trimap_with, metric_conn, metric_grad, metric_sad_mse, Label, Trimap, TrimapMorphology};
use bgmatte_core::refiner::{select_patches, Selection};
use bgmatte_core::Tensor4;
use oracles::*;
use proptest::prelude::*;

fn grid_strategy() -> impl Strategy<Value = Tensor4> {
    (1usize..4, 1usize..6, 1usize..6).prop_flat_map(|(n, h, w)| {
        // few distinct levels so ties are common
        prop::collection::vec(0u8..6, n * h * w)
            .prop_map(move |v| Tensor4::from_vec(n, 1, h, w, v.iter().map(|&x| x as f64 / 5.0).collect()).unwrap())
    })
}

proptest! {
    #[test]
    fn top_k_matches_full_sort(e in grid_strategy(), k in 0usize..80) {
        prop_assert_eq!(select_patches(&e, Selection::TopK(k)).entries, brute_select(&e, Selection::TopK(k)));
    }

    #[test]
    fn threshold_matches_filter(e in grid_strategy(), t in 0u8..6) {
        let t = t as f64 / 5.0;
        prop_assert_eq!(select_patches(&e, Selection::Threshold(t)).entries, brute_select(&e, Selection::Threshold(t)));
    }
}

#[test]
fn sad_and_mse_match_loops_exactly() {
    for (k, &(h, w)) in SHAPES.iter().enumerate() {
        let (p, t, tri) = instance(h, w, k as u64);
        assert_eq!(metric_sad_mse(&p, &t, &tri).unwrap(), oracle_sad_mse(&p, &t, &tri));
    }
}

#[test]
fn grad_matches_reference_convolution() {
    for (k, &(h, w)) in SHAPES.iter().enumerate() {
        let (p, t, tri) = instance(h, w, 10 + k as u64);
        let got = metric_grad(&p, &t, &tri, 1.4, 2.0).unwrap();
        let want = oracle_grad(&p, &t, &tri, 1.4, 2.0);
        assert!((got - want).abs() <= 1e-5 * want.abs().max(1e-12), "{got} vs {want}");
    }
}

#[test]
fn grad_of_horizontal_ramp_is_direction_invariant() {
    // a ramp and its transpose give the same score on transposed trimaps
    let (h, w) = (20, 20);
    let p = matte(h, w, |_, x| x as f64 / 19.0);
    let pt = matte(h, w, |y, _| y as f64 / 19.0);
    let zero = matte(h, w, |_, _| 0.0);
    let tri = Trimap::new(h, w, vec![Label::Unknown; h * w]).unwrap();
    let a = metric_grad(&p, &zero, &tri, 1.4, 2.0).unwrap();
    let b = metric_grad(&pt, &zero, &tri, 1.4, 2.0).unwrap();
    assert!((a - b).abs() < 1e-12 && a > 0.0);
}

#[test]
fn conn_matches_flood_fill_reference() {
    for (k, &(h, w)) in SHAPES.iter().enumerate() {
        let (p, t, tri) = instance(h, w, 20 + k as u64);
        assert_eq!(metric_conn(&p, &t, &tri, 0.1, 0.15).unwrap(), oracle_conn(&p, &t, &tri, 0.1, 0.15));
    }
    // two equal components: the one starting further left wins
    let two = matte(6, 9, |y, x| if (1..5).contains(&y) && (x == 1 || x == 2 || x == 6 || x == 7) { 0.9 } else { 0.0 });
    let tri = Trimap::new(6, 9, vec![Label::Unknown; 54]).unwrap();
    let shifted = matte(6, 9, |y, x| two.get(0, y, x) * if x > 4 { 0.5 } else { 1.0 });
    assert_eq!(
        metric_conn(&shifted, &two, &tri, 0.1, 0.15).unwrap(),
        oracle_conn(&shifted, &two, &tri, 0.1, 0.15)
    );
}

#[test]
fn trimap_on_disk_has_band_of_width_ten() {
    let a = disk(80, 80, 25.0);
    let tri = make_trimap(&a, 0.0, 1.0, 5);
    assert_eq!(tri.labels(), reference_trimap(&a, 5).as_slice());
    // along the centre row and column the band is ten pixels on each side
    assert_eq!(unknown_runs(&tri, 40, 40), [vec![10, 10], vec![10, 10]]);
}

#[test]
fn close_band_variant_covers_soft_edge() {
    let soft = matte(40, 40, |_, x| ((x as f64 - 18.0) / 4.0).clamp(0.0, 1.0));
    let tri = make_trimap_with(&soft, 0.0, 1.0, 2, TrimapMorphology::CloseBand);
    for y in 0..40 {
        for x in 0..40 {
            let a = soft.get(0, y, x);
            if a > 0.0 && a < 1.0 {
                assert_eq!(tri.get(y, x), Label::Unknown);
            }
        }
    }
}
