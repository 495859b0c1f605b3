use std::collections::BTreeSet;

use dpenet_core::analysis::{
    check_gridding, count_params, estimate_flops, receptive_field, reachable_offsets, FlopConvention, GraphSpec,
    Gridding,
};
use dpenet_core::blocks::ConvSpec;
use dpenet_core::networks::{init_params, Architecture, NetworkConfig};
use proptest::prelude::*;

/// Brute-force enumeration of every path through the stack.
fn brute_offsets(dilations: &[usize], kernel: usize) -> BTreeSet<i64> {
    let half = (kernel / 2) as i64;
    let taps = 2 * half + 1;
    let n = dilations.len() as u32;
    (0..taps.pow(n))
        .map(|mut code| {
            let mut off = 0;
            for &d in dilations {
                off += (code % taps - half) * d as i64;
                code /= taps;
            }
            off
        })
        .collect()
}

#[test]
fn drb_and_ddrb_receptive_fields() {
    let drb = GraphSpec::dilated_stack(32, 3, &[1; 6]).unwrap();
    assert_eq!(receptive_field(&drb).unwrap(), vec![3, 5, 7, 9, 11, 13]);
    let ddrb = GraphSpec::dilated_stack(32, 3, &[1, 1, 2, 2, 5, 5]).unwrap();
    assert_eq!(receptive_field(&ddrb).unwrap(), vec![3, 5, 9, 13, 23, 33]);
}

#[test]
fn gridding_matches_brute_force() {
    let ok = check_gridding(&[1, 1, 2, 2, 5, 5], 3);
    assert_eq!(ok, Gridding::Ok { reach: 16 });
    assert_eq!(reachable_offsets(&[1, 1, 2, 2, 5, 5], 3), brute_offsets(&[1, 1, 2, 2, 5, 5], 3));

    let bad = check_gridding(&[2, 2, 2], 3);
    let brute = brute_offsets(&[2, 2, 2], 3);
    let expected_holes: Vec<i64> = (-6..=6).filter(|o| !brute.contains(o)).collect();
    assert_eq!(expected_holes, vec![-5, -3, -1, 1, 3, 5]);
    assert_eq!(bad, Gridding::Holes { reach: 6, holes: expected_holes });
}

#[test]
fn published_parameter_counts_within_two_percent() {
    let table = [
        (15, 3, 924_000.0),
        (15, 1, 861_000.0),
        (10, 3, 647_000.0),
        (10, 1, 585_000.0),
        (5, 3, 371_000.0),
        (5, 1, 308_000.0),
    ];
    for (lambda, mu, published) in table {
        let cfg = NetworkConfig::new(lambda, mu, 32);
        let n = count_params(&cfg);
        let rel = (n as f64 - published) / published;
        assert!(rel.abs() <= 0.02, "lambda={lambda} mu={mu}: {n} vs {published} ({rel:+.4})");
        assert_eq!(n, init_params::<f32>(&cfg, 7).scalar_count());
    }
}

#[test]
fn io_only_network_closed_form() {
    // Two stages, each a 3->32 head and a 32->3 tail, all 3x3 with bias.
    let per_stage = (9 * 3 * 32 + 32) + (9 * 32 * 3 + 3);
    assert_eq!(count_params(&NetworkConfig::new(0, 0, 32)), 2 * per_stage);
}

#[test]
fn default_flops_near_published() {
    let r = estimate_flops(&NetworkConfig::default(), 256, 256, FlopConvention::MacAsOne).unwrap();
    let rel = (r.conv_flops as f64 - 42.43e9) / 42.43e9;
    assert!(rel.abs() <= 0.10, "{} ({rel:+.4})", r.conv_flops);
}

#[test]
fn single_conv_two_ops_per_mac() {
    let g = GraphSpec::serial(32, &[ConvSpec::new(3, 1, 32, 32)]).unwrap();
    let r = dpenet_core::analysis::flop_report(&g, 4, 4, FlopConvention::TwoPerMac);
    assert_eq!(r.conv_flops, 2 * 9 * 32 * 32 * 16);
    assert_eq!(r.bias_adds, 32 * 16);
}

#[test]
fn every_architecture_counts_exactly() {
    for arch in Architecture::ALL {
        let cfg = NetworkConfig { architecture: arch, ..NetworkConfig::new(3, 2, 8) };
        assert_eq!(count_params(&cfg), init_params::<f64>(&cfg, 1).scalar_count(), "{arch:?}");
    }
}

proptest! {
    #[test]
    fn receptive_field_is_monotone(dils in prop::collection::vec(1usize..6, 1..8)) {
        let g = GraphSpec::dilated_stack(4, 3, &dils).unwrap();
        let rf = receptive_field(&g).unwrap();
        prop_assert!(rf.windows(2).all(|w| w[0] <= w[1]));
    }

    #[test]
    fn single_layer_offset_set(d in 1usize..10, half in 0usize..4) {
        let k = 2 * half + 1;
        let expected: BTreeSet<i64> = (-(half as i64)..=half as i64).map(|t| t * d as i64).collect();
        prop_assert_eq!(reachable_offsets(&[d], k), expected);
    }

    #[test]
    fn flops_linear_in_pixels_and_lambda(h in 1usize..64, w in 1usize..64, lambda in 1usize..6, mu in 1usize..4) {
        let f = |l: usize, h: usize| estimate_flops(&NetworkConfig::new(l, mu, 8), h, w, FlopConvention::TwoPerMac)
            .unwrap().conv_flops;
        prop_assert_eq!(f(lambda, 2 * h), 2 * f(lambda, h));
        prop_assert_eq!(f(lambda + 1, h) - f(lambda, h), f(lambda + 2, h) - f(lambda + 1, h));
    }

    #[test]
    fn gridding_agrees_with_brute_force(dils in prop::collection::vec(1usize..5, 1..5)) {
        let brute = brute_offsets(&dils, 3);
        let reach = *brute.last().unwrap();
        let contiguous = (-reach..=reach).all(|o| brute.contains(&o));
        prop_assert_eq!(check_gridding(&dils, 3).is_ok(), contiguous);
    }
}
