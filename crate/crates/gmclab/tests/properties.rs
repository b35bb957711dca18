use std::sync::OnceLock;

use gmclab::brw_comparator::{dyadic_k, leaf_k, morton};
use gmclab::field_sampler::{GridField, GridSpec, ScaleLadder, SlabSampler};
use gmclab::gaussian_tools::{barrier_prob, barrier_upper_bounds, drifted_barrier_prob};
use gmclab::gmc_measure::TestFunction;
use gmclab::kernel_core::{classify_gamma, ComplexGamma, KernelSpec, Region};
use gmclab::qv_estimator::{barrier_scan_paths, CellQuadrature, PairMode, QvPlan};
use gmclab::rng::StreamKey;
use proptest::prelude::*;

fn small_field() -> &'static (GridSpec, GridField) {
    static FIELD: OnceLock<(GridSpec, GridField)> = OnceLock::new();
    FIELD.get_or_init(|| {
        let kernel = KernelSpec::default().build().unwrap();
        let grid = GridSpec::new(1, 128, 4.0).unwrap();
        let sampler = SlabSampler::new(&kernel, grid).unwrap();
        let ladder = ScaleLadder::uniform(0.5, 2.0).unwrap();
        let field = sampler.sample_ladder(&ladder, StreamKey::new(11, 0, 0)).unwrap().top().unwrap();
        (grid, field)
    })
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 64, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn barrier_prob_is_a_probability_below_both_bounds(t in 0.01f64..50.0, a in -1.0f64..10.0) {
        let p = barrier_prob(t, a).unwrap();
        prop_assert!((0.0..=1.0).contains(&p));
        let (tight, loose) = barrier_upper_bounds(t, a).unwrap();
        prop_assert!(tight <= loose);
        prop_assert!(p <= tight + 1e-12);
    }

    #[test]
    fn barrier_prob_increases_with_level(t in 0.01f64..50.0, a in 0.0f64..5.0, da in 0.0f64..5.0) {
        prop_assert!(barrier_prob(t, a).unwrap() <= barrier_prob(t, a + da).unwrap() + 1e-15);
    }

    #[test]
    fn drift_free_case_matches_reflection(t in 0.01f64..50.0, a in 0.0f64..10.0) {
        let p0 = barrier_prob(t, a).unwrap();
        let p1 = drifted_barrier_prob(t, a, 0.0).unwrap();
        prop_assert!((p0 - p1).abs() < 1e-12, "{p0} vs {p1}");
    }

    #[test]
    fn positive_drift_lowers_survival(t in 0.1f64..20.0, a in 0.1f64..5.0, b in 0.0f64..3.0) {
        prop_assert!(drifted_barrier_prob(t, a, b).unwrap() <= drifted_barrier_prob(t, a, 0.0).unwrap() + 1e-12);
    }

    #[test]
    fn region_labels_satisfy_their_inequalities(alpha in 0.0f64..4.0, beta in 0.0f64..4.0, d in 1usize..=3) {
        let g = classify_gamma(d, alpha, beta).unwrap();
        let df = d as f64;
        let (half, crit) = ((df / 2.0).sqrt(), (2.0 * df).sqrt());
        let m2 = alpha * alpha + beta * beta;
        match g.region {
            Region::PI => prop_assert!(m2 < df || (alpha > half && alpha + beta < crit)),
            Region::PII => prop_assert!(alpha + beta > crit && alpha > half),
            Region::PIII => prop_assert!(m2 > df && alpha < half),
            _ => {}
        }
        prop_assert_eq!(g.region, ComplexGamma::new(d, alpha, beta).unwrap().region);
    }

    #[test]
    fn ladder_breakpoints_increase(dt in 0.01f64..2.0, t_max in 0.05f64..40.0) {
        let l = ScaleLadder::uniform(dt, t_max).unwrap();
        let t = l.times();
        prop_assert_eq!(t[0], 0.0);
        prop_assert!(t.windows(2).all(|w| w[1] > w[0]));
        prop_assert!((l.t_max() - t_max).abs() < 1e-12);
        prop_assert!(t.windows(2).all(|w| w[1] - w[0] <= dt * (1.0 + 1e-9)));
    }

    #[test]
    fn survival_is_monotone_in_barrier_level(seed in 0u64..1000, q in 0.0f64..3.0, dq in 0.0f64..3.0) {
        let times: Vec<f64> = (0..=20).map(|k| k as f64 * 0.25).collect();
        let paths: Vec<Vec<f64>> = (0..8u64)
            .map(|i| {
                let inc = StreamKey::new(seed, i, 0).normal_vec(0, 20);
                let mut acc = 0.0;
                std::iter::once(0.0).chain(inc.iter().map(|z| { acc += 0.5 * z; acc })).collect()
            })
            .collect();
        let lo = barrier_scan_paths(&paths, &times, 1, q).unwrap();
        let hi = barrier_scan_paths(&paths, &times, 1, q + dq).unwrap();
        prop_assert!(!lo.survived || hi.survived);
        for (a, b) in lo.passage.iter().zip(&hi.passage) {
            if let (Some(a), Some(b)) = (a, b) {
                prop_assert!(a <= b);
            }
        }
    }

    #[test]
    fn stream_blocks_are_prefix_consistent(seed in any::<u64>(), start in 0u64..64, n in 1usize..64) {
        let key = StreamKey::new(seed, 3, 5);
        let whole = key.normal_vec(0, start as usize + n);
        prop_assert_eq!(&whole[start as usize..], &key.normal_vec(start, n)[..]);
    }

    #[test]
    fn morton_depth_agrees_with_coordinates(d in 1usize..=3, depth in 1usize..8, seed in any::<u64>()) {
        let key = StreamKey::new(seed, 0, 0);
        let mut u = vec![0.0; 2 * d];
        key.uniforms(0, &mut u);
        let scale = (1u64 << depth) as f64;
        let cell = |x: &[f64]| x.iter().map(|v| (v * scale).floor() as u64).collect::<Vec<_>>();
        let (x, y) = (&u[..d], &u[d..]);
        let (mx, my) = (morton(&cell(x), depth) as usize, morton(&cell(y), depth) as usize);
        prop_assert_eq!(leaf_k(mx, my, d, depth), dyadic_k(x, y, depth as u32) as usize);
        prop_assert_eq!(dyadic_k(x, y, 60), dyadic_k(y, x, 60));
    }
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 6, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn cell_list_equals_exhaustive_bitwise(alpha in 0.1f64..1.5, beta in 0.0f64..1.5, r in 0.1f64..0.8) {
        let (grid, field) = small_field();
        let kernel = KernelSpec::default().build().unwrap();
        let gamma = ComplexGamma::new(1, alpha, beta).unwrap();
        let f = TestFunction::bump(r).unwrap().on_grid(grid);
        let plan = QvPlan::new(&kernel, *grid, 2.0, CellQuadrature::Subcell).unwrap();
        let a = plan.evaluate(field, &gamma, &f, PairMode::CellList).unwrap();
        let b = plan.evaluate(field, &gamma, &f, PairMode::Exhaustive).unwrap();
        prop_assert_eq!(a.a.to_bits(), b.a.to_bits());
        prop_assert_eq!(a.b[0].to_bits(), b.b[0].to_bits());
        prop_assert_eq!(a.b[1].to_bits(), b.b[1].to_bits());
        prop_assert!(a.a >= 0.0);
        prop_assert!(a.imag_residue <= 1e-9 * (1.0 + a.a.abs()));
    }

}
