use kbandit::adversary::{generate, AdversarySpec};
use kbandit::kernels::{build_gram, grid_actions, KernelSpec, MaternNu};
use proptest::prelude::*;

fn spec_strategy(n: usize, horizon: usize) -> impl Strategy<Value = AdversarySpec> {
    prop_oneof![
        (0.1f64..3.0, any::<u64>()).prop_map(|(b, seed)| AdversarySpec::RandomRkhs { b, seed }),
        (0.1f64..3.0, 0..n).prop_map(move |(b, z)| AdversarySpec::Switching {
            segments: vec![(horizon, z)],
            b
        }),
        (0..n, 0.05f64..0.9, 0.1f64..3.0, any::<u64>())
            .prop_map(|(best, gap, b, seed)| AdversarySpec::BestArmGap { best, gap, b, seed }),
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn losses_respect_the_norm_bound_and_are_deterministic(
        (n, ls, spec) in (2usize..12, 0.05f64..1.0).prop_flat_map(|(n, ls)| (Just(n), Just(ls), spec_strategy(n, 15)))
    ) {
        let ctx = build_gram(&KernelSpec::Matern { nu: MaternNu::ThreeHalves, lengthscale: ls }, &grid_actions(1, n).unwrap()).unwrap();
        let seq = generate(&spec, &ctx, 15).unwrap();
        let again = generate(&spec, &ctx, 15).unwrap();
        prop_assert_eq!(&seq, &again);
        let b = spec.norm_bound();
        for t in 0..15 {
            prop_assert!(seq.rkhs_norm(&ctx, t) <= b * (1.0 + 1e-9));
            for i in 0..n {
                // |ℓ(x)| <= ‖w‖ √k(x,x) <= B
                prop_assert!(seq.loss(t, i).abs() <= b * (1.0 + 1e-9));
            }
        }
    }
}
