use kbandit::kernels::{build_gram, eval_kernel, ActionSet, KernelSpec, MaternNu};
use proptest::prelude::*;

fn kernel_strategy() -> impl Strategy<Value = KernelSpec> {
    let ls = 0.05f64..2.0;
    prop_oneof![
        ls.clone()
            .prop_map(|lengthscale| KernelSpec::SquaredExponential { lengthscale }),
        (ls.clone(), 0..3usize).prop_map(|(lengthscale, k)| KernelSpec::Matern {
            nu: [MaternNu::Half, MaternNu::ThreeHalves, MaternNu::FiveHalves][k],
            lengthscale
        }),
        Just(KernelSpec::Linear),
        (prop::collection::vec(0.0f64..1.0, 1..8), any::<u64>()).prop_map(
            |(mut eigenvalues, seed)| {
                eigenvalues.sort_by(|a, b| b.total_cmp(a));
                KernelSpec::FiniteRank { eigenvalues, seed }
            }
        ),
    ]
}

fn points_strategy() -> impl Strategy<Value = Vec<Vec<f64>>> {
    (1usize..4)
        .prop_flat_map(|d| prop::collection::vec(prop::collection::vec(0.0f64..=1.0, d), 1..15))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn kernel_is_symmetric_and_bounded(k in kernel_strategy(), x in prop::collection::vec(0.0f64..=1.0, 2), y in prop::collection::vec(0.0f64..=1.0, 2)) {
        let a = eval_kernel(&k, &x, &y).unwrap();
        let b = eval_kernel(&k, &y, &x).unwrap();
        prop_assert!((a - b).abs() <= 1e-15);
        prop_assert!(eval_kernel(&k, &x, &x).unwrap() <= 1.0 + 1e-12);
    }

    #[test]
    fn gram_is_psd_and_features_reproduce_it(k in kernel_strategy(), pts in points_strategy()) {
        let Ok(actions) = ActionSet::new(pts) else { return Ok(()); };
        let ctx = build_gram(&k, &actions).unwrap();
        let n = ctx.n_actions();
        prop_assert!(ctx.eigenvalues().iter().all(|e| *e >= 0.0));
        let s = ctx.sqrt();
        let recon = s * s.transpose();
        for i in 0..n {
            for j in 0..n {
                prop_assert!((recon[(i, j)] - ctx.gram()[(i, j)]).abs() <= 1e-9);
                // ⟨Φ(x_i), Φ(x_j)⟩ = k(x_i, x_j)
                let fi = ctx.feature(i);
                let fj = ctx.feature(j);
                let dot: f64 = fi.iter().zip(&fj).map(|(a, b)| a * b).sum();
                let direct = eval_kernel(&k, actions.point(i), actions.point(j)).unwrap();
                prop_assert!((dot - direct).abs() <= 1e-9);
            }
        }
    }
}
