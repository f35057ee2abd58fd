use std::sync::Arc;

use kbandit::design::{d_optimal, DEFAULT_TOL};
use kbandit::learner::{multiplicative_update, LearnerState, Params};
use kbandit::rkhs::{
    covariance, effective_dim, primal_bilinear_matrix, Distribution, RegularizedResolvent,
};
use kbandit::verify::random_instance;
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;

/// `S(Σ(p) + λI)⁻¹S` by a dense inverse, independent of both library routes.
fn inverse_oracle(s: &DMatrix<f64>, p: &[f64], lambda: f64) -> DMatrix<f64> {
    let n = s.nrows();
    let mut sigma = DMatrix::zeros(n, n);
    for (i, pi) in p.iter().enumerate() {
        let phi = s.row(i).transpose();
        sigma += &phi * phi.transpose() * *pi;
    }
    let inv = (sigma + DMatrix::identity(n, n) * lambda)
        .try_inverse()
        .unwrap();
    s * inv * s.transpose()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(96))]

    #[test]
    fn dual_primal_and_inverse_agree(seed in any::<u64>()) {
        let inst = random_instance(seed, 12, (1e-2, 10.0)).unwrap();
        let dual = RegularizedResolvent::new(&inst.ctx, &inst.p, inst.lambda).unwrap();
        let primal = primal_bilinear_matrix(&inst.ctx, &inst.p, inst.lambda).unwrap();
        let oracle = inverse_oracle(inst.ctx.sqrt(), inst.p.weights(), inst.lambda);
        prop_assert!((dual.bilinear_matrix() - &primal).amax() <= 1e-8);
        prop_assert!((dual.bilinear_matrix() - &oracle).amax() <= 1e-8);
    }

    #[test]
    fn estimator_mean_matches_loss_minus_bias(seed in any::<u64>()) {
        let inst = random_instance(seed, 12, (1e-3, 10.0)).unwrap();
        let res = RegularizedResolvent::new(&inst.ctx, &inst.p, inst.lambda).unwrap();
        let losses = inst.losses();
        let mean = res.estimator_mean(&losses);
        // λ(Σ+λI)⁻¹w evaluated through the dense oracle
        let oracle = inverse_oracle(inst.ctx.sqrt(), inst.p.weights(), inst.lambda);
        let bias = oracle * DVector::from_column_slice(&inst.alpha) * inst.lambda;
        for i in 0..losses.len() {
            prop_assert!((mean[i] - (losses[i] - bias[i])).abs() <= 1e-8);
        }
    }

    #[test]
    fn comparator_bias_is_dominated(seed in any::<u64>()) {
        let inst = random_instance(seed, 12, (1e-4, 10.0)).unwrap();
        let res = RegularizedResolvent::new(&inst.ctx, &inst.p, inst.lambda).unwrap();
        let bias = res.bias_operator_apply(&inst.alpha).unwrap();
        for (i, v) in bias.iter().enumerate() {
            prop_assert!(v.abs() <= inst.b * inst.lambda.sqrt() * res.weighted_norm(i) + 1e-10);
        }
    }

    #[test]
    fn leverage_second_moment_below_effective_dim(seed in any::<u64>()) {
        let inst = random_instance(seed, 12, (1e-4, 10.0)).unwrap();
        let res = RegularizedResolvent::new(&inst.ctx, &inst.p, inst.lambda).unwrap();
        let d = effective_dim(&covariance(&inst.ctx, &inst.p).unwrap(), inst.lambda);
        prop_assert!(res.leverage_second_moment() <= d + 1e-9);
    }

    #[test]
    fn softmax_is_shift_invariant(lw in prop::collection::vec(-5.0f64..5.0, 1..10), eta in 0.0f64..2.0, c in -100.0f64..100.0, seed in any::<u64>()) {
        let n = lw.len();
        let proxy: Vec<f64> = (0..n).map(|i| ((seed >> (i % 60)) & 7) as f64 - 3.5).collect();
        let shifted: Vec<f64> = proxy.iter().map(|v| v + c).collect();
        let mut a = lw.clone();
        let mut b = lw.clone();
        multiplicative_update(&mut a, eta, &proxy);
        multiplicative_update(&mut b, eta, &shifted);
        let qa = Distribution::from_log_weights(&a).unwrap();
        let qb = Distribution::from_log_weights(&b).unwrap();
        for (x, y) in qa.weights().iter().zip(qb.weights()) {
            prop_assert!((x - y).abs() <= 1e-12);
        }
    }

    #[test]
    fn exploration_floor_holds(seed in any::<u64>(), gamma in 0.01f64..1.0, steps in 0usize..20) {
        let inst = random_instance(seed, 10, (1e-2, 1.0)).unwrap();
        let params = Params::new(inst.lambda, gamma, 0.3, 1.0).unwrap();
        let design = Arc::new(d_optimal(&inst.ctx, params.design_rho(), 300, DEFAULT_TOL).unwrap());
        let mut state = LearnerState::init(&inst.ctx, params, design.clone()).unwrap();
        let n = inst.ctx.n_actions();
        for k in 0..steps {
            let p = state.sampling_distribution();
            let proxy = state.proxy_losses(&inst.ctx, &p, k % n, 0.5).unwrap();
            state.update(&proxy).unwrap();
        }
        let p = state.sampling_distribution();
        for (pi, vi) in p.weights().iter().zip(design.distribution.weights()) {
            prop_assert!(*pi >= gamma * vi * (1.0 - 1e-12));
        }
    }
}
