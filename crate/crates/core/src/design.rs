//! Regularized D-optimal / G-optimal exploration designs.
//!
//! Pairwise Frank–Wolfe ascent on `log det(Σ(ν) + ρI)`. Its gradient is the leverage
//! profile `ℓ_i = ‖Φ(x_i)‖²_{(Σ(ν)+ρI)⁻¹}` and its duality gap is
//! `max_i ℓ_i − Σ_i ν_i ℓ_i = M_ρ(ν) − d_eff(Σ(ν), ρ)`, so a small gap is a
//! certificate that the maximal leverage is controlled by the effective
//! dimension. The same distribution serves as the exploration design.

use std::io::Write;

use nalgebra::{Cholesky, DMatrix};

use crate::error::{Error, Result};
use crate::kernels::GramContext;
use crate::rkhs::{covariance, Distribution, RegularizedResolvent};

pub const DEFAULT_TOL: f64 = 1e-6;

/// Default iteration budget, `50·N`.
pub fn default_max_iters(n_actions: usize) -> usize {
    50 * n_actions.max(1)
}

#[derive(Debug, Clone)]
pub struct ExplorationDesign {
    pub distribution: Distribution,
    pub rho: f64,
    /// `M_ρ(ν) = max_x ‖Φ(x)‖²_{(Σ(ν)+ρI)⁻¹}`.
    pub max_leverage: f64,
    /// `d_eff(Σ(ν), ρ)`.
    pub dual_bound: f64,
    pub leverage: Vec<f64>,
    pub iterations_used: usize,
    pub converged: bool,
    /// `log det(Σ(ν) + ρI)` after every iterate, starting at the initial point;
    /// later entries accumulate the exact per-step increments.
    pub objective_trace: Vec<f64>,
}

impl ExplorationDesign {
    pub fn gap(&self) -> f64 {
        self.max_leverage - self.dual_bound
    }

    /// Writes `action_index,weight,leverage` rows.
    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "action_index,weight,leverage")?;
        for (i, (w, l)) in self
            .distribution
            .weights()
            .iter()
            .zip(&self.leverage)
            .enumerate()
        {
            writeln!(out, "{i},{w},{l}")?;
        }
        Ok(())
    }
}

/// `‖Φ(x_i)‖²_{(Σ(ν)+ρI)⁻¹}` for every action.
pub fn leverage_profile(ctx: &GramContext, dist: &Distribution, rho: f64) -> Result<Vec<f64>> {
    let res = RegularizedResolvent::new(ctx, dist, rho)?;
    Ok((0..ctx.n_actions())
        .map(|i| res.bilinear(i, i).max(0.0))
        .collect())
}

fn log_det_objective(ctx: &GramContext, dist: &Distribution, rho: f64) -> Result<f64> {
    let sigma = covariance(ctx, dist)?;
    let n = ctx.n_actions();
    let chol = Cholesky::new(sigma.matrix() + DMatrix::identity(n, n) * rho)
        .ok_or_else(|| Error::LinAlg("Σ(ν) + ρI is not positive definite".into()))?;
    Ok(chol.l().diagonal().iter().map(|d| 2.0 * d.ln()).sum())
}

fn argmax_lowest(values: &[f64]) -> (usize, f64) {
    values
        .iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &v)| {
            if v > bv {
                (i, v)
            } else {
                (bi, bv)
            }
        })
}

/// Pairwise Frank–Wolfe for the ρ-regularized D-optimal design, started from
/// the uniform distribution. Each iteration moves mass from the supported
/// action of lowest leverage to the action of highest leverage (lowest index
/// on ties). Along that direction the objective is
/// `log det(Σ+ρI) + log h(a)` with `h` a concave quadratic, so the step is the
/// exact maximizer. Running out of iterations is not an error: the design is
/// returned with `converged = false`.
pub fn d_optimal(
    ctx: &GramContext,
    rho: f64,
    max_iters: usize,
    tol: f64,
) -> Result<ExplorationDesign> {
    if !(rho.is_finite() && rho > 0.0) {
        return Err(Error::input(format!(
            "design regularizer must be positive (got {rho})"
        )));
    }
    if max_iters == 0 {
        return Err(Error::input("design needs at least one iteration"));
    }
    if !(tol > 0.0) {
        return Err(Error::input("design tolerance must be positive"));
    }
    let n = ctx.n_actions();
    let mut nu = Distribution::uniform(n);
    let mut objective = log_det_objective(ctx, &nu, rho)?;
    let mut trace = vec![objective];
    let mut res = RegularizedResolvent::new(ctx, &nu, rho)?;
    let mut leverage = diagonal(&res);
    let mut steps = 0;
    let mut converged = false;

    for _ in 0..max_iters {
        let (toward, max_lev) = argmax_lowest(&leverage);
        let deff = nu.expect(&leverage);
        if max_lev - deff <= tol {
            converged = true;
            break;
        }
        let away = argmin_supported(&leverage, nu.weights());
        let (gj, gk, gjk) = (max_lev, leverage[away], res.bilinear(toward, away));
        // h(a) = 1 + a(g_jj − g_kk) − a²(g_jj g_kk − g_jk²)
        let curv = gj * gk - gjk * gjk;
        let cap = nu.weights()[away];
        let a = if curv > 0.0 {
            ((gj - gk) / (2.0 * curv)).min(cap)
        } else {
            cap
        };
        if !(a > 0.0) {
            break;
        }
        let mut w = nu.weights().to_vec();
        w[toward] += a;
        w[away] = 0.0f64.max(w[away] - a);
        let gain = (1.0 + a * (gj - gk) - a * a * curv).ln();
        if !(gain > 0.0) {
            break;
        }
        nu = Distribution::from_masses(&w)?;
        steps += 1;
        objective += gain;
        trace.push(objective);
        res = RegularizedResolvent::new(ctx, &nu, rho)?;
        leverage = diagonal(&res);
    }
    if !converged {
        let (_, max_lev) = argmax_lowest(&leverage);
        let gap = max_lev - nu.expect(&leverage);
        converged = gap <= tol;
        if !converged {
            log::warn!(
                "design did not reach gap {tol:e} within {max_iters} iterations (gap {gap:e})"
            );
        }
    }
    let (_, max_leverage) = argmax_lowest(&leverage);
    let dual_bound = nu.expect(&leverage);
    Ok(ExplorationDesign {
        distribution: nu,
        rho,
        max_leverage,
        dual_bound,
        leverage,
        iterations_used: steps,
        converged,
        objective_trace: trace,
    })
}

fn diagonal(res: &RegularizedResolvent) -> Vec<f64> {
    (0..res.n_actions())
        .map(|i| res.bilinear(i, i).max(0.0))
        .collect()
}

fn argmin_supported(values: &[f64], weights: &[f64]) -> usize {
    let mut best = 0;
    let mut best_v = f64::INFINITY;
    for (i, (v, w)) in values.iter().zip(weights).enumerate() {
        if *w > 0.0 && *v < best_v {
            best = i;
            best_v = *v;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernels::{build_gram, grid_actions, ActionSet, KernelSpec, MaternNu};
    use approx::assert_abs_diff_eq;

    #[test]
    fn single_action_is_a_point_mass() {
        let ctx = build_gram(
            &KernelSpec::SquaredExponential { lengthscale: 1.0 },
            &grid_actions(1, 1).unwrap(),
        )
        .unwrap();
        let d = d_optimal(&ctx, 0.7, 10, DEFAULT_TOL).unwrap();
        assert!(d.converged);
        assert_eq!(d.iterations_used, 0);
        assert_abs_diff_eq!(d.max_leverage, 1.0 / 1.7, epsilon = 1e-15);
    }

    #[test]
    fn orthogonal_pair_is_uniform() {
        let k = KernelSpec::SquaredExponential { lengthscale: 0.01 };
        let ctx = build_gram(&k, &ActionSet::new(vec![vec![0.0], vec![1.0]]).unwrap()).unwrap();
        let d = d_optimal(&ctx, 0.5, 100, DEFAULT_TOL).unwrap();
        assert_abs_diff_eq!(d.distribution.weights()[0], 0.5, epsilon = 1e-6);
        assert_abs_diff_eq!(d.max_leverage, 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(d.dual_bound, 1.0, epsilon = 1e-12);
        assert!(d.gap().abs() < 1e-12);

        let lev = leverage_profile(&ctx, &Distribution::uniform(2), 0.5).unwrap();
        assert_abs_diff_eq!(lev[0], 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(lev[1], 1.0, epsilon = 1e-12);
    }

    #[test]
    fn leverage_examples() {
        let ctx = build_gram(
            &KernelSpec::SquaredExponential { lengthscale: 1.0 },
            &grid_actions(1, 1).unwrap(),
        )
        .unwrap();
        let lev = leverage_profile(&ctx, &Distribution::point_mass(1, 0), 1.0).unwrap();
        assert_abs_diff_eq!(lev[0], 0.5, epsilon = 1e-15);

        let ctx = build_gram(&KernelSpec::Linear, &grid_actions(1, 4).unwrap()).unwrap();
        let lev = leverage_profile(&ctx, &Distribution::uniform(4), 0.2).unwrap();
        assert_eq!(lev[0], 0.0);
    }

    #[test]
    fn objective_is_monotone_and_certificate_holds() {
        let ctx = build_gram(
            &KernelSpec::Matern {
                nu: MaternNu::Half,
                lengthscale: 0.2,
            },
            &grid_actions(1, 12).unwrap(),
        )
        .unwrap();
        let d = d_optimal(&ctx, 0.05, 600, DEFAULT_TOL).unwrap();
        assert!(d.objective_trace.windows(2).all(|w| w[1] >= w[0]));
        if d.converged {
            assert!(d.max_leverage <= d.dual_bound + DEFAULT_TOL);
        }
        // the duality gap never goes negative
        assert!(d.gap() >= -1e-12);
    }

    #[test]
    fn rejects_bad_arguments() {
        let ctx = build_gram(&KernelSpec::Linear, &grid_actions(1, 2).unwrap()).unwrap();
        assert!(d_optimal(&ctx, 0.0, 10, 1e-6).is_err());
        assert!(d_optimal(&ctx, 0.1, 0, 1e-6).is_err());
        assert!(d_optimal(&ctx, 0.1, 10, 0.0).is_err());
    }

    #[test]
    fn csv_output() {
        let ctx = build_gram(&KernelSpec::Linear, &grid_actions(1, 2).unwrap()).unwrap();
        let d = d_optimal(&ctx, 1.0, 5, 1e-6).unwrap();
        let mut buf = Vec::new();
        d.write_csv(&mut buf).unwrap();
        let s = String::from_utf8(buf).unwrap();
        assert!(s.starts_with("action_index,weight,leverage\n0,"));
        assert_eq!(s.lines().count(), 3);
    }
}
