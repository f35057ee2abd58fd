//! Regularized-resolvent linear algebra on the finite action set.
//!
//! The production route evaluates `Φ(x_i)ᵀ(Σ + λI)⁻¹Φ(x_j)` through kernel
//! evaluations only:
//!
//! ```text
//! (1/λ) · (k(x_i, x_j) − k_p(x_i)ᵀ (K_p + λI)⁻¹ k_p(x_j))
//! [K_p]_{ab} = √(p_a p_b) k(x_a, x_b),   [k_p(x)]_a = √p_a k(x_a, x)
//! ```
//!
//! [`primal_bilinear_matrix`] computes the same quantity from the explicit
//! feature coordinates and serves as the independent check.

use nalgebra::{Cholesky, DMatrix, DVector, SymmetricEigen};

use crate::design;
use crate::error::{Error, Result};
use crate::kernels::GramContext;

/// Tolerance on `Σ weights = 1`.
pub const SIMPLEX_TOLERANCE: f64 = 1e-12;

/// Probability vector over the action set.
#[derive(Debug, Clone, PartialEq)]
pub struct Distribution {
    weights: Vec<f64>,
}

impl Distribution {
    pub fn new(weights: Vec<f64>) -> Result<Self> {
        if weights.is_empty() {
            return Err(Error::input("distribution over an empty action set"));
        }
        if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::input(
                "distribution weights must be finite and non-negative",
            ));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > SIMPLEX_TOLERANCE {
            return Err(Error::input(format!("distribution sums to {total}, not 1")));
        }
        Ok(Self { weights })
    }

    /// Normalizes non-negative masses.
    pub fn from_masses(masses: &[f64]) -> Result<Self> {
        let total: f64 = masses.iter().sum();
        if !(total.is_finite() && total > 0.0) || masses.iter().any(|m| *m < 0.0) {
            return Err(Error::input(
                "masses must be non-negative with a positive finite total",
            ));
        }
        Self::new(masses.iter().map(|m| m / total).collect())
    }

    /// Softmax of log-weights, shifted by the maximum.
    pub fn from_log_weights(log_weights: &[f64]) -> Result<Self> {
        let max = log_weights
            .iter()
            .copied()
            .fold(f64::NEG_INFINITY, f64::max);
        if !max.is_finite() {
            return Err(Error::input("log-weights must contain a finite maximum"));
        }
        let masses: Vec<f64> = log_weights.iter().map(|l| (l - max).exp()).collect();
        Self::from_masses(&masses)
    }

    pub fn uniform(n: usize) -> Self {
        assert!(n > 0, "uniform distribution over zero actions");
        Self {
            weights: vec![1.0 / n as f64; n],
        }
    }

    pub fn point_mass(n: usize, i: usize) -> Self {
        assert!(i < n, "point mass index out of range");
        let mut weights = vec![0.0; n];
        weights[i] = 1.0;
        Self { weights }
    }

    /// `(1 − γ)·self + γ·other`.
    pub fn mix(&self, other: &Distribution, gamma: f64) -> Result<Self> {
        if self.len() != other.len() {
            return Err(Error::DimensionMismatch(self.len(), other.len()));
        }
        Self::new(
            self.weights
                .iter()
                .zip(&other.weights)
                .map(|(q, g)| (1.0 - gamma) * q + gamma * g)
                .collect(),
        )
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    /// Shannon entropy in nats.
    pub fn entropy(&self) -> f64 {
        -self
            .weights
            .iter()
            .filter(|w| **w > 0.0)
            .map(|w| w * w.ln())
            .sum::<f64>()
    }

    /// Expectation of a per-action quantity.
    pub fn expect(&self, values: &[f64]) -> f64 {
        self.weights.iter().zip(values).map(|(p, v)| p * v).sum()
    }
}

/// `Σ(ν) = Σ_i ν_i Φ(x_i)Φ(x_i)ᵀ` in the `S` coordinates.
#[derive(Debug, Clone)]
pub struct CovarianceOperator {
    matrix: DMatrix<f64>,
}

impl CovarianceOperator {
    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }

    pub fn eigenvalues(&self) -> Vec<f64> {
        let mut ev: Vec<f64> = SymmetricEigen::new(self.matrix.clone())
            .eigenvalues
            .iter()
            .map(|v| v.max(0.0))
            .collect();
        ev.sort_by(|a, b| b.total_cmp(a));
        ev
    }

    pub fn trace(&self) -> f64 {
        self.matrix.trace()
    }
}

pub fn covariance(ctx: &GramContext, dist: &Distribution) -> Result<CovarianceOperator> {
    check_len(ctx, dist)?;
    let s = ctx.sqrt();
    let mut weighted = s.clone();
    for (i, w) in dist.weights().iter().enumerate() {
        weighted.row_mut(i).iter_mut().for_each(|v| *v *= w);
    }
    let m = s.transpose() * weighted;
    Ok(CovarianceOperator {
        matrix: (&m + m.transpose()) * 0.5,
    })
}

fn check_len(ctx: &GramContext, dist: &Distribution) -> Result<()> {
    if dist.len() != ctx.n_actions() {
        return Err(Error::DimensionMismatch(ctx.n_actions(), dist.len()));
    }
    Ok(())
}

fn check_lambda(lambda: f64) -> Result<()> {
    if !(lambda.is_finite() && lambda > 0.0) {
        return Err(Error::input(format!(
            "regularizer must be positive (got {lambda})"
        )));
    }
    Ok(())
}

/// Bilinear forms `Φ(x_i)ᵀ(Σ(p) + λI)⁻¹Φ(x_j)` for one source distribution.
#[derive(Debug, Clone)]
pub struct RegularizedResolvent {
    lambda: f64,
    source: Distribution,
    bilinear: DMatrix<f64>,
}

impl RegularizedResolvent {
    /// Factorizes `K_p + λI` and tabulates every bilinear form.
    pub fn new(ctx: &GramContext, dist: &Distribution, lambda: f64) -> Result<Self> {
        check_len(ctx, dist)?;
        check_lambda(lambda)?;
        let k = ctx.gram();
        let n = ctx.n_actions();
        let root: Vec<f64> = dist.weights().iter().map(|p| p.sqrt()).collect();

        // G = diag(√p) K, so column j of G is k_p(x_j).
        let mut g = k.clone();
        for (a, r) in root.iter().enumerate() {
            g.row_mut(a).iter_mut().for_each(|v| *v *= r);
        }
        let mut kp = DMatrix::zeros(n, n);
        for a in 0..n {
            for b in 0..n {
                kp[(a, b)] = g[(a, b)] * root[b];
            }
            kp[(a, a)] += lambda;
        }
        let chol = Cholesky::new(kp)
            .ok_or_else(|| Error::LinAlg("K_p + λI is not positive definite".into()))?;
        // H = L⁻¹ G, hence k_p(x_i)ᵀ (K_p + λI)⁻¹ k_p(x_j) = (HᵀH)_{ij}.
        let h = chol
            .l()
            .solve_lower_triangular(&g)
            .ok_or_else(|| Error::LinAlg("triangular solve failed".into()))?;
        let quad = h.transpose() * h;
        let mut bilinear = (k - quad) / lambda;
        symmetrize(&mut bilinear);
        Ok(Self {
            lambda,
            source: dist.clone(),
            bilinear,
        })
    }

    /// Scales every bilinear form by `factor`. Only for fault-injection tests.
    #[doc(hidden)]
    pub fn perturbed(mut self, factor: f64) -> Self {
        self.bilinear *= factor;
        self
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn source(&self) -> &Distribution {
        &self.source
    }

    pub fn n_actions(&self) -> usize {
        self.bilinear.nrows()
    }

    pub fn bilinear(&self, i: usize, j: usize) -> f64 {
        self.bilinear[(i, j)]
    }

    pub fn bilinear_matrix(&self) -> &DMatrix<f64> {
        &self.bilinear
    }

    /// `‖Φ(x_i)‖` in the `(Σ + λI)⁻¹` norm.
    pub fn weighted_norm(&self, i: usize) -> f64 {
        self.bilinear[(i, i)].max(0.0).sqrt()
    }

    /// `(⟨Φ(x_i), λ(Σ + λI)⁻¹ w⟩)_i` for `w = Σ_j α_j Φ(x_j)`.
    pub fn bias_operator_apply(&self, alpha: &[f64]) -> Result<Vec<f64>> {
        if alpha.len() != self.n_actions() {
            return Err(Error::DimensionMismatch(self.n_actions(), alpha.len()));
        }
        let a = DVector::from_column_slice(alpha);
        Ok((&self.bilinear * a * self.lambda).iter().copied().collect())
    }

    /// `E_p[ y(x') ⟨Φ(x_i), (Σ + λI)⁻¹Φ(x')⟩ ]` for the loss vector `y`: the
    /// exact conditional mean of the estimator term of the proxy.
    pub fn estimator_mean(&self, losses: &[f64]) -> Vec<f64> {
        let n = self.n_actions();
        (0..n)
            .map(|i| {
                (0..n)
                    .map(|j| self.source.weights()[j] * losses[j] * self.bilinear[(i, j)])
                    .sum()
            })
            .collect()
    }

    /// `Σ_i Σ_j p_i p_j ⟨Φ(x_i), (Σ + λI)⁻¹Φ(x_j)⟩²`.
    pub fn leverage_second_moment(&self) -> f64 {
        let p = self.source.weights();
        let n = self.n_actions();
        (0..n)
            .map(|i| {
                p[i] * (0..n)
                    .map(|j| p[j] * self.bilinear[(i, j)].powi(2))
                    .sum::<f64>()
            })
            .sum()
    }
}

fn symmetrize(m: &mut DMatrix<f64>) {
    let n = m.nrows();
    for i in 0..n {
        for j in 0..i {
            let v = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
}

/// Same bilinear forms as [`RegularizedResolvent`], computed as
/// `S (Σ(p) + λI)⁻¹ S` from the explicit features.
pub fn primal_bilinear_matrix(
    ctx: &GramContext,
    dist: &Distribution,
    lambda: f64,
) -> Result<DMatrix<f64>> {
    check_lambda(lambda)?;
    let sigma = covariance(ctx, dist)?;
    let n = ctx.n_actions();
    let reg = sigma.matrix() + DMatrix::identity(n, n) * lambda;
    let chol = Cholesky::new(reg)
        .ok_or_else(|| Error::LinAlg("Σ + λI is not positive definite".into()))?;
    let s = ctx.sqrt();
    let solved = chol.solve(s);
    let mut out = s * solved;
    symmetrize(&mut out);
    Ok(out)
}

/// `Tr((Σ + ρI)⁻¹Σ) = Σ_j μ_j / (μ_j + ρ)`.
pub fn effective_dim(sigma: &CovarianceOperator, rho: f64) -> f64 {
    sigma.eigenvalues().iter().map(|mu| mu / (mu + rho)).sum()
}

/// Lower estimate of `d_*(ρ)`: the effective dimension at the Frank–Wolfe
/// D-optimal design. Returns the value and the design distribution.
pub fn d_star_estimate(ctx: &GramContext, rho: f64, iters: usize) -> Result<(f64, Distribution)> {
    let design = design::d_optimal(ctx, rho, iters, design::DEFAULT_TOL)?;
    Ok((design.dual_bound, design.distribution))
}

/// Result of the greedy log-determinant maximization.
#[derive(Debug, Clone, PartialEq)]
pub struct InfoGain {
    /// `log det(I + V_T / (Tλ))` at the greedy points.
    pub value: f64,
    /// Indices picked, in order.
    pub picks: Vec<usize>,
    /// Set when `λ < 1/T`, outside the range where `d_*(λ) <= 2·value` is guaranteed.
    pub below_certified_range: bool,
}

/// Greedy maximization of `log det(I + (1/(Tλ)) Σ_{t<=T} Φ(x_t)Φ(x_t)ᵀ)`.
///
/// Each step picks the action with the largest `‖Φ(x)‖²` under
/// `(Tλ·I + V_t)⁻¹` (lowest index on ties). For `λ >= 1/T`, twice the
/// returned value upper-bounds `d_*(λ)`.
pub fn info_gain_greedy(ctx: &GramContext, horizon: usize, lambda: f64) -> Result<InfoGain> {
    if horizon == 0 {
        return Err(Error::input("horizon must be at least 1"));
    }
    check_lambda(lambda)?;
    let scale = horizon as f64 * lambda;
    let (value, picks) = greedy_log_det(ctx, horizon, scale);
    Ok(InfoGain {
        value,
        picks,
        below_certified_range: scale < 1.0,
    })
}

/// `(1/2) log det(I + Σ_{t<=T} Φ(x_t)Φ(x_t)ᵀ)` at greedily chosen points.
pub fn max_info_gain(ctx: &GramContext, horizon: usize) -> Result<f64> {
    if horizon == 0 {
        return Err(Error::input("horizon must be at least 1"));
    }
    Ok(0.5 * greedy_log_det(ctx, horizon, 1.0).0)
}

/// Greedy `log det(I + V_T/α)` with Sherman–Morrison updates of `(αI + V_t)⁻¹`.
fn greedy_log_det(ctx: &GramContext, horizon: usize, alpha: f64) -> (f64, Vec<usize>) {
    let s = ctx.sqrt();
    let n = ctx.n_actions();
    let mut inv = DMatrix::<f64>::identity(n, n) / alpha;
    let mut value = 0.0;
    let mut picks = Vec::with_capacity(horizon);
    for _ in 0..horizon {
        // leverage_i = s_iᵀ A⁻¹ s_i
        let sa = s * &inv;
        let mut best = 0;
        let mut best_lev = f64::NEG_INFINITY;
        for i in 0..n {
            let lev = sa.row(i).dot(&s.row(i));
            if lev > best_lev {
                best = i;
                best_lev = lev;
            }
        }
        let z = best_lev.max(0.0);
        value += z.ln_1p();
        picks.push(best);
        if z > 0.0 {
            let u = sa.row(best).transpose();
            inv -= &u * u.transpose() / (1.0 + z);
        }
    }
    (value, picks)
}
