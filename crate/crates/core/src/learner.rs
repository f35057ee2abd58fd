//! Exponential weights over the action set with a regularized
//! importance-weighted loss estimate, its parameter tunings, and two
//! kernel-agnostic baselines.
//!
//! Every round the learner plays `p_t = (1−γ)q_t + γν` and, after seeing
//! only `y_t = ℓ_t(x_t)`, forms the proxy
//!
//! ```text
//! ℓ̂_t(x) = y_t ⟨Φ(x), (Σ_t + λI)⁻¹Φ(x_t)⟩ − B√λ ‖Φ(x)‖_{(Σ_t + λI)⁻¹}
//! ```
//!
//! with `Σ_t = Σ(p_t)`, then updates `q_{t+1} ∝ q_t exp(−ηℓ̂_t)` in log space.

use std::sync::Arc;

use crate::design::ExplorationDesign;
use crate::error::{Error, Result};
use crate::kernels::GramContext;
use crate::rkhs::{covariance, effective_dim, Distribution, RegularizedResolvent};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Params {
    pub lambda: f64,
    pub gamma: f64,
    pub eta: f64,
    /// Norm bound used by the correction term.
    pub b: f64,
}

impl Params {
    pub fn new(lambda: f64, gamma: f64, eta: f64, b: f64) -> Result<Self> {
        let p = Self {
            lambda,
            gamma,
            eta,
            b,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda.is_finite() && self.lambda > 0.0) {
            return Err(Error::config(
                "lambda",
                format!("must be positive (got {})", self.lambda),
            ));
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(Error::config(
                "gamma",
                format!("must lie in (0, 1] (got {})", self.gamma),
            ));
        }
        if !(self.eta.is_finite() && self.eta > 0.0) {
            return Err(Error::config(
                "eta",
                format!("must be positive (got {})", self.eta),
            ));
        }
        if !(self.b.is_finite() && self.b >= 0.0) {
            return Err(Error::config(
                "B",
                format!("must be non-negative (got {})", self.b),
            ));
        }
        Ok(())
    }

    /// `λ/γ`, the regularizer of the exploration design.
    pub fn design_rho(&self) -> f64 {
        self.lambda / self.gamma
    }

    /// `γ/(2ηB)`, infinite when `B = 0`.
    pub fn exploration_budget(&self) -> f64 {
        self.gamma / (2.0 * self.eta * self.b)
    }

    /// `λ <= 1/(2ηB)`.
    pub fn lambda_condition(&self) -> bool {
        self.b == 0.0 || self.lambda <= 1.0 / (2.0 * self.eta * self.b)
    }
}

/// Which of the regret-bound hypotheses hold for a parameter set and design.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Conditions {
    /// `λ <= 1/(2ηB)`.
    pub lambda_ok: bool,
    /// `d_eff(Σ(ν), λ/γ) <= γ/(2ηB)`.
    pub effdim_ok: bool,
    /// `max_x ‖Φ(x)‖²_{(Σ(ν)+(λ/γ)I)⁻¹} <= γ/(2ηB)`; together with `lambda_ok`
    /// this is what keeps `|ηℓ̂_t| <= 1`.
    pub leverage_ok: bool,
    pub d_eff: f64,
    pub max_leverage: f64,
    pub budget: f64,
}

impl Conditions {
    pub fn evaluate(
        ctx: &GramContext,
        params: &Params,
        design: &ExplorationDesign,
    ) -> Result<Self> {
        let sigma = covariance(ctx, &design.distribution)?;
        let d_eff = effective_dim(&sigma, params.design_rho());
        let budget = params.exploration_budget();
        Ok(Self {
            lambda_ok: params.lambda_condition(),
            effdim_ok: d_eff <= budget,
            leverage_ok: design.max_leverage <= budget,
            d_eff,
            max_leverage: design.max_leverage,
            budget,
        })
    }

    pub fn all_hold(&self) -> bool {
        self.lambda_ok && self.effdim_ok && self.leverage_ok
    }

    pub fn warnings(&self) -> Vec<String> {
        let mut out = Vec::new();
        if !self.lambda_ok {
            out.push("lambda exceeds 1/(2·eta·B)".to_string());
        }
        if !self.effdim_ok {
            out.push(format!(
                "design effective dimension {:.4} exceeds gamma/(2·eta·B) = {:.4}",
                self.d_eff, self.budget
            ));
        }
        if !self.leverage_ok {
            out.push(format!(
                "design max leverage {:.4} exceeds gamma/(2·eta·B) = {:.4}",
                self.max_leverage, self.budget
            ));
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DecayKind {
    Polynomial,
    Exponential,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DecaySpec {
    pub kind: DecayKind,
    pub c: f64,
    pub beta: f64,
}

impl DecaySpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.c.is_finite() && self.c > 0.0) {
            return Err(Error::input(format!(
                "decay constant C must be positive (got {})",
                self.c
            )));
        }
        match self.kind {
            DecayKind::Polynomial if !(self.beta > 1.0) => Err(Error::input(format!(
                "polynomial decay needs beta > 1 (got {})",
                self.beta
            ))),
            DecayKind::Exponential if !(self.beta > 0.0) => Err(Error::input(format!(
                "exponential decay needs beta > 0 (got {})",
                self.beta
            ))),
            _ => Ok(()),
        }
    }

    /// Spectral tail `Σ_{j>m} μ_j` bound for `μ_j <= C j^{−β}` or `C e^{−βj}`.
    pub fn tail(&self, m: usize) -> f64 {
        let m = m as f64;
        match self.kind {
            DecayKind::Polynomial => self.c * m.powf(1.0 - self.beta) / (self.beta - 1.0),
            DecayKind::Exponential => self.c * (-self.beta * m).exp() / (self.beta.exp() - 1.0),
        }
    }

    /// `d_*(ξ) <= m + tail(m)/ξ`, minimized over `m` in `1..=max_m`.
    pub fn effective_dim_bound(&self, xi: f64, max_m: usize) -> f64 {
        (1..=max_m.max(1))
            .map(|m| m as f64 + self.tail(m) / xi)
            .fold(f64::INFINITY, f64::min)
    }
}

/// Output of a tuning recipe.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Tuned {
    pub params: Params,
    /// The recipe's `γ` exceeded 1 and was clamped.
    pub gamma_clamped: bool,
}

fn check_tuning_inputs(horizon: usize, b: f64) -> Result<()> {
    if horizon == 0 {
        return Err(Error::input("horizon must be at least 1"));
    }
    if !(b.is_finite() && b > 0.0) {
        return Err(Error::input(format!(
            "norm bound B must be positive (got {b})"
        )));
    }
    Ok(())
}

/// `log(e·N)`.
fn log_en(n_actions: usize) -> f64 {
    1.0 + (n_actions.max(1) as f64).ln()
}

/// Tuning from an effective-dimension value `d_star` at `λ = 1/T`.
pub fn tune_effdim(horizon: usize, b: f64, d_star: f64, n_actions: usize) -> Result<Tuned> {
    check_tuning_inputs(horizon, b)?;
    if !(d_star.is_finite() && d_star > 0.0) {
        return Err(Error::input(format!(
            "d_star must be positive (got {d_star})"
        )));
    }
    let t = horizon as f64;
    let l = log_en(n_actions);
    let lambda = 1.0 / t;
    let eta = (l / (2.0 * (1.0 + lambda) * d_star * t)).sqrt() / (2.0 * b);
    let raw_gamma = (2.0 * d_star * l / ((1.0 + lambda) * t)).sqrt();
    Ok(Tuned {
        params: Params::new(lambda, raw_gamma.min(1.0), eta, b)?,
        gamma_clamped: raw_gamma > 1.0,
    })
}

/// Smallest `m >= 1` with `m^β >= T`, i.e. `⌈T^{1/β}⌉` without rounding drift.
fn poly_block(horizon: usize, beta: f64) -> usize {
    let t = horizon as f64;
    let mut m = t.powf(1.0 / beta).ceil().max(1.0) as usize;
    while m > 1 && ((m - 1) as f64).powf(beta) >= t {
        m -= 1;
    }
    while (m as f64).powf(beta) < t {
        m += 1;
    }
    m
}

/// Tuning for `μ_j <= C j^{−β}`.
pub fn tune_poly(horizon: usize, b: f64, decay: &DecaySpec) -> Result<Tuned> {
    check_tuning_inputs(horizon, b)?;
    if decay.kind != DecayKind::Polynomial {
        return Err(Error::input("tune_poly needs a polynomial decay"));
    }
    decay.validate()?;
    let beta = decay.beta;
    let m = poly_block(horizon, beta) as f64;
    let lambda = m.powf(-beta);
    let gamma = m.powf(-(beta - 1.0) / 2.0);
    let eta = m.powf(-(beta + 1.0) / 2.0) / (2.0 * b * (1.0 + decay.c / (beta - 1.0)));
    Ok(Tuned {
        params: Params::new(lambda, gamma, eta, b)?,
        gamma_clamped: false,
    })
}

/// Tuning for `μ_j <= C e^{−βj}`.
pub fn tune_exp(horizon: usize, b: f64, decay: &DecaySpec, n_actions: usize) -> Result<Tuned> {
    check_tuning_inputs(horizon, b)?;
    if decay.kind != DecayKind::Exponential {
        return Err(Error::input("tune_exp needs an exponential decay"));
    }
    decay.validate()?;
    let t = horizon as f64;
    let beta = decay.beta;
    let m = ((t.ln() / beta).ceil() as usize).max(1) as f64;
    let lambda = (-beta * m).exp();
    let block = m + decay.c / (beta.exp() - 1.0);
    let raw_gamma = (block * log_en(n_actions) / t).sqrt();
    let gamma = raw_gamma.min(1.0);
    if raw_gamma > 1.0 {
        log::warn!(
            "horizon {horizon} too short for the exponential-decay tuning; gamma clamped to 1"
        );
    }
    let eta = gamma / (2.0 * b * block);
    Ok(Tuned {
        params: Params::new(lambda, gamma, eta, b)?,
        gamma_clamped: raw_gamma > 1.0,
    })
}

/// Per-round quantities a policy reports after an update.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct RoundDiagnostics {
    /// `max_x |η ℓ̂_t(x)|`.
    pub max_eta_proxy: Option<f64>,
    /// Entropy of `q_t`, the distribution before exploration mixing.
    pub q_entropy: Option<f64>,
}

/// A bandit learner. It sees only the index it played and that arm's loss.
pub trait Policy {
    fn name(&self) -> &str;

    /// The sampling distribution for the current round.
    fn distribution(&mut self) -> Result<Distribution>;

    /// Feeds back the played index and its loss and advances one round.
    fn observe(&mut self, chosen: usize, y: f64) -> Result<RoundDiagnostics>;
}

#[derive(Debug, Clone)]
pub struct LearnerState {
    log_weights: Vec<f64>,
    design: Arc<ExplorationDesign>,
    params: Params,
    round: usize,
    conditions: Conditions,
}

impl LearnerState {
    pub fn init(ctx: &GramContext, params: Params, design: Arc<ExplorationDesign>) -> Result<Self> {
        params.validate()?;
        let n = ctx.n_actions();
        if design.distribution.len() != n {
            return Err(Error::DimensionMismatch(n, design.distribution.len()));
        }
        if (design.rho - params.design_rho()).abs() > 1e-12 {
            return Err(Error::config(
                "design",
                format!(
                    "design regularizer {} does not match lambda/gamma = {}",
                    design.rho,
                    params.design_rho()
                ),
            ));
        }
        let conditions = Conditions::evaluate(ctx, &params, &design)?;
        for w in conditions.warnings() {
            log::warn!("{w}");
        }
        Ok(Self {
            log_weights: vec![0.0; n],
            design,
            params,
            round: 1,
            conditions,
        })
    }

    pub fn params(&self) -> &Params {
        &self.params
    }

    pub fn design(&self) -> &ExplorationDesign {
        &self.design
    }

    pub fn round(&self) -> usize {
        self.round
    }

    pub fn conditions(&self) -> &Conditions {
        &self.conditions
    }

    pub fn log_weights(&self) -> &[f64] {
        &self.log_weights
    }

    /// `q_t`.
    pub fn weights_distribution(&self) -> Distribution {
        Distribution::from_log_weights(&self.log_weights).expect("log-weights stay finite")
    }

    /// `p_t = (1−γ)q_t + γν`.
    pub fn sampling_distribution(&self) -> Distribution {
        mix_exploration(
            &self.weights_distribution(),
            &self.design.distribution,
            self.params.gamma,
        )
    }

    /// Full proxy vector for the round whose sampling distribution is `p`.
    pub fn proxy_losses(
        &self,
        ctx: &GramContext,
        p: &Distribution,
        chosen: usize,
        y: f64,
    ) -> Result<Vec<f64>> {
        let res = RegularizedResolvent::new(ctx, p, self.params.lambda)?;
        Ok(proxy_from_resolvent(&res, self.params.b, chosen, y))
    }

    /// `log_weights ← log_weights − η·proxy`, then max-shifted.
    pub fn update(&mut self, proxy: &[f64]) -> Result<()> {
        if let Some(i) = proxy.iter().position(|v| !v.is_finite()) {
            return Err(Error::Numeric {
                round: self.round,
                message: format!("proxy loss for action {i} is not finite"),
            });
        }
        multiplicative_update(&mut self.log_weights, self.params.eta, proxy);
        self.round += 1;
        Ok(())
    }
}

fn mix_exploration(q: &Distribution, nu: &Distribution, gamma: f64) -> Distribution {
    let w: Vec<f64> = q
        .weights()
        .iter()
        .zip(nu.weights())
        .map(|(qi, vi)| (1.0 - gamma) * qi + gamma * vi)
        .collect();
    Distribution::from_masses(&w).expect("mixture of two distributions")
}

/// `ℓ̂(x_i) = y·B(i, chosen) − b√λ·‖Φ(x_i)‖`.
pub fn proxy_from_resolvent(res: &RegularizedResolvent, b: f64, chosen: usize, y: f64) -> Vec<f64> {
    let c = b * res.lambda().sqrt();
    (0..res.n_actions())
        .map(|i| y * res.bilinear(i, chosen) - c * res.weighted_norm(i))
        .collect()
}

/// `lw ← lw − η·proxy` followed by subtracting the maximum.
pub fn multiplicative_update(log_weights: &mut [f64], eta: f64, proxy: &[f64]) {
    for (w, l) in log_weights.iter_mut().zip(proxy) {
        *w -= eta * l;
    }
    let m = log_weights
        .iter()
        .copied()
        .fold(f64::NEG_INFINITY, f64::max);
    log_weights.iter_mut().for_each(|w| *w -= m);
}

/// Exponential weights with the regularized kernel estimator.
#[derive(Debug, Clone)]
pub struct KernelExpWeights {
    ctx: Arc<GramContext>,
    state: LearnerState,
    current: Option<Distribution>,
}

impl KernelExpWeights {
    pub fn new(
        ctx: Arc<GramContext>,
        params: Params,
        design: Arc<ExplorationDesign>,
    ) -> Result<Self> {
        let state = LearnerState::init(&ctx, params, design)?;
        Ok(Self {
            ctx,
            state,
            current: None,
        })
    }

    pub fn state(&self) -> &LearnerState {
        &self.state
    }
}

impl Policy for KernelExpWeights {
    fn name(&self) -> &str {
        "kernel-exp-weights"
    }

    fn distribution(&mut self) -> Result<Distribution> {
        let p = self.state.sampling_distribution();
        self.current = Some(p.clone());
        Ok(p)
    }

    fn observe(&mut self, chosen: usize, y: f64) -> Result<RoundDiagnostics> {
        let p = match self.current.take() {
            Some(p) => p,
            None => self.state.sampling_distribution(),
        };
        let q_entropy = self.state.weights_distribution().entropy();
        let round = self.state.round;
        let proxy = self
            .state
            .proxy_losses(&self.ctx, &p, chosen, y)
            .map_err(|e| Error::Numeric {
                round,
                message: e.to_string(),
            })?;
        let eta = self.state.params.eta;
        let max_eta_proxy = proxy.iter().fold(0.0f64, |m, l| m.max((eta * l).abs()));
        self.state.update(&proxy)?;
        Ok(RoundDiagnostics {
            max_eta_proxy: Some(max_eta_proxy),
            q_entropy: Some(q_entropy),
        })
    }
}

/// Plays the uniform distribution forever.
#[derive(Debug, Clone)]
pub struct UniformPolicy {
    n: usize,
}

pub fn baseline_uniform(ctx: &GramContext) -> UniformPolicy {
    UniformPolicy { n: ctx.n_actions() }
}

impl Policy for UniformPolicy {
    fn name(&self) -> &str {
        "uniform"
    }

    fn distribution(&mut self) -> Result<Distribution> {
        Ok(Distribution::uniform(self.n))
    }

    fn observe(&mut self, _chosen: usize, _y: f64) -> Result<RoundDiagnostics> {
        Ok(RoundDiagnostics::default())
    }
}

/// Arm-wise exponential weights with `ℓ̂(chosen) = y/p(chosen)`.
#[derive(Debug, Clone)]
pub struct Exp3Policy {
    eta: f64,
    log_weights: Vec<f64>,
    round: usize,
}

/// `√(2 ln N / (N T))`, or 1 for a single arm.
pub fn exp3_default_eta(n_actions: usize, horizon: usize) -> f64 {
    if n_actions <= 1 {
        return 1.0;
    }
    let n = n_actions as f64;
    (2.0 * n.ln() / (n * horizon.max(1) as f64)).sqrt()
}

pub fn baseline_exp3(ctx: &GramContext, eta: f64) -> Result<Exp3Policy> {
    if !(eta.is_finite() && eta >= 0.0) {
        return Err(Error::config(
            "eta",
            format!("must be non-negative (got {eta})"),
        ));
    }
    Ok(Exp3Policy {
        eta,
        log_weights: vec![0.0; ctx.n_actions()],
        round: 1,
    })
}

impl Policy for Exp3Policy {
    fn name(&self) -> &str {
        "exp3"
    }

    fn distribution(&mut self) -> Result<Distribution> {
        Distribution::from_log_weights(&self.log_weights)
    }

    fn observe(&mut self, chosen: usize, y: f64) -> Result<RoundDiagnostics> {
        let p = Distribution::from_log_weights(&self.log_weights)?;
        let q_entropy = p.entropy();
        let mut proxy = vec![0.0; self.log_weights.len()];
        proxy[chosen] = y / p.weights()[chosen];
        if !proxy[chosen].is_finite() {
            return Err(Error::Numeric {
                round: self.round,
                message: format!("importance weight for action {chosen} is not finite"),
            });
        }
        multiplicative_update(&mut self.log_weights, self.eta, &proxy);
        self.round += 1;
        Ok(RoundDiagnostics {
            max_eta_proxy: Some((self.eta * proxy[chosen]).abs()),
            q_entropy: Some(q_entropy),
        })
    }
}
