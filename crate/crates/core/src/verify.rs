//! Randomized numerical checks of the inequalities the regret analysis uses.
//!
//! Every check draws its instances from a generator keyed by a master seed,
//! so a failure can be replayed from the reported instance seed.

use std::fmt;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Exp1, StandardNormal};

use crate::adversary::{generate, rescale_to_ball, AdversarySpec};
use crate::design::{d_optimal, default_max_iters, DEFAULT_TOL};
use crate::error::{Error, Result};
use crate::kernels::{build_gram, ActionSet, GramContext, KernelSpec, MaternNu};
use crate::learner::{
    tune_effdim, tune_exp, tune_poly, DecayKind, DecaySpec, KernelExpWeights, Params, Tuned,
};
use crate::rkhs::{
    covariance, d_star_estimate, effective_dim, info_gain_greedy, primal_bilinear_matrix,
    Distribution, RegularizedResolvent,
};
use crate::sim::run_episode_observed;

pub const DEFAULT_MASTER_SEED: u64 = 20_240_601;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Lemma {
    DualPrimal,
    CondMean,
    BoundedLoss,
    CompBias,
    Leverage,
    Eigendecay,
    InfoGain,
    GOptimal,
}

impl Lemma {
    pub const ALL: [Lemma; 8] = [
        Lemma::DualPrimal,
        Lemma::CondMean,
        Lemma::BoundedLoss,
        Lemma::CompBias,
        Lemma::Leverage,
        Lemma::Eigendecay,
        Lemma::InfoGain,
        Lemma::GOptimal,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Lemma::DualPrimal => "dual-primal",
            Lemma::CondMean => "cond-mean",
            Lemma::BoundedLoss => "bounded-loss",
            Lemma::CompBias => "comp-bias",
            Lemma::Leverage => "leverage",
            Lemma::Eigendecay => "eigendecay",
            Lemma::InfoGain => "info-gain",
            Lemma::GOptimal => "g-optimal",
        }
    }

    pub fn from_name(name: &str) -> Result<Self> {
        Lemma::ALL
            .into_iter()
            .find(|l| l.name() == name)
            .ok_or_else(|| Error::config("lemmas", format!("unknown check `{name}`")))
    }

    fn index(self) -> u64 {
        Lemma::ALL.iter().position(|l| *l == self).unwrap() as u64
    }
}

impl fmt::Display for Lemma {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone)]
pub struct VerifyOptions {
    pub master_seed: u64,
    /// Instances per check; checks that run whole episodes use a tenth of this.
    pub instances: usize,
    /// Scales the resolvent used by `cond-mean` so that the check must fail.
    pub corrupt_resolvent: bool,
}

impl Default for VerifyOptions {
    fn default() -> Self {
        Self {
            master_seed: DEFAULT_MASTER_SEED,
            instances: 100,
            corrupt_resolvent: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckReport {
    pub lemma: Lemma,
    pub instances: usize,
    /// `min over instances of (bound + tolerance − observed)`; negative means failure.
    pub worst_slack: f64,
    pub failing_seed: Option<u64>,
    pub note: String,
}

impl CheckReport {
    pub fn passed(&self) -> bool {
        self.failing_seed.is_none()
    }
}

impl fmt::Display for CheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}: {} instances={} worst_slack={:e}",
            self.lemma,
            if self.passed() { "PASS" } else { "FAIL" },
            self.instances,
            self.worst_slack
        )?;
        if let Some(s) = self.failing_seed {
            write!(f, " seed={s}")?;
        }
        if !self.note.is_empty() {
            write!(f, " ({})", self.note)?;
        }
        Ok(())
    }
}

struct Tally {
    lemma: Lemma,
    instances: usize,
    worst: f64,
    failing: Option<u64>,
}

impl Tally {
    fn new(lemma: Lemma) -> Self {
        Self {
            lemma,
            instances: 0,
            worst: f64::INFINITY,
            failing: None,
        }
    }

    fn record(&mut self, seed: u64, slack: f64) {
        if slack < self.worst || slack.is_nan() {
            self.worst = slack;
        }
        if (slack < 0.0 || slack.is_nan()) && self.failing.is_none() {
            self.failing = Some(seed);
        }
    }

    fn finish(self, note: String) -> CheckReport {
        CheckReport {
            lemma: self.lemma,
            instances: self.instances,
            worst_slack: self.worst,
            failing_seed: self.failing,
            note,
        }
    }
}

/// Seeds for the instances of one check.
pub fn instance_seeds(master: u64, lemma: Lemma, count: usize) -> Vec<u64> {
    let mut rng = ChaCha8Rng::seed_from_u64(master);
    rng.set_stream(lemma.index());
    (0..count).map(|_| rng.random()).collect()
}

/// A random kernel among the squared-exponential, Matérn, linear and
/// finite-rank families.
pub fn random_kernel(rng: &mut ChaCha8Rng) -> KernelSpec {
    let lengthscale = 10f64.powf(rng.random_range(-1.3..0.3));
    match rng.random_range(0..6) {
        0 => KernelSpec::SquaredExponential { lengthscale },
        1 => KernelSpec::Matern {
            nu: MaternNu::Half,
            lengthscale,
        },
        2 => KernelSpec::Matern {
            nu: MaternNu::ThreeHalves,
            lengthscale,
        },
        3 => KernelSpec::Matern {
            nu: MaternNu::FiveHalves,
            lengthscale,
        },
        4 => KernelSpec::Linear,
        _ => {
            let rank = rng.random_range(1..12);
            KernelSpec::FiniteRank {
                eigenvalues: (1..=rank).map(|j| (j as f64).powi(-2)).collect(),
                seed: rng.random(),
            }
        }
    }
}

/// `n` distinct uniform points in `[0,1]^d`.
pub fn random_actions(rng: &mut ChaCha8Rng, n: usize, d: usize) -> ActionSet {
    loop {
        let pts = (0..n)
            .map(|_| (0..d).map(|_| rng.random::<f64>()).collect())
            .collect();
        if let Ok(a) = ActionSet::new(pts) {
            return a;
        }
    }
}

/// A random distribution; about a third of the draws leave some actions unsupported.
pub fn random_distribution(rng: &mut ChaCha8Rng, n: usize) -> Distribution {
    let sparse = rng.random_bool(0.3);
    let mut w: Vec<f64> = (0..n)
        .map(|_| {
            if sparse && rng.random_bool(0.4) {
                0.0
            } else {
                rng.sample::<f64, _>(Exp1)
            }
        })
        .collect();
    if w.iter().all(|v| *v == 0.0) {
        w[rng.random_range(0..n)] = 1.0;
    }
    Distribution::from_masses(&w).expect("positive total mass")
}

/// One `(kernel, actions, p, λ, w)` draw.
pub struct Instance {
    pub seed: u64,
    pub ctx: GramContext,
    pub p: Distribution,
    pub lambda: f64,
    pub alpha: Vec<f64>,
    pub b: f64,
}

impl Instance {
    pub fn losses(&self) -> Vec<f64> {
        let a = nalgebra::DVector::from_column_slice(&self.alpha);
        (self.ctx.gram() * a).iter().copied().collect()
    }
}

/// Draws an instance with at most `max_n` actions and `λ` log-uniform on `[λ_lo, λ_hi]`.
pub fn random_instance(seed: u64, max_n: usize, lambda_range: (f64, f64)) -> Result<Instance> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let kernel = random_kernel(&mut rng);
    let n = rng.random_range(1..=max_n);
    let d = rng.random_range(1..=3);
    let ctx = build_gram(&kernel, &random_actions(&mut rng, n, d))?;
    let p = random_distribution(&mut rng, n);
    let (lo, hi) = lambda_range;
    let lambda = (rng.random_range(lo.ln()..=hi.ln())).exp();
    let b = rng.random_range(0.5..2.0);
    let raw: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
    let alpha = rescale_to_ball(&raw, &ctx, b)?;
    Ok(Instance {
        seed,
        ctx,
        p,
        lambda,
        alpha,
        b,
    })
}

pub fn run_check(lemma: Lemma, opts: &VerifyOptions) -> Result<CheckReport> {
    match lemma {
        Lemma::DualPrimal => check_dual_primal(opts),
        Lemma::CondMean => check_cond_mean(opts),
        Lemma::BoundedLoss => check_bounded_loss(opts),
        Lemma::CompBias => check_comp_bias(opts),
        Lemma::Leverage => check_leverage(opts),
        Lemma::Eigendecay => check_eigendecay(opts),
        Lemma::InfoGain => check_info_gain(opts),
        Lemma::GOptimal => check_g_optimal(opts),
    }
}

/// Dual and primal bilinear forms agree to `1e-8` entrywise.
fn check_dual_primal(opts: &VerifyOptions) -> Result<CheckReport> {
    let mut t = Tally::new(Lemma::DualPrimal);
    for seed in instance_seeds(opts.master_seed, t.lemma, opts.instances) {
        let inst = random_instance(seed, 20, (1e-4, 10.0))?;
        let dual = RegularizedResolvent::new(&inst.ctx, &inst.p, inst.lambda)?;
        let primal = primal_bilinear_matrix(&inst.ctx, &inst.p, inst.lambda)?;
        let disc = (dual.bilinear_matrix() - primal).amax();
        t.instances += 1;
        t.record(seed, 1e-8 - disc);
    }
    Ok(t.finish(String::new()))
}

/// `Σ_j p_j ℓ_j B(i,j) = ℓ_i − λ(Bα)_i` within `1e-8`.
fn check_cond_mean(opts: &VerifyOptions) -> Result<CheckReport> {
    let mut t = Tally::new(Lemma::CondMean);
    for seed in instance_seeds(opts.master_seed, t.lemma, opts.instances) {
        let inst = random_instance(seed, 20, (1e-4, 10.0))?;
        let mut res = RegularizedResolvent::new(&inst.ctx, &inst.p, inst.lambda)?;
        let bias = res.bias_operator_apply(&inst.alpha)?;
        if opts.corrupt_resolvent {
            res = res.perturbed(1.01);
        }
        let losses = inst.losses();
        let mean = res.estimator_mean(&losses);
        let err = mean
            .iter()
            .zip(&losses)
            .zip(&bias)
            .map(|((m, l), c)| (m - (l - c)).abs())
            .fold(0.0, f64::max);
        t.instances += 1;
        t.record(seed, 1e-8 - err);
    }
    Ok(t.finish(if opts.corrupt_resolvent {
        "resolvent corrupted".into()
    } else {
        String::new()
    }))
}

/// `|λ(Bα)_i| <= B√λ‖Φ(x_i)‖` pointwise, to `1e-10`.
fn check_comp_bias(opts: &VerifyOptions) -> Result<CheckReport> {
    let mut t = Tally::new(Lemma::CompBias);
    for seed in instance_seeds(opts.master_seed, t.lemma, opts.instances) {
        let inst = random_instance(seed, 20, (1e-4, 10.0))?;
        let res = RegularizedResolvent::new(&inst.ctx, &inst.p, inst.lambda)?;
        t.instances += 1;
        t.record(seed, comp_bias_slack(&res, &inst.alpha, inst.b)?);
    }
    Ok(t.finish(String::new()))
}

/// `min_i (B√λ‖Φ(x_i)‖ + 1e-10 − |λ(Bα)_i|)`.
pub fn comp_bias_slack(res: &RegularizedResolvent, alpha: &[f64], b: f64) -> Result<f64> {
    let bias = res.bias_operator_apply(alpha)?;
    let c = b * res.lambda().sqrt();
    Ok(bias
        .iter()
        .enumerate()
        .map(|(i, v)| c * res.weighted_norm(i) + 1e-10 - v.abs())
        .fold(f64::INFINITY, f64::min))
}

/// `Σ_i Σ_j p_i p_j B(i,j)² <= d_eff(Σ(p), λ)` to `1e-9`.
fn check_leverage(opts: &VerifyOptions) -> Result<CheckReport> {
    let mut t = Tally::new(Lemma::Leverage);
    for seed in instance_seeds(opts.master_seed, t.lemma, opts.instances) {
        let inst = random_instance(seed, 20, (1e-4, 10.0))?;
        let res = RegularizedResolvent::new(&inst.ctx, &inst.p, inst.lambda)?;
        let d = effective_dim(&covariance(&inst.ctx, &inst.p)?, inst.lambda);
        t.instances += 1;
        t.record(seed, d + 1e-9 - res.leverage_second_moment());
    }
    Ok(t.finish(String::new()))
}

/// Finite-rank kernels with `μ_j = j^{−2}` and `μ_j = e^{−j}`: the design's
/// effective dimension stays below `m + tail(m)/ξ`.
fn check_eigendecay(opts: &VerifyOptions) -> Result<CheckReport> {
    let mut t = Tally::new(Lemma::Eigendecay);
    let count = (opts.instances / 10).max(1);
    for seed in instance_seeds(opts.master_seed, t.lemma, count) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = rng.random_range(5..=25);
        let actions = random_actions(&mut rng, n, 2);
        for decay in [
            DecaySpec {
                kind: DecayKind::Polynomial,
                c: 1.0,
                beta: 2.0,
            },
            DecaySpec {
                kind: DecayKind::Exponential,
                c: 1.0,
                beta: 1.0,
            },
        ] {
            let eigenvalues: Vec<f64> = (1..=30)
                .map(|j| match decay.kind {
                    DecayKind::Polynomial => decay.c * (j as f64).powf(-decay.beta),
                    DecayKind::Exponential => decay.c * (-decay.beta * j as f64).exp(),
                })
                .collect();
            let ctx = build_gram(&KernelSpec::FiniteRank { eigenvalues, seed }, &actions)?;
            for xi in [1e-3, 1e-2, 1e-1] {
                let (d, _) = d_star_estimate(&ctx, xi, default_max_iters(n))?;
                for m in 1..=10 {
                    t.record(seed, m as f64 + decay.tail(m) / xi - d);
                }
            }
        }
        t.instances += 1;
    }
    Ok(t.finish(String::new()))
}

/// `d_eff(Σ(ν), 1/T) <= 2·(greedy info gain at (T, 1/T))` to `1e-9`.
fn check_info_gain(opts: &VerifyOptions) -> Result<CheckReport> {
    let mut t = Tally::new(Lemma::InfoGain);
    for seed in instance_seeds(opts.master_seed, t.lemma, opts.instances) {
        let inst = random_instance(seed, 20, (1.0, 1.0))?;
        for horizon in [16usize, 64, 256] {
            let lambda = 1.0 / horizon as f64;
            let d = effective_dim(&covariance(&inst.ctx, &inst.p)?, lambda);
            let ig = info_gain_greedy(&inst.ctx, horizon, lambda)?;
            t.record(seed, 2.0 * ig.value + 1e-9 - d);
        }
        t.instances += 1;
    }
    Ok(t.finish(String::new()))
}

/// A converged design satisfies `max leverage <= d_eff(Σ(ν), ρ) + tol`, with
/// `d_eff` recomputed from the spectrum of `Σ(ν)`.
fn check_g_optimal(opts: &VerifyOptions) -> Result<CheckReport> {
    let mut t = Tally::new(Lemma::GOptimal);
    let mut unconverged = 0;
    for seed in instance_seeds(opts.master_seed, t.lemma, opts.instances) {
        let inst = random_instance(seed, 20, (1e-4, 10.0))?;
        let n = inst.ctx.n_actions();
        let design = d_optimal(&inst.ctx, inst.lambda, default_max_iters(n), DEFAULT_TOL)?;
        t.instances += 1;
        if !design.converged {
            unconverged += 1;
            continue;
        }
        let d = effective_dim(&covariance(&inst.ctx, &design.distribution)?, inst.lambda);
        t.record(seed, d + DEFAULT_TOL - design.max_leverage);
    }
    let note = if unconverged > 0 {
        format!("{unconverged} designs did not converge")
    } else {
        String::new()
    };
    Ok(t.finish(note))
}

/// Tuned parameters and a matching design for one bounded-loss episode.
pub struct TunedInstance {
    pub seed: u64,
    pub ctx: Arc<GramContext>,
    pub tuned: Tuned,
    pub recipe: &'static str,
    pub horizon: usize,
}

/// A random kernel with one of the three tuning recipes. The decay-based
/// recipes get finite-rank kernels whose spectrum obeys the decay.
pub fn random_tuned_instance(seed: u64, horizon: usize, max_n: usize) -> Result<TunedInstance> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.random_range(2..=max_n);
    let d = rng.random_range(1..=2);
    let actions = random_actions(&mut rng, n, d);
    let (ctx, tuned, recipe) = match rng.random_range(0..3) {
        0 => {
            let ctx = build_gram(&random_kernel(&mut rng), &actions)?;
            let (d_star, _) = d_star_estimate(&ctx, 1.0 / horizon as f64, default_max_iters(n))?;
            let tuned = tune_effdim(horizon, 1.0, d_star.max(1e-9), n)?;
            (ctx, tuned, "effdim")
        }
        1 => {
            let beta = rng.random_range(1.5..3.0);
            let decay = DecaySpec {
                kind: DecayKind::Polynomial,
                c: 1.0,
                beta,
            };
            let eigenvalues = (1..=20).map(|j| (j as f64).powf(-beta)).collect();
            let ctx = build_gram(&KernelSpec::FiniteRank { eigenvalues, seed }, &actions)?;
            (ctx, tune_poly(horizon, 1.0, &decay)?, "poly")
        }
        _ => {
            let beta = rng.random_range(0.5..2.0);
            let decay = DecaySpec {
                kind: DecayKind::Exponential,
                c: 1.0,
                beta,
            };
            let eigenvalues = (1..=20).map(|j| (-beta * j as f64).exp()).collect();
            let ctx = build_gram(&KernelSpec::FiniteRank { eigenvalues, seed }, &actions)?;
            (ctx, tune_exp(horizon, 1.0, &decay, n)?, "exp")
        }
    };
    Ok(TunedInstance {
        seed,
        ctx: Arc::new(ctx),
        tuned,
        recipe,
        horizon,
    })
}

/// Outcome of one instrumented episode.
pub struct EpisodeCheck {
    pub params: Params,
    pub hypotheses_hold: bool,
    /// `max_t max_x |ηℓ̂_t(x)|`.
    pub max_eta_proxy: f64,
    /// Smallest comparator-dominance slack over all rounds and actions.
    pub comp_bias_slack: f64,
}

/// Runs an episode against a random RKHS adversary (`B = 1`) and records the
/// proxy magnitude and the comparator dominance slack on every round.
pub fn instrumented_episode(inst: &TunedInstance) -> Result<EpisodeCheck> {
    let params = inst.tuned.params;
    let n = inst.ctx.n_actions();
    let design = Arc::new(d_optimal(
        &inst.ctx,
        params.design_rho(),
        default_max_iters(n),
        DEFAULT_TOL,
    )?);
    let seq = generate(
        &AdversarySpec::RandomRkhs {
            b: params.b,
            seed: inst.seed,
        },
        &inst.ctx,
        inst.horizon,
    )?;
    let mut policy = KernelExpWeights::new(inst.ctx.clone(), params, design)?;
    let hypotheses_hold =
        policy.state().conditions().lambda_ok && policy.state().conditions().leverage_ok;
    let mut max_eta_proxy = 0.0f64;
    let mut slack = f64::INFINITY;
    let mut failure = None;
    run_episode_observed(&inst.ctx, &seq, &mut policy, inst.seed, |view| {
        max_eta_proxy = max_eta_proxy.max(view.diagnostics.max_eta_proxy.unwrap_or(0.0));
        let r = RegularizedResolvent::new(&inst.ctx, view.p, params.lambda)
            .and_then(|res| comp_bias_slack(&res, seq.alpha(view.t), params.b));
        match r {
            Ok(s) => slack = slack.min(s),
            Err(e) => failure = Some(e),
        }
    })?;
    if let Some(e) = failure {
        return Err(e);
    }
    Ok(EpisodeCheck {
        params,
        hypotheses_hold,
        max_eta_proxy,
        comp_bias_slack: slack,
    })
}

/// `max|ηℓ̂_t| <= 1 + 1e-9` on every round of tuned episodes whose
/// hypotheses hold.
fn check_bounded_loss(opts: &VerifyOptions) -> Result<CheckReport> {
    let mut t = Tally::new(Lemma::BoundedLoss);
    let count = (opts.instances / 10).max(3);
    let mut skipped = 0;
    for (k, seed) in instance_seeds(opts.master_seed, t.lemma, count)
        .into_iter()
        .enumerate()
    {
        let horizon = if k % 2 == 0 { 100 } else { 1000 };
        let inst = random_tuned_instance(seed, horizon, 12)?;
        let out = instrumented_episode(&inst)?;
        t.instances += 1;
        if !out.hypotheses_hold {
            skipped += 1;
            continue;
        }
        t.record(seed, 1.0 + 1e-9 - out.max_eta_proxy);
    }
    Ok(t.finish(if skipped > 0 {
        format!("{skipped} instances outside the hypotheses were not checked")
    } else {
        String::new()
    }))
}
