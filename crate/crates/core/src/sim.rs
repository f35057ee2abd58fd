//! Episodes, replication over seeds and regret-rate fitting.
//!
//! The headline metric is the exact expected regret
//! `Σ_t (Σ_x p_t(x)ℓ_t(x) − ℓ_t(x_*))`, computed from the sampling
//! distribution before the round is drawn. Realized regret is recorded too.

use std::io::Write;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::adversary::LossSequence;
use crate::design::{d_optimal, ExplorationDesign};
use crate::error::{Error, Result};
use crate::kernels::GramContext;
use crate::learner::{
    baseline_exp3, baseline_uniform, exp3_default_eta, tune_effdim, tune_exp, tune_poly, DecayKind,
    DecaySpec, KernelExpWeights, Params, Policy, RoundDiagnostics,
};
use crate::rkhs::{d_star_estimate, info_gain_greedy, Distribution};

/// Environment variable capping the number of worker threads.
pub const THREADS_ENV: &str = "KBANDIT_THREADS";

/// `argmin_x Σ_t ℓ_t(x)`, lowest index on ties.
pub fn best_fixed_action(seq: &LossSequence) -> usize {
    let m = seq.loss_matrix();
    let mut best = 0;
    let mut best_sum = f64::INFINITY;
    for i in 0..m.ncols() {
        let s: f64 = m.column(i).iter().sum();
        if s < best_sum {
            best = i;
            best_sum = s;
        }
    }
    best
}

/// Draws an index from `p` with the generator keyed by `(seed, round)`.
pub fn sample_index(p: &Distribution, seed: u64, round: usize) -> usize {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(round as u64);
    let u: f64 = rng.random();
    let w = p.weights();
    let mut acc = 0.0;
    for (i, wi) in w.iter().enumerate() {
        acc += wi;
        if u < acc {
            return i;
        }
    }
    // u landed in the rounding slack at the top; take the last supported index
    w.iter().rposition(|v| *v > 0.0).unwrap_or(0)
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoundRecord {
    pub seed: u64,
    /// One-based round.
    pub t: usize,
    pub chosen: usize,
    pub realized_loss: f64,
    pub expected_instant_regret: f64,
    pub cum_expected_regret: f64,
    pub diagnostics: RoundDiagnostics,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Episode {
    pub seed: u64,
    pub best_action: usize,
    pub rounds: Vec<RoundRecord>,
    pub expected_regret: f64,
    pub realized_regret: f64,
}

/// What a round looks like from outside the policy, for instrumentation.
pub struct RoundView<'a> {
    /// Zero-based round.
    pub t: usize,
    pub p: &'a Distribution,
    pub chosen: usize,
    pub diagnostics: &'a RoundDiagnostics,
}

pub fn run_episode(
    ctx: &GramContext,
    seq: &LossSequence,
    policy: &mut dyn Policy,
    seed: u64,
) -> Result<Episode> {
    run_episode_observed(ctx, seq, policy, seed, |_| {})
}

/// Runs one episode; `observe` sees every round after the policy update.
pub fn run_episode_observed<F>(
    ctx: &GramContext,
    seq: &LossSequence,
    policy: &mut dyn Policy,
    seed: u64,
    mut observe: F,
) -> Result<Episode>
where
    F: FnMut(&RoundView<'_>),
{
    let n = ctx.n_actions();
    if seq.n_actions() != n {
        return Err(Error::DimensionMismatch(n, seq.n_actions()));
    }
    let best = best_fixed_action(seq);
    let mut rounds = Vec::with_capacity(seq.horizon());
    let mut cum_expected = 0.0;
    let mut cum_realized = 0.0;
    for t in 0..seq.horizon() {
        let p = policy.distribution().map_err(|e| at_round(e, t + 1))?;
        if p.len() != n {
            return Err(Error::DimensionMismatch(n, p.len()));
        }
        let losses = seq.round_losses(t);
        let expected = p.expect(&losses) - losses[best];
        let chosen = sample_index(&p, seed, t);
        let y = losses[chosen];
        let diagnostics = policy.observe(chosen, y).map_err(|e| at_round(e, t + 1))?;
        cum_expected += expected;
        cum_realized += y - losses[best];
        observe(&RoundView {
            t,
            p: &p,
            chosen,
            diagnostics: &diagnostics,
        });
        rounds.push(RoundRecord {
            seed,
            t: t + 1,
            chosen,
            realized_loss: y,
            expected_instant_regret: expected,
            cum_expected_regret: cum_expected,
            diagnostics,
        });
    }
    Ok(Episode {
        seed,
        best_action: best,
        rounds,
        expected_regret: cum_expected,
        realized_regret: cum_realized,
    })
}

fn at_round(e: Error, round: usize) -> Error {
    match e {
        Error::Numeric { .. } => e,
        other => Error::Numeric {
            round,
            message: other.to_string(),
        },
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PolicyKind {
    /// Exponential weights with the kernel estimator.
    KernelExp,
    Uniform,
    Exp3,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Tuning {
    /// Effective-dimension tuning with `d_*` from the D-optimal design.
    Effdim,
    /// Effective-dimension tuning with `d_* = min(2·greedy info gain, N)`.
    EffdimInfoGain,
    Poly,
    Exp,
    /// All of `lambda`, `gamma`, `eta` come from the overrides.
    Manual,
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Overrides {
    pub lambda: Option<f64>,
    pub gamma: Option<f64>,
    pub eta: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PolicySpec {
    pub kind: PolicyKind,
    pub tuning: Tuning,
    pub overrides: Overrides,
    pub decay: Option<DecaySpec>,
}

impl PolicySpec {
    pub fn kernel(tuning: Tuning) -> Self {
        Self {
            kind: PolicyKind::KernelExp,
            tuning,
            overrides: Overrides::default(),
            decay: None,
        }
    }

    pub fn baseline(kind: PolicyKind) -> Self {
        Self {
            kind,
            tuning: Tuning::Manual,
            overrides: Overrides::default(),
            decay: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DesignSettings {
    pub max_iters: Option<usize>,
    pub tol: f64,
}

impl Default for DesignSettings {
    fn default() -> Self {
        Self {
            max_iters: None,
            tol: crate::design::DEFAULT_TOL,
        }
    }
}

impl DesignSettings {
    pub fn iters_for(&self, n_actions: usize) -> usize {
        self.max_iters
            .unwrap_or_else(|| crate::design::default_max_iters(n_actions))
    }
}

/// Parameters and design shared by every seed of a run.
#[derive(Debug, Clone)]
pub enum PreparedPolicy {
    KernelExp {
        params: Params,
        design: Arc<ExplorationDesign>,
        d_star: Option<f64>,
        gamma_clamped: bool,
    },
    Uniform,
    Exp3 {
        eta: f64,
    },
}

impl PreparedPolicy {
    pub fn instantiate(&self, ctx: &Arc<GramContext>) -> Result<Box<dyn Policy + Send>> {
        Ok(match self {
            PreparedPolicy::KernelExp { params, design, .. } => {
                Box::new(KernelExpWeights::new(ctx.clone(), *params, design.clone())?)
            }
            PreparedPolicy::Uniform => Box::new(baseline_uniform(ctx)),
            PreparedPolicy::Exp3 { eta } => Box::new(baseline_exp3(ctx, *eta)?),
        })
    }

    pub fn params(&self) -> Option<&Params> {
        match self {
            PreparedPolicy::KernelExp { params, .. } => Some(params),
            _ => None,
        }
    }
}

/// `d_*(1/T)` from the D-optimal design at `ρ = 1/T`.
pub fn d_star_design(ctx: &GramContext, horizon: usize, design: &DesignSettings) -> Result<f64> {
    let rho = 1.0 / horizon as f64;
    Ok(d_star_estimate(ctx, rho, design.iters_for(ctx.n_actions()))?.0)
}

/// `min(2·greedy info gain at (T, 1/T), N)`, an upper bound on `d_*(1/T)`.
pub fn d_star_upper(ctx: &GramContext, horizon: usize) -> Result<f64> {
    let ig = info_gain_greedy(ctx, horizon, 1.0 / horizon as f64)?;
    Ok((2.0 * ig.value).min(ctx.n_actions() as f64))
}

fn decay_for(spec: &PolicySpec, kind: DecayKind) -> Result<DecaySpec> {
    match spec.decay {
        Some(d) if d.kind == kind => Ok(d),
        _ => Err(Error::config(
            "policy.decay",
            format!(
                "tuning `{:?}` needs a {:?} decay section",
                spec.tuning, kind
            )
            .to_lowercase(),
        )),
    }
}

/// Resolves tuning, overrides and the exploration design for horizon `T`.
pub fn prepare_policy(
    ctx: &GramContext,
    spec: &PolicySpec,
    b: f64,
    horizon: usize,
    design: &DesignSettings,
) -> Result<PreparedPolicy> {
    match spec.kind {
        PolicyKind::Uniform => return Ok(PreparedPolicy::Uniform),
        PolicyKind::Exp3 => {
            let eta = spec
                .overrides
                .eta
                .unwrap_or_else(|| exp3_default_eta(ctx.n_actions(), horizon));
            if !(eta.is_finite() && eta >= 0.0) {
                return Err(Error::config(
                    "eta",
                    format!("must be non-negative (got {eta})"),
                ));
            }
            return Ok(PreparedPolicy::Exp3 { eta });
        }
        PolicyKind::KernelExp => {}
    }
    let n = ctx.n_actions();
    let mut d_star = None;
    let tuned = match spec.tuning {
        Tuning::Effdim | Tuning::EffdimInfoGain => {
            let mut d = if spec.tuning == Tuning::Effdim {
                d_star_design(ctx, horizon, design)?
            } else {
                d_star_upper(ctx, horizon)?
            };
            if !(d > 0.0) {
                log::warn!("effective dimension is zero (degenerate kernel); using 1e-9");
                d = 1e-9;
            }
            d_star = Some(d);
            Some(tune_effdim(horizon, b, d, n)?)
        }
        Tuning::Poly => Some(tune_poly(
            horizon,
            b,
            &decay_for(spec, DecayKind::Polynomial)?,
        )?),
        Tuning::Exp => Some(tune_exp(
            horizon,
            b,
            &decay_for(spec, DecayKind::Exponential)?,
            n,
        )?),
        Tuning::Manual => None,
    };
    let o = &spec.overrides;
    let pick = |v: Option<f64>, base: Option<f64>, key: &str| {
        v.or(base).ok_or_else(|| {
            Error::config(
                format!("policy.overrides.{key}"),
                "required for manual tuning",
            )
        })
    };
    let base = tuned.map(|t| t.params);
    let params = Params::new(
        pick(o.lambda, base.map(|p| p.lambda), "lambda")?,
        pick(o.gamma, base.map(|p| p.gamma), "gamma")?,
        pick(o.eta, base.map(|p| p.eta), "eta")?,
        b,
    )?;
    let d = d_optimal(ctx, params.design_rho(), design.iters_for(n), design.tol)?;
    Ok(PreparedPolicy::KernelExp {
        params,
        design: Arc::new(d),
        d_star,
        gamma_clamped: tuned.is_some_and(|t| t.gamma_clamped),
    })
}

/// Cross-seed aggregate of one configuration.
#[derive(Debug, Clone)]
pub struct RegretCurve {
    pub horizon: usize,
    pub episodes: Vec<Episode>,
    /// Seeds whose episodes aborted, with the error message.
    pub failures: Vec<(u64, String)>,
    /// Mean cumulative expected regret after each round.
    pub mean_cumulative: Vec<f64>,
    pub stderr_cumulative: Vec<f64>,
}

impl RegretCurve {
    pub fn from_episodes(
        horizon: usize,
        episodes: Vec<Episode>,
        failures: Vec<(u64, String)>,
    ) -> Self {
        let mut mean_cumulative = vec![0.0; horizon];
        let mut stderr_cumulative = vec![0.0; horizon];
        for t in 0..horizon {
            let vals: Vec<f64> = episodes
                .iter()
                .map(|e| e.rounds[t].cum_expected_regret)
                .collect();
            let (m, s) = mean_stderr(&vals);
            mean_cumulative[t] = m;
            stderr_cumulative[t] = s;
        }
        Self {
            horizon,
            episodes,
            failures,
            mean_cumulative,
            stderr_cumulative,
        }
    }

    pub fn is_partial(&self) -> bool {
        !self.failures.is_empty()
    }

    pub fn mean_regret(&self) -> f64 {
        self.mean_cumulative.last().copied().unwrap_or(0.0)
    }

    pub fn stderr(&self) -> f64 {
        self.stderr_cumulative.last().copied().unwrap_or(0.0)
    }

    /// Mean and standard error of the final realized regret.
    pub fn realized(&self) -> (f64, f64) {
        let vals: Vec<f64> = self.episodes.iter().map(|e| e.realized_regret).collect();
        mean_stderr(&vals)
    }

    pub fn write_round_csv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(
            out,
            "seed,t,chosen,realized_loss,expected_instant_regret,cum_expected_regret,max_eta_proxy,q_entropy"
        )?;
        for e in &self.episodes {
            for r in &e.rounds {
                writeln!(
                    out,
                    "{},{},{},{},{},{},{},{}",
                    r.seed,
                    r.t,
                    r.chosen,
                    r.realized_loss,
                    r.expected_instant_regret,
                    r.cum_expected_regret,
                    fmt_opt(r.diagnostics.max_eta_proxy),
                    fmt_opt(r.diagnostics.q_entropy)
                )?;
            }
        }
        Ok(())
    }
}

pub fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "NA".to_string(), |x| x.to_string())
}

/// Sample mean and standard error (zero for fewer than two values).
pub fn mean_stderr(vals: &[f64]) -> (f64, f64) {
    if vals.is_empty() {
        return (0.0, 0.0);
    }
    let n = vals.len() as f64;
    let mean = vals.iter().sum::<f64>() / n;
    if vals.len() < 2 {
        return (mean, 0.0);
    }
    let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

/// Everything one replicated run needs.
#[derive(Debug, Clone)]
pub struct Experiment {
    pub ctx: Arc<GramContext>,
    pub losses: Arc<LossSequence>,
    pub policy: PreparedPolicy,
    pub seeds: Vec<u64>,
}

fn thread_count() -> Option<usize> {
    std::env::var(THREADS_ENV)
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|n| *n > 0)
}

/// Runs every seed (in parallel) and aggregates in seed order.
pub fn run_replicated(exp: &Experiment) -> Result<RegretCurve> {
    if exp.seeds.is_empty() {
        return Err(Error::config("seeds", "must not be empty"));
    }
    let job = || -> Vec<std::result::Result<Episode, (u64, String)>> {
        exp.seeds
            .par_iter()
            .map(|&seed| {
                let mut policy = exp
                    .policy
                    .instantiate(&exp.ctx)
                    .map_err(|e| (seed, e.to_string()))?;
                run_episode(&exp.ctx, &exp.losses, policy.as_mut(), seed)
                    .map_err(|e| (seed, e.to_string()))
            })
            .collect()
    };
    let results = match thread_count() {
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| Error::input(format!("thread pool: {e}")))?
            .install(job),
        None => job(),
    };
    let mut episodes = Vec::new();
    let mut failures = Vec::new();
    for r in results {
        match r {
            Ok(e) => episodes.push(e),
            Err(f) => {
                log::error!("seed {} aborted: {}", f.0, f.1);
                failures.push(f);
            }
        }
    }
    Ok(RegretCurve::from_episodes(
        exp.losses.horizon(),
        episodes,
        failures,
    ))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RateFit {
    pub exponent: f64,
    pub intercept: f64,
    pub r2: f64,
}

/// Least squares of `log regret` on `log T`. Non-positive regrets are dropped.
pub fn rate_fit(points: &[(f64, f64)]) -> Result<RateFit> {
    let kept: Vec<(f64, f64)> = points
        .iter()
        .filter(|(t, r)| {
            let ok = *t > 0.0 && *r > 0.0;
            if !ok {
                log::warn!("rate fit drops point (T = {t}, regret = {r})");
            }
            ok
        })
        .map(|(t, r)| (t.ln(), r.ln()))
        .collect();
    if kept.len() < 2 {
        return Err(Error::input("rate fit needs at least two positive points"));
    }
    let n = kept.len() as f64;
    let mx = kept.iter().map(|p| p.0).sum::<f64>() / n;
    let my = kept.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = kept.iter().map(|p| (p.0 - mx).powi(2)).sum();
    if sxx == 0.0 {
        return Err(Error::input(
            "rate fit needs at least two distinct horizons",
        ));
    }
    let sxy: f64 = kept.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let syy: f64 = kept.iter().map(|p| (p.1 - my).powi(2)).sum();
    let slope = sxy / sxx;
    let r2 = if syy == 0.0 {
        1.0
    } else {
        (sxy * sxy) / (sxx * syy)
    };
    Ok(RateFit {
        exponent: slope,
        intercept: my - slope * mx,
        r2,
    })
}

/// One summary row per horizon: `T,mean_regret,stderr,exponent_partial`,
/// where the exponent is fitted on all horizons up to and including this one.
pub fn write_summary_csv<W: Write>(rows: &[(usize, f64, f64)], mut out: W) -> Result<()> {
    writeln!(out, "T,mean_regret,stderr,exponent_partial")?;
    for k in 0..rows.len() {
        let pts: Vec<(f64, f64)> = rows[..=k].iter().map(|r| (r.0 as f64, r.1)).collect();
        let exponent = if k == 0 {
            None
        } else {
            rate_fit(&pts).ok().map(|f| f.exponent)
        };
        writeln!(
            out,
            "{},{},{},{}",
            rows[k].0,
            rows[k].1,
            rows[k].2,
            fmt_opt(exponent)
        )?;
    }
    Ok(())
}
