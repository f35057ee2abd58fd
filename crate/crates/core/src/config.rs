//! TOML experiment configuration.
//!
//! Relative paths (`actions.points_csv`, `adversary.loss_csv`, `output_dir`)
//! resolve against the directory holding the config file.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::adversary::{generate, read_loss_csv, AdversarySpec};
use crate::error::{Error, Result};
use crate::kernels::{build_gram, grid_actions, ActionSet, GramContext, KernelSpec, MaternNu};
use crate::learner::{DecayKind, DecaySpec};
use crate::sim::{
    prepare_policy, DesignSettings, Experiment, Overrides, PolicyKind, PolicySpec, PreparedPolicy,
    Tuning,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub kernel: KernelConfig,
    pub actions: ActionsConfig,
    pub adversary: AdversaryConfig,
    pub policy: PolicyConfig,
    pub horizon: usize,
    pub seeds: Vec<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub design: Option<DesignConfig>,
    pub output_dir: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum KernelType {
    SquaredExponential,
    Matern,
    Linear,
    FiniteRank,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KernelConfig {
    #[serde(rename = "type")]
    pub kind: KernelType,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lengthscale: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub nu: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eigenvalues: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ActionsConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub d: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n_per_axis: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub points_csv: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AdversaryType {
    RankOne,
    RandomRkhs,
    Switching,
    BestArmGap,
    Replay,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdversaryConfig {
    #[serde(rename = "type")]
    pub kind: AdversaryType,
    #[serde(rename = "B", default, skip_serializing_if = "Option::is_none")]
    pub b: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub best: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gap: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub anchors: Option<Vec<usize>>,
    /// `[length, target]` pairs.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub segments: Option<Vec<(usize, usize)>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub loss_csv: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OverridesConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lambda: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gamma: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eta: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecayConfig {
    pub kind: DecayKind,
    #[serde(rename = "C")]
    pub c: f64,
    pub beta: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PolicyConfig {
    pub name: PolicyKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tuning: Option<Tuning>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub overrides: Option<OverridesConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub decay: Option<DecayConfig>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DesignConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_iters: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tol: Option<f64>,
}

fn require<T: Clone>(v: &Option<T>, key: &str) -> Result<T> {
    v.clone().ok_or_else(|| Error::config(key, "missing"))
}

fn keyed(key: &str) -> impl Fn(Error) -> Error + '_ {
    move |e| match e {
        Error::Config { .. } => e,
        other => Error::config(key, other.to_string()),
    }
}

/// Parses and validates a config from TOML text.
pub fn parse_config(text: &str) -> Result<ExperimentConfig> {
    let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| {
        let msg = e.message().to_string();
        let key = msg
            .split('`')
            .nth(1)
            .map(str::to_string)
            .unwrap_or_else(|| "<config>".to_string());
        Error::config(key, msg)
    })?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn load_config(path: &Path) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::config("<file>", format!("{}: {e}", path.display())))?;
    parse_config(&text)
}

impl ExperimentConfig {
    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::config("<config>", e.to_string()))
    }

    /// Checks everything that does not need the filesystem or linear algebra.
    pub fn validate(&self) -> Result<()> {
        if self.horizon == 0 {
            return Err(Error::config("horizon", "must be at least 1"));
        }
        if self.seeds.is_empty() {
            return Err(Error::config("seeds", "must not be empty"));
        }
        self.kernel_spec()?;
        let a = &self.actions;
        match (&a.points_csv, a.d, a.n_per_axis) {
            (Some(_), None, None) => {}
            (None, Some(d), Some(n)) if d >= 1 && n >= 1 => {}
            (None, _, _) => {
                return Err(Error::config(
                    "actions",
                    "give `d` and `n_per_axis` (both >= 1) or `points_csv`",
                ))
            }
            (Some(_), _, _) => {
                return Err(Error::config(
                    "actions.points_csv",
                    "cannot be combined with a grid",
                ))
            }
        }
        if let Some(b) = self.adversary.b {
            if !(b.is_finite() && b > 0.0) {
                return Err(Error::config(
                    "adversary.B",
                    format!("must be positive (got {b})"),
                ));
            }
        }
        let p = &self.policy;
        if let Some(o) = &p.overrides {
            let in_unit = |v: f64| v > 0.0 && v <= 1.0;
            let positive = |v: f64| v.is_finite() && v > 0.0;
            let checks = [
                (
                    "gamma",
                    o.gamma,
                    in_unit(o.gamma.unwrap_or(1.0)),
                    "must lie in (0, 1]",
                ),
                (
                    "lambda",
                    o.lambda,
                    positive(o.lambda.unwrap_or(1.0)),
                    "must be positive",
                ),
                (
                    "eta",
                    o.eta,
                    positive(o.eta.unwrap_or(1.0)),
                    "must be positive",
                ),
            ];
            for (key, val, ok, msg) in checks {
                if let (Some(v), false) = (val, ok) {
                    return Err(Error::config(key, format!("{msg} (got {v})")));
                }
            }
        }
        if let Some(d) = &p.decay {
            self.decay_spec_of(d)
                .validate()
                .map_err(keyed("policy.decay"))?;
        }
        if let Some(d) = &self.design {
            if let Some(t) = d.tol {
                if !(t > 0.0) {
                    return Err(Error::config("design.tol", "must be positive"));
                }
            }
            if d.max_iters == Some(0) {
                return Err(Error::config("design.max_iters", "must be at least 1"));
            }
        }
        Ok(())
    }

    fn decay_spec_of(&self, d: &DecayConfig) -> DecaySpec {
        DecaySpec {
            kind: d.kind,
            c: d.c,
            beta: d.beta,
        }
    }

    pub fn kernel_spec(&self) -> Result<KernelSpec> {
        let k = &self.kernel;
        let spec = match k.kind {
            KernelType::SquaredExponential => KernelSpec::SquaredExponential {
                lengthscale: require(&k.lengthscale, "kernel.lengthscale")?,
            },
            KernelType::Matern => KernelSpec::Matern {
                nu: MaternNu::from_value(require(&k.nu, "kernel.nu")?)
                    .map_err(keyed("kernel.nu"))?,
                lengthscale: require(&k.lengthscale, "kernel.lengthscale")?,
            },
            KernelType::Linear => KernelSpec::Linear,
            KernelType::FiniteRank => KernelSpec::FiniteRank {
                eigenvalues: require(&k.eigenvalues, "kernel.eigenvalues")?,
                seed: k.seed.unwrap_or(0),
            },
        };
        spec.validate().map_err(keyed("kernel"))?;
        Ok(spec)
    }

    pub fn design_settings(&self) -> DesignSettings {
        let d = self.design.clone().unwrap_or(DesignConfig {
            max_iters: None,
            tol: None,
        });
        DesignSettings {
            max_iters: d.max_iters,
            tol: d.tol.unwrap_or(crate::design::DEFAULT_TOL),
        }
    }

    pub fn norm_bound(&self) -> f64 {
        match self.adversary.kind {
            AdversaryType::RankOne => 1.0,
            _ => self.adversary.b.unwrap_or(1.0),
        }
    }

    pub fn policy_spec(&self) -> PolicySpec {
        let p = &self.policy;
        let o = p.overrides.clone().unwrap_or_default();
        PolicySpec {
            kind: p.name,
            tuning: p.tuning.unwrap_or(if p.name == PolicyKind::KernelExp {
                Tuning::Effdim
            } else {
                Tuning::Manual
            }),
            overrides: Overrides {
                lambda: o.lambda,
                gamma: o.gamma,
                eta: o.eta,
            },
            decay: p.decay.as_ref().map(|d| self.decay_spec_of(d)),
        }
    }

    /// `output_dir` resolved against `base`.
    pub fn output_path(&self, base: &Path) -> PathBuf {
        base.join(&self.output_dir)
    }

    pub fn build_context(&self, base: &Path) -> Result<GramContext> {
        let spec = self.kernel_spec()?;
        let a = &self.actions;
        let actions = match &a.points_csv {
            Some(p) => ActionSet::from_csv(&base.join(p)).map_err(keyed("actions.points_csv"))?,
            None => grid_actions(a.d.unwrap_or(1), a.n_per_axis.unwrap_or(1))
                .map_err(keyed("actions"))?,
        };
        build_gram(&spec, &actions)
    }

    pub fn adversary_spec(&self, ctx: &GramContext, base: &Path) -> Result<AdversarySpec> {
        let a = &self.adversary;
        let b = self.norm_bound();
        Ok(match a.kind {
            AdversaryType::RankOne => AdversarySpec::RankOne {
                anchors: require(&a.anchors, "adversary.anchors")?,
            },
            AdversaryType::RandomRkhs => AdversarySpec::RandomRkhs {
                b,
                seed: a.seed.unwrap_or(0),
            },
            AdversaryType::Switching => AdversarySpec::Switching {
                segments: require(&a.segments, "adversary.segments")?,
                b,
            },
            AdversaryType::BestArmGap => AdversarySpec::BestArmGap {
                best: require(&a.best, "adversary.best")?,
                gap: require(&a.gap, "adversary.gap")?,
                b,
                seed: a.seed.unwrap_or(0),
            },
            AdversaryType::Replay => {
                let path = require(&a.loss_csv, "adversary.loss_csv")?;
                AdversarySpec::Replay {
                    losses: read_loss_csv(&base.join(path), ctx.n_actions())
                        .map_err(keyed("adversary.loss_csv"))?,
                    b,
                }
            }
        })
    }

    /// Builds the loss sequence and the prepared policy for horizon `T`.
    pub fn experiment(
        &self,
        ctx: &Arc<GramContext>,
        base: &Path,
        horizon: usize,
    ) -> Result<Experiment> {
        let spec = self.adversary_spec(ctx, base)?;
        let losses = generate(&spec, ctx, horizon).map_err(keyed("adversary"))?;
        let policy = prepare_policy(
            ctx,
            &self.policy_spec(),
            self.norm_bound(),
            horizon,
            &self.design_settings(),
        )?;
        Ok(Experiment {
            ctx: ctx.clone(),
            losses: Arc::new(losses),
            policy,
            seeds: self.seeds.clone(),
        })
    }
}

/// `key,value` lines describing a prepared policy.
pub fn describe_policy(policy: &PreparedPolicy, b: f64) -> Vec<(String, String)> {
    let mut out = Vec::new();
    match policy {
        PreparedPolicy::KernelExp {
            params,
            design,
            d_star,
            gamma_clamped,
        } => {
            out.push(("policy".into(), "kernel-exp".into()));
            out.push(("lambda".into(), params.lambda.to_string()));
            out.push(("gamma".into(), params.gamma.to_string()));
            out.push(("eta".into(), params.eta.to_string()));
            out.push(("B".into(), b.to_string()));
            out.push(("d_star".into(), crate::sim::fmt_opt(*d_star)));
            out.push(("gamma_clamped".into(), gamma_clamped.to_string()));
            out.push((
                "lambda_condition".into(),
                params.lambda_condition().to_string(),
            ));
            out.push(("design_rho".into(), design.rho.to_string()));
            out.push(("design_converged".into(), design.converged.to_string()));
            out.push((
                "design_max_leverage".into(),
                design.max_leverage.to_string(),
            ));
            out.push(("design_effective_dim".into(), design.dual_bound.to_string()));
            out.push((
                "exploration_budget".into(),
                params.exploration_budget().to_string(),
            ));
            out.push((
                "effdim_condition".into(),
                (design.dual_bound <= params.exploration_budget()).to_string(),
            ));
            out.push((
                "leverage_condition".into(),
                (design.max_leverage <= params.exploration_budget()).to_string(),
            ));
        }
        PreparedPolicy::Uniform => out.push(("policy".into(), "uniform".into())),
        PreparedPolicy::Exp3 { eta } => {
            out.push(("policy".into(), "exp3".into()));
            out.push(("eta".into(), eta.to_string()));
        }
    }
    out
}
