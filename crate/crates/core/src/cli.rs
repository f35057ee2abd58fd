//! Command-line front end. Exit codes: 0 success, 2 configuration or input
//! error, 3 numeric failure, 4 failed verification.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Parser, Subcommand};

use crate::config::{describe_policy, load_config, ExperimentConfig};
use crate::design::d_optimal;
use crate::error::{Error, Result};
use crate::kernels::GramContext;
use crate::rkhs::info_gain_greedy;
use crate::sim::{rate_fit, run_replicated, write_summary_csv, PreparedPolicy, RegretCurve};
use crate::verify::{run_check, Lemma, VerifyOptions, DEFAULT_MASTER_SEED};

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;
pub const EXIT_VERIFY: i32 = 4;

#[derive(Debug, Parser)]
#[command(
    name = "kbandit",
    version,
    about = "Adversarial kernel bandits: simulation and checks"
)]
pub struct Cli {
    /// More log output (repeat for debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    pub verbose: u8,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run all seeds of a config and write round, summary and parameter CSVs.
    Run {
        config: PathBuf,
        /// Also write the Gram matrix as gram.csv.
        #[arg(long)]
        dump_gram: bool,
    },
    /// Re-run the config for each horizon and fit the regret exponent.
    Sweep {
        config: PathBuf,
        /// Comma-separated horizons.
        #[arg(long, value_delimiter = ',', required = true)]
        horizons: Vec<usize>,
    },
    /// Compute the exploration design and write design.csv.
    Design {
        config: PathBuf,
        /// Design regularizer; defaults to lambda/gamma of the configured policy, else 1/T.
        #[arg(long)]
        rho: Option<f64>,
    },
    /// Bracket the maximal effective dimension for each regularizer.
    Effdim {
        config: PathBuf,
        /// Comma-separated regularizers.
        #[arg(long, value_delimiter = ',', required = true)]
        rho: Vec<f64>,
    },
    /// Run the randomized inequality checks.
    Verify {
        /// Comma-separated check names; all when omitted.
        #[arg(long)]
        lemmas: Option<String>,
        #[arg(long, default_value_t = DEFAULT_MASTER_SEED)]
        seed: u64,
        #[arg(long, default_value_t = 100)]
        instances: usize,
        #[arg(long, hide = true)]
        corrupt_resolvent: bool,
    },
}

/// Exit code for a library error.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Numeric { .. } | Error::LinAlg(_) => EXIT_NUMERIC,
        _ => EXIT_CONFIG,
    }
}

pub fn main_from_env() -> i32 {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .try_init();
    execute(cli)
}

pub fn execute(cli: Cli) -> i32 {
    let result = match cli.command {
        Command::Run { config, dump_gram } => cmd_run(&config, dump_gram),
        Command::Sweep { config, horizons } => cmd_sweep(&config, &horizons),
        Command::Design { config, rho } => cmd_design(&config, rho),
        Command::Effdim { config, rho } => cmd_effdim(&config, &rho),
        Command::Verify {
            lemmas,
            seed,
            instances,
            corrupt_resolvent,
        } => cmd_verify(lemmas.as_deref(), seed, instances, corrupt_resolvent),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

struct Loaded {
    cfg: ExperimentConfig,
    base: PathBuf,
    ctx: Arc<GramContext>,
    out_dir: PathBuf,
}

fn load(path: &Path) -> Result<Loaded> {
    let cfg = load_config(path)?;
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let ctx = Arc::new(cfg.build_context(&base)?);
    let out_dir = cfg.output_path(&base);
    std::fs::create_dir_all(&out_dir)
        .map_err(|e| Error::config("output_dir", format!("{}: {e}", out_dir.display())))?;
    Ok(Loaded {
        cfg,
        base,
        ctx,
        out_dir,
    })
}

fn create(dir: &Path, name: &str) -> Result<BufWriter<File>> {
    let path = dir.join(name);
    let f = File::create(&path)
        .map_err(|e| Error::config("output_dir", format!("{}: {e}", path.display())))?;
    Ok(BufWriter::new(f))
}

fn write_params(dir: &Path, policy: &PreparedPolicy, b: f64) -> Result<()> {
    let mut out = create(dir, "params.csv")?;
    writeln!(out, "key,value")?;
    for (k, v) in describe_policy(policy, b) {
        writeln!(out, "{k},{v}")?;
    }
    out.flush()?;
    Ok(())
}

fn failure_code(curve: &RegretCurve) -> i32 {
    if curve.is_partial() {
        for (seed, msg) in &curve.failures {
            eprintln!("error: seed {seed}: {msg}");
        }
        EXIT_NUMERIC
    } else {
        EXIT_OK
    }
}

fn cmd_run(path: &Path, dump_gram: bool) -> Result<i32> {
    let l = load(path)?;
    if dump_gram {
        let mut out = create(&l.out_dir, "gram.csv")?;
        l.ctx.write_csv(&mut out)?;
        out.flush()?;
    }
    let exp = l.cfg.experiment(&l.ctx, &l.base, l.cfg.horizon)?;
    write_params(&l.out_dir, &exp.policy, l.cfg.norm_bound())?;
    let curve = run_replicated(&exp)?;
    let mut rounds = create(&l.out_dir, "rounds.csv")?;
    curve.write_round_csv(&mut rounds)?;
    rounds.flush()?;
    let mut summary = create(&l.out_dir, "summary.csv")?;
    write_summary_csv(
        &[(l.cfg.horizon, curve.mean_regret(), curve.stderr())],
        &mut summary,
    )?;
    summary.flush()?;
    println!(
        "T={} seeds={} mean_expected_regret={} stderr={}",
        l.cfg.horizon,
        curve.episodes.len(),
        curve.mean_regret(),
        curve.stderr()
    );
    Ok(failure_code(&curve))
}

fn cmd_sweep(path: &Path, horizons: &[usize]) -> Result<i32> {
    if horizons.is_empty() || horizons.contains(&0) {
        return Err(Error::config(
            "horizons",
            "need one or more positive horizons",
        ));
    }
    let l = load(path)?;
    let mut rows = Vec::new();
    let mut code = EXIT_OK;
    for &t in horizons {
        let exp = l.cfg.experiment(&l.ctx, &l.base, t)?;
        let curve = run_replicated(&exp)?;
        code = code.max(failure_code(&curve));
        println!(
            "T={t} mean_expected_regret={} stderr={}",
            curve.mean_regret(),
            curve.stderr()
        );
        rows.push((t, curve.mean_regret(), curve.stderr()));
    }
    let mut out = create(&l.out_dir, "sweep_summary.csv")?;
    write_summary_csv(&rows, &mut out)?;
    out.flush()?;
    let pts: Vec<(f64, f64)> = rows.iter().map(|r| (r.0 as f64, r.1)).collect();
    match rate_fit(&pts) {
        Ok(f) => println!(
            "exponent={} intercept={} r2={}",
            f.exponent, f.intercept, f.r2
        ),
        Err(e) => {
            log::warn!("no regret exponent: {e}");
            println!("exponent=NA");
        }
    }
    Ok(code)
}

fn cmd_design(path: &Path, rho: Option<f64>) -> Result<i32> {
    let l = load(path)?;
    let rho = match rho {
        Some(r) => r,
        None => {
            let exp = l.cfg.experiment(&l.ctx, &l.base, l.cfg.horizon)?;
            exp.policy
                .params()
                .map(|p| p.design_rho())
                .unwrap_or(1.0 / l.cfg.horizon as f64)
        }
    };
    if !(rho.is_finite() && rho > 0.0) {
        return Err(Error::config(
            "rho",
            format!("must be positive (got {rho})"),
        ));
    }
    let s = l.cfg.design_settings();
    let d = d_optimal(&l.ctx, rho, s.iters_for(l.ctx.n_actions()), s.tol)?;
    let mut out = create(&l.out_dir, "design.csv")?;
    d.write_csv(&mut out)?;
    out.flush()?;
    println!(
        "rho={} effective_dim={} max_leverage={} gap={} iterations={} converged={}",
        rho,
        d.dual_bound,
        d.max_leverage,
        d.gap(),
        d.iterations_used,
        d.converged
    );
    Ok(EXIT_OK)
}

fn cmd_effdim(path: &Path, rhos: &[f64]) -> Result<i32> {
    if let Some(r) = rhos.iter().find(|r| !(r.is_finite() && **r > 0.0)) {
        return Err(Error::config("rho", format!("must be positive (got {r})")));
    }
    let l = load(path)?;
    let s = l.cfg.design_settings();
    let n = l.ctx.n_actions();
    let mut out = create(&l.out_dir, "effdim.csv")?;
    writeln!(out, "rho,d_star_lower,d_star_upper,max_leverage,converged")?;
    for &rho in rhos {
        let d = d_optimal(&l.ctx, rho, s.iters_for(n), s.tol)?;
        // the greedy bound needs Tρ >= 1
        let horizon = (1.0 / rho).ceil().max(1.0) as usize;
        let upper = (2.0 * info_gain_greedy(&l.ctx, horizon, rho)?.value).min(n as f64);
        writeln!(
            out,
            "{rho},{},{upper},{},{}",
            d.dual_bound, d.max_leverage, d.converged
        )?;
        println!("rho={rho} d_star in [{}, {upper}]", d.dual_bound);
    }
    out.flush()?;
    Ok(EXIT_OK)
}

fn cmd_verify(lemmas: Option<&str>, seed: u64, instances: usize, corrupt: bool) -> Result<i32> {
    let selected: Vec<Lemma> = match lemmas {
        None => Lemma::ALL.to_vec(),
        Some(s) => s
            .split(',')
            .map(str::trim)
            .filter(|x| !x.is_empty())
            .map(Lemma::from_name)
            .collect::<Result<_>>()?,
    };
    if selected.is_empty() {
        return Err(Error::config("lemmas", "no checks selected"));
    }
    if instances == 0 {
        return Err(Error::config("instances", "must be at least 1"));
    }
    let opts = VerifyOptions {
        master_seed: seed,
        instances,
        corrupt_resolvent: corrupt,
    };
    let mut code = EXIT_OK;
    for lemma in selected {
        let report = run_check(lemma, &opts)?;
        println!("{report}");
        if !report.passed() {
            eprintln!(
                "verification failed: {} (instance seed {})",
                lemma,
                report.failing_seed.unwrap_or_default()
            );
            code = EXIT_VERIFY;
        }
    }
    Ok(code)
}
