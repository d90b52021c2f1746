//! Argument parsing and subcommand dispatch.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;
use serde::Serialize;

use robust_sail::trace::read_trace;
use robust_sail::verification::{self, CheckReport, CLAIM_MANIFEST_VERSION, IDENTITY_TOL};
use robust_sail::OracleMode;

use crate::config::ExperimentConfig;
use crate::error::{CliError, CliResult};
use crate::experiment::{
    decompose_config, decompose_random, envelope_table, prepare, run_experiment, sweep_rho, trace_path, write_file,
    write_json, EnvelopeSummary, Prepared, Provenance,
};

#[derive(Debug, Parser)]
#[command(name = "robust-sail", version, about = "Oracle-robust online preference alignment on finite prompt/response spaces")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct GlobalArgs {
    /// Experiment config (JSON).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides the config's seed list with a single seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Overrides the config's output directory.
    #[arg(long, global = true)]
    pub out_dir: Option<PathBuf>,
    /// Worker threads for parallel sections (default: all cores).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Only print errors.
    #[arg(long, global = true)]
    pub quiet: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    True,
    Adversarial,
}

impl From<ModeArg> for OracleMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::True => OracleMode::True,
            ModeArg::Adversarial => OracleMode::Adversarial,
        }
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Compare the adversarial-oracle loss with L_SAIL + lambda R per instance.
    DecomposeCheck {
        /// Number of random instances when no config is given, or probe points otherwise.
        #[arg(long, default_value_t = 100)]
        instances: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print the estimated constants as JSON.
    Constants {
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the stochastic algorithm for one seed and write its trace.
    Train {
        #[arg(long, value_enum)]
        oracle_mode: Option<ModeArg>,
        /// Record the exact robust objective at every iterate.
        #[arg(long)]
        log_exact_loss: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Envelope gradients along a stored trace.
    Envelope {
        #[arg(long)]
        trace: PathBuf,
        #[arg(long)]
        eps_prox: Option<f64>,
        /// Per-iterate table (CSV). A summary JSON is written next to it.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run verification checks; exits with 1 if any fails.
    Verify {
        /// Check to run; repeatable.
        #[arg(long = "check")]
        checks: Vec<String>,
        /// Run every check (the default when no --check is given).
        #[arg(long)]
        all: bool,
        /// List the available checks and exit.
        #[arg(long)]
        list: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Exact losses over a list of radii at fixed probe points.
    SweepRho {
        /// Radius; repeatable. Defaults to the config's rho_list.
        #[arg(long = "rho")]
        rhos: Vec<f64>,
        #[arg(long, default_value_t = 8)]
        probes: usize,
    },
    /// Train, envelope sweep and summary for every configured seed.
    Run,
}

fn load_config(global: &GlobalArgs) -> CliResult<ExperimentConfig> {
    let path = global
        .config
        .as_deref()
        .ok_or_else(|| CliError::ConfigInvalid("this subcommand needs --config <file>".into()))?;
    let mut config = ExperimentConfig::from_file(path)?;
    if let Some(seed) = global.seed {
        config.seeds = vec![seed];
    }
    if let Some(dir) = &global.out_dir {
        config.outputs.dir = dir.clone();
    } else if config.outputs.dir.is_relative() {
        if let Some(base) = path.parent() {
            config.outputs.dir = base.join(&config.outputs.dir);
        }
    }
    Ok(config)
}

fn prepared(global: &GlobalArgs) -> CliResult<Prepared> {
    prepare(&load_config(global)?)
}

fn emit_json<T: Serialize>(value: &T, out: Option<&Path>) -> CliResult<()> {
    match out {
        Some(path) => write_json(path, value),
        None => {
            println!("{}", serde_json::to_string_pretty(value).map_err(robust_sail::Error::from)?);
            Ok(())
        }
    }
}

#[derive(Serialize)]
struct ConstantsOutput<'a> {
    #[serde(flatten)]
    provenance: Provenance,
    #[serde(flatten)]
    bundle: &'a robust_sail::ConstantsBundle,
    kappa_smoothed: f64,
    eps_smooth: f64,
    f_env0: f64,
    eta: f64,
    horizon_t: usize,
    delta: f64,
}

#[derive(Serialize)]
struct VerifyOutput<'a> {
    artifact_version: &'a str,
    claim_manifest_version: u32,
    seed: u64,
    passed: bool,
    reports: &'a [CheckReport],
    uncovered_claims: Vec<&'static str>,
}

fn say(quiet: bool, line: impl AsRef<str>) {
    if !quiet {
        println!("{}", line.as_ref());
    }
}

pub fn run(cli: Cli) -> CliResult<()> {
    let g = &cli.global;
    if let Some(n) = g.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::ConfigInvalid(format!("--threads: {e}")))?;
    }
    match &cli.command {
        Command::DecomposeCheck { instances, out } => {
            let rows = if g.config.is_some() {
                let p = prepared(g)?;
                decompose_config(&p, *instances, g.seed.unwrap_or(0))?
            } else {
                decompose_random(g.seed.unwrap_or(0), *instances)?
            };
            emit_json(&rows, out.as_deref())?;
            let worst = rows.iter().map(|r| r.abs_diff).fold(0.0, f64::max);
            if !(worst <= IDENTITY_TOL) {
                return Err(CliError::CheckFailed(format!(
                    "decomposition identity off by {worst:e} (allowed {IDENTITY_TOL:e})"
                )));
            }
            info!("decomposition identity holds on {} instances, worst gap {worst:e}", rows.len());
            Ok(())
        }
        Command::Constants { out } => {
            let p = prepared(g)?;
            let output = ConstantsOutput {
                provenance: p.provenance(),
                bundle: &p.bundle,
                kappa_smoothed: p.bundle.input.kappa_smoothed(p.hyper.eps_smooth),
                eps_smooth: p.hyper.eps_smooth,
                f_env0: p.f_env0,
                eta: p.hyper.eta,
                horizon_t: p.hyper.horizon_t,
                delta: p.oracle.delta(),
            };
            emit_json(&output, out.as_deref())
        }
        Command::Train {
            oracle_mode,
            log_exact_loss,
            out,
        } => {
            let p = prepared(g)?;
            let seed = p.config.seeds[0];
            let mode = oracle_mode.map(OracleMode::from).unwrap_or(p.config.oracle_mode);
            let trace = p.train(seed, mode, *log_exact_loss)?;
            let path = out.clone().unwrap_or_else(|| trace_path(&p.config, &p.config.outputs.dir, seed));
            write_file(&path, &p.trace_bytes(&trace)?)?;
            say(g.quiet, format!("wrote {} ({} iterations, eta = {:e})", path.display(), trace.horizon(), trace.eta));
            Ok(())
        }
        Command::Envelope { trace, eps_prox, out } => {
            let p = prepared(g)?;
            let file = std::fs::File::open(trace).map_err(|e| CliError::io(format!("opening {}", trace.display()), e))?;
            let (mut run, meta) = read_trace(file)?;
            if meta.config_digest != p.digest {
                log::warn!(
                    "trace digest {} differs from the config digest {}; the trace may come from another config",
                    meta.config_digest,
                    p.digest
                );
            }
            if run.iterates[0].len() != p.env.feature_dim() {
                return Err(CliError::ConfigInvalid(format!(
                    "--trace: iterates have dimension {} but the config's features have dimension {}",
                    run.iterates[0].len(),
                    p.env.feature_dim()
                )));
            }
            let eps = eps_prox.unwrap_or(p.config.eps_prox);
            if !(eps > 0.0) || !eps.is_finite() {
                return Err(CliError::ConfigInvalid(format!("--eps-prox: {eps} must be finite and > 0")));
            }
            let sweep = p.envelope(&mut run, eps)?;
            let table_path = out
                .clone()
                .unwrap_or_else(|| p.config.outputs.dir.join(format!("envelope_seed{}.csv", run.rng_seed)));
            write_file(&table_path, envelope_table(&p.provenance(), run.rng_seed, &run, &sweep).as_bytes())?;
            let summary = EnvelopeSummary::new(&p, &run, &sweep, eps);
            write_json(&table_path.with_extension("json"), &summary)?;
            say(
                g.quiet,
                format!(
                    "mean ||grad F_env||^2 = {:.6e}, rate bound = {:.6e}, bound at optimal stepsize = {:.6e}",
                    summary.mean_sq_env_grad, summary.rate_bound, summary.sample_complexity_bound
                ),
            );
            Ok(())
        }
        Command::Verify { checks, all, list, out } => {
            if *list {
                for name in verification::check_names() {
                    println!("{name}");
                }
                return Ok(());
            }
            let known = verification::check_names();
            for c in checks {
                if !known.contains(&c.as_str()) {
                    return Err(CliError::ConfigInvalid(format!(
                        "--check: unknown check {c:?}; available: {}",
                        known.join(", ")
                    )));
                }
            }
            let seed = g.seed.unwrap_or(0);
            let reports = if *all || checks.is_empty() {
                verification::run_all(seed)?
            } else {
                let mut r = Vec::new();
                for c in checks {
                    r.extend(verification::run_check(c, seed)?);
                }
                r
            };
            for r in &reports {
                say(
                    g.quiet,
                    format!(
                        "{} {}: measured {:.6e}, bound {:.6e}",
                        if r.passed { "PASS" } else { "FAIL" },
                        r.name,
                        r.measured,
                        r.bound
                    ),
                );
            }
            let failed: Vec<&str> = reports.iter().filter(|r| !r.passed).map(|r| r.name.as_str()).collect();
            let output = VerifyOutput {
                artifact_version: robust_sail::trace::ARTIFACT_VERSION,
                claim_manifest_version: CLAIM_MANIFEST_VERSION,
                seed,
                passed: failed.is_empty(),
                reports: &reports,
                uncovered_claims: verification::uncovered_claims(),
            };
            if let Some(path) = out {
                write_json(path, &output)?;
            }
            if failed.is_empty() {
                Ok(())
            } else {
                Err(CliError::CheckFailed(format!("failed checks: {}", failed.join(", "))))
            }
        }
        Command::SweepRho { rhos, probes } => {
            let p = prepared(g)?;
            let list = if rhos.is_empty() { p.config.rho_list.clone() } else { rhos.clone() };
            let report = sweep_rho(&p, &list, *probes, g.seed.unwrap_or(0))?;
            let dir = &p.config.outputs.dir;
            write_file(&dir.join("sweep_rho.csv"), report.to_csv().as_bytes())?;
            write_json(&dir.join("sweep_rho.json"), &report)?;
            for c in &report.checks {
                say(
                    g.quiet,
                    format!("{} {}: {:.3e} (tolerance {:e})", if c.passed { "PASS" } else { "FAIL" }, c.name, c.measured, c.tolerance),
                );
            }
            if report.passed() {
                Ok(())
            } else {
                Err(CliError::CheckFailed("radius sweep properties violated".into()))
            }
        }
        Command::Run => {
            let p = prepared(g)?;
            let (summary, artifacts) = run_experiment(&p, &p.config.outputs.dir)?;
            say(
                g.quiet,
                format!(
                    "{} seeds, T = {}: mean ||grad F_env||^2 = {:.6e}, rate bound = {:.6e}",
                    summary.seeds.len(),
                    summary.horizon_t,
                    summary.mean_sq_env_grad,
                    summary.rate_bound
                ),
            );
            say(g.quiet, format!("summary: {}", artifacts.summary.display()));
            say(g.quiet, format!("plot data: {}", artifacts.plot_data.display()));
            Ok(())
        }
    }
}
