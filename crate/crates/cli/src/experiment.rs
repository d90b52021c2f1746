//! Pipelines behind the subcommands: materializing a config, training, envelope sweeps,
//! the full experiment and the radius sweep.

use std::fs;
use std::path::{Path, PathBuf};

use log::{info, warn};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::json;

use robust_sail::envelope::{envelope_grad_along_trace, tight_solve, Ball, EnvelopeSweep, SmoothedRobustObjective};
use robust_sail::instances::benchmark;
use robust_sail::objective::constants::{estimate_input, probe_points};
use robust_sail::objective::{robust_objective_closed_form, robust_penalty_exact, sail_loss_exact};
use robust_sail::optimizer::{auto_stepsize, derived_rng, rscgd_run, streams, RunOptions, RunTrace};
use robust_sail::trace::{content_digest, write_trace, TraceMetadata, ARTIFACT_VERSION, TRACE_SCHEMA_VERSION};
use robust_sail::verification::{CLAIM_MANIFEST_VERSION, IDENTITY_TOL};
use robust_sail::{ConstantsBundle, Environment, Hyperparams, OracleMode, PolicyParams, TrueOracle, Vector};

use crate::config::{EnvironmentSource, ExperimentConfig, OracleSource, OutputConfig};
use crate::error::{CliError, CliResult};

/// Stream of the probe points in a radius sweep.
const SWEEP_STREAM: u64 = 5;

/// A config turned into concrete objects, with constants estimated and `"auto"` values
/// resolved.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub config: ExperimentConfig,
    pub env: Environment,
    pub oracle: TrueOracle,
    pub theta0: PolicyParams,
    /// `eta` and `lambda_env` are the resolved values.
    pub hyper: Hyperparams,
    pub bundle: ConstantsBundle,
    pub f_env0: f64,
    pub digest: String,
}

/// Provenance fields shared by every JSON artifact.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub config_digest: String,
    pub artifact_version: String,
    pub claim_manifest_version: u32,
    pub trace_schema_version: u32,
}

impl Provenance {
    pub fn new(digest: &str) -> Self {
        Self {
            config_digest: digest.to_string(),
            artifact_version: ARTIFACT_VERSION.to_string(),
            claim_manifest_version: CLAIM_MANIFEST_VERSION,
            trace_schema_version: TRACE_SCHEMA_VERSION,
        }
    }

    fn csv_header(&self, seed: Option<u64>) -> String {
        let mut s = format!(
            "# schema_version: {}\n# artifact_version: {}\n# claim_manifest_version: {}\n# config_digest: {}\n",
            self.trace_schema_version, self.artifact_version, self.claim_manifest_version, self.config_digest
        );
        if let Some(seed) = seed {
            s.push_str(&format!("# seed: {seed}\n"));
        }
        s
    }
}

fn read_file(path: &Path, what: &str) -> CliResult<String> {
    fs::read_to_string(path).map_err(|e| CliError::io(format!("reading {what} {}", path.display()), e))
}

pub fn write_file(path: &Path, bytes: &[u8]) -> CliResult<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| CliError::io(format!("creating {}", dir.display()), e))?;
    }
    fs::write(path, bytes).map_err(|e| CliError::io(format!("writing {}", path.display()), e))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(robust_sail::Error::from)?;
    text.push('\n');
    write_file(path, text.as_bytes())
}

fn load_environment(config: &ExperimentConfig) -> CliResult<Environment> {
    let field = CliError::in_config("environment");
    match &config.environment {
        EnvironmentSource::Inline(doc) => Environment::from_document(doc.clone()).map_err(field),
        EnvironmentSource::File(path) => Environment::from_json(&read_file(path, "environment")?).map_err(field),
        EnvironmentSource::Random(r) => Environment::random(&r.spec, r.seed).map_err(field),
        EnvironmentSource::Benchmark(b) => Ok(benchmark(b.seed, config.hyperparams.rho).map_err(field)?.env),
    }
}

fn load_oracle(config: &ExperimentConfig, env: &Environment) -> CliResult<TrueOracle> {
    let field = CliError::in_config("oracle");
    match &config.oracle {
        OracleSource::Reward(table) => TrueOracle::new(env, table.clone()).map_err(field),
        OracleSource::File(path) => TrueOracle::from_json(env, &read_file(path, "reward table")?).map_err(field),
        OracleSource::Random { seed, scale } => TrueOracle::random(env, *scale, &mut derived_rng(*seed, 0)).map_err(field),
        OracleSource::Benchmark => {
            let EnvironmentSource::Benchmark(b) = &config.environment else {
                return Err(CliError::ConfigInvalid("oracle: the benchmark oracle requires the benchmark environment".into()));
            };
            Ok(benchmark(b.seed, config.hyperparams.rho).map_err(field)?.oracle)
        }
    }
}

fn load_policy(config: &ExperimentConfig, d: usize) -> CliResult<PolicyParams> {
    let p = &config.policy;
    let check_dim = |name: &str, v: &[f64]| {
        if v.len() == d {
            Ok(())
        } else {
            Err(CliError::ConfigInvalid(format!(
                "policy.{name}: has {} entries but the features have dimension {d}",
                v.len()
            )))
        }
    };
    let theta_ref = match &p.theta_ref {
        Some(v) => {
            check_dim("theta_ref", v)?;
            Vector::from_vec(v.clone())
        }
        None => Vector::zeros(d),
    };
    let theta0 = match &p.theta0 {
        Some(v) => {
            check_dim("theta0", v)?;
            Vector::from_vec(v.clone())
        }
        None => theta_ref.clone(),
    };
    PolicyParams::new(theta0, theta_ref, p.radius_d).map_err(CliError::in_config("policy"))
}

/// Content hash over everything that determines the results: the config without its
/// output locations, the environment and the reward table.
fn digest_of(config: &ExperimentConfig, env: &Environment, oracle: &TrueOracle) -> CliResult<String> {
    let mut canonical = config.clone();
    canonical.outputs = OutputConfig::default();
    canonical.record_wall_time = false;
    // file contents are hashed below; the location is irrelevant
    if let EnvironmentSource::File(p) = &mut canonical.environment {
        *p = p.file_name().map(PathBuf::from).unwrap_or_default();
    }
    if let OracleSource::File(p) = &mut canonical.oracle {
        *p = p.file_name().map(PathBuf::from).unwrap_or_default();
    }
    let value = json!({
        "config": canonical,
        "environment": env.to_document(),
        "reward": oracle.reward_table(),
    });
    let bytes = serde_json::to_vec(&value).map_err(robust_sail::Error::from)?;
    Ok(content_digest(&bytes))
}

/// Builds the instance, estimates the constants, and resolves `"auto"` settings. The
/// envelope value at `theta_0` comes from one tight proximal solve.
pub fn prepare(config: &ExperimentConfig) -> CliResult<Prepared> {
    config.validate()?;
    let env = load_environment(config)?;
    env.check_enumeration_cap().map_err(CliError::in_config("environment"))?;
    let oracle = load_oracle(config, &env)?;
    let theta0 = load_policy(config, env.feature_dim())?;
    let h = &config.hyperparams;
    let mut hyper = Hyperparams::new(h.beta, h.rho, h.eps_smooth, 1.0, h.horizon_t, h.batch_b, 1.0)
        .map_err(CliError::in_config("hyperparams"))?;
    hyper.uncertainty().check_admissible(&oracle).map_err(CliError::in_config("hyperparams.rho"))?;

    let mut rng = derived_rng(config.constants.estimation_seed, streams::CONSTANTS);
    let input = estimate_input(&env, &oracle, &theta0, &hyper, config.constants.l_sail_smooth, &mut rng)
        .map_err(CliError::in_config("constants"))?;
    let lambda_env = h.lambda_env.value().unwrap_or_else(|| input.auto_lambda_env());
    let bundle = input.bundle(lambda_env).map_err(CliError::in_config("hyperparams.lambda_env"))?;
    hyper.lambda_env = bundle.lambda_env;

    let obj = SmoothedRobustObjective::new(&env, &oracle, &hyper, &theta0).with_curvature_from(&bundle);
    let f_env0 = tight_solve(&obj, &Ball::of(&theta0), bundle.lambda_env, &theta0.theta, None)?.env_value;
    hyper.eta = match h.eta.value() {
        Some(eta) => eta,
        None => auto_stepsize(&bundle, h.horizon_t, f_env0)?,
    };
    let digest = digest_of(config, &env, &oracle)?;
    info!(
        "prepared instance: |X|={} |Y|={} d={} delta={:.4} kappa={:.4} lambda_env={:.4e} eta={:.4e} F_env(theta_0)={:.6}",
        env.n_prompts(),
        env.n_responses(),
        env.feature_dim(),
        oracle.delta(),
        bundle.kappa,
        bundle.lambda_env,
        hyper.eta,
        f_env0
    );
    Ok(Prepared {
        config: config.clone(),
        env,
        oracle,
        theta0,
        hyper,
        bundle,
        f_env0,
        digest,
    })
}

impl Prepared {
    pub fn train(&self, seed: u64, mode: OracleMode, log_exact_loss: bool) -> CliResult<RunTrace> {
        let options = RunOptions {
            log_exact_loss,
            record_wall_time: self.config.record_wall_time,
        };
        Ok(rscgd_run(&self.env, &self.oracle, &self.hyper, &self.theta0, seed, mode, options)?)
    }

    /// Fills the envelope-gradient column of `trace`. Uses the warm-started chain, so
    /// results do not depend on the thread count.
    pub fn envelope(&self, trace: &mut RunTrace, eps_prox: f64) -> CliResult<EnvelopeSweep> {
        let hyper = Hyperparams {
            eta: trace.eta,
            ..self.hyper.clone()
        };
        let sweep = envelope_grad_along_trace(&self.env, &self.oracle, &hyper, &self.bundle, &self.theta0, trace, eps_prox, true)?;
        if !sweep.all_converged {
            let worst = sweep.residuals.iter().cloned().fold(0.0, f64::max);
            warn!("some proximal solves stopped at the iteration cap; largest residual {worst:.3e}");
        }
        Ok(sweep)
    }

    pub fn trace_bytes(&self, trace: &RunTrace) -> CliResult<Vec<u8>> {
        let mut buf = Vec::new();
        write_trace(&mut buf, trace, &TraceMetadata::for_trace(trace, &self.digest))?;
        Ok(buf)
    }

    pub fn provenance(&self) -> Provenance {
        Provenance::new(&self.digest)
    }
}

/// Per-iterate envelope table: `t, env_grad_norm, residual, inner_iters, env_value, identity_gap`.
pub fn envelope_table(prov: &Provenance, seed: u64, trace: &RunTrace, sweep: &EnvelopeSweep) -> String {
    let mut s = prov.csv_header(Some(seed));
    s.push_str("t,env_grad_norm,residual,inner_iters,env_value,identity_gap\n");
    let norms = trace.grad_norms_env.as_deref().unwrap_or(&[]);
    for t in 0..sweep.residuals.len() {
        s.push_str(&format!(
            "{t},{:?},{:?},{},{:?},{:?}\n",
            norms.get(t).copied().unwrap_or(f64::NAN),
            sweep.residuals[t],
            sweep.inner_iters[t],
            sweep.env_values[t],
            sweep.identity_gaps[t]
        ));
    }
    s
}

/// Both sides of the rate bound for one trajectory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvelopeSummary {
    #[serde(flatten)]
    pub provenance: Provenance,
    pub seed: u64,
    pub horizon_t: usize,
    pub eta: f64,
    pub lambda_env: f64,
    pub eps_prox: f64,
    /// Mean of `||grad F_env(theta_t)||^2` over `t < T`.
    pub mean_sq_env_grad: f64,
    /// `||grad F_env(theta_R)||^2` at the returned iterate.
    pub output_sq_env_grad: f64,
    pub output_index: usize,
    /// Rate bound at this trace's stepsize.
    pub rate_bound: f64,
    /// Rate bound at the optimal stepsize.
    pub sample_complexity_bound: f64,
    pub f_env0: f64,
    pub smoothing_bias: f64,
    pub max_residual: f64,
    pub all_converged: bool,
}

impl EnvelopeSummary {
    pub fn new(prepared: &Prepared, trace: &RunTrace, sweep: &EnvelopeSweep, eps_prox: f64) -> Self {
        let out_norm = trace.grad_norms_env.as_ref().map_or(f64::NAN, |n| n[trace.output_index]);
        Self {
            provenance: prepared.provenance(),
            seed: trace.rng_seed,
            horizon_t: trace.horizon(),
            eta: trace.eta,
            lambda_env: prepared.bundle.lambda_env,
            eps_prox,
            mean_sq_env_grad: sweep.mean_sq_env_grad,
            output_sq_env_grad: out_norm * out_norm,
            output_index: trace.output_index,
            rate_bound: sweep.rate_bound,
            sample_complexity_bound: sweep.sample_complexity_bound,
            f_env0: sweep.f_env0,
            smoothing_bias: sweep.smoothing_bias,
            max_residual: sweep.residuals.iter().cloned().fold(0.0, f64::max),
            all_converged: sweep.all_converged,
        }
    }
}

/// Summary of a full experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    #[serde(flatten)]
    pub provenance: Provenance,
    pub seeds: Vec<u64>,
    pub oracle_mode: OracleMode,
    pub horizon_t: usize,
    pub eta: f64,
    pub eta_auto: bool,
    pub lambda_env: f64,
    pub f_env0: f64,
    pub constants: ConstantsBundle,
    /// Seed average of the per-trajectory mean squared envelope gradient.
    pub mean_sq_env_grad: f64,
    pub rate_bound: f64,
    pub sample_complexity_bound: f64,
    pub within_rate_bound: bool,
    pub per_seed: Vec<EnvelopeSummary>,
    /// File names relative to the output directory.
    pub artifacts: Vec<PathBuf>,
}

/// Output locations of a full experiment.
#[derive(Debug, Clone, PartialEq)]
pub struct RunArtifacts {
    pub traces: Vec<PathBuf>,
    pub summary: PathBuf,
    pub plot_data: PathBuf,
}

pub fn trace_path(config: &ExperimentConfig, out_dir: &Path, seed: u64) -> PathBuf {
    out_dir.join(format!("{}{seed}.csv", config.outputs.trace_prefix))
}

/// Train, envelope sweep and summary for every configured seed. Seeds run in parallel;
/// files are written afterwards in seed order.
pub fn run_experiment(prepared: &Prepared, out_dir: &Path) -> CliResult<(RunSummary, RunArtifacts)> {
    let config = &prepared.config;
    let eps_prox = config.eps_prox;
    let results = config
        .seeds
        .par_iter()
        .map(|&seed| -> CliResult<(RunTrace, EnvelopeSweep)> {
            let mut trace = prepared.train(seed, config.oracle_mode, false)?;
            let sweep = prepared.envelope(&mut trace, eps_prox)?;
            Ok((trace, sweep))
        })
        .collect::<CliResult<Vec<_>>>()?;

    let mut traces = Vec::new();
    let mut per_seed = Vec::new();
    for (trace, sweep) in &results {
        let path = trace_path(config, out_dir, trace.rng_seed);
        write_file(&path, &prepared.trace_bytes(trace)?)?;
        traces.push(path);
        per_seed.push(EnvelopeSummary::new(prepared, trace, sweep, eps_prox));
    }

    let plot_path = out_dir.join(&config.outputs.plot_data);
    write_file(&plot_path, plot_data(prepared, &results).as_bytes())?;

    let n = per_seed.len() as f64;
    let mean_sq = per_seed.iter().map(|s| s.mean_sq_env_grad).sum::<f64>() / n;
    let horizon = prepared.hyper.horizon_t;
    let rate_bound = prepared.bundle.rate_bound(prepared.hyper.eta, horizon, prepared.f_env0);
    let summary_path = out_dir.join(&config.outputs.summary);
    let summary = RunSummary {
        provenance: prepared.provenance(),
        seeds: config.seeds.clone(),
        oracle_mode: config.oracle_mode,
        horizon_t: horizon,
        eta: prepared.hyper.eta,
        eta_auto: config.hyperparams.eta.value().is_none(),
        lambda_env: prepared.bundle.lambda_env,
        f_env0: prepared.f_env0,
        constants: prepared.bundle.clone(),
        mean_sq_env_grad: mean_sq,
        rate_bound,
        sample_complexity_bound: prepared.bundle.sample_complexity_bound(horizon, prepared.f_env0),
        within_rate_bound: mean_sq <= rate_bound,
        per_seed,
        artifacts: traces
            .iter()
            .chain([&plot_path])
            .filter_map(|p| p.file_name().map(PathBuf::from))
            .collect(),
    };
    write_json(&summary_path, &summary)?;
    if !summary.within_rate_bound {
        warn!("seed-averaged mean squared envelope gradient {mean_sq:.4e} exceeds the rate bound {rate_bound:.4e}");
    }
    Ok((
        summary,
        RunArtifacts {
            traces,
            summary: summary_path,
            plot_data: plot_path,
        },
    ))
}

/// Per-iteration seed average of `||grad F_env(theta_t)||^2` and its running mean.
fn plot_data(prepared: &Prepared, results: &[(RunTrace, EnvelopeSweep)]) -> String {
    let mut s = prepared.provenance().csv_header(None);
    s.push_str(&format!("# seeds: {}\n", results.len()));
    s.push_str("t,mean_sq_env_grad,running_mean_sq_env_grad\n");
    let len = results.iter().map(|(t, _)| t.iterates.len()).min().unwrap_or(0);
    let mut running = 0.0;
    for t in 0..len {
        let avg = results
            .iter()
            .map(|(trace, _)| trace.grad_norms_env.as_ref().map_or(f64::NAN, |n| n[t] * n[t]))
            .sum::<f64>()
            / results.len() as f64;
        running += avg;
        s.push_str(&format!("{t},{avg:?},{:?}\n", running / (t + 1) as f64));
    }
    s
}

/// One instance of the decomposition identity: the expectation under the explicit
/// adversarial oracle against `L_SAIL + lambda R`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecompositionRow {
    pub instance: usize,
    pub lhs: f64,
    pub rhs: f64,
    pub abs_diff: f64,
}

/// The identity at `theta_0` and `n_probes - 1` further feasible points of a prepared
/// instance.
pub fn decompose_config(prepared: &Prepared, n_probes: usize, seed: u64) -> CliResult<Vec<DecompositionRow>> {
    use robust_sail::objective::robust_objective_worstcase;
    let points = probes(prepared, n_probes.max(1), seed);
    points
        .iter()
        .enumerate()
        .map(|(i, theta)| {
            let params = prepared.theta0.at(theta.clone());
            let lhs = robust_objective_worstcase(&prepared.env, &params, &prepared.oracle, &prepared.hyper)?;
            let rhs = robust_objective_closed_form(&prepared.env, &params, &prepared.oracle, &prepared.hyper)?;
            Ok(DecompositionRow {
                instance: i,
                lhs,
                rhs,
                abs_diff: (lhs - rhs).abs(),
            })
        })
        .collect()
}

/// The identity on seeded random admissible instances.
pub fn decompose_random(seed: u64, n_instances: usize) -> CliResult<Vec<DecompositionRow>> {
    use robust_sail::instances::{random_instance, InstanceSpec};
    use robust_sail::objective::robust_objective_worstcase;
    let mut rng = derived_rng(seed, 0);
    let spec = InstanceSpec::default();
    (0..n_instances)
        .map(|i| {
            let inst = random_instance(&mut rng, &spec)?;
            let lhs = robust_objective_worstcase(&inst.env, &inst.params, &inst.oracle, &inst.hyper)?;
            let rhs = robust_objective_closed_form(&inst.env, &inst.params, &inst.oracle, &inst.hyper)?;
            Ok(DecompositionRow {
                instance: i,
                lhs,
                rhs,
                abs_diff: (lhs - rhs).abs(),
            })
        })
        .collect()
}

/// Exact values at one probe point and radius.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub probe: usize,
    pub rho: f64,
    pub l_sail: f64,
    pub penalty: f64,
    pub robust_loss: f64,
}

/// A pass/fail property of a radius sweep; `measured` is the largest violation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepCheck {
    pub name: String,
    pub passed: bool,
    pub measured: f64,
    pub tolerance: f64,
}

impl SweepCheck {
    fn new(name: &str, measured: f64, tolerance: f64) -> Self {
        Self {
            name: name.into(),
            passed: measured.is_finite() && measured <= tolerance,
            measured,
            tolerance,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    #[serde(flatten)]
    pub provenance: Provenance,
    pub seed: u64,
    pub beta: f64,
    pub delta: f64,
    pub rho_list: Vec<f64>,
    pub probes: Vec<Vec<f64>>,
    pub rows: Vec<SweepRow>,
    pub checks: Vec<SweepCheck>,
}

impl SweepReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn to_csv(&self) -> String {
        let mut s = self.provenance.csv_header(Some(self.seed));
        s.push_str("probe,rho,l_sail,penalty,robust_loss\n");
        for r in &self.rows {
            s.push_str(&format!("{},{:?},{:?},{:?},{:?}\n", r.probe, r.rho, r.l_sail, r.penalty, r.robust_loss));
        }
        s
    }
}

/// Largest residual of the least-squares line through `(xs, ys)`.
fn affine_fit_residual(xs: &[f64], ys: &[f64]) -> f64 {
    let n = xs.len() as f64;
    if xs.len() < 3 {
        return 0.0;
    }
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let slope = if sxx > 0.0 { sxy / sxx } else { 0.0 };
    xs.iter()
        .zip(ys)
        .map(|(x, y)| (y - (my + slope * (x - mx))).abs())
        .fold(0.0, f64::max)
}

/// Exact `L_SAIL`, `R` and the robust loss over `rho_list` at `theta_0` and random
/// feasible probes. `rho = 0` is always included.
pub fn sweep_rho(prepared: &Prepared, rho_list: &[f64], n_probes: usize, seed: u64) -> CliResult<SweepReport> {
    let delta = prepared.oracle.delta();
    let mut rhos: Vec<f64> = rho_list.to_vec();
    for (i, &rho) in rhos.iter().enumerate() {
        if !(rho >= 0.0) || !rho.is_finite() || rho >= delta {
            return Err(CliError::ConfigInvalid(format!(
                "rho_list[{i}]: rho = {rho} violates admissibility; every radius must satisfy 0 <= rho < delta = {delta}"
            )));
        }
    }
    rhos.push(0.0);
    rhos.sort_by(f64::total_cmp);
    rhos.dedup();

    let points = probes(prepared, n_probes.max(1), seed);

    let beta = prepared.hyper.beta;
    let (mut rows, mut affine, mut slope_err, mut zero_err, mut decrease) = (Vec::new(), 0.0f64, 0.0f64, 0.0f64, 0.0f64);
    for (i, theta) in points.iter().enumerate() {
        let params = prepared.theta0.at(theta.clone());
        let l_sail = sail_loss_exact(&prepared.env, &params, &prepared.oracle, &prepared.hyper)?;
        let penalty = robust_penalty_exact(&prepared.env, &params)?;
        let mut values = Vec::with_capacity(rhos.len());
        for &rho in &rhos {
            let robust_loss = robust_objective_closed_form(&prepared.env, &params, &prepared.oracle, &prepared.hyper.with_rho(rho))?;
            values.push(robust_loss);
            rows.push(SweepRow {
                probe: i,
                rho,
                l_sail,
                penalty,
                robust_loss,
            });
        }
        affine = affine.max(affine_fit_residual(&rhos, &values));
        for (rho, v) in rhos.iter().zip(&values) {
            slope_err = slope_err.max((v - values[0] - beta * penalty * (rho - rhos[0])).abs());
        }
        zero_err = zero_err.max((values[0] - l_sail).abs());
        for w in values.windows(2) {
            decrease = decrease.max(w[0] - w[1]);
        }
    }
    let checks = vec![
        SweepCheck::new("affine_in_rho", affine, IDENTITY_TOL),
        SweepCheck::new("slope_equals_beta_penalty", slope_err, IDENTITY_TOL),
        SweepCheck::new("rho_zero_equals_sail", zero_err, IDENTITY_TOL),
        SweepCheck::new("nondecreasing_in_rho", decrease, IDENTITY_TOL),
    ];
    Ok(SweepReport {
        provenance: prepared.provenance(),
        seed,
        beta,
        delta,
        rho_list: rhos,
        probes: points.iter().map(|p| p.as_slice().to_vec()).collect(),
        rows,
        checks,
    })
}

/// `theta_0` followed by distinct probe points, `n` in total.
fn probes(prepared: &Prepared, n: usize, seed: u64) -> Vec<Vector> {
    let mut rng = derived_rng(seed, SWEEP_STREAM);
    let mut points = vec![prepared.theta0.theta.clone()];
    for p in probe_points(&prepared.theta0, n + 1, &mut rng) {
        if points.len() >= n {
            break;
        }
        if !points.contains(&p) {
            points.push(p);
        }
    }
    points
}
