//! Experiment configuration: a versioned JSON document.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use robust_sail::{EnvironmentDocument, OracleMode, RandomEnvironmentSpec};

use crate::error::CliError;

pub const CONFIG_VERSION: u32 = 1;

/// A number or the keyword `"auto"`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum AutoOr {
    Value(f64),
    Keyword(AutoKeyword),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AutoKeyword {
    Auto,
}

impl AutoOr {
    pub const AUTO: AutoOr = AutoOr::Keyword(AutoKeyword::Auto);

    pub fn value(self) -> Option<f64> {
        match self {
            AutoOr::Value(v) => Some(v),
            AutoOr::Keyword(_) => None,
        }
    }
}

impl Default for AutoOr {
    fn default() -> Self {
        Self::AUTO
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RandomEnvironmentConfig {
    pub seed: u64,
    #[serde(flatten)]
    pub spec: RandomEnvironmentSpec,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchmarkConfig {
    #[serde(default = "default_benchmark_seed")]
    pub seed: u64,
}

fn default_benchmark_seed() -> u64 {
    robust_sail::instances::BENCHMARK_SEED
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EnvironmentSource {
    Inline(EnvironmentDocument),
    File(PathBuf),
    Random(RandomEnvironmentConfig),
    /// The two-prompt, four-response benchmark; pairs with the `benchmark` oracle.
    Benchmark(BenchmarkConfig),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OracleSource {
    /// Reward table `r*(x, y)`, one row per prompt.
    Reward(Vec<Vec<f64>>),
    /// JSON file of the form `{"reward": [[...]]}`.
    File(PathBuf),
    Random { seed: u64, scale: f64 },
    Benchmark,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PolicyConfig {
    /// Defaults to the zero vector.
    #[serde(default)]
    pub theta_ref: Option<Vec<f64>>,
    /// Defaults to `theta_ref`.
    #[serde(default)]
    pub theta0: Option<Vec<f64>>,
    #[serde(default = "default_radius")]
    pub radius_d: f64,
}

fn default_radius() -> f64 {
    2.0
}

impl Default for PolicyConfig {
    fn default() -> Self {
        Self {
            theta_ref: None,
            theta0: None,
            radius_d: default_radius(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HyperparamsConfig {
    pub beta: f64,
    pub rho: f64,
    #[serde(default = "default_eps_smooth")]
    pub eps_smooth: f64,
    /// `"auto"` uses the stepsize that minimizes the rate bound for this horizon.
    #[serde(default)]
    pub eta: AutoOr,
    pub horizon_t: usize,
    #[serde(default = "default_batch")]
    pub batch_b: usize,
    /// `"auto"` uses `0.5 / kappa`.
    #[serde(default)]
    pub lambda_env: AutoOr,
}

fn default_eps_smooth() -> f64 {
    1e-8
}

fn default_batch() -> usize {
    8
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConstantsConfig {
    /// Skips the smoothness probe when set.
    #[serde(default)]
    pub l_sail_smooth: Option<f64>,
    #[serde(default)]
    pub estimation_seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputConfig {
    #[serde(default = "default_out_dir")]
    pub dir: PathBuf,
    #[serde(default = "default_trace_prefix")]
    pub trace_prefix: String,
    #[serde(default = "default_summary")]
    pub summary: String,
    #[serde(default = "default_plot_data")]
    pub plot_data: String,
}

fn default_out_dir() -> PathBuf {
    PathBuf::from("out")
}

fn default_trace_prefix() -> String {
    "trace_seed".into()
}

fn default_summary() -> String {
    "summary.json".into()
}

fn default_plot_data() -> String {
    "plot_data.csv".into()
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self {
            dir: default_out_dir(),
            trace_prefix: default_trace_prefix(),
            summary: default_summary(),
            plot_data: default_plot_data(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub version: u32,
    pub environment: EnvironmentSource,
    pub oracle: OracleSource,
    #[serde(default)]
    pub policy: PolicyConfig,
    pub hyperparams: HyperparamsConfig,
    #[serde(default)]
    pub oracle_mode: OracleMode,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub constants: ConstantsConfig,
    /// Stopping tolerance of the proximal solves along a trace.
    #[serde(default = "default_eps_prox")]
    pub eps_prox: f64,
    #[serde(default)]
    pub rho_list: Vec<f64>,
    #[serde(default)]
    pub record_wall_time: bool,
    #[serde(default)]
    pub outputs: OutputConfig,
}

fn default_seeds() -> Vec<u64> {
    vec![0]
}

fn default_eps_prox() -> f64 {
    1e-8
}

impl ExperimentConfig {
    /// Parses a config, reporting the JSON path of the offending field on failure.
    pub fn from_json(text: &str) -> Result<Self, CliError> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let config: Self = serde_path_to_error::deserialize(de)
            .map_err(|e| CliError::ConfigInvalid(format!("{}: {}", e.path(), e.inner())))?;
        config.validate()?;
        Ok(config)
    }

    pub fn from_file(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(format!("reading config {}", path.display()), e))?;
        let mut config = Self::from_json(&text)?;
        if let Some(base) = path.parent() {
            config.resolve_paths(base);
        }
        Ok(config)
    }

    /// Makes relative file references relative to `base`.
    pub fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        if let EnvironmentSource::File(p) = &mut self.environment {
            fix(p);
        }
        if let OracleSource::File(p) = &mut self.oracle {
            fix(p);
        }
    }

    /// Checks that need no environment; the rest happen when the config is materialized.
    pub fn validate(&self) -> Result<(), CliError> {
        let mut problems = Vec::new();
        if self.version != CONFIG_VERSION {
            problems.push(format!("version: expected {CONFIG_VERSION}, found {}", self.version));
        }
        if self.seeds.is_empty() {
            problems.push("seeds: at least one seed is required".into());
        }
        let mut sorted = self.seeds.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != self.seeds.len() {
            problems.push("seeds: seeds must be distinct".into());
        }
        if !(self.eps_prox > 0.0) || !self.eps_prox.is_finite() {
            problems.push(format!("eps_prox: {} must be finite and > 0", self.eps_prox));
        }
        let h = &self.hyperparams;
        if let Some(eta) = h.eta.value() {
            if !(eta > 0.0) || !eta.is_finite() {
                problems.push(format!("hyperparams.eta: {eta} must be finite and > 0, or \"auto\""));
            }
        }
        if let Some(l) = h.lambda_env.value() {
            if !(l > 0.0) || !l.is_finite() {
                problems.push(format!("hyperparams.lambda_env: {l} must be finite and > 0, or \"auto\""));
            }
        }
        if !(self.policy.radius_d > 0.0) || !self.policy.radius_d.is_finite() {
            problems.push(format!("policy.radius_d: {} must be finite and > 0", self.policy.radius_d));
        }
        let benchmark_env = matches!(self.environment, EnvironmentSource::Benchmark(_));
        let benchmark_oracle = matches!(self.oracle, OracleSource::Benchmark);
        if benchmark_oracle && !benchmark_env {
            problems.push("oracle: the benchmark oracle requires the benchmark environment".into());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(CliError::ConfigInvalid(problems.join("; ")))
        }
    }
}
