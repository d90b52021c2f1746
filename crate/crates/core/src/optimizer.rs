//! Stochastic gradient oracles and the projected stochastic composite gradient loop.

use std::time::Instant;

use log::warn;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::environment::{ComparisonTriple, Environment};
use crate::error::{Error, Result};
use crate::numeric::{KahanVec, Vector};
use crate::objective::{
    penalty_sample_subgrad, robust_objective_closed_form, sail_sample_grad, ConstantsBundle, Hyperparams,
};
use crate::oracle::{sample_label, OracleMode, TrueOracle};
use crate::policy::{PolicyParams, PolicyState};

/// Stream labels derived from the master seed. Each consumer owns one stream so that,
/// for example, changing the batch size never perturbs the output-index draw.
pub mod streams {
    pub const TRIPLES: u64 = 1;
    pub const LABELS: u64 = 2;
    pub const OUTPUT_INDEX: u64 = 3;
    /// Probes and draws for estimating model-dependent constants.
    pub const CONSTANTS: u64 = 4;
}

/// ChaCha20 stream `stream` of the master `seed`.
pub fn derived_rng(seed: u64, stream: u64) -> ChaCha20Rng {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Triples drawn i.i.d. from `d_theta` with one label each (`true` means `y1` preferred).
#[derive(Debug, Clone, PartialEq)]
pub struct MiniBatch {
    pub triples: Vec<ComparisonTriple>,
    pub labels: Vec<bool>,
}

impl MiniBatch {
    pub fn new(triples: Vec<ComparisonTriple>, labels: Vec<bool>) -> Result<Self> {
        if triples.len() != labels.len() {
            return Err(Error::InvalidParams(format!(
                "batch has {} triples but {} labels",
                triples.len(),
                labels.len()
            )));
        }
        if triples.is_empty() {
            return Err(Error::InvalidParams("batch must be nonempty".into()));
        }
        Ok(Self { triples, labels })
    }

    pub fn len(&self) -> usize {
        self.triples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.triples.is_empty()
    }
}

/// Samples `size` triples from `d_theta` and labels them under `mode`.
pub fn draw_batch<R1: Rng + ?Sized, R2: Rng + ?Sized>(
    state: &PolicyState<'_>,
    oracle: &TrueOracle,
    hyper: &Hyperparams,
    mode: OracleMode,
    size: usize,
    triple_rng: &mut R1,
    label_rng: &mut R2,
) -> Result<MiniBatch> {
    let sampler = state.sampler();
    let cfg = hyper.uncertainty();
    let triples: Vec<ComparisonTriple> = (0..size).map(|_| sampler.sample(triple_rng)).collect();
    let labels = triples
        .iter()
        .map(|&z| sample_label(mode, oracle, &cfg, state, z, label_rng))
        .collect::<Result<Vec<_>>>()?;
    MiniBatch::new(triples, labels)
}

/// Batch mean of `grad ell(z_i, y_i) + ell(z_i, y_i) S(z_i)`.
pub fn stoch_grad_sail(state: &PolicyState<'_>, beta: f64, batch: &MiniBatch) -> Vector {
    let mut acc = KahanVec::zeros(state.env().feature_dim());
    for (&z, &label) in batch.triples.iter().zip(&batch.labels) {
        acc.add_scaled(1.0, sail_sample_grad(state, beta, z, label).as_slice());
    }
    acc.to_vector() / batch.len() as f64
}

/// Batch mean of `sign(s) dpsi + |s| S`. Ignores labels.
pub fn stoch_subgrad_penalty(state: &PolicyState<'_>, batch: &MiniBatch) -> Vector {
    let mut acc = KahanVec::zeros(state.env().feature_dim());
    for &z in &batch.triples {
        acc.add_scaled(1.0, penalty_sample_subgrad(state, z).as_slice());
    }
    acc.to_vector() / batch.len() as f64
}

/// `G = G_SAIL + lambda G_R`.
pub fn composite_direction(state: &PolicyState<'_>, hyper: &Hyperparams, batch: &MiniBatch) -> Vector {
    let g = stoch_grad_sail(state, hyper.beta, batch);
    let lambda = hyper.lambda();
    if lambda == 0.0 {
        return g;
    }
    g + stoch_subgrad_penalty(state, batch) * lambda
}

/// Optional per-iterate work during a run.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunOptions {
    /// Evaluate the exact robust objective at every iterate (one enumeration each).
    pub log_exact_loss: bool,
    /// Record wall-clock nanoseconds per iteration. Off by default so traces are
    /// byte-reproducible.
    pub record_wall_time: bool,
}

/// Record of one run: `T + 1` iterates and everything measured along the way.
#[derive(Debug, Clone, PartialEq)]
pub struct RunTrace {
    pub iterates: Vec<Vector>,
    pub losses: Option<Vec<f64>>,
    pub grad_norms_env: Option<Vec<f64>>,
    pub wall_ns: Vec<u64>,
    pub output_index: usize,
    pub rng_seed: u64,
    pub oracle_mode: OracleMode,
    pub eta: f64,
}

impl RunTrace {
    pub fn horizon(&self) -> usize {
        self.iterates.len().saturating_sub(1)
    }

    /// The returned iterate `theta_R`.
    pub fn output(&self) -> &Vector {
        &self.iterates[self.output_index]
    }

    /// Mean of `||grad F_env(theta_t)||^2` over `t = 0..T-1`, the expectation over the
    /// uniform output index given this trajectory.
    pub fn mean_sq_env_grad(&self) -> Option<f64> {
        let norms = self.grad_norms_env.as_ref()?;
        let t = self.horizon().min(norms.len());
        if t == 0 {
            return None;
        }
        Some(norms[..t].iter().map(|n| n * n).sum::<f64>() / t as f64)
    }
}

/// Runs `T = hyper.horizon_t` projected steps `theta <- Proj(theta - eta G(theta; Z_t))`
/// with a fresh on-policy batch each step.
pub fn rscgd_run(
    env: &Environment,
    oracle: &TrueOracle,
    hyper: &Hyperparams,
    theta0: &PolicyParams,
    seed: u64,
    mode: OracleMode,
    options: RunOptions,
) -> Result<RunTrace> {
    hyper.validate()?;
    hyper.uncertainty().check_admissible(oracle)?;
    if !theta0.is_feasible() {
        return Err(Error::InvalidParams("theta0 lies outside the feasible ball".into()));
    }
    if theta0.dim() != env.feature_dim() {
        return Err(Error::InvalidParams(format!(
            "theta0 has dimension {} but features have dimension {}",
            theta0.dim(),
            env.feature_dim()
        )));
    }
    let mut triple_rng = derived_rng(seed, streams::TRIPLES);
    let mut label_rng = derived_rng(seed, streams::LABELS);
    let mut index_rng = derived_rng(seed, streams::OUTPUT_INDEX);

    let t_max = hyper.horizon_t;
    let mut iterates = Vec::with_capacity(t_max + 1);
    let mut wall_ns = Vec::with_capacity(t_max + 1);
    let mut losses = options.log_exact_loss.then(|| Vec::with_capacity(t_max + 1));
    let mut params = theta0.clone();
    iterates.push(params.theta.clone());
    wall_ns.push(0);
    if let Some(l) = losses.as_mut() {
        l.push(robust_objective_closed_form(env, &params, oracle, hyper)?);
    }

    for t in 0..t_max {
        let start = options.record_wall_time.then(Instant::now);
        let state = PolicyState::new(env, &params);
        let batch = draw_batch(&state, oracle, hyper, mode, hyper.batch_b, &mut triple_rng, &mut label_rng)?;
        let direction = composite_direction(&state, hyper, &batch);
        let candidate = &params.theta - direction * hyper.eta;
        if candidate.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteIterate { t: t + 1 });
        }
        params.theta = params.project_feasible(&candidate);
        iterates.push(params.theta.clone());
        if let Some(l) = losses.as_mut() {
            l.push(robust_objective_closed_form(env, &params, oracle, hyper)?);
        }
        wall_ns.push(start.map_or(0, |s| s.elapsed().as_nanos() as u64));
    }

    Ok(RunTrace {
        iterates,
        losses,
        grad_norms_env: None,
        wall_ns,
        output_index: index_rng.random_range(0..t_max),
        rng_seed: seed,
        oracle_mode: mode,
        eta: hyper.eta,
    })
}

/// `eta = sqrt(2 lambda_env (1 - kappa lambda_env)(F_env(theta_0) - F_inf) / (G_tot^2 T))`.
pub fn auto_stepsize(bundle: &ConstantsBundle, horizon_t: usize, f_env_at_theta0: f64) -> Result<f64> {
    if !(bundle.lambda_env > 0.0) || !(bundle.kappa * bundle.lambda_env < 1.0) {
        return Err(Error::InvalidEnvelopeParam {
            lambda_env: bundle.lambda_env,
            kappa: bundle.kappa,
        });
    }
    if horizon_t == 0 {
        return Err(Error::InvalidHyperparams("horizon_t must be >= 1".into()));
    }
    if f_env_at_theta0 < bundle.f_inf {
        return Err(Error::InvalidHyperparams(format!(
            "envelope value {f_env_at_theta0} lies below the lower bound {}",
            bundle.f_inf
        )));
    }
    let eta = bundle.optimal_stepsize(horizon_t, f_env_at_theta0);
    if eta == 0.0 {
        warn!("envelope value at theta_0 equals its lower bound; the stepsize is zero");
    }
    Ok(eta)
}
