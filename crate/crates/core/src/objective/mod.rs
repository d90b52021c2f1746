//! Exact evaluation of the SAIL loss, the robust penalty and its smoothing, the
//! robust objective along two independent paths, and their derivatives.
//!
//! Every term is an expectation over `z ~ d_theta` of a per-triple scalar function
//! `f_z(s)` of the pairwise logit `s = (theta - theta_ref)^T delta_psi(z)`. With the
//! score `S = grad log d_theta(z)` and `grad S = -2 Cov_{pi(.|x)} psi`:
//!
//! ```text
//! grad   E[f] = E[f' dpsi + f S]
//! hess   E[f] = E[f'' dpsi dpsi^T + f' (dpsi S^T + S dpsi^T) + f (S S^T - 2 Cov_x)]
//! ```

pub mod constants;

use serde::{Deserialize, Serialize};

use crate::environment::{ComparisonTriple, Environment};
use crate::error::{Error, Result};
use crate::numeric::{sigmoid, softplus, KahanSum, KahanVec, Matrix, Vector};
use crate::oracle::{worst_case_prob, TrueOracle, UncertaintyConfig};
use crate::policy::{PolicyParams, PolicyState};

pub use constants::{ConstantsBundle, ConstantsInput};

/// Algorithm and objective hyperparameters. The robust weight is `lambda = rho * beta`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hyperparams {
    pub beta: f64,
    pub rho: f64,
    pub eps_smooth: f64,
    pub eta: f64,
    pub horizon_t: usize,
    pub batch_b: usize,
    pub lambda_env: f64,
}

impl Hyperparams {
    pub fn new(
        beta: f64,
        rho: f64,
        eps_smooth: f64,
        eta: f64,
        horizon_t: usize,
        batch_b: usize,
        lambda_env: f64,
    ) -> Result<Self> {
        let h = Self {
            beta,
            rho,
            eps_smooth,
            eta,
            horizon_t,
            batch_b,
            lambda_env,
        };
        h.validate()?;
        Ok(h)
    }

    /// Objective-only settings; algorithm fields get placeholders.
    pub fn for_objective(beta: f64, rho: f64) -> Result<Self> {
        Self::new(beta, rho, 1e-8, 1.0, 1, 1, 1.0)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidHyperparams(msg));
        if !(self.beta > 0.0) || !self.beta.is_finite() {
            return bad(format!("beta={} must be finite and > 0", self.beta));
        }
        if !(self.rho >= 0.0) || !self.rho.is_finite() {
            return bad(format!("rho={} must be finite and >= 0", self.rho));
        }
        if !(self.eps_smooth > 0.0) || !self.eps_smooth.is_finite() {
            return bad(format!("eps_smooth={} must be finite and > 0", self.eps_smooth));
        }
        if !(self.eta >= 0.0) || !self.eta.is_finite() {
            return bad(format!("eta={} must be finite and >= 0", self.eta));
        }
        if self.horizon_t == 0 {
            return bad("horizon_t must be >= 1".into());
        }
        if self.batch_b == 0 {
            return bad("batch_b must be >= 1".into());
        }
        if !(self.lambda_env > 0.0) || !self.lambda_env.is_finite() {
            return bad(format!("lambda_env={} must be finite and > 0", self.lambda_env));
        }
        Ok(())
    }

    /// `lambda = rho * beta`.
    pub fn lambda(&self) -> f64 {
        self.rho * self.beta
    }

    pub fn uncertainty(&self) -> UncertaintyConfig {
        UncertaintyConfig { rho: self.rho }
    }

    pub fn with_rho(&self, rho: f64) -> Self {
        Self { rho, ..self.clone() }
    }
}

/// How far to differentiate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Order {
    Value,
    Gradient,
    Hessian,
}

/// Value with optional first and second derivatives.
#[derive(Debug, Clone)]
pub struct Derivatives {
    pub value: f64,
    pub grad: Option<Vector>,
    pub hessian: Option<Matrix>,
}

/// `E_{z ~ d_theta}[f_z(s_theta(z))]` and its derivatives, where `f` returns
/// `(f, f', f'')` at the pairwise logit. Compensated sums in enumeration order.
pub fn expect_scalar_fn<F>(state: &PolicyState<'_>, order: Order, mut f: F) -> Result<Derivatives>
where
    F: FnMut(ComparisonTriple, f64) -> (f64, f64, f64),
{
    let env = state.env();
    env.check_enumeration_cap()?;
    let d = env.feature_dim();
    let mut value = KahanSum::new();
    let mut grad = KahanVec::zeros(if order >= Order::Gradient { d } else { 0 });
    let mut hess = KahanVec::zeros(if order >= Order::Hessian { d * d } else { 0 });
    // per-prompt mass of f, multiplying -2 Cov_x in the Hessian
    let mut cov_weight = vec![KahanSum::new(); env.n_prompts()];

    for z in env.triples() {
        let w = state.triple_weight(z);
        let s = state.pairwise_logit(z);
        let (fv, f1, f2) = f(z, s);
        value.add(w * fv);
        if order == Order::Value {
            continue;
        }
        let dpsi = env.delta_psi(z);
        let score = state.triple_score(z);
        let g = &dpsi * f1 + &score * fv;
        grad.add_scaled(w, g.as_slice());
        if order == Order::Hessian {
            let m = &dpsi * dpsi.transpose() * f2
                + (&dpsi * score.transpose() + &score * dpsi.transpose()) * f1
                + &score * score.transpose() * fv;
            hess.add_scaled(w, m.as_slice());
            cov_weight[z.x].add(w * fv);
        }
    }

    let grad = (order >= Order::Gradient).then(|| grad.to_vector());
    let hessian = (order == Order::Hessian).then(|| {
        let mut h = hess.to_matrix(d);
        for (x, c) in cov_weight.iter().enumerate() {
            h -= state.feature_covariance(x) * (2.0 * c.value());
        }
        h
    });
    Ok(Derivatives {
        value: value.value(),
        grad,
        hessian,
    })
}

/// Expected SAIL loss at a triple with preference probability `p` as a function of
/// the logit: `(l, dl/ds, d2l/ds2)`.
pub fn sail_scalar(p: f64, beta: f64, s: f64) -> (f64, f64, f64) {
    let u = beta * s;
    let value = p * softplus(-u) + (1.0 - p) * softplus(u);
    let d1 = beta * ((1.0 - p) * sigmoid(u) - p * sigmoid(-u));
    let d2 = beta * beta * sigmoid(u) * sigmoid(-u);
    (value, d1, d2)
}

/// `phi_eps(s) = sqrt(s^2 + eps^2)` with its first two derivatives.
pub fn smoothed_abs(s: f64, eps: f64) -> (f64, f64, f64) {
    let phi = s.hypot(eps);
    let r = eps / phi;
    (phi, s / phi, r * r / phi)
}

/// `|s|` with the subgradient selection `sign(0) = 0`.
pub fn abs_with_sign(s: f64) -> (f64, f64, f64) {
    let sign = if s > 0.0 {
        1.0
    } else if s < 0.0 {
        -1.0
    } else {
        0.0
    };
    (s.abs(), sign, 0.0)
}

/// `(ell1, ell0) = (softplus(-beta h), softplus(beta h))` with `h` the pairwise logit.
pub fn per_sample_losses(env: &Environment, params: &PolicyParams, hyper: &Hyperparams, z: ComparisonTriple) -> (f64, f64) {
    let h = crate::policy::pairwise_logit(env, params, z);
    (softplus(-hyper.beta * h), softplus(hyper.beta * h))
}

fn check_dims(env: &Environment, params: &PolicyParams) -> Result<()> {
    if params.dim() != env.feature_dim() {
        return Err(Error::InvalidParams(format!(
            "parameter dimension {} does not match feature dimension {}",
            params.dim(),
            env.feature_dim()
        )));
    }
    Ok(())
}

fn check_oracle(env: &Environment, oracle: &TrueOracle) -> Result<()> {
    let table = oracle.reward_table();
    if table.len() != env.n_prompts() || table.iter().any(|r| r.len() != env.n_responses()) {
        return Err(Error::InvalidParams("reward table shape does not match the environment".into()));
    }
    Ok(())
}

/// SAIL loss, gradient or Hessian under the true oracle.
pub fn sail_derivatives(
    env: &Environment,
    params: &PolicyParams,
    oracle: &TrueOracle,
    hyper: &Hyperparams,
    order: Order,
) -> Result<Derivatives> {
    check_dims(env, params)?;
    check_oracle(env, oracle)?;
    let state = PolicyState::new(env, params);
    let beta = hyper.beta;
    expect_scalar_fn(&state, order, |z, s| sail_scalar(oracle.true_prob(z), beta, s))
}

/// `L_SAIL(theta) = E_{d_theta}[p* ell1 + (1 - p*) ell0]`.
pub fn sail_loss_exact(env: &Environment, params: &PolicyParams, oracle: &TrueOracle, hyper: &Hyperparams) -> Result<f64> {
    Ok(sail_derivatives(env, params, oracle, hyper, Order::Value)?.value)
}

pub fn sail_grad_exact(env: &Environment, params: &PolicyParams, oracle: &TrueOracle, hyper: &Hyperparams) -> Result<Vector> {
    Ok(sail_derivatives(env, params, oracle, hyper, Order::Gradient)?.grad.expect("gradient requested"))
}

pub fn sail_hessian_exact(env: &Environment, params: &PolicyParams, oracle: &TrueOracle, hyper: &Hyperparams) -> Result<Matrix> {
    Ok(sail_derivatives(env, params, oracle, hyper, Order::Hessian)?.hessian.expect("hessian requested"))
}

/// `R(theta) = E_{d_theta} |s_theta(z)|`.
pub fn robust_penalty_exact(env: &Environment, params: &PolicyParams) -> Result<f64> {
    check_dims(env, params)?;
    let state = PolicyState::new(env, params);
    Ok(expect_scalar_fn(&state, Order::Value, |_, s| abs_with_sign(s))?.value)
}

/// `E[sign(s) dpsi + |s| S]` with `sign(0) = 0`, an element of the subdifferential of `R`.
pub fn penalty_subgrad_exact(env: &Environment, params: &PolicyParams) -> Result<Vector> {
    check_dims(env, params)?;
    let state = PolicyState::new(env, params);
    Ok(expect_scalar_fn(&state, Order::Gradient, |_, s| abs_with_sign(s))?
        .grad
        .expect("gradient requested"))
}

/// `R_eps(theta) = E_{d_theta} sqrt(s^2 + eps^2)` and derivatives.
pub fn smoothed_penalty_derivatives(env: &Environment, params: &PolicyParams, eps: f64, order: Order) -> Result<Derivatives> {
    check_dims(env, params)?;
    if !(eps > 0.0) {
        return Err(Error::InvalidHyperparams(format!("eps_smooth={eps} must be > 0")));
    }
    let state = PolicyState::new(env, params);
    expect_scalar_fn(&state, order, |_, s| smoothed_abs(s, eps))
}

pub fn robust_penalty_smoothed(env: &Environment, params: &PolicyParams, eps: f64) -> Result<f64> {
    Ok(smoothed_penalty_derivatives(env, params, eps, Order::Value)?.value)
}

pub fn robust_penalty_smoothed_grad(env: &Environment, params: &PolicyParams, eps: f64) -> Result<Vector> {
    Ok(smoothed_penalty_derivatives(env, params, eps, Order::Gradient)?
        .grad
        .expect("gradient requested"))
}

pub fn robust_penalty_smoothed_hessian(env: &Environment, params: &PolicyParams, eps: f64) -> Result<Matrix> {
    Ok(smoothed_penalty_derivatives(env, params, eps, Order::Hessian)?
        .hessian
        .expect("hessian requested"))
}

/// `L_SAIL + lambda R`.
pub fn robust_objective_closed_form(
    env: &Environment,
    params: &PolicyParams,
    oracle: &TrueOracle,
    hyper: &Hyperparams,
) -> Result<f64> {
    hyper.uncertainty().check_admissible(oracle)?;
    let sail = sail_loss_exact(env, params, oracle, hyper)?;
    let penalty = robust_penalty_exact(env, params)?;
    Ok(sail + hyper.lambda() * penalty)
}

/// Expected loss under the explicit adversarial oracle, with the logit taken from
/// policy log-ratios. Independent of the closed form above.
pub fn robust_objective_worstcase(
    env: &Environment,
    params: &PolicyParams,
    oracle: &TrueOracle,
    hyper: &Hyperparams,
) -> Result<f64> {
    check_dims(env, params)?;
    check_oracle(env, oracle)?;
    env.check_enumeration_cap()?;
    let cfg: UncertaintyConfig = hyper.uncertainty();
    cfg.check_admissible(oracle)?;
    let state = PolicyState::new(env, params);
    let mut acc = KahanSum::new();
    for z in env.triples() {
        let h = state.log_ratio_logit(z);
        let ell1 = softplus(-hyper.beta * h);
        let ell0 = softplus(hyper.beta * h);
        let p = worst_case_prob(oracle, &cfg, &state, z)?;
        acc.add(state.triple_weight(z) * (p * ell1 + (1.0 - p) * ell0));
    }
    Ok(acc.value())
}

/// `L_SAIL + lambda R_eps` and derivatives: the differentiable surrogate of the robust
/// objective used by the proximal solver.
pub fn smoothed_objective_derivatives(
    env: &Environment,
    params: &PolicyParams,
    oracle: &TrueOracle,
    hyper: &Hyperparams,
    order: Order,
) -> Result<Derivatives> {
    check_dims(env, params)?;
    check_oracle(env, oracle)?;
    let state = PolicyState::new(env, params);
    let (beta, lambda, eps) = (hyper.beta, hyper.lambda(), hyper.eps_smooth);
    expect_scalar_fn(&state, order, |z, s| {
        let (a0, a1, a2) = sail_scalar(oracle.true_prob(z), beta, s);
        if lambda == 0.0 {
            return (a0, a1, a2);
        }
        let (b0, b1, b2) = smoothed_abs(s, eps);
        (a0 + lambda * b0, a1 + lambda * b1, a2 + lambda * b2)
    })
}

/// An element of the subdifferential of `L_SAIL + lambda R` (with `sign(0) = 0`).
pub fn robust_subgrad_exact(env: &Environment, params: &PolicyParams, oracle: &TrueOracle, hyper: &Hyperparams) -> Result<Vector> {
    Ok(sail_grad_exact(env, params, oracle, hyper)? + penalty_subgrad_exact(env, params)? * hyper.lambda())
}

/// Per-sample SAIL loss for an observed label (`true` means `y1` preferred).
pub fn sample_loss(state: &PolicyState<'_>, beta: f64, z: ComparisonTriple, label: bool) -> f64 {
    let s = state.pairwise_logit(z);
    if label {
        softplus(-beta * s)
    } else {
        softplus(beta * s)
    }
}

/// Single-sample SAIL gradient `grad ell(z, y) + ell(z, y) S(z)`.
pub fn sail_sample_grad(state: &PolicyState<'_>, beta: f64, z: ComparisonTriple, label: bool) -> Vector {
    let s = state.pairwise_logit(z);
    let (loss, slope) = if label {
        (softplus(-beta * s), -beta * sigmoid(-beta * s))
    } else {
        (softplus(beta * s), beta * sigmoid(beta * s))
    };
    state.env().delta_psi(z) * slope + state.triple_score(z) * loss
}

/// Single-sample penalty subgradient `sign(s) dpsi + |s| S`.
pub fn penalty_sample_subgrad(state: &PolicyState<'_>, z: ComparisonTriple) -> Vector {
    let (abs, sign, _) = abs_with_sign(state.pairwise_logit(z));
    state.env().delta_psi(z) * sign + state.triple_score(z) * abs
}

#[cfg(test)]
mod tests;
