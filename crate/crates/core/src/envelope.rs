//! Moreau envelope of `F = L_SAIL + lambda R_eps + I_ball` through an inner proximal
//! solve, trajectory sweeps, and stationarity certificates for inexact proximal points.

use log::debug;
use nalgebra::SymmetricEigen;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::environment::Environment;
use crate::error::{Error, Result};
use crate::numeric::{Matrix, Vector};
use crate::objective::{smoothed_objective_derivatives, ConstantsBundle, Derivatives, Hyperparams, Order};
use crate::optimizer::RunTrace;
use crate::oracle::TrueOracle;
use crate::policy::{project_onto_ball, PolicyParams};

/// Relative tolerance for deciding that a point sits on the sphere.
const BOUNDARY_TOL: f64 = 1e-12;
/// Armijo sufficient-decrease constant.
const ARMIJO: f64 = 1e-4;
/// Relative size below which value differences are treated as roundoff.
const VALUE_ROUNDOFF: f64 = 64.0 * f64::EPSILON;

pub const DEFAULT_NEWTON_ITERS: usize = 500;
pub const DEFAULT_GRADIENT_ITERS: usize = 100_000;

/// The feasible set `{u : ||u - center|| <= radius}`.
#[derive(Debug, Clone, PartialEq)]
pub struct Ball {
    pub center: Vector,
    pub radius: f64,
}

impl Ball {
    pub fn new(center: Vector, radius: f64) -> Self {
        Self { center, radius }
    }

    pub fn of(params: &PolicyParams) -> Self {
        Self::new(params.theta_ref.clone(), params.radius_d)
    }

    pub fn project(&self, u: &Vector) -> Vector {
        project_onto_ball(u, &self.center, self.radius)
    }

    pub fn on_boundary(&self, u: &Vector) -> bool {
        (u - &self.center).norm() >= self.radius * (1.0 - BOUNDARY_TOL)
    }

    pub fn contains(&self, u: &Vector) -> bool {
        (u - &self.center).norm() <= self.radius * (1.0 + BOUNDARY_TOL)
    }
}

/// `dist(0, g + N_ball(u))`: the gradient norm inside the ball, and on the sphere the
/// norm of `g + t n` with the outward normal `n` and `t = max(0, -<g, n>)`.
pub fn normal_cone_residual(grad: &Vector, u: &Vector, ball: &Ball) -> f64 {
    if !ball.on_boundary(u) {
        return grad.norm();
    }
    let offset = u - &ball.center;
    let n = &offset / offset.norm();
    let t = (-grad.dot(&n)).max(0.0);
    (grad + n * t).norm()
}

/// A smooth function whose proximal subproblem over a ball is to be solved.
pub trait ProxObjective: Sync {
    fn evaluate(&self, u: &Vector, order: Order) -> Result<Derivatives>;

    /// Upper bound on the Hessian spectrum, used by the fixed-step gradient method.
    fn upper_curvature(&self) -> Option<f64> {
        None
    }
}

/// `L_SAIL + lambda R_eps` for an environment and oracle.
pub struct SmoothedRobustObjective<'a> {
    pub env: &'a Environment,
    pub oracle: &'a TrueOracle,
    pub hyper: &'a Hyperparams,
    pub template: PolicyParams,
    pub curvature_bound: Option<f64>,
}

impl<'a> SmoothedRobustObjective<'a> {
    pub fn new(env: &'a Environment, oracle: &'a TrueOracle, hyper: &'a Hyperparams, template: &PolicyParams) -> Self {
        Self {
            env,
            oracle,
            hyper,
            template: template.clone(),
            curvature_bound: None,
        }
    }

    /// Conservative upper curvature `L_SAIL + lambda c_eps` where `c_eps` bounds every
    /// term of the Hessian of `R_eps`: `4 B^2 / eps` from `phi'' ||dpsi||^2`, `16 B^2`
    /// from the cross terms, and `(2 D B + eps)(16 B^2 + 2 B^2)` from the score terms.
    pub fn with_curvature_from(mut self, bundle: &ConstantsBundle) -> Self {
        let b = self.env.b_psi();
        let eps = self.hyper.eps_smooth;
        let d = self.template.radius_d;
        let c_eps = 4.0 * b * b / eps + 16.0 * b * b + (2.0 * d * b + eps) * 18.0 * b * b;
        self.curvature_bound = Some(bundle.l_sail_smooth + self.hyper.lambda() * c_eps);
        self
    }
}

impl ProxObjective for SmoothedRobustObjective<'_> {
    fn evaluate(&self, u: &Vector, order: Order) -> Result<Derivatives> {
        smoothed_objective_derivatives(self.env, &self.template.at(u.clone()), self.oracle, self.hyper, order)
    }

    fn upper_curvature(&self) -> Option<f64> {
        self.curvature_bound
    }
}

/// `f(u) = ||u||^2 / 2`.
pub struct HalfSquaredNorm;

impl ProxObjective for HalfSquaredNorm {
    fn evaluate(&self, u: &Vector, order: Order) -> Result<Derivatives> {
        Ok(Derivatives {
            value: 0.5 * u.norm_squared(),
            grad: (order >= Order::Gradient).then(|| u.clone()),
            hessian: (order == Order::Hessian).then(|| Matrix::identity(u.len(), u.len())),
        })
    }

    fn upper_curvature(&self) -> Option<f64> {
        Some(1.0)
    }
}

/// `f(u) = sum_i sqrt(u_i^2 + eps^2)`, a smoothed absolute value.
pub struct SmoothedAbs {
    pub eps: f64,
}

impl ProxObjective for SmoothedAbs {
    fn evaluate(&self, u: &Vector, order: Order) -> Result<Derivatives> {
        let parts: Vec<(f64, f64, f64)> = u.iter().map(|&v| crate::objective::smoothed_abs(v, self.eps)).collect();
        Ok(Derivatives {
            value: parts.iter().map(|p| p.0).sum(),
            grad: (order >= Order::Gradient).then(|| Vector::from_iterator(u.len(), parts.iter().map(|p| p.1))),
            hessian: (order == Order::Hessian).then(|| Matrix::from_diagonal(&Vector::from_iterator(u.len(), parts.iter().map(|p| p.2)))),
        })
    }

    fn upper_curvature(&self) -> Option<f64> {
        Some(1.0 / self.eps)
    }
}

/// Inner solver for the proximal subproblem.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InnerMethod {
    /// Projected Newton with a ball-constrained quadratic model and Armijo backtracking.
    #[default]
    ProjectedNewton,
    /// Projected gradient with the fixed step `1 / (upper curvature + 1/lambda_env)`.
    ProjectedGradient,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProxSettings {
    pub method: InnerMethod,
    pub max_iters: usize,
}

impl Default for ProxSettings {
    fn default() -> Self {
        Self::newton()
    }
}

impl ProxSettings {
    pub fn newton() -> Self {
        Self {
            method: InnerMethod::ProjectedNewton,
            max_iters: DEFAULT_NEWTON_ITERS,
        }
    }

    pub fn gradient() -> Self {
        Self {
            method: InnerMethod::ProjectedGradient,
            max_iters: DEFAULT_GRADIENT_ITERS,
        }
    }
}

/// Outcome of one proximal solve at `anchor`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProxResult {
    pub anchor: Vector,
    pub prox_point: Vector,
    /// `f(prox) + ||prox - anchor||^2 / (2 lambda_env)`.
    pub env_value: f64,
    /// `(anchor - prox) / lambda_env`.
    pub env_grad: Vector,
    /// `dist(0, grad Psi(prox) + N_ball(prox))`.
    pub residual: f64,
    pub inner_iters: usize,
    pub converged: bool,
}

struct Psi<'a, O: ProxObjective + ?Sized> {
    obj: &'a O,
    anchor: &'a Vector,
    inv_lambda: f64,
}

impl<O: ProxObjective + ?Sized> Psi<'_, O> {
    fn eval(&self, u: &Vector, order: Order) -> Result<Derivatives> {
        let mut d = self.obj.evaluate(u, order)?;
        let diff = u - self.anchor;
        d.value += 0.5 * self.inv_lambda * diff.norm_squared();
        if let Some(g) = d.grad.as_mut() {
            *g += &diff * self.inv_lambda;
        }
        if let Some(h) = d.hessian.as_mut() {
            for i in 0..h.nrows() {
                h[(i, i)] += self.inv_lambda;
            }
        }
        Ok(d)
    }
}

/// Minimizes `f(u) + ||u - anchor||^2 / (2 lambda_env)` over `ball`, starting from
/// `start` (projected) or the projected anchor. Never fails on the iteration cap;
/// check `converged`.
pub fn solve<O: ProxObjective + ?Sized>(
    obj: &O,
    ball: &Ball,
    lambda_env: f64,
    anchor: &Vector,
    start: Option<&Vector>,
    eps_prox: f64,
    settings: &ProxSettings,
) -> Result<ProxResult> {
    if !(lambda_env > 0.0) || !lambda_env.is_finite() {
        return Err(Error::InvalidHyperparams(format!("lambda_env={lambda_env} must be finite and > 0")));
    }
    if !(eps_prox > 0.0) {
        return Err(Error::InvalidHyperparams(format!("eps_prox={eps_prox} must be > 0")));
    }
    let psi = Psi {
        obj,
        anchor,
        inv_lambda: 1.0 / lambda_env,
    };
    let mut u = ball.project(start.unwrap_or(anchor));
    let order = match settings.method {
        InnerMethod::ProjectedNewton => Order::Hessian,
        InnerMethod::ProjectedGradient => Order::Gradient,
    };
    let fixed_step = match settings.method {
        InnerMethod::ProjectedGradient => {
            let upper = obj.upper_curvature().ok_or_else(|| {
                Error::InvalidHyperparams("projected gradient needs an upper curvature bound".into())
            })?;
            Some(1.0 / (upper + psi.inv_lambda))
        }
        InnerMethod::ProjectedNewton => None,
    };

    let mut iters = 0;
    let mut current = psi.eval(&u, order)?;
    let mut residual = normal_cone_residual(current.grad.as_ref().expect("gradient"), &u, ball);
    while residual > eps_prox && iters < settings.max_iters {
        iters += 1;
        let next = match fixed_step {
            Some(alpha) => {
                let g = current.grad.as_ref().expect("gradient");
                Some(ball.project(&(&u - g * alpha)))
            }
            None => newton_step(&psi, ball, &u, &current, residual)?,
        };
        let Some(next) = next else {
            debug!("inner solver stalled at residual {residual:e} after {iters} iterations");
            break;
        };
        u = next;
        current = psi.eval(&u, order)?;
        residual = normal_cone_residual(current.grad.as_ref().expect("gradient"), &u, ball);
    }

    let env_grad = (anchor - &u) * psi.inv_lambda;
    Ok(ProxResult {
        anchor: anchor.clone(),
        env_value: current.value,
        env_grad,
        prox_point: u,
        residual,
        inner_iters: iters,
        converged: residual <= eps_prox,
    })
}

/// Target of the ball-constrained quadratic model `g^T p + p^T H p / 2`, using an
/// eigendecomposition with eigenvalues floored to keep the model convex.
fn model_target(h: &Matrix, g: &Vector, u: &Vector, ball: &Ball) -> Vector {
    let sym = (h + h.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let top = eig.eigenvalues.iter().fold(0.0_f64, |a, v| a.max(v.abs()));
    let floor = 1e-12 * top.max(1e-300);
    let lams: Vec<f64> = eig.eigenvalues.iter().map(|&l| l.max(floor)).collect();
    let q = &eig.eigenvectors;
    let solve_shifted = |rhs: &Vector, nu: f64| -> Vector {
        let c = q.transpose() * rhs;
        let scaled = Vector::from_iterator(c.len(), c.iter().zip(&lams).map(|(ci, li)| ci / (li + nu)));
        q * scaled
    };
    let newton = u - solve_shifted(g, 0.0);
    if ball.contains(&newton) {
        return newton;
    }
    // on the sphere: u + p = c + w(nu) with w(nu) = (H + nu I)^{-1} (H (u - c) - g),
    // ||w|| decreasing in nu
    let h_floor = q * Matrix::from_diagonal(&Vector::from_vec(lams.clone())) * q.transpose();
    let r = h_floor * (u - &ball.center) - g;
    let norm_at = |nu: f64| solve_shifted(&r, nu).norm();
    let (mut lo, mut hi) = (0.0, r.norm() / ball.radius + lams.iter().fold(0.0_f64, |a, &l| a.max(l)));
    while norm_at(hi) > ball.radius {
        hi *= 2.0;
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if norm_at(mid) > ball.radius {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let w = solve_shifted(&r, hi);
    let wn = w.norm();
    if wn == 0.0 {
        return ball.center.clone();
    }
    &ball.center + w * (ball.radius / wn)
}

fn newton_step<O: ProxObjective + ?Sized>(
    psi: &Psi<'_, O>,
    ball: &Ball,
    u: &Vector,
    current: &Derivatives,
    residual: f64,
) -> Result<Option<Vector>> {
    let g = current.grad.as_ref().expect("gradient");
    let h = current.hessian.as_ref().expect("hessian");
    let target = model_target(h, g, u, ball);
    if let Some(next) = backtrack(psi, ball, u, current, residual, &target)? {
        return Ok(Some(next));
    }
    // fall back to a projected gradient step scaled by the largest curvature
    let top = crate::numeric::sym_spectral_norm(h).max(psi.inv_lambda);
    let target = ball.project(&(u - g / top));
    backtrack(psi, ball, u, current, residual, &target)
}

/// Armijo search on the feasible segment from `u` to `target`. Near the minimizer,
/// value differences fall below roundoff; a step is then accepted if it lowers the
/// stationarity residual instead.
fn backtrack<O: ProxObjective + ?Sized>(
    psi: &Psi<'_, O>,
    ball: &Ball,
    u: &Vector,
    current: &Derivatives,
    residual: f64,
    target: &Vector,
) -> Result<Option<Vector>> {
    let g = current.grad.as_ref().expect("gradient");
    let dir = target - u;
    let slope = g.dot(&dir);
    if !(slope < 0.0) || dir.norm() == 0.0 {
        return Ok(None);
    }
    let roundoff = VALUE_ROUNDOFF * current.value.abs().max(1.0);
    let mut t = 1.0;
    for _ in 0..60 {
        let cand = ball.project(&(u + &dir * t));
        let v = psi.eval(&cand, Order::Value)?.value;
        if v <= current.value + ARMIJO * t * slope {
            return Ok(Some(cand));
        }
        if (v - current.value).abs() <= roundoff {
            let d = psi.eval(&cand, Order::Gradient)?;
            if normal_cone_residual(d.grad.as_ref().expect("gradient"), &cand, ball) < residual {
                return Ok(Some(cand));
            }
        }
        t *= 0.5;
    }
    Ok(None)
}

fn check_envelope_param(bundle: &ConstantsBundle) -> Result<()> {
    if bundle.lambda_env > 0.0 && bundle.kappa * bundle.lambda_env < 1.0 {
        Ok(())
    } else {
        Err(Error::InvalidEnvelopeParam {
            lambda_env: bundle.lambda_env,
            kappa: bundle.kappa,
        })
    }
}

/// Stopping tolerance for solves whose value feeds a bound, such as `F_env(theta_0)`.
pub const TIGHT_EPS_PROX: f64 = 1e-11;

/// [`solve`] at [`TIGHT_EPS_PROX`]. Stalling is tolerated while the residual stays
/// below `1e-9`, where roundoff in the objective dominates.
pub fn tight_solve<O: ProxObjective + ?Sized>(
    obj: &O,
    ball: &Ball,
    lambda_env: f64,
    anchor: &Vector,
    start: Option<&Vector>,
) -> Result<ProxResult> {
    let r = solve(obj, ball, lambda_env, anchor, start, TIGHT_EPS_PROX, &ProxSettings::default())?;
    if !r.converged && r.residual > 1e-9 {
        return Err(Error::MaxInnerItersExceeded {
            iters: r.inner_iters,
            residual: r.residual,
        });
    }
    Ok(r)
}

/// Proximal point of the smoothed robust objective at `anchor`, with `lambda_env` from
/// the bundle. Errors if the iteration cap is hit before `residual <= eps_prox`.
pub fn prox_solve(
    env: &Environment,
    oracle: &TrueOracle,
    hyper: &Hyperparams,
    bundle: &ConstantsBundle,
    template: &PolicyParams,
    anchor: &Vector,
    eps_prox: f64,
) -> Result<ProxResult> {
    prox_solve_with(env, oracle, hyper, bundle, template, anchor, None, eps_prox, &ProxSettings::default())
}

#[allow(clippy::too_many_arguments)]
pub fn prox_solve_with(
    env: &Environment,
    oracle: &TrueOracle,
    hyper: &Hyperparams,
    bundle: &ConstantsBundle,
    template: &PolicyParams,
    anchor: &Vector,
    start: Option<&Vector>,
    eps_prox: f64,
    settings: &ProxSettings,
) -> Result<ProxResult> {
    check_envelope_param(bundle)?;
    let obj = SmoothedRobustObjective::new(env, oracle, hyper, template).with_curvature_from(bundle);
    let result = solve(&obj, &Ball::of(template), bundle.lambda_env, anchor, start, eps_prox, settings)?;
    if !result.converged {
        return Err(Error::MaxInnerItersExceeded {
            iters: result.inner_iters,
            residual: result.residual,
        });
    }
    Ok(result)
}

/// Per-iterate prox data and the comparison against the rate bounds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvelopeSweep {
    pub residuals: Vec<f64>,
    pub inner_iters: Vec<usize>,
    pub env_values: Vec<f64>,
    /// `||theta_t - prox_t|| - lambda_env ||grad F_env(theta_t)||` per iterate.
    pub identity_gaps: Vec<f64>,
    pub mean_sq_env_grad: f64,
    pub f_env0: f64,
    /// Rate bound at the trace's stepsize.
    pub rate_bound: f64,
    /// Rate bound at the optimal stepsize.
    pub sample_complexity_bound: f64,
    /// Upper bound `lambda eps` on the envelope shift caused by smoothing.
    pub smoothing_bias: f64,
    pub all_converged: bool,
}

/// Fills `trace.grad_norms_env` with `||grad F_env(theta_t)||`. With `warm_start`, each
/// solve starts from the previous proximal point; otherwise solves run in parallel from
/// their anchors. Solves that hit the iteration cap are kept and flagged through
/// `all_converged` and the residuals.
#[allow(clippy::too_many_arguments)]
pub fn envelope_grad_along_trace(
    env: &Environment,
    oracle: &TrueOracle,
    hyper: &Hyperparams,
    bundle: &ConstantsBundle,
    template: &PolicyParams,
    trace: &mut RunTrace,
    eps_prox: f64,
    warm_start: bool,
) -> Result<EnvelopeSweep> {
    check_envelope_param(bundle)?;
    let obj = SmoothedRobustObjective::new(env, oracle, hyper, template).with_curvature_from(bundle);
    let ball = Ball::of(template);
    let settings = ProxSettings::default();
    let results: Vec<ProxResult> = if warm_start {
        let mut out: Vec<ProxResult> = Vec::with_capacity(trace.iterates.len());
        for theta in &trace.iterates {
            let start = out.last().map(|r| r.prox_point.clone());
            out.push(solve(&obj, &ball, bundle.lambda_env, theta, start.as_ref(), eps_prox, &settings)?);
        }
        out
    } else {
        trace
            .iterates
            .par_iter()
            .map(|theta| solve(&obj, &ball, bundle.lambda_env, theta, None, eps_prox, &settings))
            .collect::<Result<Vec<_>>>()?
    };
    let norms: Vec<f64> = results.iter().map(|r| r.env_grad.norm()).collect();
    let identity_gaps = results
        .iter()
        .zip(&norms)
        .map(|(r, n)| (&r.anchor - &r.prox_point).norm() - bundle.lambda_env * n)
        .collect();
    trace.grad_norms_env = Some(norms);
    let f_env0 = results[0].env_value;
    let horizon = trace.horizon().max(1);
    Ok(EnvelopeSweep {
        residuals: results.iter().map(|r| r.residual).collect(),
        inner_iters: results.iter().map(|r| r.inner_iters).collect(),
        env_values: results.iter().map(|r| r.env_value).collect(),
        identity_gaps,
        mean_sq_env_grad: trace.mean_sq_env_grad().unwrap_or(0.0),
        f_env0,
        rate_bound: bundle.rate_bound(trace.eta, horizon, f_env0),
        sample_complexity_bound: bundle.sample_complexity_bound(horizon, f_env0),
        smoothing_bias: bundle.lambda * hyper.eps_smooth,
        all_converged: results.iter().all(|r| r.converged),
    })
}

/// Near-stationarity guarantee for a computed proximal point `bar` at `theta`.
///
/// With strong convexity `mu` of the subproblem, the exact proximal point `hat`
/// satisfies `||bar - hat|| <= residual / mu`, and
/// `dist(0, dF(bar)) <= ||grad F_env(theta)|| + eps_prox + ||bar - hat|| / lambda_env`.
/// The exact envelope gradient is itself bounded by the computed one plus
/// `||bar - hat|| / lambda_env`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StationarityCertificate {
    pub env_grad_norm: f64,
    pub eps_prox: f64,
    pub residual: f64,
    pub prox_gap_bound: f64,
    pub certified_bound: f64,
    /// `dist(0, grad f(bar) + N_ball(bar))`, measured.
    pub measured_dist: f64,
    pub slack: f64,
}

pub fn stationarity_certificate<O: ProxObjective + ?Sized>(
    obj: &O,
    ball: &Ball,
    lambda_env: f64,
    strong_convexity: f64,
    prox: &ProxResult,
    eps_prox: f64,
) -> Result<StationarityCertificate> {
    if !(strong_convexity > 0.0) {
        return Err(Error::InvalidHyperparams(format!(
            "subproblem strong convexity {strong_convexity} must be > 0"
        )));
    }
    let env_grad_norm = prox.env_grad.norm();
    let prox_gap_bound = prox.residual / strong_convexity;
    let exact_env_grad_bound = env_grad_norm + prox_gap_bound / lambda_env;
    let certified_bound = exact_env_grad_bound + eps_prox.max(prox.residual) + prox_gap_bound / lambda_env;
    let d = obj.evaluate(&prox.prox_point, Order::Gradient)?;
    let measured_dist = normal_cone_residual(d.grad.as_ref().expect("gradient"), &prox.prox_point, ball);
    Ok(StationarityCertificate {
        env_grad_norm,
        eps_prox,
        residual: prox.residual,
        prox_gap_bound,
        certified_bound,
        measured_dist,
        slack: certified_bound - measured_dist,
    })
}

/// Certificate for the smoothed robust objective using the bundle's constants.
#[allow(clippy::too_many_arguments)]
pub fn robust_stationarity_certificate(
    env: &Environment,
    oracle: &TrueOracle,
    hyper: &Hyperparams,
    bundle: &ConstantsBundle,
    template: &PolicyParams,
    prox: &ProxResult,
    eps_prox: f64,
) -> Result<StationarityCertificate> {
    let obj = SmoothedRobustObjective::new(env, oracle, hyper, template);
    stationarity_certificate(
        &obj,
        &Ball::of(template),
        bundle.lambda_env,
        bundle.prox_strong_convexity(hyper.eps_smooth),
        prox,
        eps_prox,
    )
}
