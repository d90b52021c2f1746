//! Executable checks of the theoretical claims. Each check evaluates both sides of an
//! identity or inequality on seeded instances and reports the worst case found.
//!
//! Reports use one of three shapes, stated in each `note`:
//! - identity: `measured` is the largest discrepancy, `bound` the allowed discrepancy;
//! - ratio: `measured` is the largest `lhs / rhs` over probes, `bound` is 1;
//! - excess: `measured` is the largest `lhs - rhs` over probes, `bound` is 0.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use std::f64::consts::{E, LN_2};

use crate::envelope::{
    envelope_grad_along_trace, normal_cone_residual, robust_stationarity_certificate, solve, Ball,
    tight_solve, ProxSettings, SmoothedAbs, SmoothedRobustObjective,
};
use crate::environment::Environment;
use crate::error::{Error, Result};
use crate::instances::{
    abs_example_env, abs_example_penalty, benchmark, random_instance, uniform_in_ball, uniform_on_sphere, Instance,
    InstanceSpec, BENCHMARK_SEED,
};
use crate::numeric::{fd, sym_min_eigenvalue, sym_spectral_norm, Vector};
use crate::objective::constants::{estimate_input, estimate_l_sail_smooth, estimate_variances};
use crate::objective::{
    penalty_sample_subgrad, penalty_subgrad_exact, robust_objective_closed_form, robust_objective_worstcase,
    robust_penalty_exact, robust_penalty_smoothed, robust_penalty_smoothed_grad, robust_subgrad_exact,
    sail_grad_exact, sail_loss_exact, sail_sample_grad, ConstantsBundle, ConstantsInput, Hyperparams,
};
use crate::optimizer::{composite_direction, auto_stepsize, derived_rng, draw_batch, rscgd_run, RunOptions};
use crate::oracle::{pointwise_sup_argmax, pointwise_sup_value, sample_label, OracleMode, TrueOracle};
use crate::policy::{fisher_information, PolicyParams, PolicyState};
use crate::trace::content_digest;

/// Version of the claim manifest below; bumped whenever claims or their coverage change.
pub const CLAIM_MANIFEST_VERSION: u32 = 1;

/// Absolute tolerance on top of the theoretical slack for one-sided bounds.
pub const ONE_SIDED_TOL: f64 = 1e-6;
/// Allowed discrepancy for analytic identities.
pub const IDENTITY_TOL: f64 = 1e-10;
/// Relative tolerance when one side comes from finite differences of prox values.
pub const FD_REL_TOL: f64 = 1e-3;
/// Relative tolerance for exact gradients against central differences.
pub const GRADIENT_REL_TOL: f64 = 1e-5;

/// `P(|Z| > 4)` for a standard normal `Z`.
const NORMAL_TAIL_4SD: f64 = 6.334_248_366_623_996e-5;

/// Smoothing used wherever a check needs the differentiable surrogate of the objective.
const CHECK_EPS_SMOOTH: f64 = 1e-8;

/// Outcome of one check.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckReport {
    pub name: String,
    pub passed: bool,
    pub measured: f64,
    pub bound: f64,
    /// `bound - measured`.
    pub slack: f64,
    /// The report passes when `slack >= -tolerance`.
    pub tolerance: f64,
    pub config_digest: String,
    pub seed: u64,
    pub note: String,
}

impl CheckReport {
    fn new(name: impl Into<String>, measured: f64, bound: f64, tolerance: f64, config: &Value, seed: u64) -> Self {
        let slack = bound - measured;
        Self {
            name: name.into(),
            passed: measured.is_finite() && slack >= -tolerance,
            measured,
            bound,
            slack,
            tolerance,
            config_digest: content_digest(config.to_string().as_bytes()),
            seed,
            note: String::new(),
        }
    }

    fn note(mut self, note: impl Into<String>) -> Self {
        self.note = note.into();
        self
    }

    fn require(mut self, ok: bool, why: &str) -> Self {
        if !ok {
            self.passed = false;
            self.note = format!("{}; FAILED: {why}", self.note);
        }
        self
    }
}

/// Claims exercised by the battery.
pub const CLAIMS: &[&str] = &[
    "sampling-distribution",
    "uncertainty-set-admissibility",
    "bradley-terry-oracle",
    "sail-objective",
    "robust-objective",
    "robust-decomposition",
    "pointwise-supremum",
    "nonconvexity-counterexample",
    "policy-regularity-constants",
    "fisher-bound",
    "penalty-weak-convexity",
    "smoothed-penalty-curvature",
    "composite-weak-convexity",
    "moreau-envelope-properties",
    "stochastic-oracle-unbiasedness",
    "composite-direction-update",
    "second-moment-bound",
    "monotonicity-inequality",
    "one-step-inequality",
    "convergence-rate",
    "sample-complexity",
    "prox-iterate-lower-bound",
    "no-universal-constant",
    "inexact-prox-stationarity",
    "inner-solver-stopping-rule",
];

/// Check name to the claims it covers.
pub const COVERAGE: &[(&str, &[&str])] = &[
    (
        "decomposition",
        &[
            "sampling-distribution",
            "uncertainty-set-admissibility",
            "bradley-terry-oracle",
            "sail-objective",
            "robust-objective",
            "robust-decomposition",
        ],
    ),
    ("pointwise_sup", &["pointwise-supremum"]),
    ("counterexample", &["nonconvexity-counterexample"]),
    ("gradients", &["sail-objective", "smoothed-penalty-curvature"]),
    ("unbiasedness", &["stochastic-oracle-unbiasedness", "composite-direction-update"]),
    ("constant_bounds", &["policy-regularity-constants", "fisher-bound", "second-moment-bound"]),
    (
        "weak_convexity",
        &[
            "penalty-weak-convexity",
            "smoothed-penalty-curvature",
            "composite-weak-convexity",
            "nonconvexity-counterexample",
        ],
    ),
    (
        "prox_properties",
        &[
            "moreau-envelope-properties",
            "monotonicity-inequality",
            "prox-iterate-lower-bound",
            "no-universal-constant",
            "inexact-prox-stationarity",
            "inner-solver-stopping-rule",
        ],
    ),
    (
        "convergence",
        &["convergence-rate", "sample-complexity", "composite-direction-update", "one-step-inequality"],
    ),
    ("one_step", &["one-step-inequality"]),
];

/// Names accepted by [`run_check`], in battery order.
pub fn check_names() -> Vec<&'static str> {
    COVERAGE.iter().map(|(name, _)| *name).collect()
}

/// Claims with no covering check.
pub fn uncovered_claims() -> Vec<&'static str> {
    CLAIMS
        .iter()
        .copied()
        .filter(|c| !COVERAGE.iter().any(|(_, claims)| claims.contains(c)))
        .collect()
}

/// Runs one named check at its default size.
pub fn run_check(name: &str, seed: u64) -> Result<Vec<CheckReport>> {
    match name {
        "decomposition" => Ok(vec![check_decomposition(seed, 100)?]),
        "pointwise_sup" => Ok(vec![check_pointwise_sup(seed, 1000, 100_000)?]),
        "counterexample" => Ok(vec![check_counterexample()?]),
        "gradients" => check_gradients(seed, 50),
        "unbiasedness" => check_unbiasedness(seed, 100_000),
        "constant_bounds" => check_constant_bounds(seed, 200),
        "weak_convexity" => check_weak_convexity(seed, 500, &[1e-2, 1e-4]),
        "prox_properties" => check_prox_properties(seed, 100),
        "convergence" => check_convergence(16, &[200, 800, 3200]),
        "one_step" => Ok(vec![check_one_step(seed, 1000)?]),
        other => Err(Error::InvalidParams(format!(
            "unknown check {other:?}; expected one of {:?}",
            check_names()
        ))),
    }
}

/// Every check in battery order.
pub fn run_all(seed: u64) -> Result<Vec<CheckReport>> {
    let mut out = Vec::new();
    for name in check_names() {
        out.extend(run_check(name, seed)?);
    }
    Ok(out)
}

fn rel_err(approx: &Vector, exact: &Vector) -> f64 {
    (approx - exact).norm() / exact.norm().max(1e-3)
}

/// Smallest `|s_theta(z)|` over triples with `y1 != y2`: the distance to the nearest kink
/// of the penalty in logit units.
fn min_offdiag_logit(env: &Environment, params: &PolicyParams) -> f64 {
    let state = PolicyState::new(env, params);
    env.triples()
        .filter(|z| z.y1 != z.y2)
        .map(|z| state.pairwise_logit(z).abs())
        .fold(f64::INFINITY, f64::min)
}

fn secant_excess(f: impl Fn(&Vector) -> Result<f64>, a: &Vector, c: &Vector, t: f64, kappa: f64) -> Result<f64> {
    let mid = a * t + c * (1.0 - t);
    let allowance = kappa * t * (1.0 - t) / 2.0 * (a - c).norm_squared();
    Ok(f(&mid)? - t * f(a)? - (1.0 - t) * f(c)? - allowance)
}

/// The closed form `L_SAIL + lambda R` against the expectation under the explicit
/// adversarial oracle, on random admissible instances.
pub fn check_decomposition(seed: u64, n_instances: usize) -> Result<CheckReport> {
    let config = json!({"check": "decomposition", "seed": seed, "n_instances": n_instances});
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let spec = InstanceSpec::default();
    let (mut worst, mut n_rho0, mut n_ref): (f64, usize, usize) = (0.0, 0, 0);
    for _ in 0..n_instances {
        let inst = random_instance(&mut rng, &spec)?;
        let closed = robust_objective_closed_form(&inst.env, &inst.params, &inst.oracle, &inst.hyper)?;
        let adversarial = robust_objective_worstcase(&inst.env, &inst.params, &inst.oracle, &inst.hyper)?;
        worst = worst.max((closed - adversarial).abs());
        if inst.hyper.rho == 0.0 {
            n_rho0 += 1;
            let sail = sail_loss_exact(&inst.env, &inst.params, &inst.oracle, &inst.hyper)?;
            worst = worst.max((closed - sail).abs());
        }
        if inst.params.theta == inst.params.theta_ref {
            n_ref += 1;
            worst = worst.max((closed - LN_2).abs()).max((adversarial - LN_2).abs());
        }
    }
    Ok(CheckReport::new("decomposition", worst, IDENTITY_TOL, 0.0, &config, seed).note(format!(
        "identity over {n_instances} instances ({n_rho0} with rho = 0, {n_ref} at theta_ref)"
    )))
}

/// Closed-form supremum of `p a + (1 - p) b` over `|p - p*| <= rho` against a grid
/// maximization.
pub fn check_pointwise_sup(seed: u64, n_cases: usize, grid_points: usize) -> Result<CheckReport> {
    let config = json!({"check": "pointwise_sup", "seed": seed, "n_cases": n_cases, "grid_points": grid_points});
    if grid_points < 2 {
        return Err(Error::InvalidParams("grid needs at least two points".into()));
    }
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut worst = f64::NEG_INFINITY;
    for _ in 0..n_cases {
        let p_star = rng.random_range(0.01..0.99);
        let rho = rng.random_range(0.0..f64::min(p_star, 1.0 - p_star));
        let a = rng.random_range(0.0..5.0);
        let b = rng.random_range(0.0..5.0);
        let closed = pointwise_sup_value(p_star, rho, a, b)?;
        let (lo, hi) = (p_star - rho, p_star + rho);
        let grid = (0..grid_points)
            .map(|k| {
                let p = lo + (hi - lo) * k as f64 / (grid_points - 1) as f64;
                p * a + (1.0 - p) * b
            })
            .fold(f64::NEG_INFINITY, f64::max);
        let p = pointwise_sup_argmax(p_star, rho, a, b);
        let at_argmax = p * a + (1.0 - p) * b;
        let resolution = 2e-5 * (a - b).abs();
        worst = worst.max((closed - grid).abs() - resolution).max((closed - at_argmax).abs() - 1e-12);
    }
    Ok(CheckReport::new("pointwise_sup", worst, 0.0, 1e-12, &config, seed).note(format!(
        "excess of |closed - grid max| over 2e-5 |a - b| on {n_cases} cases, {grid_points}-point grid"
    )))
}

fn abs_params(theta: f64) -> Result<PolicyParams> {
    PolicyParams::new(Vector::from_vec(vec![theta]), Vector::zeros(1), 10.0)
}

/// The one-dimensional two-response penalty against `2|t| e^t / (1 + e^t)^2`, and the
/// midpoint witness of nonconvexity.
pub fn check_counterexample() -> Result<CheckReport> {
    let config = json!({"check": "counterexample"});
    let env = abs_example_env();
    let penalty = |t: f64| -> Result<f64> { robust_penalty_exact(&env, &abs_params(t)?) };
    let mut worst = penalty(0.0)?.abs();
    for &t in &[0.5f64, 1.0, 2.0, -1.0] {
        let closed = 2.0 * t.abs() * t.exp() / (1.0 + t.exp()).powi(2);
        worst = worst.max((penalty(t)? - closed).abs()).max((abs_example_penalty(t) - closed).abs());
    }
    let gap = penalty(1.0)? - penalty(2.0)? / 2.0;
    let witness = 2.0 * E * (E - 1.0) * (E.powi(3) - 1.0) / ((1.0 + E).powi(2) * (1.0 + E * E).powi(2));
    worst = worst.max((gap - witness).abs());
    Ok(CheckReport::new("counterexample", worst, 1e-12, 0.0, &config, 0)
        .note(format!("identity; R(1) - R(2)/2 = {gap:.15}"))
        .require(gap > 0.0, "the midpoint gap must be strictly positive"))
}

struct InstanceClass {
    name: &'static str,
    spec: InstanceSpec,
    on_boundary: bool,
}

fn gradient_classes() -> Vec<InstanceClass> {
    let compact = InstanceSpec {
        max_prompts: 1,
        max_responses: 3,
        max_dim: 2,
        ..InstanceSpec::default()
    };
    vec![
        InstanceClass {
            name: "compact",
            spec: compact,
            on_boundary: false,
        },
        InstanceClass {
            name: "default",
            spec: InstanceSpec::default(),
            on_boundary: false,
        },
        InstanceClass {
            name: "boundary",
            spec: InstanceSpec::default(),
            on_boundary: true,
        },
    ]
}

fn draw_theta<R: Rng + ?Sized>(rng: &mut R, params: &PolicyParams, on_boundary: bool) -> Vector {
    if on_boundary {
        uniform_on_sphere(rng, &params.theta_ref, params.radius_d)
    } else {
        uniform_in_ball(rng, &params.theta_ref, params.radius_d)
    }
}

/// Exact gradients of `L_SAIL` and `R_eps` (`eps = 1e-6`) against central differences.
/// Probes within `1e-3` of a penalty kink are redrawn for `R_eps`, since a difference
/// stencil straddling a kink of width `eps` measures the stencil, not the gradient.
pub fn check_gradients(seed: u64, n_per_class: usize) -> Result<Vec<CheckReport>> {
    const EPS: f64 = 1e-6;
    const STEP: f64 = 1e-5;
    let config = json!({"check": "gradients", "seed": seed, "n_per_class": n_per_class, "eps": EPS, "step": STEP});
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let (mut worst_sail, mut worst_pen): (f64, f64) = (0.0, 0.0);
    let mut redraws = 0usize;
    for class in gradient_classes() {
        for _ in 0..n_per_class {
            let inst = random_instance(&mut rng, &class.spec)?;
            let params = if class.on_boundary {
                inst.params.at(draw_theta(&mut rng, &inst.params, true))
            } else {
                inst.params.clone()
            };
            let g = sail_grad_exact(&inst.env, &params, &inst.oracle, &inst.hyper)?;
            let numeric = fd::gradient(
                |t| sail_loss_exact(&inst.env, &params.at(t.clone()), &inst.oracle, &inst.hyper).expect("validated instance"),
                &params.theta,
                STEP,
            );
            worst_sail = worst_sail.max(rel_err(&numeric, &g));

            let mut params = params;
            let mut tries = 0;
            while min_offdiag_logit(&inst.env, &params) < 1e-3 {
                tries += 1;
                if tries > 1000 {
                    return Err(Error::InvalidParams(format!("no kink-free probe found in class {}", class.name)));
                }
                params = params.at(draw_theta(&mut rng, &params, class.on_boundary));
            }
            redraws += tries;
            let g = robust_penalty_smoothed_grad(&inst.env, &params, EPS)?;
            let numeric = fd::gradient(
                |t| robust_penalty_smoothed(&inst.env, &params.at(t.clone()), EPS).expect("validated instance"),
                &params.theta,
                STEP,
            );
            worst_pen = worst_pen.max(rel_err(&numeric, &g));
        }
    }
    let classes = "compact, default, boundary";
    Ok(vec![
        CheckReport::new("gradients.sail", worst_sail, GRADIENT_REL_TOL, 0.0, &config, seed)
            .note(format!("identity in relative error ||fd - g|| / max(||g||, 1e-3); classes {classes}")),
        CheckReport::new("gradients.smoothed_penalty", worst_pen, GRADIENT_REL_TOL, 0.0, &config, seed).note(format!(
            "identity in relative error at eps = {EPS}; classes {classes}; {redraws} near-kink probes redrawn"
        )),
    ])
}

#[derive(Clone)]
struct Welford {
    n: f64,
    mean: Vec<f64>,
    m2: Vec<f64>,
}

impl Welford {
    fn new(d: usize) -> Self {
        Self {
            n: 0.0,
            mean: vec![0.0; d],
            m2: vec![0.0; d],
        }
    }

    fn push(&mut self, v: &Vector) {
        self.n += 1.0;
        for (i, &x) in v.iter().enumerate() {
            let delta = x - self.mean[i];
            self.mean[i] += delta / self.n;
            self.m2[i] += delta * (x - self.mean[i]);
        }
    }

    /// Per-coordinate `(mean - target) / standard error`, or `None` for coordinates with
    /// zero sample variance whose mean misses the target.
    fn z_scores(&self, target: &Vector) -> Vec<Option<f64>> {
        (0..self.mean.len())
            .map(|i| {
                let diff = self.mean[i] - target[i];
                let var = self.m2[i] / (self.n - 1.0);
                if var > 0.0 {
                    Some(diff / (var / self.n).sqrt())
                } else if diff.abs() <= 1e-12 {
                    Some(0.0)
                } else {
                    None
                }
            })
            .collect()
    }
}

/// Coordinate-wise means of the single-sample SAIL gradient and penalty subgradient over
/// `n_samples` on-policy draws with true-oracle labels, against the exact values.
pub fn check_unbiasedness(seed: u64, n_samples: usize) -> Result<Vec<CheckReport>> {
    const N_INSTANCES: usize = 8;
    let config = json!({"check": "unbiasedness", "seed": seed, "n_samples": n_samples, "instances": N_INSTANCES});
    if n_samples < 2 {
        return Err(Error::InvalidParams("unbiasedness needs at least two samples".into()));
    }
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut outside = [0usize; 2];
    let mut max_z = [0.0f64; 2];
    let mut coords = 0usize;
    for k in 0..N_INSTANCES {
        let mut inst = random_instance(&mut rng, &InstanceSpec::default())?;
        if inst.params.theta == inst.params.theta_ref {
            inst.params = inst.params.at(uniform_in_ball(&mut rng, &inst.params.theta_ref, inst.params.radius_d));
        }
        let state = PolicyState::new(&inst.env, &inst.params);
        let sampler = state.sampler();
        let cfg = inst.hyper.uncertainty();
        let mut triple_rng = derived_rng(seed.wrapping_add(k as u64), crate::optimizer::streams::TRIPLES);
        let mut label_rng = derived_rng(seed.wrapping_add(k as u64), crate::optimizer::streams::LABELS);
        let d = inst.env.feature_dim();
        let (mut acc_sail, mut acc_pen) = (Welford::new(d), Welford::new(d));
        for _ in 0..n_samples {
            let z = sampler.sample(&mut triple_rng);
            let label = sample_label(OracleMode::True, &inst.oracle, &cfg, &state, z, &mut label_rng)?;
            acc_sail.push(&sail_sample_grad(&state, inst.hyper.beta, z, label));
            acc_pen.push(&penalty_sample_subgrad(&state, z));
        }
        let exact = [
            sail_grad_exact(&inst.env, &inst.params, &inst.oracle, &inst.hyper)?,
            penalty_subgrad_exact(&inst.env, &inst.params)?,
        ];
        for (j, acc) in [acc_sail, acc_pen].iter().enumerate() {
            for z in acc.z_scores(&exact[j]) {
                match z {
                    Some(v) => {
                        max_z[j] = max_z[j].max(v.abs());
                        if v.abs() > 4.0 {
                            outside[j] += 1;
                        }
                    }
                    None => {
                        max_z[j] = f64::INFINITY;
                        outside[j] += 1;
                    }
                }
            }
        }
        coords += d;
    }
    let expected = coords as f64 * NORMAL_TAIL_4SD;
    let names = ["unbiasedness.sail", "unbiasedness.penalty"];
    Ok((0..2)
        .map(|j| {
            CheckReport::new(names[j], outside[j] as f64, expected, 0.0, &config, seed).note(format!(
                "coordinates outside 4 standard errors vs binomial expectation over {coords} coordinates; max |z| = {:.3}",
                max_z[j]
            ))
        })
        .collect())
}

/// Policy-regularity, Fisher, gradient, Lipschitz and second-moment bounds on random
/// feasible probes, alternating boundary and interior points.
pub fn check_constant_bounds(seed: u64, n_probes: usize) -> Result<Vec<CheckReport>> {
    const MOMENT_BATCHES: usize = 200;
    const BATCH: usize = 4;
    let config = json!({"check": "constant_bounds", "seed": seed, "n_probes": n_probes, "moment_batches": MOMENT_BATCHES, "batch": BATCH});
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut worst = [0.0f64; 6];
    for i in 0..n_probes {
        let inst = random_instance(&mut rng, &InstanceSpec::default())?;
        let theta = match i {
            0 => inst.params.theta_ref.clone(),
            _ => draw_theta(&mut rng, &inst.params, i % 2 == 0),
        };
        let params = inst.params.at(theta);
        let (env, b, d) = (&inst.env, inst.env.b_psi(), params.radius_d);
        let hyper = Hyperparams {
            batch_b: BATCH,
            ..inst.hyper.clone()
        };
        let input = ConstantsInput {
            b_psi: b,
            radius_d: d,
            beta: hyper.beta,
            rho: hyper.rho,
            batch_b: BATCH,
            l_sail_smooth: 0.0,
            sigma2_sail: 0.0,
            sigma2_r: 0.0,
        };
        let state = PolicyState::new(env, &params);

        let score = (0..env.n_prompts())
            .flat_map(|x| (0..env.n_responses()).map(move |y| (x, y)))
            .map(|(x, y)| state.policy_score(x, y).norm())
            .fold(0.0, f64::max);
        worst[0] = worst[0].max(score / input.g_score());
        let triple = env.triples().map(|z| state.triple_score(z).norm()).fold(0.0, f64::max);
        worst[1] = worst[1].max(triple / (2.0 * input.g_score()));
        worst[2] = worst[2].max(sym_spectral_norm(&fisher_information(&state)) / input.g_score().powi(2));
        worst[3] = worst[3].max(sail_grad_exact(env, &params, &inst.oracle, &hyper)?.norm() / input.g_grad_sail());

        let other = uniform_in_ball(&mut rng, &params.theta_ref, d);
        let dist = (&params.theta - &other).norm();
        let r_gap = (robust_penalty_exact(env, &params)? - robust_penalty_exact(env, &params.at(other))?).abs();
        let lipschitz = if dist > 0.0 { r_gap / dist } else { 0.0 };
        let sub = penalty_subgrad_exact(env, &params)?.norm();
        worst[4] = worst[4].max(lipschitz.max(sub) / input.g_sub_r());

        let (sigma2_sail, sigma2_r) = estimate_variances(env, &inst.oracle, &params, &hyper, 2000, &mut rng)?;
        let input = ConstantsInput {
            sigma2_sail,
            sigma2_r,
            ..input
        };
        let mut second_moment = 0.0;
        let mut triple_rng = ChaCha20Rng::seed_from_u64(rng.random());
        let mut label_rng = ChaCha20Rng::seed_from_u64(rng.random());
        for _ in 0..MOMENT_BATCHES {
            let batch = draw_batch(&state, &inst.oracle, &hyper, OracleMode::True, BATCH, &mut triple_rng, &mut label_rng)?;
            second_moment += composite_direction(&state, &hyper, &batch).norm_squared();
        }
        worst[5] = worst[5].max(second_moment / MOMENT_BATCHES as f64 / input.g_tot2());
    }
    let names = [
        ("constants.policy_score", "||g_theta(x, y)|| / 2 B_psi"),
        ("constants.triple_score", "||S_theta(z)|| / 4 B_psi"),
        ("constants.fisher", "||F(theta)||_op / 4 B_psi^2"),
        ("constants.sail_gradient", "||grad L_SAIL|| / G_gradSAIL"),
        ("constants.penalty_lipschitz", "max(|R(a) - R(c)| / ||a - c||, ||v_R||) / G_subR"),
        ("constants.second_moment", "mean ||G||^2 over batches / G_tot^2"),
    ];
    Ok(names
        .iter()
        .zip(worst)
        .map(|((name, what), m)| {
            CheckReport::new(*name, m, 1.0, ONE_SIDED_TOL, &config, seed)
                .note(format!("ratio {what}, worst over {n_probes} probes"))
        })
        .collect())
}

/// Secant inequalities for `R` with `kappa_R` and for the robust objective with `kappa`,
/// the one-dimensional nonconvexity witness against its `kappa_R` allowance, and the
/// finite-difference Hessian spectrum of `R_eps` against `-kappa_eps`.
pub fn check_weak_convexity(seed: u64, n_pairs: usize, eps_list: &[f64]) -> Result<Vec<CheckReport>> {
    const PAIRS_PER_INSTANCE: usize = 10;
    const HESSIAN_PROBES_PER_INSTANCE: usize = 2;
    const HESSIAN_STEP: f64 = 1e-6;
    let config = json!({"check": "weak_convexity", "seed": seed, "n_pairs": n_pairs, "eps_list": eps_list});
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let n_instances = n_pairs.div_ceil(PAIRS_PER_INSTANCE).max(1);
    let (mut worst_r, mut worst_f) = (f64::NEG_INFINITY, f64::NEG_INFINITY);
    let mut worst_hess = vec![f64::NEG_INFINITY; eps_list.len()];
    let mut hess_probes = 0usize;
    let mut pairs = 0usize;
    for _ in 0..n_instances {
        let inst = random_instance(&mut rng, &InstanceSpec::default())?;
        let (env, params, oracle) = (&inst.env, &inst.params, &inst.oracle);
        let l_sail = estimate_l_sail_smooth(env, oracle, params, &inst.hyper, 16, &mut rng)?;
        let input = ConstantsInput {
            b_psi: env.b_psi(),
            radius_d: params.radius_d,
            beta: inst.hyper.beta,
            rho: inst.hyper.rho,
            batch_b: 1,
            l_sail_smooth: l_sail,
            sigma2_sail: 0.0,
            sigma2_r: 0.0,
        };
        for _ in 0..PAIRS_PER_INSTANCE.min(n_pairs - pairs) {
            let a = uniform_in_ball(&mut rng, &params.theta_ref, params.radius_d);
            let c = uniform_in_ball(&mut rng, &params.theta_ref, params.radius_d);
            let t = rng.random_range(0.0..1.0);
            let r = |v: &Vector| robust_penalty_exact(env, &params.at(v.clone()));
            let f = |v: &Vector| robust_objective_closed_form(env, &params.at(v.clone()), oracle, &inst.hyper);
            worst_r = worst_r.max(secant_excess(r, &a, &c, t, input.kappa_r())?);
            worst_f = worst_f.max(secant_excess(f, &a, &c, t, input.kappa())?);
            pairs += 1;
        }
        for _ in 0..HESSIAN_PROBES_PER_INSTANCE {
            let theta = uniform_in_ball(&mut rng, &params.theta_ref, params.radius_d);
            for (k, &eps) in eps_list.iter().enumerate() {
                let jac = fd::jacobian(
                    |t| robust_penalty_smoothed_grad(env, &params.at(t.clone()), eps).expect("validated instance"),
                    &theta,
                    HESSIAN_STEP,
                );
                let sym = (&jac + jac.transpose()) * 0.5;
                worst_hess[k] = worst_hess[k].max(-sym_min_eigenvalue(&sym) - input.kappa_r_smoothed(eps));
            }
            hess_probes += 1;
        }
    }

    let env = abs_example_env();
    let radius = abs_params(0.0)?.radius_d;
    let kappa_r_abs = 16.0 * env.b_psi().powi(2) + 4.0 * radius * env.b_psi().powi(3);
    let penalty = |t: f64| -> Result<f64> { robust_penalty_exact(&env, &abs_params(t)?) };
    let nonconvexity = penalty(1.0)? - 0.5 * (penalty(0.0)? + penalty(2.0)?);
    let allowance = kappa_r_abs / 2.0 * 0.25 * 4.0;

    let mut out = vec![
        CheckReport::new("weak_convexity.penalty_secant", worst_r, 0.0, ONE_SIDED_TOL, &config, seed)
            .note(format!("excess of R(mid) over the kappa_R secant on {pairs} triples")),
        CheckReport::new("weak_convexity.objective_secant", worst_f, 0.0, ONE_SIDED_TOL, &config, seed).note(format!(
            "excess of the robust objective over the kappa = L_SAIL + lambda kappa_R secant on {pairs} triples"
        )),
        CheckReport::new("weak_convexity.counterexample_allowance", nonconvexity, allowance, ONE_SIDED_TOL, &config, seed)
            .note("midpoint nonconvexity of R on [0, 2] for the one-dimensional example vs kappa_R allowance")
            .require(nonconvexity > 0.0, "the example must be nonconvex"),
    ];
    for (k, &eps) in eps_list.iter().enumerate() {
        out.push(
            CheckReport::new(format!("weak_convexity.smoothed_hessian.eps={eps:e}"), worst_hess[k], 0.0, ONE_SIDED_TOL, &config, seed)
                .note(format!(
                    "excess of -lambda_min(FD Hessian of R_eps) over kappa_eps on {hess_probes} probes"
                )),
        );
    }
    Ok(out)
}

fn objective_bundle(inst: &Instance, rng: &mut ChaCha20Rng) -> Result<ConstantsBundle> {
    let l_sail = estimate_l_sail_smooth(&inst.env, &inst.oracle, &inst.params, &inst.hyper, 16, rng)?;
    let input = ConstantsInput {
        b_psi: inst.env.b_psi(),
        radius_d: inst.params.radius_d,
        beta: inst.hyper.beta,
        rho: inst.hyper.rho,
        batch_b: 1,
        l_sail_smooth: l_sail,
        sigma2_sail: 0.0,
        sigma2_r: 0.0,
    };
    input.bundle(input.auto_lambda_env())
}

/// Properties of the envelope and proximal map on random instances, plus the
/// one-dimensional `|theta|` example.
pub fn check_prox_properties(seed: u64, n_probes: usize) -> Result<Vec<CheckReport>> {
    const N_INSTANCES: usize = 10;
    const FD_PROBES: usize = 20;
    const FD_STEP: f64 = 1e-5;
    let eps_prox_levels = [1e-5, 1e-8];
    let config = json!({"check": "prox_properties", "seed": seed, "n_probes": n_probes, "instances": N_INSTANCES, "eps_smooth": CHECK_EPS_SMOOTH});
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut identity: f64 = 0.0;
    let mut fd_err: f64 = 0.0;
    let mut lipschitz: f64 = 0.0;
    let (mut monotone, mut lower) = (f64::NEG_INFINITY, f64::NEG_INFINITY);
    let mut certificate = [f64::NEG_INFINITY; 2];
    let mut certified_converged = true;
    let (mut gated, mut skipped, mut fd_done) = (0usize, 0usize, 0usize);
    let per_instance = n_probes.div_ceil(N_INSTANCES).max(1);
    let mut done = 0usize;
    while done < n_probes {
        let mut inst = random_instance(&mut rng, &InstanceSpec::default())?;
        inst.hyper.eps_smooth = CHECK_EPS_SMOOTH;
        let bundle = objective_bundle(&inst, &mut rng)?;
        let (env, oracle, hyper, template) = (&inst.env, &inst.oracle, &inst.hyper, &inst.params);
        let obj = SmoothedRobustObjective::new(env, oracle, hyper, template).with_curvature_from(&bundle);
        let ball = Ball::of(template);
        let lam = bundle.lambda_env;
        let kappa_eps = bundle.input.kappa_smoothed(hyper.eps_smooth);
        let contraction = 1.0 - kappa_eps * lam;
        let l_env = 1.0 / (lam * contraction);
        for j in 0..per_instance.min(n_probes - done) {
            let a = uniform_in_ball(&mut rng, &template.theta_ref, template.radius_d);
            let c = if j % 2 == 0 {
                uniform_in_ball(&mut rng, &template.theta_ref, template.radius_d)
            } else {
                template.project_feasible(&(&a + crate::instances::random_direction(&mut rng, a.len()) * (1e-3 * template.radius_d)))
            };
            let pa = tight_solve(&obj, &ball, lam, &a, None)?;
            let pc = tight_solve(&obj, &ball, lam, &c, Some(&pa.prox_point))?;
            for p in [&pa, &pc] {
                identity = identity.max(((&p.anchor - &p.prox_point).norm() - lam * p.env_grad.norm()).abs());
            }
            let dist = (&a - &c).norm();
            if dist > 0.0 {
                lipschitz = lipschitz.max((&pa.env_grad - &pc.env_grad).norm() / dist / l_env);
            }

            if fd_done < FD_PROBES {
                let mut numeric = Vector::zeros(a.len());
                for i in 0..a.len() {
                    let mut plus = a.clone();
                    plus[i] += FD_STEP;
                    let mut minus = a.clone();
                    minus[i] -= FD_STEP;
                    let vp = tight_solve(&obj, &ball, lam, &plus, Some(&pa.prox_point))?.env_value;
                    let vm = tight_solve(&obj, &ball, lam, &minus, Some(&pa.prox_point))?.env_value;
                    numeric[i] = (vp - vm) / (2.0 * FD_STEP);
                }
                fd_err = fd_err.max(rel_err(&numeric, &pa.env_grad));
                fd_done += 1;
            }

            let params_a = template.at(a.clone());
            if min_offdiag_logit(env, &params_a) > 10.0 * hyper.eps_smooth {
                gated += 1;
                let v = robust_subgrad_exact(env, &params_a, oracle, hyper)?;
                let xi = &pa.env_grad;
                if !ball.on_boundary(&a) {
                    monotone = monotone.max(contraction * xi.norm_squared() - xi.dot(&v));
                }
                let dist0 = normal_cone_residual(&v, &a, &ball);
                lower = lower.max(contraction * xi.norm() - dist0);
            } else {
                skipped += 1;
            }

            for (k, &eps_prox) in eps_prox_levels.iter().enumerate() {
                let r = solve(&obj, &ball, lam, &a, None, eps_prox, &ProxSettings::default())?;
                certified_converged &= r.converged;
                let cert = robust_stationarity_certificate(env, oracle, hyper, &bundle, template, &r, eps_prox)?;
                certificate[k] = certificate[k].max(cert.measured_dist - cert.certified_bound);
            }
            done += 1;
        }
    }

    let abs = abs_value_example()?;
    let mut out = vec![
        CheckReport::new("prox.residual_identity", identity, IDENTITY_TOL, 0.0, &config, seed)
            .note("identity ||theta - prox|| = lambda_env ||grad F_env||"),
        CheckReport::new("prox.envelope_gradient_fd", fd_err, FD_REL_TOL, 0.0, &config, seed).note(format!(
            "identity in relative error of central differences of F_env against (theta - prox) / lambda_env on {fd_done} probes"
        )),
        CheckReport::new("prox.envelope_lipschitz", lipschitz, 1.0, ONE_SIDED_TOL, &config, seed)
            .note(format!("ratio ||grad F_env(a) - grad F_env(c)|| / ||a - c|| / L_env on {n_probes} pairs")),
        CheckReport::new("prox.monotonicity", monotone.max(f64::MIN), 0.0, ONE_SIDED_TOL, &config, seed).note(format!(
            "excess of (1 - kappa lambda_env) ||xi||^2 over <xi, v> at interior probes; {gated} judged, {skipped} skipped near kinks"
        )),
        CheckReport::new("prox.iterate_lower_bound", lower.max(f64::MIN), 0.0, ONE_SIDED_TOL, &config, seed).note(format!(
            "excess of (1 - kappa lambda_env) ||xi|| over dist(0, dF(theta)); {gated} judged, {skipped} skipped near kinks"
        )),
    ];
    for (k, &eps_prox) in eps_prox_levels.iter().enumerate() {
        out.push(
            CheckReport::new(format!("prox.inexact_certificate.eps_prox={eps_prox:e}"), certificate[k], 0.0, ONE_SIDED_TOL, &config, seed)
                .note("excess of measured dist(0, dF(prox)) over the certified bound")
                .require(certified_converged, "an inner solve missed its stopping rule"),
        );
    }
    out.push(abs);
    Ok(out)
}

/// Proximal map of `|theta|` with `lambda_env = 1` at `theta` in `(0, 1)`: the prox is 0,
/// the envelope gradient is `theta`, and `dist(0, d|theta|) / ||grad F_env|| = 1 / theta`
/// grows without bound.
fn abs_value_example() -> Result<CheckReport> {
    const SMOOTHING: f64 = 1e-12;
    let thetas = [0.9, 0.5, 0.1, 1e-2, 1e-3, 1e-4];
    let config = json!({"check": "prox_abs_value", "thetas": thetas, "smoothing": SMOOTHING});
    let obj = SmoothedAbs { eps: SMOOTHING };
    let ball = Ball::new(Vector::zeros(1), 1e6);
    let mut worst: f64 = 0.0;
    let mut ratios = Vec::new();
    for &theta in &thetas {
        let r = solve(&obj, &ball, 1.0, &Vector::from_vec(vec![theta]), None, 1e-12, &ProxSettings::default())?;
        let xi = r.env_grad[0];
        let ratio = 1.0 / xi.abs();
        worst = worst.max(r.prox_point[0].abs()).max((xi - theta).abs()).max((ratio * theta - 1.0).abs());
        ratios.push(ratio);
    }
    let diverging = ratios.windows(2).all(|w| w[1] > w[0]) && ratios.last().copied().unwrap_or(0.0) >= 0.99e4;
    Ok(CheckReport::new("prox.abs_value_example", worst, 1e-9, 0.0, &config, 0)
        .note(format!("identity: |prox|, |grad F_env - theta| and |theta / ||grad F_env|| - 1|; ratios {ratios:?}"))
        .require(diverging, "the stationarity ratio must increase as theta decreases"))
}

/// Seed-averaged trajectory mean of `||grad F_env||^2` on the benchmark against the
/// sample-complexity bound at the automatic stepsize, for each horizon, with and
/// without robustness.
pub fn check_convergence(seed_count: usize, t_list: &[usize]) -> Result<Vec<CheckReport>> {
    let mut out = Vec::new();
    for rho in [0.05, 0.0] {
        out.extend(convergence_for(rho, seed_count, t_list)?);
    }
    Ok(out)
}

/// Everything needed to run the benchmark at a given radius.
pub struct BenchmarkSetup {
    pub env: Environment,
    pub oracle: TrueOracle,
    pub theta0: PolicyParams,
    pub hyper: Hyperparams,
    pub bundle: ConstantsBundle,
    pub f_env0: f64,
}

/// Benchmark instance, estimated constants, automatic `lambda_env` and `F_env(theta_0)`.
pub fn benchmark_setup(rho: f64) -> Result<BenchmarkSetup> {
    let bench = benchmark(BENCHMARK_SEED, rho)?;
    let mut hyper = Hyperparams::new(bench.beta, rho, CHECK_EPS_SMOOTH, 1.0, 1, bench.batch_b, 1.0)?;
    let mut rng = derived_rng(BENCHMARK_SEED, crate::optimizer::streams::CONSTANTS);
    let input = estimate_input(&bench.env, &bench.oracle, &bench.theta0, &hyper, None, &mut rng)?;
    let bundle = input.bundle(input.auto_lambda_env())?;
    hyper.lambda_env = bundle.lambda_env;
    let obj = SmoothedRobustObjective::new(&bench.env, &bench.oracle, &hyper, &bench.theta0).with_curvature_from(&bundle);
    let f_env0 = tight_solve(&obj, &Ball::of(&bench.theta0), bundle.lambda_env, &bench.theta0.theta, None)?.env_value;
    Ok(BenchmarkSetup {
        env: bench.env,
        oracle: bench.oracle,
        theta0: bench.theta0,
        hyper,
        bundle,
        f_env0,
    })
}

fn convergence_for(rho: f64, seed_count: usize, t_list: &[usize]) -> Result<Vec<CheckReport>> {
    const EPS_PROX: f64 = 1e-5;
    let config = json!({"check": "convergence", "rho": rho, "seed_count": seed_count, "t_list": t_list, "benchmark_seed": BENCHMARK_SEED, "eps_prox": EPS_PROX});
    let setup = benchmark_setup(rho)?;
    let mut out = Vec::new();
    let mut measured = Vec::new();
    let mut bounds = Vec::new();
    for &t in t_list {
        let eta = auto_stepsize(&setup.bundle, t, setup.f_env0)?;
        let hyper = Hyperparams {
            eta,
            horizon_t: t,
            ..setup.hyper.clone()
        };
        let per_seed = (0..seed_count as u64)
            .into_par_iter()
            .map(|seed| -> Result<(f64, bool)> {
                let mut trace = rscgd_run(&setup.env, &setup.oracle, &hyper, &setup.theta0, seed, OracleMode::True, RunOptions::default())?;
                let sweep = envelope_grad_along_trace(&setup.env, &setup.oracle, &hyper, &setup.bundle, &setup.theta0, &mut trace, EPS_PROX, true)?;
                Ok((sweep.mean_sq_env_grad, sweep.all_converged))
            })
            .collect::<Result<Vec<_>>>()?;
        let mean = per_seed.iter().map(|p| p.0).sum::<f64>() / seed_count.max(1) as f64;
        let converged = per_seed.iter().all(|p| p.1);
        let bound = setup.bundle.sample_complexity_bound(t, setup.f_env0);
        measured.push(mean);
        bounds.push(bound);
        out.push(
            CheckReport::new(format!("convergence.rho={rho}.T={t}"), mean, bound, ONE_SIDED_TOL, &config, BENCHMARK_SEED)
                .note(format!(
                    "seed-averaged trajectory mean ||grad F_env||^2 over {seed_count} seeds vs sample-complexity bound; eta = {eta:.6e}, F_env(theta_0) = {:.6}",
                    setup.f_env0
                ))
                .require(converged, "an envelope solve missed its stopping rule"),
        );
    }
    let increase = measured.windows(2).map(|w| w[1] - w[0]).fold(f64::NEG_INFINITY, f64::max);
    out.push(
        CheckReport::new(format!("convergence.rho={rho}.nonincreasing"), increase.max(f64::MIN), 0.0, ONE_SIDED_TOL, &config, BENCHMARK_SEED)
            .note(format!("largest increase of the measured quantity between consecutive horizons; values {measured:?}")),
    );
    let scaling = t_list
        .iter()
        .map(|&t| (setup.bundle.sample_complexity_bound(4 * t, setup.f_env0) / setup.bundle.sample_complexity_bound(t, setup.f_env0) - 0.5).abs())
        .fold(0.0, f64::max);
    out.push(
        CheckReport::new(format!("convergence.rho={rho}.bound_scaling"), scaling, 1e-12, 0.0, &config, BENCHMARK_SEED)
            .note(format!("identity: quadrupling T halves the bound; bounds {bounds:?}")),
    );
    Ok(out)
}

/// Monte Carlo check of the one-step descent inequality at a frozen iterate: `n_batches`
/// resampled steps from the same `theta_t` on the benchmark.
pub fn check_one_step(seed: u64, n_batches: usize) -> Result<CheckReport> {
    const WARMUP: usize = 20;
    const T_REF: usize = 200;
    let config = json!({"check": "one_step", "seed": seed, "n_batches": n_batches, "warmup": WARMUP, "t_ref": T_REF});
    if n_batches < 2 {
        return Err(Error::InvalidParams("one-step check needs at least two batches".into()));
    }
    let setup = benchmark_setup(0.05)?;
    let eta = auto_stepsize(&setup.bundle, T_REF, setup.f_env0)?;
    let hyper = Hyperparams {
        eta,
        horizon_t: WARMUP,
        ..setup.hyper.clone()
    };
    let trace = rscgd_run(&setup.env, &setup.oracle, &hyper, &setup.theta0, seed, OracleMode::True, RunOptions::default())?;
    let theta_t = setup.theta0.at(trace.iterates[WARMUP].clone());
    let obj = SmoothedRobustObjective::new(&setup.env, &setup.oracle, &hyper, &setup.theta0).with_curvature_from(&setup.bundle);
    let ball = Ball::of(&setup.theta0);
    let lam = setup.bundle.lambda_env;
    let here = tight_solve(&obj, &ball, lam, &theta_t.theta, None)?;
    let state = PolicyState::new(&setup.env, &theta_t);
    let mut triple_rng = derived_rng(seed, 11);
    let mut label_rng = derived_rng(seed, 12);
    let l_env = setup.bundle.l_env;
    // per batch: F_env(theta_{t+1}) - L_env eta^2 ||G||^2 / 2, whose mean must not exceed
    // F_env(theta_t) - eta c ||xi||^2
    let mut samples = Vec::with_capacity(n_batches);
    for _ in 0..n_batches {
        let batch = draw_batch(&state, &setup.oracle, &hyper, OracleMode::True, hyper.batch_b, &mut triple_rng, &mut label_rng)?;
        let g = composite_direction(&state, &hyper, &batch);
        let next = theta_t.project_feasible(&(&theta_t.theta - &g * eta));
        let f_next = tight_solve(&obj, &ball, lam, &next, Some(&here.prox_point))?.env_value;
        samples.push(f_next - l_env * eta * eta * g.norm_squared() / 2.0);
    }
    let n = samples.len() as f64;
    let mean = samples.iter().sum::<f64>() / n;
    let var = samples.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    let rhs = here.env_value - eta * setup.bundle.contraction() * here.env_grad.norm_squared();
    let excess = mean - rhs;
    let allowance = 4.0 * (var / n).sqrt();
    Ok(CheckReport::new("one_step", excess, allowance, ONE_SIDED_TOL, &config, seed).note(format!(
        "excess of the resampled left side over the right side vs 4 standard errors, {n_batches} batches at t = {WARMUP}"
    )))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_claim_is_covered() {
        assert!(uncovered_claims().is_empty(), "uncovered: {:?}", uncovered_claims());
        for (check, claims) in COVERAGE {
            for c in *claims {
                assert!(CLAIMS.contains(c), "{check} lists unknown claim {c}");
            }
        }
    }

    #[test]
    fn unknown_check_is_rejected() {
        assert!(run_check("no_such_check", 0).is_err());
    }

    #[test]
    fn report_pass_logic() {
        let cfg = json!({});
        assert!(CheckReport::new("a", 1.0, 1.0, 0.0, &cfg, 0).passed);
        assert!(!CheckReport::new("a", 1.0 + 1e-9, 1.0, 0.0, &cfg, 0).passed);
        assert!(CheckReport::new("a", 1.0 + 1e-9, 1.0, 1e-6, &cfg, 0).passed);
        assert!(!CheckReport::new("a", f64::NAN, 1.0, 1e-6, &cfg, 0).passed);
        let r = CheckReport::new("a", 0.25, 1.0, 0.0, &cfg, 3);
        assert_eq!(r.slack, 0.75);
        assert_eq!(r.config_digest, CheckReport::new("b", 0.0, 0.0, 0.0, &cfg, 0).config_digest);
    }

    #[test]
    fn small_checks_pass() {
        assert!(check_counterexample().unwrap().passed);
        assert!(check_decomposition(1, 20).unwrap().passed);
        assert!(check_pointwise_sup(2, 50, 1000).unwrap().passed);
    }

    #[test]
    fn checks_are_deterministic() {
        assert_eq!(check_decomposition(5, 10).unwrap(), check_decomposition(5, 10).unwrap());
        assert_eq!(check_unbiasedness(5, 500).unwrap(), check_unbiasedness(5, 500).unwrap());
    }

    #[test]
    fn abs_value_example_passes() {
        let r = abs_value_example().unwrap();
        assert!(r.passed, "{r:?}");
    }
}
