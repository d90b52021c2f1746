//! Regularity constants, weak-convexity moduli, second-moment bounds, and the
//! estimators for the two model-dependent inputs (smoothness of the SAIL loss and the
//! oracle variances).

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::environment::Environment;
use crate::error::{Error, Result};
use crate::instances::{uniform_in_ball, uniform_on_sphere};
use crate::numeric::{fd, sym_spectral_norm, KahanSum, Vector};
use crate::objective::{penalty_sample_subgrad, penalty_subgrad_exact, sail_grad_exact, sail_sample_grad, Hyperparams};
use crate::oracle::TrueOracle;
use crate::policy::{PolicyParams, PolicyState};

/// Safety factor applied to the probed smoothness of the SAIL loss.
pub const L_SAIL_SAFETY: f64 = 1.5;
/// Safety factor applied to empirical oracle variances.
pub const VARIANCE_SAFETY: f64 = 2.0;

/// Everything the constants depend on, before the envelope parameter is chosen.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConstantsInput {
    pub b_psi: f64,
    pub radius_d: f64,
    pub beta: f64,
    pub rho: f64,
    pub batch_b: usize,
    pub l_sail_smooth: f64,
    pub sigma2_sail: f64,
    pub sigma2_r: f64,
}

impl ConstantsInput {
    pub fn lambda(&self) -> f64 {
        self.rho * self.beta
    }

    /// `G = 2 B_psi`.
    pub fn g_score(&self) -> f64 {
        2.0 * self.b_psi
    }

    /// `M = B_psi^2`.
    pub fn m_score(&self) -> f64 {
        self.b_psi * self.b_psi
    }

    /// `kappa_R = 16 B_psi^2 + 4 D B_psi^3`.
    pub fn kappa_r(&self) -> f64 {
        let b = self.b_psi;
        16.0 * b * b + 4.0 * self.radius_d * b * b * b
    }

    /// `kappa_eps = 8 G B_psi + 4 M D B_psi + 2 M eps`, the curvature bound of `R_eps`.
    pub fn kappa_r_smoothed(&self, eps: f64) -> f64 {
        8.0 * self.g_score() * self.b_psi + 4.0 * self.m_score() * self.radius_d * self.b_psi + 2.0 * self.m_score() * eps
    }

    /// `kappa = L_SAIL + lambda kappa_R`.
    pub fn kappa(&self) -> f64 {
        self.l_sail_smooth + self.lambda() * self.kappa_r()
    }

    /// `L_SAIL + lambda kappa_eps`.
    pub fn kappa_smoothed(&self, eps: f64) -> f64 {
        self.l_sail_smooth + self.lambda() * self.kappa_r_smoothed(eps)
    }

    /// `G_gradSAIL = 2 beta B_psi + 4 B_psi (log 2 + 2 beta D B_psi)`.
    pub fn g_grad_sail(&self) -> f64 {
        let b = self.b_psi;
        2.0 * self.beta * b + 4.0 * b * (std::f64::consts::LN_2 + 2.0 * self.beta * self.radius_d * b)
    }

    /// `G_subR = 2 B_psi + 8 D B_psi^2`.
    pub fn g_sub_r(&self) -> f64 {
        let b = self.b_psi;
        2.0 * b + 8.0 * self.radius_d * b * b
    }

    /// `G_tot^2 = 4 (G_gradSAIL^2 + lambda^2 G_subR^2 + (sigma2_SAIL + lambda^2 sigma2_R) / B)`.
    pub fn g_tot2(&self) -> f64 {
        let l2 = self.lambda() * self.lambda();
        4.0 * (self.g_grad_sail().powi(2)
            + l2 * self.g_sub_r().powi(2)
            + (self.sigma2_sail + l2 * self.sigma2_r) / self.batch_b as f64)
    }

    /// Midpoint of the admissible envelope interval, `0.5 / kappa`.
    pub fn auto_lambda_env(&self) -> f64 {
        0.5 / self.kappa()
    }

    pub fn bundle(&self, lambda_env: f64) -> Result<ConstantsBundle> {
        let kappa = self.kappa();
        if !(lambda_env > 0.0) || !(kappa * lambda_env < 1.0) {
            return Err(Error::InvalidEnvelopeParam { lambda_env, kappa });
        }
        Ok(ConstantsBundle {
            g_score: self.g_score(),
            m_score: self.m_score(),
            kappa_r: self.kappa_r(),
            l_sail_smooth: self.l_sail_smooth,
            kappa,
            l_env: 1.0 / (lambda_env * (1.0 - kappa * lambda_env)),
            g_grad_sail: self.g_grad_sail(),
            g_sub_r: self.g_sub_r(),
            sigma2_sail: self.sigma2_sail,
            sigma2_r: self.sigma2_r,
            g_tot2: self.g_tot2(),
            f_inf: 0.0,
            lambda_env,
            lambda: self.lambda(),
            input: self.clone(),
        })
    }
}

/// Fully populated constants for a fixed envelope parameter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConstantsBundle {
    pub g_score: f64,
    pub m_score: f64,
    pub kappa_r: f64,
    pub l_sail_smooth: f64,
    pub kappa: f64,
    pub l_env: f64,
    pub g_grad_sail: f64,
    pub g_sub_r: f64,
    pub sigma2_sail: f64,
    pub sigma2_r: f64,
    pub g_tot2: f64,
    pub f_inf: f64,
    pub lambda_env: f64,
    pub lambda: f64,
    pub input: ConstantsInput,
}

impl ConstantsBundle {
    /// `1 - kappa lambda_env`.
    pub fn contraction(&self) -> f64 {
        1.0 - self.kappa * self.lambda_env
    }

    /// Strong convexity of the smoothed proximal subproblem, `1/lambda_env - kappa_smoothed`.
    pub fn prox_strong_convexity(&self, eps: f64) -> f64 {
        1.0 / self.lambda_env - self.input.kappa_smoothed(eps)
    }

    /// Rate bound for a constant stepsize `eta` over `T` iterations:
    /// `(F_env(theta_0) - F_inf)/(eta c T) + L_env eta G_tot^2 / (2 c)` with `c = 1 - kappa lambda_env`.
    pub fn rate_bound(&self, eta: f64, horizon_t: usize, f_env0: f64) -> f64 {
        let c = self.contraction();
        (f_env0 - self.f_inf) / (eta * c * horizon_t as f64) + self.l_env * eta * self.g_tot2 / (2.0 * c)
    }

    /// Stepsize minimizing [`Self::rate_bound`]:
    /// `sqrt(2 lambda_env c (F_env(theta_0) - F_inf) / (G_tot^2 T))`.
    pub fn optimal_stepsize(&self, horizon_t: usize, f_env0: f64) -> f64 {
        let gap = (f_env0 - self.f_inf).max(0.0);
        (2.0 * self.lambda_env * self.contraction() * gap / (self.g_tot2 * horizon_t as f64)).sqrt()
    }

    /// Rate at the optimal stepsize:
    /// `sqrt(2 G_tot^2 (F_env(theta_0) - F_inf) / (lambda_env c^3 T))`.
    pub fn sample_complexity_bound(&self, horizon_t: usize, f_env0: f64) -> f64 {
        let gap = (f_env0 - self.f_inf).max(0.0);
        let c = self.contraction();
        (2.0 * self.g_tot2 * gap / (self.lambda_env * c * c * c * horizon_t as f64)).sqrt()
    }
}

/// Probe points for constant estimation: the reference point, interior draws and
/// boundary draws in equal measure.
pub fn probe_points<R: Rng + ?Sized>(params: &PolicyParams, n: usize, rng: &mut R) -> Vec<Vector> {
    let mut out = Vec::with_capacity(n);
    if n > 0 {
        out.push(params.theta_ref.clone());
    }
    while out.len() < n {
        let v = if out.len() % 2 == 0 {
            uniform_on_sphere(rng, &params.theta_ref, params.radius_d)
        } else {
            uniform_in_ball(rng, &params.theta_ref, params.radius_d)
        };
        out.push(v);
    }
    out
}

/// Largest probed operator norm of the Hessian of the SAIL loss over the ball, times
/// [`L_SAIL_SAFETY`]. The Hessian at each probe is the central-difference Jacobian of
/// the exact gradient.
pub fn estimate_l_sail_smooth<R: Rng + ?Sized>(
    env: &Environment,
    oracle: &TrueOracle,
    params: &PolicyParams,
    hyper: &Hyperparams,
    n_probes: usize,
    rng: &mut R,
) -> Result<f64> {
    let mut worst: f64 = 0.0;
    for theta in probe_points(params, n_probes, rng) {
        let step = fd::default_step(&theta);
        // the probes share one environment, so only the first call can fail
        sail_grad_exact(env, params, oracle, hyper)?;
        let jac = fd::jacobian(
            |t| sail_grad_exact(env, &params.at(t.clone()), oracle, hyper).expect("validated above"),
            &theta,
            step,
        );
        worst = worst.max(sym_spectral_norm(&jac));
    }
    Ok(L_SAIL_SAFETY * worst)
}

/// Empirical single-sample variances `E||G_SAIL - grad L_SAIL||^2` and
/// `E||G_R - E G_R||^2` at `params`, with true-oracle labels, times [`VARIANCE_SAFETY`].
pub fn estimate_variances<R: Rng + ?Sized>(
    env: &Environment,
    oracle: &TrueOracle,
    params: &PolicyParams,
    hyper: &Hyperparams,
    draws: usize,
    rng: &mut R,
) -> Result<(f64, f64)> {
    if draws == 0 {
        return Err(Error::InvalidHyperparams("variance estimation needs at least one draw".into()));
    }
    let grad = sail_grad_exact(env, params, oracle, hyper)?;
    let sub = penalty_subgrad_exact(env, params)?;
    let state = PolicyState::new(env, params);
    let sampler = state.sampler();
    let (mut acc_sail, mut acc_r) = (KahanSum::new(), KahanSum::new());
    for _ in 0..draws {
        let z = sampler.sample(rng);
        let label = rng.random::<f64>() < oracle.true_prob(z);
        acc_sail.add((sail_sample_grad(&state, hyper.beta, z, label) - &grad).norm_squared());
        acc_r.add((penalty_sample_subgrad(&state, z) - &sub).norm_squared());
    }
    let n = draws as f64;
    Ok((VARIANCE_SAFETY * acc_sail.value() / n, VARIANCE_SAFETY * acc_r.value() / n))
}

/// Estimates both model-dependent inputs and assembles a [`ConstantsInput`].
/// `l_sail_override` skips the smoothness probe.
pub fn estimate_input<R: Rng + ?Sized>(
    env: &Environment,
    oracle: &TrueOracle,
    theta0: &PolicyParams,
    hyper: &Hyperparams,
    l_sail_override: Option<f64>,
    rng: &mut R,
) -> Result<ConstantsInput> {
    let l_sail_smooth = match l_sail_override {
        Some(v) if v >= 0.0 && v.is_finite() => v,
        Some(v) => return Err(Error::InvalidHyperparams(format!("l_sail_smooth override {v} must be finite and >= 0"))),
        None => estimate_l_sail_smooth(env, oracle, theta0, hyper, 64, rng)?,
    };
    let (sigma2_sail, sigma2_r) = estimate_variances(env, oracle, theta0, hyper, 10_000, rng)?;
    Ok(ConstantsInput {
        b_psi: env.b_psi(),
        radius_d: theta0.radius_d,
        beta: hyper.beta,
        rho: hyper.rho,
        batch_b: hyper.batch_b,
        l_sail_smooth,
        sigma2_sail,
        sigma2_r,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::instances::{random_instance_seeded, InstanceSpec};
    use crate::objective::sail_hessian_exact;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    fn input(b_psi: f64, radius_d: f64, beta: f64) -> ConstantsInput {
        ConstantsInput {
            b_psi,
            radius_d,
            beta,
            rho: 0.1,
            batch_b: 4,
            l_sail_smooth: 1.0,
            sigma2_sail: 2.0,
            sigma2_r: 3.0,
        }
    }

    #[test]
    fn substitution_examples() {
        assert_eq!(input(1.0, 2.0, 1.0).kappa_r(), 24.0);
        let g = input(1.0, 1.0, 1.0).g_grad_sail();
        assert!((g - (2.0 + 4.0 * (2f64.ln() + 2.0))).abs() < 1e-12);
        assert!((g - 12.7726).abs() < 1e-4);
        assert_eq!(input(1.0, 1.0, 1.0).g_sub_r(), 10.0);
    }

    #[test]
    fn smoothed_curvature_matches_unsmoothed_at_zero() {
        let c = input(1.3, 2.1, 0.7);
        assert!((c.kappa_r_smoothed(0.0) - c.kappa_r()).abs() < 1e-12);
        assert!((c.kappa_r_smoothed(0.01) - c.kappa_r() - 2.0 * 1.69 * 0.01).abs() < 1e-12);
    }

    #[test]
    fn bundle_invariants() {
        let c = input(1.0, 2.0, 1.0);
        let b = c.bundle(c.auto_lambda_env()).unwrap();
        assert_eq!(b.kappa_r, 16.0 + 8.0);
        assert!((b.kappa - (1.0 + 0.1 * 24.0)).abs() < 1e-12);
        assert!((b.l_env - 1.0 / (b.lambda_env * (1.0 - b.kappa * b.lambda_env))).abs() < 1e-12);
        let expected = 4.0 * (b.g_grad_sail.powi(2) + 0.01 * b.g_sub_r.powi(2) + (2.0 + 0.01 * 3.0) / 4.0);
        assert!((b.g_tot2 - expected).abs() < 1e-9);
        assert_eq!(b.f_inf, 0.0);
        assert!((b.contraction() - 0.5).abs() < 1e-15);
        assert!(matches!(c.bundle(1.0 / c.kappa()), Err(Error::InvalidEnvelopeParam { .. })));
        assert!(c.bundle(0.0).is_err());
    }

    #[test]
    fn optimal_stepsize_attains_sample_complexity_bound() {
        let c = input(1.0, 2.0, 1.0);
        let b = c.bundle(0.3 / c.kappa()).unwrap();
        for &t in &[10usize, 200, 3200] {
            let eta = b.optimal_stepsize(t, 0.9);
            assert!((b.rate_bound(eta, t, 0.9) - b.sample_complexity_bound(t, 0.9)).abs() < 1e-10);
            // the optimum of a / eta + b eta
            assert!(b.rate_bound(eta * 1.1, t, 0.9) > b.rate_bound(eta, t, 0.9));
            assert!(b.rate_bound(eta * 0.9, t, 0.9) > b.rate_bound(eta, t, 0.9));
        }
        let ratio = b.optimal_stepsize(800, 0.9) / b.optimal_stepsize(200, 0.9);
        assert!((ratio - 0.5).abs() < 1e-12);
        assert_eq!(b.optimal_stepsize(100, 0.0), 0.0);
    }

    #[test]
    fn smoothness_estimate_dominates_analytic_hessian() {
        for seed in 0..5 {
            let inst = random_instance_seeded(seed, &InstanceSpec::default()).unwrap();
            let mut rng = ChaCha20Rng::seed_from_u64(seed);
            let est = estimate_l_sail_smooth(&inst.env, &inst.oracle, &inst.params, &inst.hyper, 16, &mut rng).unwrap();
            let mut rng = ChaCha20Rng::seed_from_u64(seed);
            let probes = probe_points(&inst.params, 16, &mut rng);
            let analytic = probes
                .iter()
                .map(|t| sym_spectral_norm(&sail_hessian_exact(&inst.env, &inst.params.at(t.clone()), &inst.oracle, &inst.hyper).unwrap()))
                .fold(0.0, f64::max);
            assert!((est / L_SAIL_SAFETY - analytic).abs() <= 1e-4 * analytic.max(1.0));
        }
    }

    #[test]
    fn variance_estimates_are_positive_and_reproducible() {
        let inst = random_instance_seeded(7, &InstanceSpec::default()).unwrap();
        let run = |seed| {
            estimate_variances(&inst.env, &inst.oracle, &inst.params, &inst.hyper, 2000, &mut ChaCha20Rng::seed_from_u64(seed))
                .unwrap()
        };
        let (a, b) = run(3);
        assert!(a > 0.0 && b >= 0.0);
        assert_eq!(run(3), (a, b));
    }
}
