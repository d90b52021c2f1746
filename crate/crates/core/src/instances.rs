//! Seeded instance generators shared by the checks, tests and CLI.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;

use crate::environment::{Environment, RandomEnvironmentSpec};
use crate::error::Result;
use crate::numeric::Vector;
use crate::objective::Hyperparams;
use crate::oracle::TrueOracle;
use crate::policy::PolicyParams;

/// Environment, oracle, parameters and hyperparameters bundled together.
#[derive(Debug, Clone)]
pub struct Instance {
    pub env: Environment,
    pub oracle: TrueOracle,
    pub params: PolicyParams,
    pub hyper: Hyperparams,
}

/// Ranges for [`random_instance`].
#[derive(Debug, Clone)]
pub struct InstanceSpec {
    pub max_prompts: usize,
    pub max_responses: usize,
    pub max_dim: usize,
    pub reward_scale: f64,
    pub beta_range: (f64, f64),
    pub radius_range: (f64, f64),
    pub b_psi_range: (f64, f64),
}

impl Default for InstanceSpec {
    fn default() -> Self {
        Self {
            max_prompts: 3,
            max_responses: 5,
            max_dim: 4,
            reward_scale: 2.0,
            beta_range: (0.1, 3.0),
            radius_range: (0.5, 3.0),
            b_psi_range: (0.5, 2.0),
        }
    }
}

/// Uniform draw from the ball `{u : ||u - center|| <= radius}`.
pub fn uniform_in_ball<R: Rng + ?Sized>(rng: &mut R, center: &Vector, radius: f64) -> Vector {
    let d = center.len();
    let r = radius * rng.random::<f64>().powf(1.0 / d as f64);
    center + random_direction(rng, d) * r
}

/// Uniform draw from the sphere `{u : ||u - center|| = radius}`.
pub fn uniform_on_sphere<R: Rng + ?Sized>(rng: &mut R, center: &Vector, radius: f64) -> Vector {
    center + random_direction(rng, center.len()) * radius
}

pub fn random_direction<R: Rng + ?Sized>(rng: &mut R, d: usize) -> Vector {
    loop {
        let v = Vector::from_iterator(d, (0..d).map(|_| rng.sample::<f64, _>(StandardNormal)));
        let n = v.norm();
        if n > 1e-12 {
            return v / n;
        }
    }
}

/// A random admissible instance. Roughly one in eight has `rho = 0` and one in eight
/// sits at `theta = theta_ref`.
pub fn random_instance<R: Rng + ?Sized>(rng: &mut R, spec: &InstanceSpec) -> Result<Instance> {
    let nx = rng.random_range(1..=spec.max_prompts);
    let ny = rng.random_range(2..=spec.max_responses.max(2));
    let d = rng.random_range(1..=spec.max_dim);
    let b_psi = rng.random_range(spec.b_psi_range.0..=spec.b_psi_range.1);
    let mut env_spec = RandomEnvironmentSpec::new(nx, ny, d).with_target_b_psi(b_psi);
    if rng.random_bool(0.5) {
        env_spec = env_spec.with_random_mu();
    }
    let env = Environment::random_with(&env_spec, rng)?;
    let oracle = TrueOracle::random(&env, spec.reward_scale, rng)?;
    let beta = rng.random_range(spec.beta_range.0..=spec.beta_range.1);
    let rho = if rng.random_bool(0.125) {
        0.0
    } else {
        oracle.delta() * rng.random_range(0.0..0.99)
    };
    let radius = rng.random_range(spec.radius_range.0..=spec.radius_range.1);
    let theta_ref = Vector::from_iterator(d, (0..d).map(|_| rng.random_range(-1.0..1.0)));
    let theta = if rng.random_bool(0.125) {
        theta_ref.clone()
    } else {
        uniform_in_ball(rng, &theta_ref, radius)
    };
    let params = PolicyParams::new(theta, theta_ref, radius)?;
    let hyper = Hyperparams::for_objective(beta, rho)?;
    Ok(Instance {
        env,
        oracle,
        params,
        hyper,
    })
}

pub fn random_instance_seeded(seed: u64, spec: &InstanceSpec) -> Result<Instance> {
    random_instance(&mut ChaCha20Rng::seed_from_u64(seed), spec)
}

/// One prompt, two responses, scalar features `psi(x, a) = 1`, `psi(x, b) = 0`.
/// With `theta_ref = 0` the penalty is `R(theta) = 2|theta| e^theta / (1 + e^theta)^2`.
pub fn abs_example_env() -> Environment {
    Environment::new(vec!["x".into()], vec!["a".into(), "b".into()], vec![1.0], 1, vec![1.0, 0.0], None)
        .expect("static example environment is valid")
}

/// Closed form of the penalty on [`abs_example_env`].
pub fn abs_example_penalty(theta: f64) -> f64 {
    // e^t / (1 + e^t)^2 = sigmoid(t) sigmoid(-t), stable for large |t|
    2.0 * theta.abs() * crate::numeric::sigmoid(theta) * crate::numeric::sigmoid(-theta)
}

/// Benchmark setup for convergence experiments: two prompts, four responses,
/// three features normalized to `B_psi = 1`, rewards uniform in `[-1, 1]`,
/// `beta = 1`, `rho = 0.05`, `D = 2`, and `theta_0 = theta_ref = 0`.
#[derive(Debug, Clone)]
pub struct Benchmark {
    pub env: Environment,
    pub oracle: TrueOracle,
    pub theta0: PolicyParams,
    pub beta: f64,
    pub rho: f64,
    pub batch_b: usize,
}

pub const BENCHMARK_SEED: u64 = 20_240_601;

pub fn benchmark(seed: u64, rho: f64) -> Result<Benchmark> {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let env = Environment::random_with(&RandomEnvironmentSpec::new(2, 4, 3).with_target_b_psi(1.0), &mut rng)?;
    let oracle = TrueOracle::random(&env, 1.0, &mut rng)?;
    let theta0 = PolicyParams::at_reference(Vector::zeros(3), 2.0)?;
    Ok(Benchmark {
        env,
        oracle,
        theta0,
        beta: 1.0,
        rho,
        batch_b: 8,
    })
}
