//! Log-linear softmax policies, the induced sampling distribution over
//! comparison triples, score functions, and projection onto the feasible ball.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::environment::{ComparisonTriple, Environment};
use crate::error::{Error, Result};
use crate::numeric::{log_sum_exp, KahanSum, Matrix, Vector};

const FEASIBILITY_SLACK: f64 = 1e-12;

#[derive(Debug, Clone, Serialize, Deserialize)]
struct PolicyParamsDocument {
    theta: Vec<f64>,
    theta_ref: Vec<f64>,
    radius_d: f64,
}

/// Parameter vector, the reference parameter defining the SFT policy, and the
/// radius of the feasible ball `{u : ||u - theta_ref|| <= radius_d}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "PolicyParamsDocument", into = "PolicyParamsDocument")]
pub struct PolicyParams {
    pub theta: Vector,
    pub theta_ref: Vector,
    pub radius_d: f64,
}

impl TryFrom<PolicyParamsDocument> for PolicyParams {
    type Error = Error;

    fn try_from(doc: PolicyParamsDocument) -> Result<Self> {
        PolicyParams::new(Vector::from_vec(doc.theta), Vector::from_vec(doc.theta_ref), doc.radius_d)
    }
}

impl From<PolicyParams> for PolicyParamsDocument {
    fn from(p: PolicyParams) -> Self {
        Self {
            theta: p.theta.iter().copied().collect(),
            theta_ref: p.theta_ref.iter().copied().collect(),
            radius_d: p.radius_d,
        }
    }
}

impl PolicyParams {
    /// Validated constructor: `theta` must lie in the feasible ball.
    pub fn new(theta: Vector, theta_ref: Vector, radius_d: f64) -> Result<Self> {
        if theta.len() != theta_ref.len() {
            return Err(Error::InvalidParams(format!(
                "theta has dimension {} but theta_ref has {}",
                theta.len(),
                theta_ref.len()
            )));
        }
        if !(radius_d > 0.0) || !radius_d.is_finite() {
            return Err(Error::InvalidParams(format!("radius_d={radius_d} must be finite and > 0")));
        }
        let params = Self {
            theta,
            theta_ref,
            radius_d,
        };
        if !params.is_feasible() {
            return Err(Error::InvalidParams(format!(
                "||theta - theta_ref|| = {} exceeds radius_d = {radius_d}",
                params.distance_from_ref()
            )));
        }
        Ok(params)
    }

    /// Starts at the reference parameter.
    pub fn at_reference(theta_ref: Vector, radius_d: f64) -> Result<Self> {
        Self::new(theta_ref.clone(), theta_ref, radius_d)
    }

    /// Same reference and radius, different `theta`. Not checked for feasibility
    /// so that finite-difference probes may step slightly outside the ball.
    pub fn at(&self, theta: Vector) -> Self {
        Self {
            theta,
            theta_ref: self.theta_ref.clone(),
            radius_d: self.radius_d,
        }
    }

    pub fn dim(&self) -> usize {
        self.theta.len()
    }

    pub fn distance_from_ref(&self) -> f64 {
        (&self.theta - &self.theta_ref).norm()
    }

    pub fn is_feasible(&self) -> bool {
        self.distance_from_ref() <= self.radius_d * (1.0 + FEASIBILITY_SLACK)
    }

    /// Euclidean projection onto the feasible ball.
    pub fn project_feasible(&self, candidate: &Vector) -> Vector {
        project_onto_ball(candidate, &self.theta_ref, self.radius_d)
    }
}

/// Projection onto `{u : ||u - center|| <= radius}`.
pub fn project_onto_ball(candidate: &Vector, center: &Vector, radius: f64) -> Vector {
    let offset = candidate - center;
    let norm = offset.norm();
    if norm <= radius {
        candidate.clone()
    } else {
        center + offset * (radius / norm)
    }
}

/// Cached policy quantities at a fixed `theta`.
#[derive(Debug, Clone)]
pub struct PolicyState<'a> {
    env: &'a Environment,
    theta: Vector,
    theta_ref: Vector,
    log_probs: Vec<f64>,
    probs: Vec<f64>,
    ref_log_probs: Vec<f64>,
    feature_means: Vec<Vector>,
}

fn log_softmax_table(env: &Environment, theta: &Vector) -> Vec<f64> {
    let ny = env.n_responses();
    let mut out = Vec::with_capacity(env.n_prompts() * ny);
    let mut logits = vec![0.0; ny];
    for x in 0..env.n_prompts() {
        for (y, l) in logits.iter_mut().enumerate() {
            *l = env.feature(x, y).iter().zip(theta.iter()).map(|(a, b)| a * b).sum();
        }
        let lse = log_sum_exp(&logits);
        out.extend(logits.iter().map(|l| l - lse));
    }
    out
}

impl<'a> PolicyState<'a> {
    pub fn new(env: &'a Environment, params: &PolicyParams) -> Self {
        assert_eq!(
            params.dim(),
            env.feature_dim(),
            "parameter dimension must match the feature dimension"
        );
        let log_probs = log_softmax_table(env, &params.theta);
        let probs: Vec<f64> = log_probs.iter().map(|l| l.exp()).collect();
        let ref_log_probs = log_softmax_table(env, &params.theta_ref);
        let ny = env.n_responses();
        let d = env.feature_dim();
        let feature_means = (0..env.n_prompts())
            .map(|x| {
                let mut acc = vec![KahanSum::new(); d];
                for y in 0..ny {
                    let p = probs[x * ny + y];
                    for (a, f) in acc.iter_mut().zip(env.feature(x, y)) {
                        a.add(p * f);
                    }
                }
                Vector::from_iterator(d, acc.iter().map(KahanSum::value))
            })
            .collect();
        Self {
            env,
            theta: params.theta.clone(),
            theta_ref: params.theta_ref.clone(),
            log_probs,
            probs,
            ref_log_probs,
            feature_means,
        }
    }

    pub fn env(&self) -> &'a Environment {
        self.env
    }

    pub fn theta(&self) -> &Vector {
        &self.theta
    }

    pub fn log_prob(&self, x: usize, y: usize) -> f64 {
        self.log_probs[x * self.env.n_responses() + y]
    }

    pub fn prob(&self, x: usize, y: usize) -> f64 {
        self.probs[x * self.env.n_responses() + y]
    }

    /// `pi_theta(. | x)` as a slice.
    pub fn probs_for(&self, x: usize) -> &[f64] {
        let ny = self.env.n_responses();
        &self.probs[x * ny..(x + 1) * ny]
    }

    /// `E_{y ~ pi_theta(.|x)} psi(x, y)`.
    pub fn feature_mean(&self, x: usize) -> &Vector {
        &self.feature_means[x]
    }

    /// `Cov_{y ~ pi_theta(.|x)} psi(x, y)`, the Jacobian of the feature mean.
    pub fn feature_covariance(&self, x: usize) -> Matrix {
        let d = self.env.feature_dim();
        let mean = &self.feature_means[x];
        let mut cov = Matrix::zeros(d, d);
        for y in 0..self.env.n_responses() {
            let c = Vector::from_column_slice(self.env.feature(x, y)) - mean;
            cov += (&c * c.transpose()) * self.prob(x, y);
        }
        cov
    }

    /// `d_theta(z) = mu(x) pi(y1|x) pi(y2|x)`.
    pub fn triple_weight(&self, z: ComparisonTriple) -> f64 {
        self.env.mu()[z.x] * self.prob(z.x, z.y1) * self.prob(z.x, z.y2)
    }

    /// `log d_theta(z)`.
    pub fn log_triple_weight(&self, z: ComparisonTriple) -> f64 {
        self.env.mu()[z.x].ln() + self.log_prob(z.x, z.y1) + self.log_prob(z.x, z.y2)
    }

    /// `s_theta(z) = (theta - theta_ref)^T (psi(x,y1) - psi(x,y2))`.
    pub fn pairwise_logit(&self, z: ComparisonTriple) -> f64 {
        let a = self.env.feature(z.x, z.y1);
        let b = self.env.feature(z.x, z.y2);
        self.theta
            .iter()
            .zip(self.theta_ref.iter())
            .zip(a.iter().zip(b))
            .map(|((t, r), (p, q))| (t - r) * (p - q))
            .sum()
    }

    /// The pairwise log-ratio
    /// `log(pi(y1|x)/pi_ref(y1|x)) - log(pi(y2|x)/pi_ref(y2|x))`, computed from the
    /// normalized log-probabilities rather than the feature difference.
    pub fn log_ratio_logit(&self, z: ComparisonTriple) -> f64 {
        let ny = self.env.n_responses();
        let i1 = z.x * ny + z.y1;
        let i2 = z.x * ny + z.y2;
        (self.log_probs[i1] - self.ref_log_probs[i1]) - (self.log_probs[i2] - self.ref_log_probs[i2])
    }

    /// `g_theta(x, y) = psi(x, y) - E_{pi_theta(.|x)} psi(x, .)`.
    pub fn policy_score(&self, x: usize, y: usize) -> Vector {
        Vector::from_column_slice(self.env.feature(x, y)) - &self.feature_means[x]
    }

    /// `S_theta(z) = g_theta(x, y1) + g_theta(x, y2)`.
    pub fn triple_score(&self, z: ComparisonTriple) -> Vector {
        let mean = &self.feature_means[z.x];
        let a = self.env.feature(z.x, z.y1);
        let b = self.env.feature(z.x, z.y2);
        Vector::from_iterator(
            self.env.feature_dim(),
            a.iter().zip(b).zip(mean.iter()).map(|((p, q), m)| p + q - 2.0 * m),
        )
    }

    /// Inverse-CDF sampler for triples at this `theta`.
    pub fn sampler(&self) -> TripleSampler {
        let ny = self.env.n_responses();
        let prompt_cdf = cumulative(self.env.mu());
        let response_cdfs = (0..self.env.n_prompts())
            .map(|x| cumulative(&self.probs[x * ny..(x + 1) * ny]))
            .collect();
        TripleSampler {
            prompt_cdf,
            response_cdfs,
        }
    }
}

fn cumulative(weights: &[f64]) -> Vec<f64> {
    let mut acc = KahanSum::new();
    weights
        .iter()
        .map(|w| {
            acc.add(*w);
            acc.value()
        })
        .collect()
}

/// First index whose cumulative weight exceeds `u * total`; ties go to the lower index.
fn inverse_cdf(cdf: &[f64], u: f64) -> usize {
    let total = *cdf.last().expect("nonempty cdf");
    let target = u * total;
    let idx = cdf.partition_point(|&c| c <= target);
    idx.min(cdf.len() - 1)
}

/// Draws `x ~ mu`, then `y1, y2 ~ pi_theta(.|x)` independently.
#[derive(Debug, Clone)]
pub struct TripleSampler {
    prompt_cdf: Vec<f64>,
    response_cdfs: Vec<Vec<f64>>,
}

impl TripleSampler {
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> ComparisonTriple {
        let x = inverse_cdf(&self.prompt_cdf, rng.random::<f64>());
        let cdf = &self.response_cdfs[x];
        let y1 = inverse_cdf(cdf, rng.random::<f64>());
        let y2 = inverse_cdf(cdf, rng.random::<f64>());
        ComparisonTriple { x, y1, y2 }
    }
}

/// `log pi_theta(y | x)`.
pub fn log_policy(env: &Environment, params: &PolicyParams, x: usize, y: usize) -> f64 {
    let logits: Vec<f64> = (0..env.n_responses())
        .map(|yy| env.feature(x, yy).iter().zip(params.theta.iter()).map(|(a, b)| a * b).sum())
        .collect();
    logits[y] - log_sum_exp(&logits)
}

/// `s_theta(z) = (theta - theta_ref)^T delta_psi(z)`.
pub fn pairwise_logit(env: &Environment, params: &PolicyParams, z: ComparisonTriple) -> f64 {
    (&params.theta - &params.theta_ref).dot(&env.delta_psi(z))
}

/// `d_theta` over all triples, aligned with [`Environment::enumerate_triples`].
pub fn sampling_distribution(env: &Environment, params: &PolicyParams) -> Result<Vec<f64>> {
    env.check_enumeration_cap()?;
    let state = PolicyState::new(env, params);
    Ok(env.triples().map(|z| state.triple_weight(z)).collect())
}

/// `count` i.i.d. draws from `d_theta`.
pub fn sample_triples<R: Rng + ?Sized>(
    env: &Environment,
    params: &PolicyParams,
    rng: &mut R,
    count: usize,
) -> Vec<ComparisonTriple> {
    let sampler = PolicyState::new(env, params).sampler();
    (0..count).map(|_| sampler.sample(rng)).collect()
}

pub fn policy_score(env: &Environment, params: &PolicyParams, x: usize, y: usize) -> Vector {
    PolicyState::new(env, params).policy_score(x, y)
}

pub fn triple_score(env: &Environment, params: &PolicyParams, z: ComparisonTriple) -> Vector {
    PolicyState::new(env, params).triple_score(z)
}

/// Fisher information `E_{x ~ mu, y ~ pi_theta} [g g^T]` by enumeration.
pub fn fisher_information(state: &PolicyState<'_>) -> Matrix {
    let env = state.env();
    let d = env.feature_dim();
    let mut out = Matrix::zeros(d, d);
    for x in 0..env.n_prompts() {
        for y in 0..env.n_responses() {
            let g = state.policy_score(x, y);
            out += (&g * g.transpose()) * (env.mu()[x] * state.prob(x, y));
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::environment::RandomEnvironmentSpec;
    use crate::numeric::{fd, sigmoid};
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    fn example_env() -> Environment {
        Environment::new(vec!["x".into()], vec!["a".into(), "b".into()], vec![1.0], 1, vec![1.0, 0.0], None).unwrap()
    }

    fn scalar(v: f64) -> Vector {
        Vector::from_vec(vec![v])
    }

    fn random_setup(seed: u64) -> (Environment, PolicyParams) {
        let env = Environment::random(&RandomEnvironmentSpec::new(2, 4, 3).with_target_b_psi(1.3), seed).unwrap();
        let mut rng = ChaCha20Rng::seed_from_u64(seed + 100);
        let theta_ref = Vector::from_iterator(3, (0..3).map(|_| rng.random_range(-0.5..0.5)));
        let theta = &theta_ref + Vector::from_iterator(3, (0..3).map(|_| rng.random_range(-0.8..0.8)));
        (env, PolicyParams::new(theta, theta_ref, 2.0).unwrap())
    }

    #[test]
    fn uniform_at_zero() {
        let env = Environment::random(&RandomEnvironmentSpec::new(1, 5, 2), 0).unwrap();
        let params = PolicyParams::at_reference(Vector::zeros(2), 1.0).unwrap();
        for y in 0..5 {
            assert!((log_policy(&env, &params, 0, y) - (0.2f64).ln()).abs() < 1e-14);
        }
    }

    #[test]
    fn two_response_policy_is_sigmoid() {
        let env = example_env();
        for &t in &[-2.0, -0.3, 0.0, 1.0, 4.0] {
            let params = PolicyParams::new(scalar(t), scalar(0.0), 10.0).unwrap();
            assert!((log_policy(&env, &params, 0, 0).exp() - sigmoid(t)).abs() < 1e-14);
        }
    }

    #[test]
    fn probabilities_sum_to_one() {
        for seed in 0..10 {
            let (env, params) = random_setup(seed);
            for x in 0..env.n_prompts() {
                let total: f64 = (0..env.n_responses()).map(|y| log_policy(&env, &params, x, y).exp()).sum();
                assert!((total - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn pairwise_logit_matches_log_ratio() {
        for seed in 0..50 {
            let (env, params) = random_setup(seed);
            let state = PolicyState::new(&env, &params);
            for z in env.triples() {
                let s = pairwise_logit(&env, &params, z);
                assert!((s - state.log_ratio_logit(z)).abs() < 1e-10);
                assert!((s - state.pairwise_logit(z)).abs() < 1e-13);
                assert!(s.abs() <= 2.0 * params.radius_d * env.b_psi() + 1e-12);
            }
        }
    }

    #[test]
    fn logit_vanishes_at_reference() {
        let (env, params) = random_setup(3);
        let at_ref = params.at(params.theta_ref.clone());
        for z in env.triples() {
            assert_eq!(pairwise_logit(&env, &at_ref, z), 0.0);
        }
    }

    #[test]
    fn sampling_distribution_cases() {
        let env = example_env();
        let params = PolicyParams::at_reference(scalar(0.0), 1.0).unwrap();
        let d = sampling_distribution(&env, &params).unwrap();
        assert!(d.iter().all(|p| (p - 0.25).abs() < 1e-15));

        let params = PolicyParams::new(scalar(1.3), scalar(0.0), 2.0).unwrap();
        let d = sampling_distribution(&env, &params).unwrap();
        // off-diagonal mass 2 sigma(t) sigma(-t)
        let off = d[1] + d[2];
        assert!((off - 2.0 * sigmoid(1.3) * sigmoid(-1.3)).abs() < 1e-15);
    }

    #[test]
    fn sampling_distribution_marginals() {
        let env = Environment::random(&RandomEnvironmentSpec::new(3, 3, 2).with_random_mu(), 4).unwrap();
        let params = PolicyParams::new(Vector::from_vec(vec![0.7, -0.4]), Vector::zeros(2), 1.0).unwrap();
        let d = sampling_distribution(&env, &params).unwrap();
        assert!((d.iter().sum::<f64>() - 1.0).abs() < 1e-10);
        let per_x = 9;
        for x in 0..3 {
            let m: f64 = d[x * per_x..(x + 1) * per_x].iter().sum();
            assert!((m - env.mu()[x]).abs() < 1e-12);
        }
    }

    #[test]
    fn empirical_frequencies_match_exact() {
        let (env, params) = random_setup(11);
        let exact = sampling_distribution(&env, &params).unwrap();
        let mut rng = ChaCha20Rng::seed_from_u64(5);
        let n = 100_000usize;
        let draws = sample_triples(&env, &params, &mut rng, n);
        let ny = env.n_responses();
        let mut counts = vec![0usize; exact.len()];
        for z in draws {
            counts[(z.x * ny + z.y1) * ny + z.y2] += 1;
        }
        for (c, p) in counts.iter().zip(&exact) {
            let freq = *c as f64 / n as f64;
            let se = (p * (1.0 - p) / n as f64).sqrt();
            assert!((freq - p).abs() <= 4.0 * se + 1e-12, "freq {freq} vs {p}");
        }
    }

    #[test]
    fn sampling_is_deterministic_and_handles_zero_count() {
        let (env, params) = random_setup(2);
        let a = sample_triples(&env, &params, &mut ChaCha20Rng::seed_from_u64(7), 500);
        let b = sample_triples(&env, &params, &mut ChaCha20Rng::seed_from_u64(7), 500);
        assert_eq!(a, b);
        assert!(sample_triples(&env, &params, &mut ChaCha20Rng::seed_from_u64(7), 0).is_empty());
    }

    #[test]
    fn inverse_cdf_skips_zero_mass_cells() {
        let cdf = cumulative(&[0.0, 0.5, 0.0, 0.5]);
        assert_eq!(inverse_cdf(&cdf, 0.0), 1);
        assert_eq!(inverse_cdf(&cdf, 0.5), 3);
        assert_eq!(inverse_cdf(&cdf, 0.999_999), 3);
    }

    #[test]
    fn policy_score_properties() {
        for seed in 0..10 {
            let (env, params) = random_setup(seed);
            let state = PolicyState::new(&env, &params);
            for x in 0..env.n_prompts() {
                let mut mean = Vector::zeros(env.feature_dim());
                for y in 0..env.n_responses() {
                    let g = state.policy_score(x, y);
                    assert!(g.norm() <= 2.0 * env.b_psi() + 1e-12);
                    mean += &g * state.prob(x, y);
                    let fd = fd::gradient(|t| log_policy(&env, &params.at(t.clone()), x, y), &params.theta, 1e-5);
                    assert!((&fd - &g).norm() <= 1e-5 * g.norm().max(1e-3));
                }
                assert!(mean.norm() < 1e-10);
            }
        }
    }

    #[test]
    fn triple_score_properties() {
        let (env, params) = random_setup(21);
        let state = PolicyState::new(&env, &params);
        for z in env.triples() {
            let s = state.triple_score(z);
            assert!(s.norm() <= 4.0 * env.b_psi() + 1e-12);
            if z.y1 == z.y2 {
                assert!((&s - state.policy_score(z.x, z.y1) * 2.0).norm() < 1e-14);
            }
            let fd = fd::gradient(
                |t| PolicyState::new(&env, &params.at(t.clone())).log_triple_weight(z),
                &params.theta,
                1e-5,
            );
            assert!((&fd - &s).norm() <= 1e-5 * s.norm().max(1e-3));
        }
    }

    #[test]
    fn projection_cases() {
        let params = PolicyParams::at_reference(Vector::zeros(2), 1.0).unwrap();
        let inside = Vector::from_vec(vec![0.3, -0.2]);
        assert_eq!(params.project_feasible(&inside), inside);
        let p = params.project_feasible(&Vector::from_vec(vec![3.0, 4.0]));
        assert!((p[0] - 0.6).abs() < 1e-15 && (p[1] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn params_json_schema() {
        let params = PolicyParams::new(Vector::from_vec(vec![0.5, 0.0]), Vector::zeros(2), 1.0).unwrap();
        let text = serde_json::to_string(&params).unwrap();
        assert_eq!(text, r#"{"theta":[0.5,0.0],"theta_ref":[0.0,0.0],"radius_d":1.0}"#);
        let back: PolicyParams = serde_json::from_str(&text).unwrap();
        assert_eq!(back, params);
        let infeasible = r#"{"theta":[5.0,0.0],"theta_ref":[0.0,0.0],"radius_d":1.0}"#;
        assert!(serde_json::from_str::<PolicyParams>(infeasible).is_err());
    }

    #[test]
    fn fisher_and_covariance_bounds() {
        for seed in 0..10 {
            let (env, params) = random_setup(seed);
            let state = PolicyState::new(&env, &params);
            let b2 = env.b_psi().powi(2);
            let fisher = fisher_information(&state);
            assert!(crate::numeric::sym_spectral_norm(&fisher) <= 4.0 * b2 + 1e-12);
            for x in 0..env.n_prompts() {
                assert!(crate::numeric::sym_spectral_norm(&state.feature_covariance(x)) <= b2 + 1e-12);
            }
        }
    }
}
