//! Bradley-Terry preference oracle, its nondegeneracy margin, the pointwise
//! uncertainty interval, and the worst-case adversarial oracle.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::environment::{ComparisonTriple, Environment};
use crate::error::{Error, Result};
use crate::numeric::sigmoid;
use crate::policy::PolicyState;

#[derive(Debug, Clone, Serialize, Deserialize)]
struct RewardDocument {
    reward: Vec<Vec<f64>>,
}

/// Latent reward table `r*(x, y)` inducing `p*(z) = sigmoid(r*(x,y1) - r*(x,y2))`.
///
/// The margin `delta` is always recomputed from the table.
#[derive(Debug, Clone, PartialEq)]
pub struct TrueOracle {
    reward: Vec<f64>,
    n_prompts: usize,
    n_responses: usize,
    delta: f64,
}

impl TrueOracle {
    /// `reward[x][y]`, x-major.
    pub fn new(env: &Environment, reward: Vec<Vec<f64>>) -> Result<Self> {
        if reward.len() != env.n_prompts() {
            return Err(Error::InvalidParams(format!(
                "reward table has {} rows but the environment has {} prompts",
                reward.len(),
                env.n_prompts()
            )));
        }
        let mut flat = Vec::with_capacity(env.n_prompts() * env.n_responses());
        for (x, row) in reward.iter().enumerate() {
            if row.len() != env.n_responses() {
                return Err(Error::InvalidParams(format!(
                    "reward row {x} has {} entries but the environment has {} responses",
                    row.len(),
                    env.n_responses()
                )));
            }
            if let Some(v) = row.iter().find(|v| !v.is_finite()) {
                return Err(Error::InvalidParams(format!("reward row {x} contains non-finite value {v}")));
            }
            flat.extend_from_slice(row);
        }
        let mut oracle = Self {
            reward: flat,
            n_prompts: env.n_prompts(),
            n_responses: env.n_responses(),
            delta: 0.5,
        };
        oracle.delta = oracle.compute_margin();
        Ok(oracle)
    }

    /// Rewards drawn uniformly from `[-scale, scale]`.
    pub fn random<R: Rng + ?Sized>(env: &Environment, scale: f64, rng: &mut R) -> Result<Self> {
        if !(scale >= 0.0) || !scale.is_finite() {
            return Err(Error::InvalidParams(format!("reward scale {scale} must be finite and >= 0")));
        }
        let table = (0..env.n_prompts())
            .map(|_| {
                (0..env.n_responses())
                    .map(|_| if scale == 0.0 { 0.0 } else { rng.random_range(-scale..=scale) })
                    .collect()
            })
            .collect();
        Self::new(env, table)
    }

    pub fn from_json(env: &Environment, text: &str) -> Result<Self> {
        let doc: RewardDocument = serde_json::from_str(text)?;
        Self::new(env, doc.reward)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(&RewardDocument {
            reward: self.reward_table(),
        })?)
    }

    pub fn reward(&self, x: usize, y: usize) -> f64 {
        self.reward[x * self.n_responses + y]
    }

    pub fn reward_table(&self) -> Vec<Vec<f64>> {
        self.reward.chunks(self.n_responses).map(<[f64]>::to_vec).collect()
    }

    pub fn delta(&self) -> f64 {
        self.delta
    }

    /// `p*(z) = sigmoid(r*(x,y1) - r*(x,y2))`.
    pub fn true_prob(&self, z: ComparisonTriple) -> f64 {
        sigmoid(self.reward(z.x, z.y1) - self.reward(z.x, z.y2))
    }

    /// Largest `delta` with `delta <= p*(z) <= 1 - delta` for every triple.
    ///
    /// The extreme pair for each prompt is the (max, min) reward pair, so the margin is
    /// `sigmoid(-max_x (max_y r* - min_y r*))`.
    pub fn compute_margin(&self) -> f64 {
        debug_assert_eq!(self.reward.len(), self.n_prompts * self.n_responses);
        let widest = self
            .reward
            .chunks(self.n_responses)
            .map(|row| {
                let hi = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let lo = row.iter().copied().fold(f64::INFINITY, f64::min);
                hi - lo
            })
            .fold(0.0, f64::max);
        sigmoid(-widest)
    }
}

/// Radius of the pointwise uncertainty interval `[p* - rho, p* + rho]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UncertaintyConfig {
    pub rho: f64,
}

impl UncertaintyConfig {
    pub fn new(rho: f64) -> Result<Self> {
        if !(rho >= 0.0) || !rho.is_finite() {
            return Err(Error::InvalidHyperparams(format!("rho={rho} must be finite and >= 0")));
        }
        Ok(Self { rho })
    }

    /// Admissibility against a margin: `0 <= rho < delta`.
    pub fn check_admissible(&self, oracle: &TrueOracle) -> Result<()> {
        if self.rho >= 0.0 && self.rho < oracle.delta() {
            Ok(())
        } else {
            Err(Error::InadmissibleRadius {
                rho: self.rho,
                delta: oracle.delta(),
            })
        }
    }
}

/// Where training labels come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OracleMode {
    #[default]
    True,
    Adversarial,
}

impl fmt::Display for OracleMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            OracleMode::True => "true",
            OracleMode::Adversarial => "adversarial",
        })
    }
}

impl FromStr for OracleMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "true" => Ok(OracleMode::True),
            "adversarial" => Ok(OracleMode::Adversarial),
            other => Err(Error::InvalidHyperparams(format!(
                "oracle mode {other:?} must be \"true\" or \"adversarial\""
            ))),
        }
    }
}

/// `sup_{p in [p*-rho, p*+rho]} p a + (1-p) b = p* a + (1-p*) b + rho |a - b|`.
pub fn pointwise_sup_value(p_star: f64, rho: f64, a: f64, b: f64) -> Result<f64> {
    let lo = p_star - rho;
    let hi = p_star + rho;
    if !(rho >= 0.0) || !(lo >= 0.0) || !(hi <= 1.0) {
        return Err(Error::IntervalOutOfRange { lo, hi });
    }
    Ok(p_star * a + (1.0 - p_star) * b + rho * (a - b).abs())
}

/// The maximizing endpoint: `p* + rho` when `a >= b`, else `p* - rho`.
pub fn pointwise_sup_argmax(p_star: f64, rho: f64, a: f64, b: f64) -> f64 {
    if a >= b {
        p_star + rho
    } else {
        p_star - rho
    }
}

/// Adversarial preference probability for `z` at the policy in `state`.
///
/// Since `ell1 - ell0 = -beta h` with `beta > 0`, `ell1 >= ell0` iff `h <= 0`; the
/// adversary then pushes the label probability up.
pub fn worst_case_prob(
    oracle: &TrueOracle,
    cfg: &UncertaintyConfig,
    state: &PolicyState<'_>,
    z: ComparisonTriple,
) -> Result<f64> {
    cfg.check_admissible(oracle)?;
    let p = oracle.true_prob(z);
    let h = state.log_ratio_logit(z);
    Ok(if h <= 0.0 { p + cfg.rho } else { p - cfg.rho })
}

/// Bernoulli parameter used for labels under `mode`.
pub fn label_prob(
    mode: OracleMode,
    oracle: &TrueOracle,
    cfg: &UncertaintyConfig,
    state: &PolicyState<'_>,
    z: ComparisonTriple,
) -> Result<f64> {
    match mode {
        OracleMode::True => Ok(oracle.true_prob(z)),
        OracleMode::Adversarial => worst_case_prob(oracle, cfg, state, z),
    }
}

/// One preference label; `true` means `y1` is preferred.
pub fn sample_label<R: Rng + ?Sized>(
    mode: OracleMode,
    oracle: &TrueOracle,
    cfg: &UncertaintyConfig,
    state: &PolicyState<'_>,
    z: ComparisonTriple,
    rng: &mut R,
) -> Result<bool> {
    let p = label_prob(mode, oracle, cfg, state, z)?;
    Ok(rng.random::<f64>() < p)
}
