//! The finite comparison universe: prompts, responses, the prompt distribution,
//! and the feature map `psi(x, y)`.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::Vector;

/// Default cap on `|X| * |Y|^2`.
pub const DEFAULT_ENUMERATION_CAP: usize = 1_000_000;

const MU_SUM_TOL: f64 = 1e-12;
const B_PSI_REL_SLACK: f64 = 1e-12;

/// A comparison triple `z = (x, y1, y2)` by index.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ComparisonTriple {
    pub x: usize,
    pub y1: usize,
    pub y2: usize,
}

impl ComparisonTriple {
    pub fn new(x: usize, y1: usize, y2: usize) -> Self {
        Self { x, y1, y2 }
    }

    /// The same comparison with the responses swapped.
    pub fn swapped(self) -> Self {
        Self {
            x: self.x,
            y1: self.y2,
            y2: self.y1,
        }
    }
}

/// On-disk form of an [`Environment`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvironmentDocument {
    pub prompts: Vec<String>,
    pub responses: Vec<String>,
    pub mu: Vec<f64>,
    pub feature_dim: usize,
    /// One row per `(x, y)`, x-major.
    pub features: Vec<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub b_psi: Option<f64>,
}

/// Finite prompt/response space with a dense row-major feature table.
#[derive(Debug, Clone, PartialEq)]
pub struct Environment {
    prompts: Vec<String>,
    responses: Vec<String>,
    mu: Vec<f64>,
    feature_dim: usize,
    features: Vec<f64>,
    b_psi: f64,
    enumeration_cap: usize,
}

impl Environment {
    /// Builds and validates an environment. `features` is flattened as
    /// `[(x, y, k)]` with x outermost. When `b_psi` is `None` it is set to the
    /// exact maximum feature norm; when supplied it must dominate every row.
    pub fn new(
        prompts: Vec<String>,
        responses: Vec<String>,
        mu: Vec<f64>,
        feature_dim: usize,
        features: Vec<f64>,
        b_psi: Option<f64>,
    ) -> Result<Self> {
        if prompts.is_empty() {
            return Err(Error::InvalidEnvironment("prompt set is empty".into()));
        }
        if responses.is_empty() {
            return Err(Error::InvalidEnvironment("response set is empty".into()));
        }
        if feature_dim == 0 {
            return Err(Error::InvalidEnvironment("feature_dim must be >= 1".into()));
        }
        if mu.len() != prompts.len() {
            return Err(Error::InvalidEnvironment(format!(
                "mu has {} entries but there are {} prompts",
                mu.len(),
                prompts.len()
            )));
        }
        if mu.iter().any(|&m| !(m >= 0.0) || !m.is_finite()) {
            return Err(Error::InvalidEnvironment("mu entries must be finite and nonnegative".into()));
        }
        let total: f64 = mu.iter().sum();
        if (total - 1.0).abs() > MU_SUM_TOL {
            return Err(Error::InvalidEnvironment(format!("mu sums to {total}, not 1")));
        }
        let expected = prompts.len() * responses.len() * feature_dim;
        if features.len() != expected {
            return Err(Error::InvalidEnvironment(format!(
                "feature table has {} entries, expected {expected}",
                features.len()
            )));
        }
        if features.iter().any(|f| !f.is_finite()) {
            return Err(Error::InvalidEnvironment("feature table contains non-finite values".into()));
        }
        let max_norm = features
            .chunks_exact(feature_dim)
            .map(|row| row.iter().map(|v| v * v).sum::<f64>().sqrt())
            .fold(0.0_f64, f64::max);
        let b_psi = match b_psi {
            None => max_norm,
            Some(b) => {
                if !(b >= 0.0) || !b.is_finite() {
                    return Err(Error::InvalidEnvironment(format!("b_psi={b} must be finite and >= 0")));
                }
                if max_norm > b * (1.0 + B_PSI_REL_SLACK) {
                    return Err(Error::InvalidEnvironment(format!(
                        "supplied b_psi={b} is smaller than the max feature norm {max_norm}"
                    )));
                }
                b
            }
        };
        Ok(Self {
            prompts,
            responses,
            mu,
            feature_dim,
            features,
            b_psi,
            enumeration_cap: DEFAULT_ENUMERATION_CAP,
        })
    }

    pub fn from_document(doc: EnvironmentDocument) -> Result<Self> {
        let d = doc.feature_dim;
        if let Some((i, row)) = doc.features.iter().enumerate().find(|(_, r)| r.len() != d) {
            return Err(Error::InvalidEnvironment(format!(
                "feature row {i} has length {}, expected {d}",
                row.len()
            )));
        }
        let flat = doc.features.into_iter().flatten().collect();
        Self::new(doc.prompts, doc.responses, doc.mu, d, flat, doc.b_psi)
    }

    pub fn to_document(&self) -> EnvironmentDocument {
        EnvironmentDocument {
            prompts: self.prompts.clone(),
            responses: self.responses.clone(),
            mu: self.mu.clone(),
            feature_dim: self.feature_dim,
            features: self.features.chunks_exact(self.feature_dim).map(<[f64]>::to_vec).collect(),
            b_psi: Some(self.b_psi),
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Self::from_document(serde_json::from_str(text)?)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&self.to_document())?)
    }

    pub fn with_enumeration_cap(mut self, cap: usize) -> Self {
        self.enumeration_cap = cap;
        self
    }

    pub fn prompts(&self) -> &[String] {
        &self.prompts
    }

    pub fn responses(&self) -> &[String] {
        &self.responses
    }

    pub fn n_prompts(&self) -> usize {
        self.prompts.len()
    }

    pub fn n_responses(&self) -> usize {
        self.responses.len()
    }

    pub fn mu(&self) -> &[f64] {
        &self.mu
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    pub fn b_psi(&self) -> f64 {
        self.b_psi
    }

    pub fn enumeration_cap(&self) -> usize {
        self.enumeration_cap
    }

    /// `psi(x, y)` as a slice of length `feature_dim`.
    pub fn feature(&self, x: usize, y: usize) -> &[f64] {
        let start = (x * self.responses.len() + y) * self.feature_dim;
        &self.features[start..start + self.feature_dim]
    }

    pub fn feature_vector(&self, x: usize, y: usize) -> Vector {
        Vector::from_column_slice(self.feature(x, y))
    }

    /// Exact maximum feature norm over the table.
    pub fn max_feature_norm(&self) -> f64 {
        self.features
            .chunks_exact(self.feature_dim)
            .map(|row| row.iter().map(|v| v * v).sum::<f64>().sqrt())
            .fold(0.0, f64::max)
    }

    /// `|Z| = |X| * |Y|^2`.
    pub fn n_triples(&self) -> usize {
        self.n_prompts() * self.n_responses() * self.n_responses()
    }

    pub fn check_enumeration_cap(&self) -> Result<()> {
        let size = self
            .n_prompts()
            .checked_mul(self.n_responses())
            .and_then(|v| v.checked_mul(self.n_responses()))
            .unwrap_or(usize::MAX);
        if size > self.enumeration_cap {
            Err(Error::EnumerationCapExceeded {
                size,
                cap: self.enumeration_cap,
            })
        } else {
            Ok(())
        }
    }

    pub fn is_valid_triple(&self, z: ComparisonTriple) -> bool {
        z.x < self.n_prompts() && z.y1 < self.n_responses() && z.y2 < self.n_responses()
    }

    /// Lexicographic iterator over `Z` (x, then y1, then y2). Does not check the cap.
    pub fn triples(&self) -> impl Iterator<Item = ComparisonTriple> + '_ {
        let ny = self.n_responses();
        (0..self.n_prompts()).flat_map(move |x| {
            (0..ny).flat_map(move |y1| (0..ny).map(move |y2| ComparisonTriple { x, y1, y2 }))
        })
    }

    /// All triples in lexicographic order, subject to the enumeration cap.
    pub fn enumerate_triples(&self) -> Result<Vec<ComparisonTriple>> {
        self.check_enumeration_cap()?;
        Ok(self.triples().collect())
    }

    /// `psi(x, y1) - psi(x, y2)`.
    pub fn delta_psi(&self, z: ComparisonTriple) -> Vector {
        let a = self.feature(z.x, z.y1);
        let b = self.feature(z.x, z.y2);
        Vector::from_iterator(self.feature_dim, a.iter().zip(b).map(|(p, q)| p - q))
    }

    /// Random environment from a seed; see [`RandomEnvironmentSpec`].
    pub fn random(spec: &RandomEnvironmentSpec, seed: u64) -> Result<Self> {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        Self::random_with(spec, &mut rng)
    }

    pub fn random_with<R: Rng + ?Sized>(spec: &RandomEnvironmentSpec, rng: &mut R) -> Result<Self> {
        let RandomEnvironmentSpec {
            n_prompts,
            n_responses,
            feature_dim,
            entry_bound,
            target_b_psi,
            uniform_mu,
        } = *spec;
        let mut features: Vec<f64> = (0..n_prompts * n_responses * feature_dim)
            .map(|_| rng.random_range(-entry_bound..=entry_bound))
            .collect();
        let mu: Vec<f64> = if uniform_mu {
            vec![1.0 / n_prompts as f64; n_prompts]
        } else {
            let raw: Vec<f64> = (0..n_prompts).map(|_| rng.random_range(0.2..1.0)).collect();
            let total: f64 = raw.iter().sum();
            raw.into_iter().map(|m| m / total).collect()
        };
        let mut b_psi = None;
        if let Some(target) = target_b_psi {
            let max_norm = features
                .chunks_exact(feature_dim.max(1))
                .map(|row| row.iter().map(|v| v * v).sum::<f64>().sqrt())
                .fold(0.0, f64::max);
            if max_norm > 0.0 {
                let scale = target / max_norm;
                features.iter_mut().for_each(|f| *f *= scale);
            }
            b_psi = Some(target);
        }
        let prompts = (0..n_prompts).map(|i| format!("x{i}")).collect();
        let responses = (0..n_responses).map(|i| format!("y{i}")).collect();
        Self::new(prompts, responses, normalize_mu(mu), feature_dim, features, b_psi)
    }
}

/// Renormalizes so that the sum is 1 within rounding.
fn normalize_mu(mut mu: Vec<f64>) -> Vec<f64> {
    let total: f64 = mu.iter().sum();
    mu.iter_mut().for_each(|m| *m /= total);
    mu
}

/// Parameters of the built-in random environment generator.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RandomEnvironmentSpec {
    pub n_prompts: usize,
    pub n_responses: usize,
    pub feature_dim: usize,
    /// Feature entries are drawn uniformly from `[-entry_bound, entry_bound]`.
    #[serde(default = "default_entry_bound")]
    pub entry_bound: f64,
    /// If set, the table is rescaled so that the max feature norm equals this value.
    #[serde(default)]
    pub target_b_psi: Option<f64>,
    #[serde(default = "default_true")]
    pub uniform_mu: bool,
}

fn default_entry_bound() -> f64 {
    1.0
}

fn default_true() -> bool {
    true
}

impl RandomEnvironmentSpec {
    pub fn new(n_prompts: usize, n_responses: usize, feature_dim: usize) -> Self {
        Self {
            n_prompts,
            n_responses,
            feature_dim,
            entry_bound: 1.0,
            target_b_psi: None,
            uniform_mu: true,
        }
    }

    pub fn with_target_b_psi(mut self, target: f64) -> Self {
        self.target_b_psi = Some(target);
        self
    }

    pub fn with_random_mu(mut self) -> Self {
        self.uniform_mu = false;
        self
    }
}
