//! Feature-linear Bernoulli router over the binary SMALL/LARGE action space.

use std::fmt;

use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Logits are clamped to this magnitude before exponentiation.
pub const LOGIT_CLAMP: f64 = 30.0;
/// Probability clamp used by [`decision_kl`].
pub const KL_PROB_CLAMP: f64 = 1e-6;

/// Ordered feature names; order and length are part of the checkpoint contract.
pub const FEATURE_NAMES: [&str; 7] = [
    "bias",
    "step_fraction",
    "struggle_signal",
    "window_miss_fraction",
    "recent_large_fraction",
    "remaining_budget_fraction",
    "taxonomy_hint",
];
pub const FEATURE_DIM: usize = FEATURE_NAMES.len();

pub fn feature_schema_hash() -> String {
    let mut hasher = Sha256::new();
    for name in FEATURE_NAMES {
        hasher.update(name.as_bytes());
        hasher.update([0u8]);
    }
    let digest = hasher.finalize();
    digest[..8].iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum RouterAction {
    Small,
    Large,
}

impl RouterAction {
    pub fn is_large(self) -> bool {
        matches!(self, RouterAction::Large)
    }

    pub fn as_char(self) -> char {
        match self {
            RouterAction::Small => 'S',
            RouterAction::Large => 'L',
        }
    }

    pub fn from_char(c: char) -> Option<Self> {
        match c {
            'S' => Some(RouterAction::Small),
            'L' => Some(RouterAction::Large),
            _ => None,
        }
    }
}

impl fmt::Display for RouterAction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            RouterAction::Small => "SMALL",
            RouterAction::Large => "LARGE",
        })
    }
}

/// Numeric encoding of the router's view of the episode. Component 0 is the bias.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureVector(pub Vec<f64>);

impl FeatureVector {
    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RouterParams {
    pub weights: Vec<f64>,
    pub version: String,
    pub schema_hash: String,
}

impl RouterParams {
    pub fn zeros() -> Self {
        Self::from_weights(vec![0.0; FEATURE_DIM])
    }

    pub fn from_weights(weights: Vec<f64>) -> Self {
        RouterParams {
            weights,
            version: "v1".to_string(),
            schema_hash: feature_schema_hash(),
        }
    }

    pub fn with_version(mut self, version: impl Into<String>) -> Self {
        self.version = version.into();
        self
    }

    pub fn dim(&self) -> usize {
        self.weights.len()
    }

    pub fn logit(&self, f: &FeatureVector) -> Result<f64> {
        if f.len() != self.weights.len() {
            return Err(Error::DimensionMismatch {
                expected: self.weights.len(),
                got: f.len(),
            });
        }
        Ok(dot(&self.weights, f.as_slice()))
    }

    pub fn is_finite(&self) -> bool {
        self.weights.iter().all(|w| w.is_finite())
    }

    /// Plain-text checkpoint: header comments, then one weight per line.
    pub fn to_checkpoint(&self) -> String {
        let mut out = String::new();
        out.push_str("# routelab router checkpoint\n");
        out.push_str(&format!("# version: {}\n", self.version));
        out.push_str(&format!("# schema: {}\n", self.schema_hash));
        out.push_str(&format!("# dim: {}\n", self.weights.len()));
        for w in &self.weights {
            out.push_str(&format!("{w}\n"));
        }
        out
    }

    pub fn from_checkpoint(text: &str) -> Result<Self> {
        let parse_err = |detail: String| Error::Parse {
            what: "checkpoint",
            detail,
        };
        let mut version = None;
        let mut schema = None;
        let mut dim = None;
        let mut weights = Vec::new();
        for line in text.lines() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            if let Some(comment) = line.strip_prefix('#') {
                let comment = comment.trim();
                if let Some(v) = comment.strip_prefix("version:") {
                    version = Some(v.trim().to_string());
                } else if let Some(v) = comment.strip_prefix("schema:") {
                    schema = Some(v.trim().to_string());
                } else if let Some(v) = comment.strip_prefix("dim:") {
                    dim = Some(
                        v.trim()
                            .parse::<usize>()
                            .map_err(|e| parse_err(format!("dim: {e}")))?,
                    );
                }
                continue;
            }
            let w: f64 = line
                .parse()
                .map_err(|e| parse_err(format!("weight {line:?}: {e}")))?;
            if !w.is_finite() {
                return Err(parse_err(format!("non-finite weight {line}")));
            }
            weights.push(w);
        }
        let schema_hash = schema.ok_or_else(|| parse_err("missing schema header".into()))?;
        if schema_hash != feature_schema_hash() {
            return Err(parse_err(format!(
                "feature schema {schema_hash} does not match {}",
                feature_schema_hash()
            )));
        }
        if let Some(d) = dim {
            if d != weights.len() {
                return Err(Error::DimensionMismatch {
                    expected: d,
                    got: weights.len(),
                });
            }
        }
        if weights.len() != FEATURE_DIM {
            return Err(Error::DimensionMismatch {
                expected: FEATURE_DIM,
                got: weights.len(),
            });
        }
        Ok(RouterParams {
            weights,
            version: version.unwrap_or_else(|| "v1".to_string()),
            schema_hash,
        })
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn logistic(z: f64) -> f64 {
    let z = z.clamp(-LOGIT_CLAMP, LOGIT_CLAMP);
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^x)` without overflow.
fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

pub fn prob_large(params: &RouterParams, f: &FeatureVector) -> Result<f64> {
    Ok(logistic(params.logit(f)?))
}

/// One uniform draw per call, whatever the probability, so that policies
/// sharing an RNG stream stay coupled step for step.
pub fn sample_with_prob<R: Rng + ?Sized>(p_large: f64, rng: &mut R) -> RouterAction {
    let u: f64 = rng.gen();
    if u < p_large {
        RouterAction::Large
    } else {
        RouterAction::Small
    }
}

pub fn sample_action<R: Rng + ?Sized>(
    params: &RouterParams,
    f: &FeatureVector,
    rng: &mut R,
) -> Result<RouterAction> {
    Ok(sample_with_prob(prob_large(params, f)?, rng))
}

/// Log-probability of `action` and its gradient `(1[LARGE] - p) * f`.
pub fn logprob_and_grad(
    params: &RouterParams,
    f: &FeatureVector,
    action: RouterAction,
) -> Result<(f64, Vec<f64>)> {
    let z = params.logit(f)?.clamp(-LOGIT_CLAMP, LOGIT_CLAMP);
    let p = logistic(z);
    let (logp, indicator) = match action {
        RouterAction::Large => (-softplus(-z), 1.0),
        RouterAction::Small => (-softplus(z), 0.0),
    };
    let scale = indicator - p;
    let grad = f.as_slice().iter().map(|x| scale * x).collect();
    Ok((logp, grad))
}

/// Bernoulli KL divergence `KL(p || q)` between two LARGE probabilities.
pub fn decision_kl(p: f64, q: f64) -> f64 {
    let p = p.clamp(KL_PROB_CLAMP, 1.0 - KL_PROB_CLAMP);
    let q = q.clamp(KL_PROB_CLAMP, 1.0 - KL_PROB_CLAMP);
    let kl = p * (p / q).ln() + (1.0 - p) * ((1.0 - p) / (1.0 - q)).ln();
    kl.max(0.0)
}

/// Derivative of [`decision_kl`] with respect to `p` (zero outside the clamp).
pub(crate) fn decision_kl_dp(p: f64, q: f64) -> f64 {
    if p <= KL_PROB_CLAMP || p >= 1.0 - KL_PROB_CLAMP {
        return 0.0;
    }
    let q = q.clamp(KL_PROB_CLAMP, 1.0 - KL_PROB_CLAMP);
    (p / q).ln() - ((1.0 - p) / (1.0 - q)).ln()
}
