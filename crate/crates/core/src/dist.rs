//! Probability functions over taped scalars.
//!
//! Probability density functions and probability mass functions are not
//! distinguished; both expose `log_prob`. Parameters are [`Scalar`]s, so a
//! log probability is differentiable with respect to whatever parameters
//! were placed on a tape. Scale parameters are expected strictly positive
//! *after* any positivity map applied upstream (the engine stores
//! unconstrained log-scales and exponentiates them).

use crate::autodiff::{DomainError, Scalar};
use crate::value::Value;
use rand::Rng;
use thiserror::Error;

/// Half of ln(2*pi).
pub const HALF_LN_TWO_PI: f64 = 0.918_938_533_204_672_7;

#[derive(Debug, Clone, Error, PartialEq)]
pub enum DistError {
    #[error(transparent)]
    Domain(#[from] DomainError),
    #[error("unsupported: {0}")]
    Unsupported(String),
}

/// A realized node value as seen by a probability function: either a real
/// on the tape or a discrete state index.
#[derive(Debug, Clone)]
pub enum Realized {
    Real(Scalar),
    Index(i64),
}

impl Realized {
    pub fn value(&self) -> f64 {
        match self {
            Realized::Real(s) => s.value(),
            Realized::Index(k) => *k as f64,
        }
    }

    pub fn to_value(&self) -> Value {
        Value::Scalar(self.value())
    }

    pub fn as_index(&self) -> Option<i64> {
        match self {
            Realized::Real(s) if s.value().fract() == 0.0 => Some(s.value() as i64),
            Realized::Real(_) => None,
            Realized::Index(k) => Some(*k),
        }
    }
}

/// A concrete distribution with scalar parameters.
#[derive(Debug, Clone)]
pub enum Dist {
    Normal { loc: Scalar, scale: Scalar },
    Categorical { logits: Vec<Scalar> },
    Bernoulli { logit: Scalar },
}

impl Dist {
    pub fn is_discrete(&self) -> bool {
        !matches!(self, Dist::Normal { .. })
    }

    /// Number of states of a discrete family.
    pub fn support_size(&self) -> Option<usize> {
        match self {
            Dist::Normal { .. } => None,
            Dist::Categorical { logits } => Some(logits.len()),
            Dist::Bernoulli { .. } => Some(2),
        }
    }

    /// Log probability of `v`, differentiable with respect to taped
    /// parameters (and a taped real `v`).
    pub fn log_prob(&self, v: &Realized) -> Result<Scalar, DistError> {
        match self {
            Dist::Normal { loc, scale } => {
                let x = match v {
                    Realized::Real(s) => s.clone(),
                    Realized::Index(k) => Scalar::constant(*k as f64),
                };
                if scale.value() <= 0.0 {
                    return Err(DomainError(format!(
                        "normal scale must be positive, got {}",
                        scale.value()
                    ))
                    .into());
                }
                if !x.value().is_finite() {
                    return Err(DomainError("non-finite normal value".into()).into());
                }
                let z = &(&x - loc) / scale;
                Ok(&(-&(&z * &z) * 0.5) - &(&scale.ln()? + HALF_LN_TWO_PI))
            }
            Dist::Categorical { logits } => {
                let k = v
                    .as_index()
                    .ok_or_else(|| DomainError("categorical value must be an integer".into()))?;
                if k < 0 || k as usize >= logits.len() {
                    return Err(DomainError(format!(
                        "categorical value {k} outside support 0..{}",
                        logits.len()
                    ))
                    .into());
                }
                let lse = log_sum_exp(logits)?;
                Ok(&logits[k as usize] - &lse)
            }
            Dist::Bernoulli { logit } => {
                let k = v
                    .as_index()
                    .ok_or_else(|| DomainError("bernoulli value must be an integer".into()))?;
                match k {
                    1 => Ok(-&softplus(&-logit)),
                    0 => Ok(-&softplus(logit)),
                    _ => Err(DomainError(format!("bernoulli value {k} not in {{0, 1}}")).into()),
                }
            }
        }
    }

    /// Draws a plain (non-differentiable) sample.
    pub fn sample<R: Rng>(&self, rng: &mut R) -> Result<Value, DistError> {
        match self {
            Dist::Normal { loc, scale } => {
                if scale.value() <= 0.0 {
                    return Err(DomainError(format!(
                        "normal scale must be positive, got {}",
                        scale.value()
                    ))
                    .into());
                }
                let eps = standard_normal(rng);
                Ok(Value::Scalar(loc.value() + scale.value() * eps))
            }
            Dist::Categorical { logits } => {
                let probs = softmax_values(logits);
                Ok(Value::Scalar(inverse_cdf(&probs, rng) as f64))
            }
            Dist::Bernoulli { logit } => {
                let p = sigmoid(logit.value());
                let draw = rng.gen::<f64>() < p;
                Ok(Value::Scalar(if draw { 1.0 } else { 0.0 }))
            }
        }
    }

    /// Reparameterized sample for location-scale families: the result stays
    /// on the tape, so pathwise gradients flow into `loc` and `scale`.
    pub fn rsample<R: Rng>(&self, rng: &mut R) -> Result<Scalar, DistError> {
        match self {
            Dist::Normal { loc, scale } => {
                if scale.value() <= 0.0 {
                    return Err(DomainError(format!(
                        "normal scale must be positive, got {}",
                        scale.value()
                    ))
                    .into());
                }
                Ok(reparam(loc, scale, standard_normal(rng)))
            }
            _ => Err(DistError::Unsupported(
                "rsample is defined for the normal family only".into(),
            )),
        }
    }
}

/// Location-scale transform `loc + scale * eps` of a fixed noise draw.
pub fn reparam(loc: &Scalar, scale: &Scalar, eps: f64) -> Scalar {
    loc + &(scale * eps)
}

/// Closed-form KL(q || p) between two normal distributions.
pub fn kl_normal(
    q_loc: &Scalar,
    q_scale: &Scalar,
    p_loc: &Scalar,
    p_scale: &Scalar,
) -> Result<Scalar, DistError> {
    if q_scale.value() <= 0.0 || p_scale.value() <= 0.0 {
        return Err(DomainError("kl_normal requires positive scales".into()).into());
    }
    let var_ratio = &(q_scale * q_scale) / &(p_scale * p_scale);
    let mean_term = {
        let d = q_loc - p_loc;
        &(&d * &d) / &(&(p_scale * p_scale) * 2.0)
    };
    Ok(&(&(&(p_scale / q_scale).ln()? + &(&var_ratio * 0.5)) + &mean_term) - 0.5)
}

/// Numerically stable log(sum(exp(logits))), differentiable in the logits.
pub fn log_sum_exp(logits: &[Scalar]) -> Result<Scalar, DistError> {
    if logits.is_empty() {
        return Err(DomainError("log_sum_exp of empty logits".into()).into());
    }
    let m = logits
        .iter()
        .map(|l| l.value())
        .fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return Err(DomainError("non-finite logits".into()).into());
    }
    let mut acc = Scalar::constant(0.0);
    for l in logits {
        acc = &acc + &(l - m).exp();
    }
    Ok(&acc.ln()? + m)
}

/// Numerically stable softplus ln(1 + exp(x)).
pub fn softplus(x: &Scalar) -> Scalar {
    // Branching on the value keeps exp() bounded; gradients are exact on
    // either branch.
    if x.value() > 0.0 {
        x + &(&(-x).exp() + 1.0).ln().expect("1 + exp is positive")
    } else {
        (&x.exp() + 1.0).ln().expect("1 + exp is positive")
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Probabilities of a categorical given its logits (plain values).
pub fn softmax_values(logits: &[Scalar]) -> Vec<f64> {
    let m = logits
        .iter()
        .map(|l| l.value())
        .fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l.value() - m).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / z).collect()
}

fn inverse_cdf<R: Rng>(probs: &[f64], rng: &mut R) -> usize {
    let u = rng.gen::<f64>();
    let mut acc = 0.0;
    for (k, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return k;
        }
    }
    probs.len() - 1
}

/// Standard normal draw via the Box-Muller transform; consumes exactly two
/// uniforms, so sequences are reproducible for a fixed generator state.
pub fn standard_normal<R: Rng>(rng: &mut R) -> f64 {
    let u1: f64 = rng.gen::<f64>().max(f64::MIN_POSITIVE);
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}
