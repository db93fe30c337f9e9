//! Dense real-valued tensors of rank at most two.
//!
//! Node values, observed data, and parameter payloads are all carried as
//! [`Value`]. Discrete quantities are encoded as integer-valued rank-0
//! tensors so one value type covers every node in a graph.

use serde::{Deserialize, Serialize};

/// A dense real tensor of rank 0, 1, or 2.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Value {
    Scalar(f64),
    Vector(Vec<f64>),
    Matrix(Vec<Vec<f64>>),
}

impl Value {
    pub fn scalar(v: f64) -> Self {
        Value::Scalar(v)
    }

    pub fn vector(v: Vec<f64>) -> Self {
        Value::Vector(v)
    }

    /// Rank-0 view, if this is a scalar.
    pub fn as_scalar(&self) -> Option<f64> {
        match self {
            Value::Scalar(v) => Some(*v),
            _ => None,
        }
    }

    /// Integer view of an integer-valued rank-0 tensor.
    ///
    /// Discrete node values (categorical states, branch cases) are stored
    /// this way; non-integral or higher-rank values yield `None`.
    pub fn as_index(&self) -> Option<i64> {
        match self {
            Value::Scalar(v) if v.fract() == 0.0 && v.is_finite() => Some(*v as i64),
            _ => None,
        }
    }

    pub fn as_vector(&self) -> Option<&[f64]> {
        match self {
            Value::Vector(v) => Some(v),
            _ => None,
        }
    }

    pub fn rank(&self) -> usize {
        match self {
            Value::Scalar(_) => 0,
            Value::Vector(_) => 1,
            Value::Matrix(_) => 2,
        }
    }

    /// All entries are finite reals.
    pub fn is_finite(&self) -> bool {
        match self {
            Value::Scalar(v) => v.is_finite(),
            Value::Vector(v) => v.iter().all(|x| x.is_finite()),
            Value::Matrix(m) => m.iter().flatten().all(|x| x.is_finite()),
        }
    }
}

impl From<f64> for Value {
    fn from(v: f64) -> Self {
        Value::Scalar(v)
    }
}
