//! Host-registered predicates driving branch and selection nodes.
//!
//! A predicate maps the realized values of a condition node's influence
//! sources (in link declaration order) to an integer case. Model files
//! reference predicates by name; the expression language itself lives on
//! the host side.

use std::collections::BTreeMap;
use std::sync::Arc;

use crate::value::Value;

type PredicateFn = dyn Fn(&[Value]) -> Result<i64, String> + Send + Sync;

/// Named predicate functions shared by every evaluation of one graph.
#[derive(Clone, Default)]
pub struct PredicateRegistry {
    entries: BTreeMap<String, Arc<PredicateFn>>,
}

impl PredicateRegistry {
    pub fn empty() -> Self {
        Self::default()
    }

    /// Registry with the built-in predicates:
    ///
    /// - `positive`: 1 when the first input is > 0, else 0.
    /// - `identity`: the first input itself, which must be integer-valued;
    ///   routes by a discrete parent's state.
    pub fn standard() -> Self {
        let mut r = Self::default();
        r.register("positive", |vals| {
            let v = first_scalar(vals)?;
            Ok(if v > 0.0 { 1 } else { 0 })
        });
        r.register("identity", |vals| {
            let v = first_scalar(vals)?;
            if v.fract() != 0.0 {
                return Err(format!("identity predicate needs an integer, got {v}"));
            }
            Ok(v as i64)
        });
        r
    }

    pub fn register<F>(&mut self, name: &str, f: F)
    where
        F: Fn(&[Value]) -> Result<i64, String> + Send + Sync + 'static,
    {
        self.entries.insert(name.to_string(), Arc::new(f));
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn eval(&self, name: &str, inputs: &[Value]) -> Result<i64, String> {
        match self.entries.get(name) {
            Some(f) => f(inputs),
            None => Err(format!("predicate {name} is not registered")),
        }
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(|s| s.as_str())
    }
}

fn first_scalar(vals: &[Value]) -> Result<f64, String> {
    vals.first()
        .and_then(|v| v.as_scalar())
        .ok_or_else(|| "predicate needs a scalar input".to_string())
}
