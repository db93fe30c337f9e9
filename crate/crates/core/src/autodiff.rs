//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Tape`] records primitive operations during a forward pass; calling
//! [`backward`] propagates adjoints through the records in reverse to obtain
//! exact first-order gradients. Tapes are per-evaluation: build the
//! objective, read the gradient, drop the tape.
//!
//! [`stop_gradient`] is the identity on values but blocks the backward
//! pass, which is how detached links in a generative flow graph keep
//! downstream evidence from influencing upstream nodes.

use std::cell::RefCell;
use std::ops::{Add, Div, Mul, Neg, Sub};
use std::rc::Rc;
use thiserror::Error;

/// Argument outside a primitive's domain (log of a non-positive value,
/// fractional power of a negative base, and similar).
#[derive(Debug, Clone, Error, PartialEq)]
#[error("domain error: {0}")]
pub struct DomainError(pub String);

#[derive(Default)]
struct TapeInner {
    /// One record per non-leaf slot: output slot plus (input slot, local
    /// partial) pairs. Leaves have slots but no record.
    records: Vec<Record>,
    n_slots: usize,
}

struct Record {
    out: usize,
    args: Vec<(usize, f64)>,
}

/// Recording tape shared by the [`Scalar`]s of one evaluation.
#[derive(Clone, Default)]
pub struct Tape {
    inner: Rc<RefCell<TapeInner>>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Creates a differentiable leaf with the given value.
    pub fn var(&self, value: f64) -> Scalar {
        let idx = {
            let mut t = self.inner.borrow_mut();
            let idx = t.n_slots;
            t.n_slots += 1;
            idx
        };
        Scalar {
            value,
            node: Some((self.clone(), idx)),
        }
    }

    fn record(&self, value: f64, args: Vec<(usize, f64)>) -> Scalar {
        let idx = {
            let mut t = self.inner.borrow_mut();
            let idx = t.n_slots;
            t.n_slots += 1;
            t.records.push(Record { out: idx, args });
            idx
        };
        Scalar {
            value,
            node: Some((self.clone(), idx)),
        }
    }

    fn same_tape(&self, other: &Tape) -> bool {
        Rc::ptr_eq(&self.inner, &other.inner)
    }
}

/// A differentiable value: a real number plus an optional tape slot.
///
/// Scalars without a slot are constants; operations involving at least one
/// taped operand are recorded.
#[derive(Clone)]
pub struct Scalar {
    value: f64,
    node: Option<(Tape, usize)>,
}

impl std::fmt::Debug for Scalar {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match &self.node {
            Some((_, idx)) => write!(f, "Scalar({}, slot {})", self.value, idx),
            None => write!(f, "Scalar({}, const)", self.value),
        }
    }
}

impl Scalar {
    /// An untaped constant.
    pub fn constant(value: f64) -> Self {
        Scalar { value, node: None }
    }

    pub fn value(&self) -> f64 {
        self.value
    }

    pub fn is_taped(&self) -> bool {
        self.node.is_some()
    }

    fn tape(&self) -> Option<&Tape> {
        self.node.as_ref().map(|(t, _)| t)
    }

    fn slot(&self) -> Option<usize> {
        self.node.as_ref().map(|(_, i)| *i)
    }

    pub fn exp(&self) -> Scalar {
        let v = self.value.exp();
        unary(self, v, v)
    }

    /// Natural logarithm; the argument must be strictly positive.
    pub fn ln(&self) -> Result<Scalar, DomainError> {
        if self.value <= 0.0 {
            return Err(DomainError(format!("log of non-positive value {}", self.value)));
        }
        Ok(unary(self, self.value.ln(), 1.0 / self.value))
    }

    /// Raises to a constant power. Non-integer exponents require a
    /// positive base.
    pub fn powf(&self, p: f64) -> Result<Scalar, DomainError> {
        let integral = p.fract() == 0.0;
        if self.value < 0.0 && !integral {
            return Err(DomainError(format!(
                "fractional power {p} of negative base {}",
                self.value
            )));
        }
        if self.value == 0.0 && p < 0.0 {
            return Err(DomainError(format!("power {p} of zero base")));
        }
        let v = self.value.powf(p);
        let d = if p == 0.0 { 0.0 } else { p * self.value.powf(p - 1.0) };
        Ok(unary(self, v, d))
    }

    pub fn tanh(&self) -> Scalar {
        let v = self.value.tanh();
        unary(self, v, 1.0 - v * v)
    }

    /// Sum of a sequence of scalars; the empty sum is the constant zero.
    pub fn sum<'a, I: IntoIterator<Item = &'a Scalar>>(items: I) -> Scalar {
        let mut acc = Scalar::constant(0.0);
        for s in items {
            acc = &acc + s;
        }
        acc
    }
}

/// Identity on the value; the backward pass propagates nothing into the
/// argument.
pub fn stop_gradient(x: &Scalar) -> Scalar {
    Scalar::constant(x.value)
}

fn unary(x: &Scalar, value: f64, partial: f64) -> Scalar {
    match &x.node {
        Some((tape, idx)) => tape.record(value, vec![(*idx, partial)]),
        None => Scalar::constant(value),
    }
}

fn binary(a: &Scalar, b: &Scalar, value: f64, da: f64, db: f64) -> Scalar {
    let tape = match (a.tape(), b.tape()) {
        (Some(ta), Some(tb)) => {
            assert!(ta.same_tape(tb), "operands recorded on different tapes");
            Some(ta.clone())
        }
        (Some(t), None) | (None, Some(t)) => Some(t.clone()),
        (None, None) => None,
    };
    match tape {
        Some(tape) => {
            let mut args = Vec::with_capacity(2);
            if let Some(i) = a.slot() {
                args.push((i, da));
            }
            if let Some(i) = b.slot() {
                args.push((i, db));
            }
            tape.record(value, args)
        }
        None => Scalar::constant(value),
    }
}

macro_rules! impl_binop {
    ($trait:ident, $method:ident, $val:expr, $da:expr, $db:expr) => {
        impl $trait for &Scalar {
            type Output = Scalar;
            fn $method(self, rhs: &Scalar) -> Scalar {
                let (a, b) = (self.value, rhs.value);
                binary(self, rhs, $val(a, b), $da(a, b), $db(a, b))
            }
        }
        impl $trait for Scalar {
            type Output = Scalar;
            fn $method(self, rhs: Scalar) -> Scalar {
                $trait::$method(&self, &rhs)
            }
        }
        impl $trait<f64> for &Scalar {
            type Output = Scalar;
            fn $method(self, rhs: f64) -> Scalar {
                $trait::$method(self, &Scalar::constant(rhs))
            }
        }
        impl $trait<f64> for Scalar {
            type Output = Scalar;
            fn $method(self, rhs: f64) -> Scalar {
                $trait::$method(&self, &Scalar::constant(rhs))
            }
        }
    };
}

impl_binop!(Add, add, |a: f64, b: f64| a + b, |_, _| 1.0, |_, _| 1.0);
impl_binop!(Sub, sub, |a: f64, b: f64| a - b, |_, _| 1.0, |_, _| -1.0);
impl_binop!(Mul, mul, |a: f64, b: f64| a * b, |_, b: f64| b, |a: f64, _| a);
impl_binop!(
    Div,
    div,
    |a: f64, b: f64| a / b,
    |_, b: f64| 1.0 / b,
    |a: f64, b: f64| -a / (b * b)
);

impl Neg for &Scalar {
    type Output = Scalar;
    fn neg(self) -> Scalar {
        unary(self, -self.value, -1.0)
    }
}

impl Neg for Scalar {
    type Output = Scalar;
    fn neg(self) -> Scalar {
        -&self
    }
}

/// Adjoints of one output with respect to every tape slot.
pub struct Gradient {
    adjoints: Vec<f64>,
}

impl Gradient {
    /// Gradient with respect to `x`; zero for constants and for slots the
    /// output does not depend on.
    pub fn wrt(&self, x: &Scalar) -> f64 {
        match x.slot() {
            Some(i) => self.adjoints.get(i).copied().unwrap_or(0.0),
            None => 0.0,
        }
    }
}

/// Reverse pass from `output`, which must be on a tape.
pub fn backward(output: &Scalar) -> Gradient {
    let (tape, out) = output
        .node
        .as_ref()
        .expect("backward requires a taped output");
    let inner = tape.inner.borrow();
    let mut adjoints = vec![0.0; inner.n_slots];
    adjoints[*out] = 1.0;
    for rec in inner.records.iter().rev() {
        let g = adjoints[rec.out];
        if g == 0.0 {
            continue;
        }
        for (arg, partial) in &rec.args {
            adjoints[*arg] += g * partial;
        }
    }
    Gradient { adjoints }
}
