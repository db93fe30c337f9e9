//! A self-contained inference engine for probabilistic programs represented
//! as generative flow graphs.
//!
//! A generative flow graph is a hybrid of a directed graphical model and a
//! flowchart: nodes are random variables, parameters, or control points, and
//! links describe both the sampling order and the conditional dependency
//! structure of a probabilistic program. On top of the validated graph this
//! crate derives joint and posterior factorizations, runs stochastic
//! variational inference, and couples per-collection solvers through
//! variational-parameter messages.
//!
//! Modules:
//! - [`graph`]: the graph IR, model-file schema, validation, and forward
//!   trace simulation.
//! - [`factorize`]: joint/posterior factor derivation and the partition
//!   used by message passing.
//! - [`autodiff`]: tape-based reverse-mode differentiation with a
//!   stop-gradient primitive.
//! - [`dist`]: probability functions (log density, sampling,
//!   reparameterized sampling, closed-form divergences).
//! - [`svi`]: stochastic variational inference (objective estimates,
//!   gradient estimators, optimizers, fitting loop).
//! - [`smp`]: stochastic message passing over per-collection sub-problems,
//!   serial or with parallel workers.
//! - [`oracle`]: exact enumeration and conjugate-Gaussian references used
//!   for verification.
//! - [`idiom`]: reusable graph-fragment templates with free distribution
//!   slots.
//! - [`render`]: DOT export of graphs.
//! - [`report`]: structured run reports.

pub mod autodiff;
pub mod dist;
pub mod factorize;
pub mod graph;
pub mod idiom;
pub mod oracle;
pub mod render;
pub mod report;
pub mod smp;
pub mod svi;
pub mod value;

pub use value::Value;
