//! Stochastic variational inference.
//!
//! The solver maximizes the Monte-Carlo dual objective
//! `E_{Z~q}[log p(Z, X = x) - log q(Z)]` jointly over model parameters and
//! variational parameters by stochastic gradient ascent. Continuous latents
//! use pathwise gradients through reparameterized samples; discrete latents
//! use the score-function estimator with a moving-average baseline. A
//! scoped variant of the same evaluation drives the per-collection
//! sub-problems of message passing.

use std::collections::{BTreeMap, BTreeSet};

use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{backward, Scalar, Tape};
use crate::dist::{Dist, DistError, Realized};
use crate::graph::trace::forward_walk;
use crate::graph::{
    CollectionId, GenerativeFlowGraph, GraphError, NodeId, NodeKind, Resolved,
};
use crate::value::Value;

#[derive(Debug, Error)]
pub enum SviError {
    #[error("ownership error: {0}")]
    Ownership(String),
    #[error("unsupported: {0}")]
    Unsupported(String),
    #[error("missing frozen parameters for {0}")]
    MissingMessage(String),
    #[error("objective diverged at step {step}: {detail}")]
    Divergence { step: usize, detail: String },
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Dist(#[from] DistError),
}

/// Parameters of one mean-field factor over a single latent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum FactorParams {
    /// Normal with unconstrained log-scale.
    Normal { mean: f64, log_std: f64 },
    /// Categorical over the latent's states, unconstrained logits.
    Categorical { logits: Vec<f64> },
}

impl FactorParams {
    pub fn components(&self) -> usize {
        match self {
            FactorParams::Normal { .. } => 2,
            FactorParams::Categorical { logits } => logits.len(),
        }
    }

    fn write_flat(&self, out: &mut Vec<f64>) {
        match self {
            FactorParams::Normal { mean, log_std } => out.extend([*mean, *log_std]),
            FactorParams::Categorical { logits } => out.extend(logits.iter().copied()),
        }
    }

    fn read_flat(&self, flat: &[f64]) -> FactorParams {
        match self {
            FactorParams::Normal { .. } => FactorParams::Normal {
                mean: flat[0],
                log_std: flat[1],
            },
            FactorParams::Categorical { logits } => FactorParams::Categorical {
                logits: flat[..logits.len()].to_vec(),
            },
        }
    }

    /// Plain draw from this factor.
    pub(crate) fn sample(&self, rng: &mut ChaCha12Rng) -> Resolved {
        match self {
            FactorParams::Normal { mean, log_std } => Resolved::Real(Scalar::constant(
                mean + log_std.exp() * crate::dist::standard_normal(rng),
            )),
            FactorParams::Categorical { logits } => {
                let logits: Vec<Scalar> = logits.iter().map(|&l| Scalar::constant(l)).collect();
                let d = Dist::Categorical { logits };
                let v = d.sample(rng).expect("categorical sampling");
                Resolved::Index(v.as_index().expect("categorical samples are integral"))
            }
        }
    }
}

/// Who owns a variational factor.
#[derive(Debug, Copy, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Owner {
    Node(NodeId),
    Collection(CollectionId),
}

/// A mean-field approximate posterior over a set of latents.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariationalFactor {
    pub owner: Owner,
    pub factors: BTreeMap<NodeId, FactorParams>,
}

impl VariationalFactor {
    /// Neutral mean-field initialization over `latents`: means and
    /// log-scales zero for continuous latents, zero logits for discrete.
    pub fn mean_field(
        g: &GenerativeFlowGraph,
        owner: Owner,
        latents: &BTreeSet<NodeId>,
    ) -> Result<Self, SviError> {
        let mut factors = BTreeMap::new();
        for &id in latents {
            let node = g.node(id);
            if node.kind != NodeKind::Latent {
                return Err(SviError::Ownership(format!(
                    "{} is not a latent node",
                    node.name
                )));
            }
            let family = node
                .dist
                .as_ref()
                .map(|d| d.family)
                .ok_or_else(|| SviError::Ownership(format!("{} has no distribution", node.name)))?;
            let params = if family.is_discrete() {
                let card = g.support_size(id).ok_or_else(|| {
                    SviError::Unsupported(format!("cannot size the support of {}", node.name))
                })?;
                FactorParams::Categorical { logits: vec![0.0; card] }
            } else {
                FactorParams::Normal { mean: 0.0, log_std: 0.0 }
            };
            factors.insert(id, params);
        }
        Ok(VariationalFactor { owner, factors })
    }

    /// One factor per latent of the whole graph, owned by the node itself.
    pub fn per_latent(g: &GenerativeFlowGraph) -> Result<Vec<Self>, SviError> {
        g.latents()
            .map(|n| Self::mean_field(g, Owner::Node(n.id), &BTreeSet::from([n.id])))
            .collect()
    }
}

/// Checks that every latent in `latents` is owned by exactly one factor.
pub fn check_ownership(
    g: &GenerativeFlowGraph,
    q: &[VariationalFactor],
    latents: &BTreeSet<NodeId>,
) -> Result<BTreeMap<NodeId, FactorParams>, SviError> {
    let mut owned: BTreeMap<NodeId, FactorParams> = BTreeMap::new();
    for f in q {
        for (id, params) in &f.factors {
            if owned.insert(*id, params.clone()).is_some() {
                return Err(SviError::Ownership(format!(
                    "latent {} is owned by two factors",
                    g.name(*id)
                )));
            }
        }
    }
    for id in latents {
        if !owned.contains_key(id) {
            return Err(SviError::Ownership(format!(
                "latent {} is owned by no factor",
                g.name(*id)
            )));
        }
    }
    Ok(owned)
}

/// Learning-rate schedules for stochastic gradient ascent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum LrSchedule {
    Constant(f64),
    /// `rate(l) = a * l^(-kappa)`.
    RobbinsMonro { a: f64, kappa: f64 },
}

impl LrSchedule {
    pub fn rate(&self, step: usize) -> f64 {
        match self {
            LrSchedule::Constant(r) => *r,
            LrSchedule::RobbinsMonro { a, kappa } => a * (step as f64).powf(-kappa),
        }
    }
}

/// True exactly when the schedule satisfies both step-size conditions
/// (divergent rate sum, convergent squared sum): `a * l^(-kappa)` with
/// `kappa` in (0.5, 1].
pub fn validate_robbins_monro(schedule: &LrSchedule) -> bool {
    match schedule {
        LrSchedule::Constant(_) => false,
        LrSchedule::RobbinsMonro { a, kappa } => *a > 0.0 && *kappa > 0.5 && *kappa <= 1.0,
    }
}

#[derive(Debug, Copy, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum OptimizerKind {
    /// Plain stochastic gradient ascent.
    Sga,
    /// Bias-corrected first/second-moment adaptation.
    AdaptiveMoment,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SviConfig {
    pub steps: usize,
    pub mc_samples: usize,
    pub lr_schedule: LrSchedule,
    pub seed: u64,
    pub optimizer: OptimizerKind,
    /// Record the flat parameter vector after every step (off by default;
    /// used by convergence diagnostics).
    pub trace_params: bool,
}

impl Default for SviConfig {
    fn default() -> Self {
        SviConfig {
            steps: 2000,
            mc_samples: 8,
            lr_schedule: LrSchedule::Constant(1e-2),
            seed: 0,
            optimizer: OptimizerKind::AdaptiveMoment,
            trace_params: false,
        }
    }
}

/// One plain ascent step: `w' = w + rate * grad`.
pub fn sga_step(w: &[f64], grad: &[f64], rate: f64) -> Vec<f64> {
    w.iter().zip(grad).map(|(w, g)| w + rate * g).collect()
}

/// Adaptive-moment ascent state.
#[derive(Debug, Clone)]
pub struct AdaptiveMoment {
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdaptiveMoment {
    pub fn new(dim: usize) -> Self {
        AdaptiveMoment {
            m: vec![0.0; dim],
            v: vec![0.0; dim],
            t: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn step(&mut self, w: &[f64], grad: &[f64], rate: f64) -> Vec<f64> {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        w.iter()
            .zip(grad)
            .enumerate()
            .map(|(i, (w, g))| {
                self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
                self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
                let m_hat = self.m[i] / bc1;
                let v_hat = self.v[i] / bc2;
                w + rate * m_hat / (v_hat.sqrt() + self.eps)
            })
            .collect()
    }
}

/// Moving-average control variate for the score-function estimator.
#[derive(Debug, Clone, Default)]
pub struct MovingBaseline {
    value: Option<f64>,
    pub decay: f64,
}

impl MovingBaseline {
    pub fn new() -> Self {
        MovingBaseline { value: None, decay: 0.9 }
    }

    pub fn get(&self) -> f64 {
        self.value.unwrap_or(0.0)
    }

    pub fn update(&mut self, observed: f64) {
        self.value = Some(match self.value {
            None => observed,
            Some(v) => self.decay * v + (1.0 - self.decay) * observed,
        });
    }
}

/// What one objective evaluation covers.
///
/// `score` lists the nodes whose log density enters the objective; `own`
/// latents are sampled from the variational factors being optimized;
/// `frozen` latents come from fixed external factors (no gradients);
/// `theta` lists the variable parameters on the tape.
#[derive(Debug, Clone)]
pub(crate) struct Scope {
    pub score: BTreeSet<NodeId>,
    pub own: BTreeSet<NodeId>,
    pub frozen: BTreeMap<NodeId, FactorParams>,
    pub frozen_theta: BTreeMap<NodeId, Value>,
    pub theta: BTreeSet<NodeId>,
    pub needed: BTreeSet<NodeId>,
}

impl Scope {
    /// Ancestor closure that stops at frozen latents (they are realized
    /// from their factors, not through the model).
    fn closure(
        g: &GenerativeFlowGraph,
        seeds: &BTreeSet<NodeId>,
        frozen: &BTreeMap<NodeId, FactorParams>,
    ) -> BTreeSet<NodeId> {
        let mut out = seeds.clone();
        let mut stack: Vec<NodeId> = seeds.iter().copied().collect();
        while let Some(n) = stack.pop() {
            if frozen.contains_key(&n) {
                continue;
            }
            for l in g.incoming(n) {
                if out.insert(l.from) {
                    stack.push(l.from);
                }
            }
        }
        out
    }

    pub fn whole_graph(
        g: &GenerativeFlowGraph,
        q: &[VariationalFactor],
    ) -> Result<(Scope, BTreeMap<NodeId, FactorParams>), SviError> {
        let latents: BTreeSet<NodeId> = g.latents().map(|n| n.id).collect();
        let owned = check_ownership(g, q, &latents)?;
        let score: BTreeSet<NodeId> = g
            .nodes()
            .iter()
            .filter(|n| n.kind.is_variable())
            .map(|n| n.id)
            .collect();
        let theta: BTreeSet<NodeId> = g.variable_params().map(|n| n.id).collect();
        let needed = Self::closure(g, &score, &BTreeMap::new());
        Ok((
            Scope {
                score,
                own: latents,
                frozen: BTreeMap::new(),
                frozen_theta: BTreeMap::new(),
                theta,
                needed,
            },
            owned,
        ))
    }

    pub(crate) fn scoped(
        g: &GenerativeFlowGraph,
        score: BTreeSet<NodeId>,
        own: BTreeSet<NodeId>,
        frozen: BTreeMap<NodeId, FactorParams>,
        frozen_theta: BTreeMap<NodeId, Value>,
        theta: BTreeSet<NodeId>,
    ) -> Scope {
        let mut seeds = score.clone();
        seeds.extend(own.iter().copied());
        let needed = Self::closure(g, &seeds, &frozen);
        Scope {
            score,
            own,
            frozen,
            frozen_theta,
            theta,
            needed,
        }
    }
}

/// Tape bindings for one optimization step.
pub(crate) struct Bound {
    /// Leaves in packing order.
    pub leaves: Vec<Scalar>,
    pub theta: BTreeMap<NodeId, Vec<Scalar>>,
    pub phi: BTreeMap<NodeId, PhiScalars>,
}

#[derive(Clone)]
pub(crate) enum PhiScalars {
    Normal { mean: Scalar, log_std: Scalar },
    Categorical { logits: Vec<Scalar> },
}

/// Deterministic packing of the optimized parameters into a flat vector:
/// variable parameters ordered by node id, then variational factors by
/// latent id.
#[derive(Debug, Clone)]
pub(crate) struct Packing {
    pub theta: Vec<(NodeId, usize)>,
    pub phi: Vec<(NodeId, FactorParams)>,
}

impl Packing {
    pub fn new(
        g: &GenerativeFlowGraph,
        theta: &BTreeSet<NodeId>,
        theta_values: &BTreeMap<NodeId, Value>,
        owned: &BTreeMap<NodeId, FactorParams>,
    ) -> (Packing, Vec<f64>) {
        let mut flat = Vec::new();
        let mut theta_slots = Vec::new();
        for &id in theta {
            let value = theta_values
                .get(&id)
                .cloned()
                .or_else(|| g.param_value(id).cloned())
                .expect("variable parameter has a value");
            let comps: Vec<f64> = match value {
                Value::Scalar(v) => vec![v],
                Value::Vector(v) => v,
                Value::Matrix(m) => m.into_iter().flatten().collect(),
            };
            theta_slots.push((id, comps.len()));
            flat.extend(comps);
        }
        let mut phi_slots = Vec::new();
        for (id, params) in owned {
            params.write_flat(&mut flat);
            phi_slots.push((*id, params.clone()));
        }
        (
            Packing {
                theta: theta_slots,
                phi: phi_slots,
            },
            flat,
        )
    }

    pub fn dim(&self) -> usize {
        self.theta.iter().map(|(_, n)| n).sum::<usize>()
            + self.phi.iter().map(|(_, p)| p.components()).sum::<usize>()
    }

    /// Binds the flat vector onto a tape (or as constants when `tape` is
    /// `None`).
    pub fn bind(&self, tape: Option<&Tape>, flat: &[f64]) -> Bound {
        let leaf = |v: f64| match tape {
            Some(t) => t.var(v),
            None => Scalar::constant(v),
        };
        let mut leaves = Vec::with_capacity(flat.len());
        let mut pos = 0usize;
        let mut theta = BTreeMap::new();
        for (id, n) in &self.theta {
            let comps: Vec<Scalar> = (0..*n)
                .map(|k| {
                    let s = leaf(flat[pos + k]);
                    leaves.push(s.clone());
                    s
                })
                .collect();
            theta.insert(*id, comps);
            pos += n;
        }
        let mut phi = BTreeMap::new();
        for (id, layout) in &self.phi {
            match layout {
                FactorParams::Normal { .. } => {
                    let mean = leaf(flat[pos]);
                    let log_std = leaf(flat[pos + 1]);
                    leaves.push(mean.clone());
                    leaves.push(log_std.clone());
                    phi.insert(*id, PhiScalars::Normal { mean, log_std });
                    pos += 2;
                }
                FactorParams::Categorical { logits } => {
                    let ls: Vec<Scalar> = (0..logits.len())
                        .map(|k| {
                            let s = leaf(flat[pos + k]);
                            leaves.push(s.clone());
                            s
                        })
                        .collect();
                    phi.insert(*id, PhiScalars::Categorical { logits: ls });
                    pos += logits.len();
                }
            }
        }
        Bound { leaves, theta, phi }
    }

    /// Unpacks a flat vector back into parameter values and factors.
    pub fn unpack(
        &self,
        g: &GenerativeFlowGraph,
        flat: &[f64],
    ) -> (BTreeMap<NodeId, Value>, BTreeMap<NodeId, FactorParams>) {
        let mut pos = 0usize;
        let mut theta = BTreeMap::new();
        for (id, n) in &self.theta {
            let comps = &flat[pos..pos + n];
            let value = match g.param_value(*id) {
                Some(Value::Scalar(_)) => Value::Scalar(comps[0]),
                _ => Value::Vector(comps.to_vec()),
            };
            theta.insert(*id, value);
            pos += n;
        }
        let mut phi = BTreeMap::new();
        for (id, layout) in &self.phi {
            phi.insert(*id, layout.read_flat(&flat[pos..]));
            pos += layout.components();
        }
        (theta, phi)
    }

    pub fn keys(&self) -> Vec<ParamKey> {
        let mut out = Vec::new();
        for (id, n) in &self.theta {
            for k in 0..*n {
                out.push(ParamKey::Theta(*id, k));
            }
        }
        for (id, layout) in &self.phi {
            match layout {
                FactorParams::Normal { .. } => {
                    out.push(ParamKey::PhiMean(*id));
                    out.push(ParamKey::PhiLogStd(*id));
                }
                FactorParams::Categorical { logits } => {
                    for k in 0..logits.len() {
                        out.push(ParamKey::PhiLogit(*id, k));
                    }
                }
            }
        }
        out
    }
}

/// Identifies one optimized scalar parameter.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
pub enum ParamKey {
    Theta(NodeId, usize),
    PhiMean(NodeId),
    PhiLogStd(NodeId),
    PhiLogit(NodeId, usize),
}

/// Result of evaluating the objective on one Monte-Carlo sample.
pub(crate) struct SampleEval {
    /// The integrand `log p(scored) - log q(own)`.
    pub objective: Scalar,
    /// Sum of `log q` over score-function-sampled own latents.
    pub score_log_q: Scalar,
}

/// How own latents are realized.
#[derive(Debug, Copy, Clone, PartialEq, Eq)]
pub(crate) enum Sampling {
    /// Continuous latents reparameterized (pathwise gradients); discrete
    /// latents score-function.
    Hybrid,
    /// Everything score-function (constant samples).
    ScoreOnly,
}

/// Evaluates one Monte-Carlo sample of the scoped objective.
pub(crate) fn evaluate_sample(
    g: &GenerativeFlowGraph,
    scope: &Scope,
    bound: &Bound,
    sampling: Sampling,
    rng: &mut ChaCha12Rng,
) -> Result<SampleEval, SviError> {
    let mut log_q_terms: Vec<Scalar> = Vec::new();
    let mut score_terms: Vec<Scalar> = Vec::new();
    let mut failure: Option<SviError> = None;

    let theta_fn = |id: NodeId| -> Option<Resolved> {
        if let Some(comps) = bound.theta.get(&id) {
            return Some(match g.param_value(id) {
                Some(Value::Scalar(_)) => Resolved::Real(comps[0].clone()),
                _ => Resolved::Reals(comps.clone()),
            });
        }
        scope.frozen_theta.get(&id).map(Resolved::from_value)
    };

    let out = {
        let mut latent_fn =
            |id: NodeId, dist: Option<&Dist>| -> Result<Option<Resolved>, GraphError> {
                if scope.own.contains(&id) {
                    let Some(dist) = dist else {
                        return Ok(None); // cut off by branching
                    };
                    let phi = bound.phi.get(&id).expect("own latent is bound");
                    match (phi, dist.is_discrete()) {
                        (PhiScalars::Normal { mean, log_std }, false) => {
                            let scale = log_std.exp();
                            let q = Dist::Normal { loc: mean.clone(), scale };
                            let z = match sampling {
                                Sampling::Hybrid => q.rsample(rng)?,
                                Sampling::ScoreOnly => Scalar::constant(
                                    q.sample(rng)?
                                        .as_scalar()
                                        .expect("normal samples are scalar"),
                                ),
                            };
                            let lq = q.log_prob(&Realized::Real(z.clone()))?;
                            if sampling == Sampling::ScoreOnly {
                                score_terms.push(lq.clone());
                            }
                            log_q_terms.push(lq);
                            Ok(Some(Resolved::Real(z)))
                        }
                        (PhiScalars::Categorical { logits }, true) => {
                            let q = Dist::Categorical { logits: logits.clone() };
                            let k = q.sample(rng)?.as_index().expect("categorical samples");
                            let lq = q.log_prob(&Realized::Index(k))?;
                            score_terms.push(lq.clone());
                            log_q_terms.push(lq);
                            Ok(Some(Resolved::Index(k)))
                        }
                        _ => {
                            failure = Some(SviError::Ownership(format!(
                                "variational family of {} does not match its model family",
                                g.name(id)
                            )));
                            Err(GraphError::Model("family mismatch".into()))
                        }
                    }
                } else if let Some(frozen) = scope.frozen.get(&id) {
                    Ok(Some(frozen.sample(rng)))
                } else {
                    failure = Some(SviError::MissingMessage(g.name(id).to_string()));
                    Err(GraphError::Model(format!(
                        "latent {} is neither owned nor frozen",
                        g.name(id)
                    )))
                }
            };
        forward_walk(g, Some(&scope.needed), &theta_fn, &mut latent_fn)
    };
    let out = match out {
        Ok(out) => out,
        Err(e) => return Err(failure.unwrap_or(SviError::Graph(e))),
    };

    let mut log_p = Scalar::constant(0.0);
    for (id, dist, realized) in &out.scored {
        if scope.score.contains(id) {
            log_p = &log_p + &dist.log_prob(realized)?;
        }
    }
    let log_q = Scalar::sum(log_q_terms.iter());
    Ok(SampleEval {
        objective: &log_p - &log_q,
        score_log_q: Scalar::sum(score_terms.iter()),
    })
}

/// Monte-Carlo estimate of the dual objective (the evidence lower bound
/// for the whole-graph scope) at the current parameters.
pub fn elbo_estimate(
    g: &GenerativeFlowGraph,
    q: &[VariationalFactor],
    cfg: &SviConfig,
) -> Result<f64, SviError> {
    let samples = elbo_samples(g, q, cfg)?;
    Ok(samples.iter().sum::<f64>() / samples.len() as f64)
}

/// The individual Monte-Carlo draws behind [`elbo_estimate`].
pub fn elbo_samples(
    g: &GenerativeFlowGraph,
    q: &[VariationalFactor],
    cfg: &SviConfig,
) -> Result<Vec<f64>, SviError> {
    let (scope, owned) = Scope::whole_graph(g, q)?;
    let (packing, flat) = Packing::new(g, &scope.theta, &BTreeMap::new(), &owned);
    let bound = packing.bind(None, &flat);
    let mut rng = ChaCha12Rng::seed_from_u64(cfg.seed);
    let mut out = Vec::with_capacity(cfg.mc_samples);
    for _ in 0..cfg.mc_samples.max(1) {
        let eval = evaluate_sample(g, &scope, &bound, Sampling::Hybrid, &mut rng)?;
        out.push(eval.objective.value());
    }
    Ok(out)
}

/// Mean pathwise (reparameterization) gradient over `cfg.mc_samples`
/// draws. All latents must be continuous.
pub fn grad_reparam(
    g: &GenerativeFlowGraph,
    q: &[VariationalFactor],
    cfg: &SviConfig,
) -> Result<BTreeMap<ParamKey, f64>, SviError> {
    let means = grad_samples(g, q, cfg, Estimator::Reparam, 0.0)?;
    Ok(mean_grad(means))
}

/// Mean score-function (likelihood-ratio) gradient with a fixed baseline;
/// unbiased for any baseline held fixed over the draws.
pub fn grad_reinforce(
    g: &GenerativeFlowGraph,
    q: &[VariationalFactor],
    cfg: &SviConfig,
    baseline: f64,
) -> Result<BTreeMap<ParamKey, f64>, SviError> {
    let means = grad_samples(g, q, cfg, Estimator::Reinforce, baseline)?;
    Ok(mean_grad(means))
}

#[derive(Debug, Copy, Clone, PartialEq, Eq)]
pub enum Estimator {
    Reparam,
    Reinforce,
}

/// Per-draw gradient estimates; the mean over draws estimates the
/// objective gradient, the spread gives the Monte-Carlo error.
pub fn grad_samples(
    g: &GenerativeFlowGraph,
    q: &[VariationalFactor],
    cfg: &SviConfig,
    estimator: Estimator,
    baseline: f64,
) -> Result<Vec<BTreeMap<ParamKey, f64>>, SviError> {
    let (scope, owned) = Scope::whole_graph(g, q)?;
    if estimator == Estimator::Reparam {
        for id in &scope.own {
            let discrete = g
                .node(*id)
                .dist
                .as_ref()
                .map(|d| d.family.is_discrete())
                .unwrap_or(false);
            if discrete {
                return Err(SviError::Unsupported(format!(
                    "pathwise gradients need continuous latents; {} is discrete",
                    g.name(*id)
                )));
            }
        }
    }
    let (packing, flat) = Packing::new(g, &scope.theta, &BTreeMap::new(), &owned);
    let keys = packing.keys();
    let mut rng = ChaCha12Rng::seed_from_u64(cfg.seed);
    let mut out = Vec::with_capacity(cfg.mc_samples);
    for _ in 0..cfg.mc_samples.max(1) {
        let tape = Tape::new();
        let bound = packing.bind(Some(&tape), &flat);
        let sampling = match estimator {
            Estimator::Reparam => Sampling::Hybrid,
            Estimator::Reinforce => Sampling::ScoreOnly,
        };
        let eval = evaluate_sample(g, &scope, &bound, sampling, &mut rng)?;
        let surrogate = match estimator {
            Estimator::Reparam => eval.objective,
            Estimator::Reinforce => {
                let advantage = eval.objective.value() - baseline;
                &eval.objective + &(&eval.score_log_q * advantage)
            }
        };
        let grad = backward(&surrogate);
        let map: BTreeMap<ParamKey, f64> = keys
            .iter()
            .cloned()
            .zip(bound.leaves.iter().map(|leaf| grad.wrt(leaf)))
            .collect();
        out.push(map);
    }
    Ok(out)
}

fn mean_grad(samples: Vec<BTreeMap<ParamKey, f64>>) -> BTreeMap<ParamKey, f64> {
    let n = samples.len().max(1) as f64;
    let mut acc: BTreeMap<ParamKey, f64> = BTreeMap::new();
    for s in &samples {
        for (k, v) in s {
            *acc.entry(k.clone()).or_insert(0.0) += v;
        }
    }
    for v in acc.values_mut() {
        *v /= n;
    }
    acc
}

/// Outcome of a fitting run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    pub theta: BTreeMap<NodeId, Value>,
    pub phi: BTreeMap<NodeId, FactorParams>,
    /// Raw per-step Monte-Carlo objective estimates.
    pub elbo_trace: Vec<f64>,
    /// Monotone smoothing of the trace (running max of a moving average),
    /// for reporting.
    pub elbo_smoothed: Vec<f64>,
    /// Final objective estimate (mean of the last step's draws).
    pub final_objective: f64,
    /// Per-step flat parameter iterates, recorded only on request.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub param_trace: Vec<Vec<f64>>,
}

/// Fits the variational factors and variable parameters of the whole
/// graph. Deterministic for a fixed seed; zero steps return the initial
/// parameters unchanged.
pub fn fit(
    g: &GenerativeFlowGraph,
    q: &[VariationalFactor],
    cfg: &SviConfig,
) -> Result<FitResult, SviError> {
    let (scope, owned) = Scope::whole_graph(g, q)?;
    fit_scoped(g, scope, owned, &BTreeMap::new(), cfg)
}

/// The shared fitting loop over an explicit scope; message passing reuses
/// it for per-collection sub-problems.
pub(crate) fn fit_scoped(
    g: &GenerativeFlowGraph,
    scope: Scope,
    owned: BTreeMap<NodeId, FactorParams>,
    theta_values: &BTreeMap<NodeId, Value>,
    cfg: &SviConfig,
) -> Result<FitResult, SviError> {
    let (packing, mut flat) = Packing::new(g, &scope.theta, theta_values, &owned);
    let mut rng = ChaCha12Rng::seed_from_u64(cfg.seed);
    let mut adaptive = AdaptiveMoment::new(packing.dim());
    let mut baseline = MovingBaseline::new();
    let mut elbo_trace = Vec::with_capacity(cfg.steps);
    let mut elbo_smoothed = Vec::with_capacity(cfg.steps);
    let mut ema: Option<f64> = None;
    let mut final_objective = f64::NAN;
    let mut param_trace = Vec::new();
    // Iterate averaging over the last tenth of the run: the reported
    // parameters are the tail mean, which strips the stationary jitter of
    // stochastic steps without biasing the optimum.
    let tail_start = cfg.steps.saturating_sub((cfg.steps / 10).max(1)) + 1;
    let mut tail_sum: Vec<f64> = Vec::new();
    let mut tail_count = 0usize;

    for step in 1..=cfg.steps {
        let tape = Tape::new();
        let bound = packing.bind(Some(&tape), &flat);
        let mut surrogate = Scalar::constant(0.0);
        let mut mean_l = 0.0;
        let b = baseline.get();
        for _ in 0..cfg.mc_samples.max(1) {
            // After the first successful step, an evaluation failure means
            // optimization drove a parameter out of its domain; surface it
            // as divergence with the diagnostic attached.
            let eval = match evaluate_sample(g, &scope, &bound, Sampling::Hybrid, &mut rng) {
                Ok(eval) => eval,
                Err(err) if step > 1 => {
                    return Err(SviError::Divergence { step, detail: err.to_string() })
                }
                Err(err) => return Err(err),
            };
            mean_l += eval.objective.value();
            let advantage = eval.objective.value() - b;
            surrogate = &surrogate + &(&eval.objective + &(&eval.score_log_q * advantage));
        }
        let mc = cfg.mc_samples.max(1) as f64;
        surrogate = &surrogate * (1.0 / mc);
        mean_l /= mc;
        if !mean_l.is_finite() {
            return Err(SviError::Divergence {
                step,
                detail: format!("objective estimate {mean_l}"),
            });
        }
        baseline.update(mean_l);
        final_objective = mean_l;

        let grad_map = backward(&surrogate);
        let grad: Vec<f64> = bound.leaves.iter().map(|leaf| grad_map.wrt(leaf)).collect();
        let rate = cfg.lr_schedule.rate(step);
        flat = match cfg.optimizer {
            OptimizerKind::Sga => sga_step(&flat, &grad, rate),
            OptimizerKind::AdaptiveMoment => adaptive.step(&flat, &grad, rate),
        };

        if cfg.trace_params {
            param_trace.push(flat.clone());
        }
        if step >= tail_start {
            if tail_sum.is_empty() {
                tail_sum = vec![0.0; flat.len()];
            }
            for (acc, v) in tail_sum.iter_mut().zip(flat.iter()) {
                *acc += v;
            }
            tail_count += 1;
        }
        elbo_trace.push(mean_l);
        let e = match ema {
            None => mean_l,
            Some(prev) => 0.9 * prev + 0.1 * mean_l,
        };
        ema = Some(e);
        let smoothed = elbo_smoothed.last().copied().map_or(e, |prev: f64| prev.max(e));
        elbo_smoothed.push(smoothed);
    }

    if tail_count > 0 {
        for (slot, acc) in flat.iter_mut().zip(tail_sum.iter()) {
            *slot = acc / tail_count as f64;
        }
    }
    let (theta, phi) = packing.unpack(g, &flat);
    if final_objective.is_nan() && cfg.steps == 0 {
        // Zero-step fits report the objective at the initial parameters.
        let bound = packing.bind(None, &flat);
        let mut rng = ChaCha12Rng::seed_from_u64(cfg.seed);
        let n = cfg.mc_samples.max(1);
        let mut total = 0.0;
        for _ in 0..n {
            total += evaluate_sample(g, &scope, &bound, Sampling::Hybrid, &mut rng)?
                .objective
                .value();
        }
        final_objective = total / n as f64;
    }
    Ok(FitResult {
        theta,
        phi,
        elbo_trace,
        elbo_smoothed,
        final_objective,
        param_trace,
    })
}
