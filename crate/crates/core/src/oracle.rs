//! Independent exact-inference references used by tests and diagnostics:
//! brute-force enumeration for small discrete models and the closed-form
//! conjugate linear-Gaussian update.
//!
//! The enumeration path shares nothing with the variational solvers except
//! the graph itself and plain (untaped) log-density evaluation.

use std::collections::{BTreeMap, BTreeSet};

use thiserror::Error;

use crate::dist::Realized;
use crate::graph::{GenerativeFlowGraph, GraphError, LinkKind, NodeId, NodeKind, Resolved};

const MAX_JOINT_SIZE: usize = 1_000_000;

#[derive(Debug, Error)]
pub enum OracleError {
    #[error("joint too large to enumerate: {0} assignments exceed {MAX_JOINT_SIZE}")]
    TooLarge(usize),
    #[error("model is not enumerable: {0}")]
    NotEnumerable(String),
    #[error("distributions have different support")]
    SupportMismatch,
    #[error(transparent)]
    Graph(#[from] GraphError),
}

/// Exact posterior over the discrete latents of a model.
///
/// Keys are assignments over the latents executed on the corresponding
/// path; models without branching have one fixed key layout.
#[derive(Debug, Clone)]
pub struct PosteriorTable {
    pub entries: BTreeMap<Vec<(NodeId, i64)>, f64>,
    /// Log of the summed unnormalized mass, i.e. the exact log evidence.
    pub log_evidence: f64,
}

impl PosteriorTable {
    /// Posterior marginal of one latent, over the paths where it executes.
    pub fn marginal(&self, node: NodeId) -> BTreeMap<i64, f64> {
        let mut out: BTreeMap<i64, f64> = BTreeMap::new();
        let mut mass = 0.0;
        for (assignment, p) in &self.entries {
            if let Some((_, v)) = assignment.iter().find(|(n, _)| *n == node) {
                *out.entry(*v).or_insert(0.0) += p;
                mass += p;
            }
        }
        if mass > 0.0 {
            for v in out.values_mut() {
                *v /= mass;
            }
        }
        out
    }

    pub fn total_mass(&self) -> f64 {
        self.entries.values().sum()
    }
}

/// Exact posterior over all latents by summing the factorization over
/// every assignment and normalizing. Latents must be discrete and the
/// joint assignment count must stay within bounds.
pub fn enumerate_posterior(g: &GenerativeFlowGraph) -> Result<PosteriorTable, OracleError> {
    let mut size: usize = 1;
    for n in g.latents() {
        let card = g.support_size(n.id).ok_or_else(|| {
            OracleError::NotEnumerable(format!("latent {} is continuous", n.name))
        })?;
        size = size.saturating_mul(card);
        if size > MAX_JOINT_SIZE {
            return Err(OracleError::TooLarge(size));
        }
    }

    let order = g.topo_order().to_vec();
    let mut state = EnumState {
        env: BTreeMap::new(),
        executed: BTreeSet::new(),
        blocked: BTreeSet::new(),
        assignment: Vec::new(),
        weights: Vec::new(),
        entries: BTreeMap::new(),
    };

    enumerate_rec(g, &order, 0, &mut state, 0.0)?;
    let weights = state.weights;
    let mut entries = state.entries;

    // Log-sum-exp over path weights for a stable evidence value.
    let m = weights.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = weights.iter().map(|w| (w - m).exp()).sum();
    let log_evidence = m + z.ln();
    for v in entries.values_mut() {
        *v = (*v - log_evidence).exp();
    }
    Ok(PosteriorTable { entries, log_evidence })
}

struct EnumState {
    env: BTreeMap<NodeId, Resolved>,
    executed: BTreeSet<NodeId>,
    blocked: BTreeSet<NodeId>,
    assignment: Vec<(NodeId, i64)>,
    weights: Vec<f64>,
    entries: BTreeMap<Vec<(NodeId, i64)>, f64>,
}

fn enumerate_rec(
    g: &GenerativeFlowGraph,
    order: &[NodeId],
    pos: usize,
    st: &mut EnumState,
    logp: f64,
) -> Result<(), OracleError> {
    if pos == order.len() {
        let mut key = st.assignment.clone();
        key.sort();
        st.weights.push(logp);
        st.entries.insert(key, logp);
        return Ok(());
    }
    let id = order[pos];
    if st.blocked.contains(&id) {
        return enumerate_rec(g, order, pos + 1, st, logp);
    }
    let node = g.node(id);
    let parents_executed =
        |st: &EnumState| g.flow_parents(id).all(|(p, _)| st.executed.contains(&p));
    match &node.kind {
        NodeKind::FixedParam(v) | NodeKind::VariableParam(v) => {
            st.env.insert(id, Resolved::from_value(v));
            st.executed.insert(id);
            enumerate_rec(g, order, pos + 1, st, logp)?;
            st.env.remove(&id);
            st.executed.remove(&id);
        }
        NodeKind::Latent => {
            if !parents_executed(st) {
                // Skipped by branching upstream.
                return enumerate_rec(g, order, pos + 1, st, logp);
            }
            let resolver = |src: NodeId| st.env.get(&src).cloned();
            let dist = g.build_dist(id, &resolver)?;
            let card = dist.support_size().ok_or_else(|| {
                OracleError::NotEnumerable(format!("latent {} is continuous", node.name))
            })?;
            for k in 0..card as i64 {
                let lp = dist
                    .log_prob(&Realized::Index(k))
                    .map_err(GraphError::from)?
                    .value();
                st.env.insert(id, Resolved::Index(k));
                st.executed.insert(id);
                st.assignment.push((id, k));
                enumerate_rec(g, order, pos + 1, st, logp + lp)?;
                st.assignment.pop();
                st.env.remove(&id);
                st.executed.remove(&id);
            }
        }
        NodeKind::Observed(stored) => {
            if !parents_executed(st) {
                return enumerate_rec(g, order, pos + 1, st, logp);
            }
            let resolver = |src: NodeId| st.env.get(&src).cloned();
            let dist = g.build_dist(id, &resolver)?;
            let realized = crate::graph::trace::pin_observed(&dist, stored, &node.name)?;
            let lp = dist.log_prob(&realized).map_err(GraphError::from)?.value();
            let resolved = match realized {
                Realized::Index(k) => Resolved::Index(k),
                Realized::Real(s) => Resolved::Real(s),
            };
            st.env.insert(id, resolved);
            st.executed.insert(id);
            enumerate_rec(g, order, pos + 1, st, logp + lp)?;
            st.env.remove(&id);
            st.executed.remove(&id);
        }
        NodeKind::Branch(pred) => {
            if !parents_executed(st) {
                return enumerate_rec(g, order, pos + 1, st, logp);
            }
            let case = eval_predicate(g, id, pred, &st.env)?;
            let mut newly_blocked = Vec::new();
            for l in g.outgoing(id).filter(|l| l.kind != LinkKind::Influence) {
                if l.when != Some(case) && st.blocked.insert(l.to) {
                    newly_blocked.push(l.to);
                }
            }
            let passthrough = g
                .flow_parents(id)
                .next()
                .and_then(|(p, _)| st.env.get(&p).cloned());
            if let Some(v) = passthrough {
                st.env.insert(id, v);
            }
            st.executed.insert(id);
            enumerate_rec(g, order, pos + 1, st, logp)?;
            st.env.remove(&id);
            st.executed.remove(&id);
            for b in newly_blocked {
                st.blocked.remove(&b);
            }
        }
        NodeKind::Selection(pred) => {
            if !g.flow_parents(id).any(|(p, _)| st.executed.contains(&p)) {
                return enumerate_rec(g, order, pos + 1, st, logp);
            }
            let case = eval_predicate(g, id, pred, &st.env)?;
            let chosen = g
                .incoming(id)
                .find(|l| l.kind != LinkKind::Influence && l.when == Some(case))
                .ok_or_else(|| GraphError::Predicate {
                    node: node.name.clone(),
                    message: format!("no incoming flow for case {case}"),
                })?;
            let v = st
                .env
                .get(&chosen.from)
                .cloned()
                .ok_or_else(|| GraphError::Predicate {
                    node: node.name.clone(),
                    message: format!(
                        "selected flow from {} was not executed",
                        g.name(chosen.from)
                    ),
                })?;
            st.env.insert(id, v);
            st.executed.insert(id);
            enumerate_rec(g, order, pos + 1, st, logp)?;
            st.env.remove(&id);
            st.executed.remove(&id);
        }
    }
    Ok(())
}

fn eval_predicate(
    g: &GenerativeFlowGraph,
    id: NodeId,
    pred: &str,
    env: &BTreeMap<NodeId, Resolved>,
) -> Result<i64, OracleError> {
    let mut inputs = Vec::new();
    for l in g.incoming(id).filter(|l| l.kind == LinkKind::Influence) {
        let v = env.get(&l.from).ok_or_else(|| GraphError::Predicate {
            node: g.name(id).to_string(),
            message: format!("influence source {} not executed", g.name(l.from)),
        })?;
        inputs.push(v.to_value());
    }
    g.predicates().eval(pred, &inputs).map_err(|message| {
        OracleError::Graph(GraphError::Predicate {
            node: g.name(id).to_string(),
            message,
        })
    })
}

/// Closed-form posterior of a normal prior with known-noise normal
/// likelihood, by precision weighting.
pub fn conjugate_gaussian_posterior(
    prior_mean: f64,
    prior_std: f64,
    noise_std: f64,
    observations: &[f64],
) -> (f64, f64) {
    let prior_precision = 1.0 / (prior_std * prior_std);
    let obs_precision = 1.0 / (noise_std * noise_std);
    let precision = prior_precision + observations.len() as f64 * obs_precision;
    let sum: f64 = observations.iter().sum();
    let mean = (prior_mean * prior_precision + sum * obs_precision) / precision;
    (mean, (1.0 / precision).sqrt())
}

/// Exact log marginal likelihood of the observations under the same model,
/// accumulated through the one-point posterior-predictive chain.
pub fn conjugate_gaussian_log_evidence(
    prior_mean: f64,
    prior_std: f64,
    noise_std: f64,
    observations: &[f64],
) -> f64 {
    let (mut mean, mut std) = (prior_mean, prior_std);
    let mut total = 0.0;
    for &y in observations {
        let pred_var = std * std + noise_std * noise_std;
        total += -0.5 * ((y - mean) * (y - mean) / pred_var)
            - 0.5 * (2.0 * std::f64::consts::PI * pred_var).ln();
        let (m, s) = conjugate_gaussian_posterior(mean, std, noise_std, &[y]);
        mean = m;
        std = s;
    }
    total
}

/// Half the L1 distance between two distributions on the same support.
pub fn total_variation<K: Ord>(
    p: &BTreeMap<K, f64>,
    q: &BTreeMap<K, f64>,
) -> Result<f64, OracleError> {
    if p.len() != q.len() || !p.keys().all(|k| q.contains_key(k)) {
        return Err(OracleError::SupportMismatch);
    }
    Ok(p.iter().map(|(k, v)| (v - q[k]).abs()).sum::<f64>() / 2.0)
}

/// Logit of a probability in (0, 1).
pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}
