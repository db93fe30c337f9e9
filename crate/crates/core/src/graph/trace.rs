//! Forward simulation of a generative flow graph.
//!
//! One walk visits nodes in topological order, realizes parameters and
//! values, routes through branch and selection nodes, and records which
//! variable nodes executed. [`sample_trace`] draws latents from their model
//! distributions; guided evaluation (used by the variational solvers)
//! supplies a different realization rule through the same walk.

use std::collections::{BTreeMap, BTreeSet};

use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use super::{GenerativeFlowGraph, GraphError, LinkKind, NodeId, NodeKind, Resolved};
use crate::dist::{Dist, Realized};
use crate::value::Value;

/// One realized execution of a graph: values for every executed node, the
/// execution order, and the case taken at each condition node. Nodes
/// skipped by branching carry no value and contribute no factor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trace {
    pub values: BTreeMap<NodeId, Value>,
    pub path: Vec<NodeId>,
    pub branch_choices: BTreeMap<NodeId, i64>,
}

/// How a latent node realizes during a walk: the closure sees the node's
/// model distribution when its parents are available and returns `None` to
/// mark the node skipped.
pub(crate) type LatentRule<'a> =
    dyn FnMut(NodeId, Option<&Dist>) -> Result<Option<Resolved>, GraphError> + 'a;

/// Raw output of one forward walk.
pub(crate) struct WalkOutput {
    pub values: BTreeMap<NodeId, Resolved>,
    pub path: Vec<NodeId>,
    pub branch_choices: BTreeMap<NodeId, i64>,
    /// Executed latent and observed nodes with the distribution each was
    /// scored against and its realized value, in execution order.
    pub scored: Vec<(NodeId, Dist, Realized)>,
}

/// Runs one forward pass.
///
/// `restrict` limits the walk to a node subset (which must be closed under
/// ancestors); `theta` overlays values for variable parameters; `latent`
/// realizes each executed latent. The closure receives the node's model
/// distribution when every parent is realized (`None` otherwise, e.g. for
/// externally realized latents whose parents are out of scope) and returns
/// `Ok(None)` to mark the node skipped.
pub(crate) fn forward_walk(
    g: &GenerativeFlowGraph,
    restrict: Option<&BTreeSet<NodeId>>,
    theta: &dyn Fn(NodeId) -> Option<Resolved>,
    latent: &mut LatentRule<'_>,
) -> Result<WalkOutput, GraphError> {
    let mut values: BTreeMap<NodeId, Resolved> = BTreeMap::new();
    let mut executed: BTreeSet<NodeId> = BTreeSet::new();
    let mut path = Vec::new();
    let mut branch_choices = BTreeMap::new();
    let mut scored = Vec::new();
    let mut blocked: BTreeSet<NodeId> = BTreeSet::new();

    for &id in g.topo_order() {
        if let Some(keep) = restrict {
            if !keep.contains(&id) {
                continue;
            }
        }
        if blocked.contains(&id) {
            continue;
        }
        let node = g.node(id);
        match &node.kind {
            NodeKind::FixedParam(v) => {
                values.insert(id, Resolved::from_value(v));
                executed.insert(id);
            }
            NodeKind::VariableParam(v) => {
                let resolved = theta(id).unwrap_or_else(|| Resolved::from_value(v));
                values.insert(id, resolved);
                executed.insert(id);
            }
            NodeKind::Latent => {
                let dist = if flow_parents_ready(g, id, &executed) {
                    let resolver = |src: NodeId| values.get(&src).cloned();
                    Some(g.build_dist(id, &resolver)?)
                } else {
                    None
                };
                let Some(value) = latent(id, dist.as_ref())? else {
                    continue;
                };
                let realized = value.as_realized().ok_or_else(|| {
                    GraphError::Model(format!("latent {} realized to a non-scalar", node.name))
                })?;
                if let Some(dist) = dist {
                    scored.push((id, dist, realized));
                }
                values.insert(id, value);
                executed.insert(id);
                path.push(id);
            }
            NodeKind::Observed(stored) => {
                if !flow_parents_ready(g, id, &executed) {
                    continue;
                }
                let resolver = |src: NodeId| values.get(&src).cloned();
                let dist = g.build_dist(id, &resolver)?;
                let realized = pin_observed(&dist, stored, &node.name)?;
                let resolved = match &realized {
                    Realized::Real(s) => Resolved::Real(s.clone()),
                    Realized::Index(k) => Resolved::Index(*k),
                };
                scored.push((id, dist, realized));
                values.insert(id, resolved);
                executed.insert(id);
                path.push(id);
            }
            NodeKind::Branch(pred) => {
                if !flow_parents_ready(g, id, &executed) {
                    continue;
                }
                let case = eval_condition(g, id, pred, &values)?;
                branch_choices.insert(id, case);
                // Exactly one outgoing arm carries the flow; the others'
                // targets are cut from this execution.
                let mut matched = 0usize;
                for l in g.outgoing(id).filter(|l| l.kind != LinkKind::Influence) {
                    if l.when == Some(case) {
                        matched += 1;
                    } else {
                        blocked.insert(l.to);
                    }
                }
                if matched == 0 {
                    return Err(GraphError::Predicate {
                        node: node.name.clone(),
                        message: format!("no outgoing flow for case {case}"),
                    });
                }
                // Pass the incoming flow value through, if there is one.
                let parent = g.flow_parents(id).next();
                if let Some((p, kind)) = parent {
                    if let Some(v) = values.get(&p) {
                        let v = if kind == LinkKind::Detached { v.detach() } else { v.clone() };
                        values.insert(id, v);
                    }
                }
                executed.insert(id);
                path.push(id);
            }
            NodeKind::Selection(pred) => {
                // A selection downstream of an untaken branch side is
                // skipped outright when none of its flows executed.
                if !g.flow_parents(id).any(|(p, _)| executed.contains(&p)) {
                    continue;
                }
                let case = eval_condition(g, id, pred, &values)?;
                branch_choices.insert(id, case);
                let Some(chosen) = g
                    .incoming(id)
                    .find(|l| l.kind != LinkKind::Influence && l.when == Some(case))
                else {
                    return Err(GraphError::Predicate {
                        node: node.name.clone(),
                        message: format!("no incoming flow for case {case}"),
                    });
                };
                let Some(v) = values.get(&chosen.from) else {
                    return Err(GraphError::Predicate {
                        node: node.name.clone(),
                        message: format!(
                            "selected flow from {} was not executed",
                            g.name(chosen.from)
                        ),
                    });
                };
                let v = if chosen.kind == LinkKind::Detached { v.detach() } else { v.clone() };
                values.insert(id, v);
                executed.insert(id);
                path.push(id);
            }
        }
    }

    Ok(WalkOutput {
        values,
        path,
        branch_choices,
        scored,
    })
}

fn flow_parents_ready(g: &GenerativeFlowGraph, id: NodeId, executed: &BTreeSet<NodeId>) -> bool {
    g.flow_parents(id).all(|(p, _)| executed.contains(&p))
}

fn eval_condition(
    g: &GenerativeFlowGraph,
    id: NodeId,
    predicate: &str,
    values: &BTreeMap<NodeId, Resolved>,
) -> Result<i64, GraphError> {
    let mut inputs = Vec::new();
    for l in g.incoming(id).filter(|l| l.kind == LinkKind::Influence) {
        match values.get(&l.from) {
            Some(v) => inputs.push(v.to_value()),
            None => {
                return Err(GraphError::Predicate {
                    node: g.name(id).to_string(),
                    message: format!("influence source {} was not executed", g.name(l.from)),
                })
            }
        }
    }
    g.predicates()
        .eval(predicate, &inputs)
        .map_err(|message| GraphError::Predicate {
            node: g.name(id).to_string(),
            message,
        })
}

/// Converts an observed node's stored value into the realization expected
/// by its distribution family.
pub(crate) fn pin_observed(
    dist: &Dist,
    stored: &Value,
    name: &str,
) -> Result<Realized, GraphError> {
    if dist.is_discrete() {
        let k = stored.as_index().ok_or_else(|| {
            GraphError::Model(format!("observed {name} must store an integer-valued scalar"))
        })?;
        Ok(Realized::Index(k))
    } else {
        let v = stored
            .as_scalar()
            .ok_or_else(|| GraphError::Model(format!("observed {name} must store a scalar")))?;
        Ok(Realized::Real(crate::autodiff::Scalar::constant(v)))
    }
}

/// Topologically ordered forward simulation: latents are drawn from their
/// distributions given realized parents, observed nodes are pinned to their
/// stored values, condition nodes route the flow. Detached links pass
/// values exactly like generative links; detachment only affects gradients.
pub fn sample_trace(g: &GenerativeFlowGraph, rng_seed: u64) -> Result<Trace, GraphError> {
    let mut rng = ChaCha12Rng::seed_from_u64(rng_seed);
    let mut draw = |_id: NodeId, dist: Option<&Dist>| -> Result<Option<Resolved>, GraphError> {
        let Some(dist) = dist else {
            return Ok(None); // skipped by branching upstream
        };
        let v = dist.sample(&mut rng)?;
        Ok(Some(match dist.is_discrete() {
            true => Resolved::Index(v.as_index().expect("discrete samples are integral")),
            false => Resolved::from_value(&v),
        }))
    };
    let out = forward_walk(g, None, &|_| None, &mut draw)?;
    Ok(Trace {
        values: out
            .values
            .iter()
            .filter(|(id, _)| {
                let k = &g.node(**id).kind;
                k.is_variable() || k.is_control()
            })
            .map(|(id, v)| (*id, v.to_value()))
            .collect(),
        path: out.path,
        branch_choices: out.branch_choices,
    })
}
