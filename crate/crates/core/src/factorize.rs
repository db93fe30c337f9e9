//! Mechanical derivation of factorizations from a graph.
//!
//! The joint factorization has one factor per variable node: the node given
//! its latent parents, with its parameter parents as a subscript. The
//! posterior factorization splits the graph into maximal blocks connected
//! only by detached links; each block conditions on its own observed nodes
//! and on frozen upstream variables and parameters. The partition used by
//! stochastic message passing groups latents by declared collection and
//! singles out the observed nodes whose parent latents span more than one
//! collection.

use std::collections::{BTreeMap, BTreeSet};

use thiserror::Error;

use crate::autodiff::{Scalar, Tape};
use crate::graph::{
    CollectionId, GenerativeFlowGraph, GraphError, LinkKind, NodeId, NodeKind, Resolved, Trace,
};
use crate::value::Value;

#[derive(Debug, Error)]
pub enum FactorizeError {
    #[error("latent node {0} is outside every collection")]
    UncoveredNode(String),
    #[error(transparent)]
    Graph(#[from] GraphError),
}

/// One atomic factor: a variable node given its parents.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
pub struct Factor {
    pub target: NodeId,
    /// Value-bearing parents (latent, branch, selection sources).
    pub parent_latents: BTreeSet<NodeId>,
    /// Parameter parents, rendered as a subscript.
    pub parent_params: BTreeSet<NodeId>,
    /// Parents whose link into the target is detached.
    pub via_detached: BTreeSet<NodeId>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct JointFactorization {
    pub factors: Vec<Factor>,
}

fn atomic_factor(g: &GenerativeFlowGraph, id: NodeId) -> Factor {
    let mut parent_latents = BTreeSet::new();
    let mut parent_params = BTreeSet::new();
    let mut via_detached = BTreeSet::new();
    for (p, kind) in g.flow_parents(id) {
        if g.node(p).kind.is_param() {
            parent_params.insert(p);
        } else {
            parent_latents.insert(p);
        }
        if kind == LinkKind::Detached {
            via_detached.insert(p);
        }
    }
    Factor {
        target: id,
        parent_latents,
        parent_params,
        via_detached,
    }
}

/// One factor per latent/observed node, in topological order.
pub fn factorize_joint(g: &GenerativeFlowGraph) -> JointFactorization {
    let factors = g
        .topo_order()
        .iter()
        .copied()
        .filter(|id| g.node(*id).kind.is_variable())
        .map(|id| atomic_factor(g, id))
        .collect();
    JointFactorization { factors }
}

fn names(g: &GenerativeFlowGraph, ids: &BTreeSet<NodeId>) -> Vec<String> {
    let mut v: Vec<String> = ids.iter().map(|id| g.name(*id).to_string()).collect();
    v.sort();
    v
}

/// Canonical text form of one atomic factor, e.g. `p[t](z | a, b)`.
pub fn render_factor(g: &GenerativeFlowGraph, f: &Factor) -> String {
    let mut out = String::from("p");
    if !f.parent_params.is_empty() {
        out.push_str(&format!("[{}]", names(g, &f.parent_params).join(", ")));
    }
    out.push('(');
    out.push_str(g.name(f.target));
    if !f.parent_latents.is_empty() {
        out.push_str(" | ");
        out.push_str(&names(g, &f.parent_latents).join(", "));
    }
    out.push(')');
    out
}

/// Canonical product form of the joint factorization, factors ordered by
/// target name.
pub fn render_joint(g: &GenerativeFlowGraph, j: &JointFactorization) -> String {
    let mut factors: Vec<&Factor> = j.factors.iter().collect();
    factors.sort_by_key(|f| g.name(f.target));
    let parts: Vec<String> = factors.iter().map(|f| render_factor(g, f)).collect();
    parts.join(" · ")
}

/// A maximal set of nodes connected by generative links; the posterior
/// factorizes over these blocks, freezing everything that arrives over
/// detached links from other blocks.
#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorBlock {
    pub latents: BTreeSet<NodeId>,
    pub observed: BTreeSet<NodeId>,
    pub params: BTreeSet<NodeId>,
    /// Upstream variables this block conditions on, frozen.
    pub frozen_latents: BTreeSet<NodeId>,
    /// Upstream parameters this block depends on, frozen.
    pub frozen_params: BTreeSet<NodeId>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorFactorization {
    pub blocks: Vec<PosteriorBlock>,
}

/// Splits the posterior along detached links.
///
/// Blocks are the weakly connected components of the generative-links-only
/// subgraph. A block with no incoming detached links matches the plain
/// joint posterior over its nodes; a detached-separated block conditions on
/// the frozen (breve) values of its detached parents instead of on their
/// evidence.
pub fn factorize_posterior(g: &GenerativeFlowGraph) -> PosteriorFactorization {
    let n = g.nodes().len();
    let mut comp: Vec<usize> = (0..n).collect();
    // Union-find over generative links only.
    fn find(comp: &mut Vec<usize>, i: usize) -> usize {
        if comp[i] != i {
            let root = find(comp, comp[i]);
            comp[i] = root;
        }
        comp[i]
    }
    for l in g.links() {
        if l.kind == LinkKind::Generative {
            let (a, b) = (
                find(&mut comp, l.from.0 as usize),
                find(&mut comp, l.to.0 as usize),
            );
            if a != b {
                comp[a] = b;
            }
        }
    }

    let mut groups: BTreeMap<usize, Vec<NodeId>> = BTreeMap::new();
    for i in 0..n {
        let root = find(&mut comp, i);
        groups.entry(root).or_default().push(NodeId(i as u32));
    }

    let mut blocks = Vec::new();
    for members in groups.values() {
        let set: BTreeSet<NodeId> = members.iter().copied().collect();
        let mut block = PosteriorBlock {
            latents: BTreeSet::new(),
            observed: BTreeSet::new(),
            params: BTreeSet::new(),
            frozen_latents: BTreeSet::new(),
            frozen_params: BTreeSet::new(),
        };
        for &m in members {
            match g.node(m).kind {
                NodeKind::Latent => {
                    block.latents.insert(m);
                }
                NodeKind::Observed(_) => {
                    block.observed.insert(m);
                }
                NodeKind::VariableParam(_) | NodeKind::FixedParam(_) => {
                    block.params.insert(m);
                }
                _ => {}
            }
            for (p, kind) in g.flow_parents(m) {
                if kind == LinkKind::Detached && !set.contains(&p) {
                    if g.node(p).kind.is_param() {
                        block.frozen_params.insert(p);
                    } else {
                        block.frozen_latents.insert(p);
                    }
                }
            }
        }
        // Pure-parameter components are parents of other blocks, not
        // posterior factors of their own.
        if block.latents.is_empty() && block.observed.is_empty() {
            continue;
        }
        blocks.push(block);
    }
    // Order blocks upstream-first by their smallest node id.
    blocks.sort_by_key(|b| {
        b.latents
            .iter()
            .chain(b.observed.iter())
            .min()
            .copied()
            .unwrap_or(NodeId(u32::MAX))
    });
    PosteriorFactorization { blocks }
}

/// Canonical text of the posterior split, one factor per block. Frozen
/// quantities carry a breve prefix, e.g. `p[tb, ˘ta](zb | ˘za, xb)`.
pub fn render_posterior(g: &GenerativeFlowGraph, p: &PosteriorFactorization) -> String {
    let mut blocks: Vec<&PosteriorBlock> = p.blocks.iter().collect();
    blocks.sort_by_key(|b| {
        names(g, &b.latents)
            .first()
            .cloned()
            .unwrap_or_default()
    });
    let parts: Vec<String> = blocks
        .iter()
        .map(|b| {
            let mut out = String::from("p");
            let mut subs: Vec<String> = names(g, &b.params);
            subs.extend(names(g, &b.frozen_params).into_iter().map(|n| format!("˘{n}")));
            if !subs.is_empty() {
                out.push_str(&format!("[{}]", subs.join(", ")));
            }
            out.push('(');
            out.push_str(&names(g, &b.latents).join(", "));
            let mut cond: Vec<String> = names(g, &b.frozen_latents)
                .into_iter()
                .map(|n| format!("˘{n}"))
                .collect();
            cond.extend(names(g, &b.observed));
            if !cond.is_empty() {
                out.push_str(" | ");
                out.push_str(&cond.join(", "));
            }
            out.push(')');
            out
        })
        .collect();
    parts.join(" · ")
}

/// Atomic expansion of a posterior block: the joint factors of its member
/// variable nodes.
pub fn expand_posterior(g: &GenerativeFlowGraph, p: &PosteriorFactorization) -> Vec<Factor> {
    let mut out: Vec<Factor> = p
        .blocks
        .iter()
        .flat_map(|b| {
            b.latents
                .iter()
                .chain(b.observed.iter())
                .map(|&id| atomic_factor(g, id))
        })
        .collect();
    out.sort();
    out
}

/// The collection/global-observed split used by stochastic message
/// passing.
#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorPartition {
    pub collections: Vec<CollectionId>,
    /// Observed nodes whose parent latents span more than one collection.
    pub global_observed: BTreeSet<NodeId>,
    /// Inter-collection dependencies; the flag is true when every link
    /// from that parent collection is detached.
    pub parent_map: BTreeMap<CollectionId, BTreeSet<(CollectionId, bool)>>,
    /// Collection owning each latent.
    pub latent_owner: BTreeMap<NodeId, CollectionId>,
    /// Collection each non-global observed node is local to.
    pub observed_owner: BTreeMap<NodeId, CollectionId>,
    /// Collection owning each variable parameter (by declared membership,
    /// else by unique child collection).
    pub param_owner: BTreeMap<NodeId, CollectionId>,
}

/// Derives the partition from declared collections.
///
/// Nested collections are resolved to the innermost declaration; every
/// latent must be covered. Observed nodes may live outside collections:
/// they become local to the single collection their parent latents belong
/// to, or global when those span several.
pub fn partition_for_smp(g: &GenerativeFlowGraph) -> Result<PosteriorPartition, FactorizeError> {
    // Innermost collection per node: the smallest declared collection
    // containing it.
    let mut owner: BTreeMap<NodeId, CollectionId> = BTreeMap::new();
    for c in g.collections() {
        for &m in &c.members {
            match owner.get(&m) {
                Some(prev) if g.collection(*prev).members.len() <= c.members.len() => {}
                _ => {
                    owner.insert(m, c.id);
                }
            }
        }
    }

    let mut latent_owner = BTreeMap::new();
    let mut declared_observed: BTreeMap<NodeId, CollectionId> = BTreeMap::new();
    let mut param_owner: BTreeMap<NodeId, CollectionId> = BTreeMap::new();
    for node in g.nodes() {
        match node.kind {
            NodeKind::Latent => match owner.get(&node.id) {
                Some(c) => {
                    latent_owner.insert(node.id, *c);
                }
                None => return Err(FactorizeError::UncoveredNode(node.name.clone())),
            },
            NodeKind::Observed(_) => {
                if let Some(c) = owner.get(&node.id) {
                    declared_observed.insert(node.id, *c);
                }
            }
            NodeKind::VariableParam(_) | NodeKind::FixedParam(_) => {
                if let Some(c) = owner.get(&node.id) {
                    param_owner.insert(node.id, *c);
                }
            }
            _ => {}
        }
    }

    // Undeclared variable params: owned by their unique child collection,
    // if there is one; otherwise they stay global and frozen everywhere.
    for node in g.variable_params() {
        if param_owner.contains_key(&node.id) {
            continue;
        }
        let child_cols: BTreeSet<CollectionId> = g
            .flow_children(node.id)
            .filter_map(|(c, _)| latent_owner.get(&c).or_else(|| declared_observed.get(&c)))
            .copied()
            .collect();
        if child_cols.len() == 1 {
            param_owner.insert(node.id, *child_cols.iter().next().unwrap());
        }
    }

    let mut global_observed = BTreeSet::new();
    let mut observed_owner = declared_observed.clone();
    for node in g.observed() {
        if observed_owner.contains_key(&node.id) {
            continue;
        }
        let parent_cols: BTreeSet<CollectionId> = g
            .flow_parents(node.id)
            .filter_map(|(p, _)| latent_owner.get(&resolve_through_control(g, p)))
            .copied()
            .collect();
        match parent_cols.len() {
            1 => {
                observed_owner.insert(node.id, *parent_cols.iter().next().unwrap());
            }
            0 => {
                // No latent parents: fall back to a parameter parent's
                // collection, else treat as global (a constant factor).
                let via_params: BTreeSet<CollectionId> = g
                    .flow_parents(node.id)
                    .filter_map(|(p, _)| param_owner.get(&p))
                    .copied()
                    .collect();
                if via_params.len() == 1 {
                    observed_owner.insert(node.id, *via_params.iter().next().unwrap());
                } else {
                    global_observed.insert(node.id);
                }
            }
            _ => {
                global_observed.insert(node.id);
            }
        }
    }

    // Inter-collection parent edges with their detached-only flag.
    let mut cross: BTreeMap<(CollectionId, CollectionId), bool> = BTreeMap::new();
    for l in g.links() {
        if l.kind == LinkKind::Influence {
            continue;
        }
        let from_col = latent_owner
            .get(&resolve_through_control(g, l.from))
            .or_else(|| param_owner.get(&l.from));
        let to_col = latent_owner
            .get(&l.to)
            .or_else(|| observed_owner.get(&l.to))
            .filter(|_| !global_observed.contains(&l.to));
        if let (Some(&a), Some(&b)) = (from_col, to_col) {
            if a != b {
                let e = cross.entry((b, a)).or_insert(true);
                *e = *e && l.kind == LinkKind::Detached;
            }
        }
    }
    // Co-parents of a shared global observed node are dependencies too,
    // recorded as non-detached couplings in both directions.
    for &x in &global_observed {
        let cols: BTreeSet<CollectionId> = g
            .flow_parents(x)
            .filter_map(|(p, _)| latent_owner.get(&resolve_through_control(g, p)))
            .copied()
            .collect();
        for &a in &cols {
            for &b in &cols {
                if a != b {
                    cross.insert((a, b), false);
                }
            }
        }
    }

    let mut parent_map: BTreeMap<CollectionId, BTreeSet<(CollectionId, bool)>> = BTreeMap::new();
    let mut used: BTreeSet<CollectionId> = latent_owner.values().copied().collect();
    used.extend(observed_owner.values().copied());
    for ((child, parent), detached) in cross {
        parent_map.entry(child).or_default().insert((parent, detached));
    }

    let mut collections: Vec<CollectionId> = used.into_iter().collect();
    collections.sort();
    Ok(PosteriorPartition {
        collections,
        global_observed,
        parent_map,
        latent_owner,
        observed_owner,
        param_owner,
    })
}

/// Follows branch/selection passthrough back to an originating variable
/// node, for ownership purposes.
fn resolve_through_control(g: &GenerativeFlowGraph, id: NodeId) -> NodeId {
    let mut cur = id;
    let mut guard = 0;
    while g.node(cur).kind.is_control() && guard < g.nodes().len() {
        match g.flow_parents(cur).next() {
            Some((p, _)) => cur = p,
            None => break,
        }
        guard += 1;
    }
    cur
}

/// Sum of per-factor log probabilities over the executed path of a trace.
pub fn log_joint(g: &GenerativeFlowGraph, t: &Trace) -> Result<f64, GraphError> {
    Ok(log_joint_traced(g, t, None)?.total.value())
}

/// Differentiable evaluation of the log joint.
pub struct LogJointEval {
    pub total: Scalar,
    /// Tape leaves for continuous latent values on the executed path.
    pub latent_leaves: BTreeMap<NodeId, Scalar>,
    /// Tape leaves per component of each variable parameter.
    pub param_leaves: BTreeMap<NodeId, Vec<Scalar>>,
}

/// Scores a trace against the graph.
///
/// With a tape, variable parameters and continuous latent values become
/// leaves so the gradient of the log joint can be read off; stop-gradient
/// applies at every detached link.
pub fn log_joint_traced(
    g: &GenerativeFlowGraph,
    t: &Trace,
    tape: Option<&Tape>,
) -> Result<LogJointEval, GraphError> {
    let mut latent_leaves: BTreeMap<NodeId, Scalar> = BTreeMap::new();
    let mut param_leaves: BTreeMap<NodeId, Vec<Scalar>> = BTreeMap::new();

    let leaf = |tape: Option<&Tape>, v: f64| match tape {
        Some(tp) => tp.var(v),
        None => Scalar::constant(v),
    };

    for node in g.nodes() {
        if let NodeKind::VariableParam(init) = &node.kind {
            let vals: Vec<f64> = match init {
                Value::Scalar(v) => vec![*v],
                Value::Vector(v) => v.clone(),
                Value::Matrix(_) => Vec::new(),
            };
            param_leaves.insert(node.id, vals.into_iter().map(|v| leaf(tape, v)).collect());
        }
    }
    for &id in &t.path {
        if g.node(id).kind == NodeKind::Latent {
            let dist = g.node(id).dist.as_ref();
            let discrete = dist.map(|d| d.family.is_discrete()).unwrap_or(false);
            if !discrete {
                if let Some(v) = t.values.get(&id).and_then(|v| v.as_scalar()) {
                    latent_leaves.insert(id, leaf(tape, v));
                }
            }
        }
    }

    // Resolves a node's realized value, following control passthrough and
    // preferring tape leaves.
    fn resolve(
        g: &GenerativeFlowGraph,
        t: &Trace,
        latent_leaves: &BTreeMap<NodeId, Scalar>,
        param_leaves: &BTreeMap<NodeId, Vec<Scalar>>,
        id: NodeId,
    ) -> Option<Resolved> {
        let node = g.node(id);
        match &node.kind {
            NodeKind::Latent => {
                if let Some(s) = latent_leaves.get(&id) {
                    return Some(Resolved::Real(s.clone()));
                }
                t.values.get(&id).map(|v| match v.as_index() {
                    Some(k) => Resolved::Index(k),
                    None => Resolved::from_value(v),
                })
            }
            NodeKind::Observed(v) => {
                let discrete = node
                    .dist
                    .as_ref()
                    .map(|d| d.family.is_discrete())
                    .unwrap_or(false);
                if discrete {
                    v.as_index().map(Resolved::Index)
                } else {
                    Some(Resolved::from_value(v))
                }
            }
            NodeKind::VariableParam(init) => {
                let leaves = param_leaves.get(&id)?;
                match init {
                    Value::Scalar(_) => Some(Resolved::Real(leaves[0].clone())),
                    _ => Some(Resolved::Reals(leaves.clone())),
                }
            }
            NodeKind::FixedParam(v) => Some(Resolved::from_value(v)),
            NodeKind::Branch(_) | NodeKind::Selection(_) => {
                // Re-route through the recorded choice.
                let case = t.branch_choices.get(&id)?;
                let link = match node.kind {
                    NodeKind::Selection(_) => g
                        .incoming(id)
                        .find(|l| l.kind != LinkKind::Influence && l.when == Some(*case)),
                    _ => g
                        .flow_parents(id)
                        .next()
                        .and_then(|(p, _)| g.incoming(id).find(|l| l.from == p)),
                }?;
                let v = resolve(g, t, latent_leaves, param_leaves, link.from)?;
                Some(if link.kind == LinkKind::Detached {
                    // Passthrough keeps detachment of the inner link.
                    match v {
                        Resolved::Real(s) => Resolved::Real(crate::autodiff::stop_gradient(&s)),
                        other => other,
                    }
                } else {
                    v
                })
            }
        }
    }

    let mut total = Scalar::constant(0.0);
    for &id in &t.path {
        let node = g.node(id);
        if !node.kind.is_variable() {
            continue;
        }
        let resolver =
            |src: NodeId| resolve(g, t, &latent_leaves, &param_leaves, src);
        let dist = g.build_dist(id, &resolver)?;
        let realized = match &node.kind {
            NodeKind::Latent => {
                let stored = t.values.get(&id).ok_or_else(|| {
                    GraphError::Model(format!("trace misses a value for {}", node.name))
                })?;
                if dist.is_discrete() {
                    crate::dist::Realized::Index(stored.as_index().ok_or_else(|| {
                        GraphError::Model(format!("discrete {} holds a non-integer", node.name))
                    })?)
                } else {
                    crate::dist::Realized::Real(latent_leaves[&id].clone())
                }
            }
            NodeKind::Observed(stored) => crate::graph::trace::pin_observed(&dist, stored, &node.name)?,
            _ => unreachable!(),
        };
        total = &total + &dist.log_prob(&realized)?;
    }

    Ok(LogJointEval {
        total,
        latent_leaves,
        param_leaves,
    })
}

/// A factor in a collection-level view of the joint.
#[derive(Debug, Clone, PartialEq)]
pub enum ViewFactor {
    Node(Factor),
    Collection {
        id: CollectionId,
        latents: BTreeSet<NodeId>,
        observed: BTreeSet<NodeId>,
        params: BTreeSet<NodeId>,
        parent_latents: BTreeSet<NodeId>,
        parent_params: BTreeSet<NodeId>,
    },
}

/// Groups the joint factorization by the named collections: members of a
/// listed collection merge into one collection factor conditioned on the
/// external parents; everything else stays atomic. The listed collections
/// must be disjoint.
pub fn factorize_view(
    g: &GenerativeFlowGraph,
    view: &[CollectionId],
) -> Result<Vec<ViewFactor>, FactorizeError> {
    let mut member_of: BTreeMap<NodeId, CollectionId> = BTreeMap::new();
    for &c in view {
        for &m in &g.collection(c).members {
            if member_of.insert(m, c).is_some() {
                return Err(FactorizeError::Graph(GraphError::Model(format!(
                    "view collections overlap on {}",
                    g.name(m)
                ))));
            }
        }
    }

    let mut out = Vec::new();
    let mut done: BTreeSet<CollectionId> = BTreeSet::new();
    for &id in g.topo_order() {
        let node = g.node(id);
        if !node.kind.is_variable() {
            continue;
        }
        match member_of.get(&id) {
            None => out.push(ViewFactor::Node(atomic_factor(g, id))),
            Some(&cid) => {
                if !done.insert(cid) {
                    continue;
                }
                let members = &g.collection(cid).members;
                let mut latents = BTreeSet::new();
                let mut observed = BTreeSet::new();
                let mut params = BTreeSet::new();
                let mut parent_latents = BTreeSet::new();
                let mut parent_params = BTreeSet::new();
                for &m in members {
                    match g.node(m).kind {
                        NodeKind::Latent => {
                            latents.insert(m);
                        }
                        NodeKind::Observed(_) => {
                            observed.insert(m);
                        }
                        NodeKind::VariableParam(_) | NodeKind::FixedParam(_) => {
                            params.insert(m);
                        }
                        _ => {}
                    }
                }
                for &m in members {
                    if !g.node(m).kind.is_variable() {
                        continue;
                    }
                    for (p, _) in g.flow_parents(m) {
                        if members.contains(&p) {
                            continue;
                        }
                        if g.node(p).kind.is_param() {
                            parent_params.insert(p);
                        } else {
                            parent_latents.insert(p);
                        }
                    }
                }
                out.push(ViewFactor::Collection {
                    id: cid,
                    latents,
                    observed,
                    params,
                    parent_latents,
                    parent_params,
                });
            }
        }
    }
    Ok(out)
}

/// Canonical text of a view factorization, factors ordered by their first
/// target name.
pub fn render_view(g: &GenerativeFlowGraph, factors: &[ViewFactor]) -> String {
    let mut ordered: Vec<&ViewFactor> = factors.iter().collect();
    ordered.sort_by_key(|vf| match vf {
        ViewFactor::Node(f) => g.name(f.target).to_string(),
        ViewFactor::Collection { latents, observed, .. } => {
            let mut targets = names(g, latents);
            targets.extend(names(g, observed));
            targets.sort();
            targets.first().cloned().unwrap_or_default()
        }
    });
    let parts: Vec<String> = ordered
        .iter()
        .map(|vf| match vf {
            ViewFactor::Node(f) => render_factor(g, f),
            ViewFactor::Collection {
                latents,
                observed,
                params,
                parent_latents,
                parent_params,
                ..
            } => {
                let mut out = String::from("p");
                let mut subs = names(g, params);
                subs.extend(names(g, parent_params));
                if !subs.is_empty() {
                    out.push_str(&format!("[{}]", subs.join(", ")));
                }
                out.push('(');
                let mut targets = names(g, latents);
                targets.extend(names(g, observed));
                out.push_str(&targets.join(", "));
                if !parent_latents.is_empty() {
                    out.push_str(" | ");
                    out.push_str(&names(g, parent_latents).join(", "));
                }
                out.push(')');
                out
            }
        })
        .collect();
    parts.join(" · ")
}

/// Expands a view back into atomic factors (collection factors expand to
/// their members' factors).
pub fn expand_view(g: &GenerativeFlowGraph, factors: &[ViewFactor]) -> Vec<Factor> {
    let mut out = Vec::new();
    for vf in factors {
        match vf {
            ViewFactor::Node(f) => out.push(f.clone()),
            ViewFactor::Collection { latents, observed, .. } => {
                for &m in latents.iter().chain(observed.iter()) {
                    out.push(atomic_factor(g, m));
                }
            }
        }
    }
    out.sort();
    out
}
