//! The generative flow graph IR: nodes, links, collections, validation.
//!
//! A graph is immutable once built. Construction happens either through
//! [`GraphBuilder`] (programmatic, links derived from distribution
//! parameters) or from a model file via [`model`]. Every graph accepted by
//! [`GenerativeFlowGraph::validate`] admits a topological order of its
//! generative-plus-detached subgraph; that order drives forward simulation.

pub mod model;
pub mod predicate;
pub mod trace;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{stop_gradient, Scalar};
use crate::dist::{Dist, DistError, Realized};
use crate::value::Value;

pub use predicate::PredicateRegistry;
pub use trace::{sample_trace, Trace};

/// Identifier of a node; dense within one graph.
#[derive(Copy, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Debug, Serialize, Deserialize)]
pub struct NodeId(pub u32);

/// Identifier of a node collection; dense within one graph.
#[derive(Copy, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Debug, Serialize, Deserialize)]
pub struct CollectionId(pub u32);

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "n{}", self.0)
    }
}

/// What a node is: a random variable, a parameter, or a control point that
/// steers the generative flow.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum NodeKind {
    /// A sampled random variable.
    Latent,
    /// A conditioned random variable pinned to a value.
    Observed(Value),
    /// A learnable parameter with its initial value; mutated only by an
    /// optimizer, never by forward simulation.
    VariableParam(Value),
    /// A constant parameter.
    FixedParam(Value),
    /// Condition changing the direction of the generative flow: exactly one
    /// outgoing generative link is followed, chosen by the named predicate.
    Branch(String),
    /// Condition selecting one of several incoming generative flows.
    Selection(String),
}

impl NodeKind {
    pub fn is_variable(&self) -> bool {
        matches!(self, NodeKind::Latent | NodeKind::Observed(_))
    }

    pub fn is_param(&self) -> bool {
        matches!(self, NodeKind::VariableParam(_) | NodeKind::FixedParam(_))
    }

    pub fn is_control(&self) -> bool {
        matches!(self, NodeKind::Branch(_) | NodeKind::Selection(_))
    }

    pub fn label(&self) -> &'static str {
        match self {
            NodeKind::Latent => "latent",
            NodeKind::Observed(_) => "observed",
            NodeKind::VariableParam(_) => "variable_param",
            NodeKind::FixedParam(_) => "fixed_param",
            NodeKind::Branch(_) => "branch",
            NodeKind::Selection(_) => "selection",
        }
    }
}

/// Link semantics.
///
/// Generative links carry values forward. Detached links carry values the
/// same way but block all inference influence on everything upstream of the
/// link. Influence links are non-generative and only feed branch/selection
/// conditions.
#[derive(Debug, Copy, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum LinkKind {
    Generative,
    Detached,
    Influence,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Link {
    pub from: NodeId,
    pub to: NodeId,
    pub kind: LinkKind,
    /// Routing case for links leaving a branch or entering a selection.
    pub when: Option<i64>,
}

/// Distribution families available to latent and observed nodes.
#[derive(Debug, Copy, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum Family {
    Normal,
    Categorical,
    Bernoulli,
}

impl Family {
    pub fn param_slots(&self) -> usize {
        match self {
            Family::Normal => 2,
            Family::Categorical => 1,
            Family::Bernoulli => 1,
        }
    }

    pub fn is_discrete(&self) -> bool {
        !matches!(self, Family::Normal)
    }

    pub fn name(&self) -> &'static str {
        match self {
            Family::Normal => "normal",
            Family::Categorical => "categorical",
            Family::Bernoulli => "bernoulli",
        }
    }
}

/// How one distribution parameter slot is filled at evaluation time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum ParamSource {
    /// Realized value of a parent node.
    Node(NodeId),
    /// Literal constant (rank 0 or 1).
    Const(Value),
    /// Exponential of another source; the standard positivity map for
    /// scale slots fed by unconstrained parameters.
    Exp(Box<ParamSource>),
    /// Sum of realized sources.
    Sum(Vec<ParamSource>),
    /// Lookup into a dense table indexed by discrete parent values,
    /// row-major over `cards`.
    Table {
        entries: Vec<Value>,
        index_by: Vec<NodeId>,
        cards: Vec<usize>,
    },
}

impl ParamSource {
    /// Nodes referenced anywhere inside this source.
    pub fn referenced(&self, out: &mut BTreeSet<NodeId>) {
        match self {
            ParamSource::Node(id) => {
                out.insert(*id);
            }
            ParamSource::Const(_) => {}
            ParamSource::Exp(inner) => inner.referenced(out),
            ParamSource::Sum(items) => {
                for s in items {
                    s.referenced(out);
                }
            }
            ParamSource::Table { index_by, .. } => out.extend(index_by.iter().copied()),
        }
    }
}

/// Reference to the distribution of a latent or observed node.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistRef {
    pub family: Family,
    pub params: Vec<ParamSource>,
}

impl DistRef {
    pub fn referenced(&self) -> BTreeSet<NodeId> {
        let mut out = BTreeSet::new();
        for p in &self.params {
            p.referenced(&mut out);
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Node {
    pub id: NodeId,
    pub name: String,
    pub kind: NodeKind,
    pub dist: Option<DistRef>,
}

/// A grouped set of nodes treated as one factor at a chosen abstraction
/// level. Members are latents, observed nodes, and parameters; a node may
/// only appear in one collection unless the containing collections nest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeCollection {
    pub id: CollectionId,
    pub name: String,
    pub members: BTreeSet<NodeId>,
    /// Display label of the index, e.g. `i=1..3`.
    pub index: Option<String>,
    /// Count of conditionally independent stacked instances this collection
    /// was unrolled from; display metadata only.
    pub replicated: Option<u32>,
}

/// Violations reported by [`GenerativeFlowGraph::validate`].
#[derive(Debug, Clone, PartialEq)]
pub enum Violation {
    Cycle { involved: Vec<String> },
    LinkTarget { from: String, to: String, message: String },
    CollectionOverlap { a: String, b: String, node: String },
    Arity { node: String, message: String },
    DuplicateName { name: String },
    Routing { node: String, message: String },
    PredicateMissing { node: String, predicate: String },
}

impl Violation {
    pub fn kind(&self) -> ViolationKind {
        match self {
            Violation::Cycle { .. } => ViolationKind::Cycle,
            Violation::LinkTarget { .. } => ViolationKind::LinkTarget,
            Violation::CollectionOverlap { .. } => ViolationKind::CollectionOverlap,
            Violation::Arity { .. } => ViolationKind::Arity,
            Violation::DuplicateName { .. } => ViolationKind::DuplicateName,
            Violation::Routing { .. } => ViolationKind::Routing,
            Violation::PredicateMissing { .. } => ViolationKind::PredicateMissing,
        }
    }
}

#[derive(Debug, Copy, Clone, PartialEq, Eq)]
pub enum ViolationKind {
    Cycle,
    LinkTarget,
    CollectionOverlap,
    Arity,
    DuplicateName,
    Routing,
    PredicateMissing,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::Cycle { involved } => {
                write!(f, "cycle through nodes: {}", involved.join(", "))
            }
            Violation::LinkTarget { from, to, message } => {
                write!(f, "bad link {from} -> {to}: {message}")
            }
            Violation::CollectionOverlap { a, b, node } => {
                write!(f, "collections {a} and {b} overlap on node {node} without nesting")
            }
            Violation::Arity { node, message } => write!(f, "node {node}: {message}"),
            Violation::DuplicateName { name } => write!(f, "duplicate name {name}"),
            Violation::Routing { node, message } => write!(f, "node {node}: {message}"),
            Violation::PredicateMissing { node, predicate } => {
                write!(f, "node {node}: predicate {predicate} is not registered")
            }
        }
    }
}

/// Everything `validate` found, in deterministic order; empty means valid.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_empty(&self) -> bool {
        self.violations.is_empty()
    }

    pub fn contains(&self, kind: ViolationKind) -> bool {
        self.violations.iter().any(|v| v.kind() == kind)
    }
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.violations.is_empty() {
            return write!(f, "valid");
        }
        for v in &self.violations {
            writeln!(f, "- {v}")?;
        }
        Ok(())
    }
}

#[derive(Debug, Error)]
pub enum GraphError {
    #[error("invalid graph:\n{0}")]
    Invalid(ValidationReport),
    #[error("unknown node name: {0}")]
    UnknownNode(String),
    #[error("unknown collection name: {0}")]
    UnknownCollection(String),
    #[error("predicate failure at {node}: {message}")]
    Predicate { node: String, message: String },
    #[error("model error: {0}")]
    Model(String),
    #[error(transparent)]
    Dist(#[from] DistError),
}

/// A value resolved during evaluation: a (possibly taped) real, a discrete
/// state index, or a rank-1 parameter payload.
#[derive(Debug, Clone)]
pub enum Resolved {
    Real(Scalar),
    Index(i64),
    Reals(Vec<Scalar>),
}

impl Resolved {
    pub fn from_value(v: &Value) -> Resolved {
        match v {
            Value::Scalar(x) => Resolved::Real(Scalar::constant(*x)),
            Value::Vector(xs) => Resolved::Reals(xs.iter().map(|&x| Scalar::constant(x)).collect()),
            Value::Matrix(_) => Resolved::Reals(Vec::new()),
        }
    }

    pub fn to_value(&self) -> Value {
        match self {
            Resolved::Real(s) => Value::Scalar(s.value()),
            Resolved::Index(k) => Value::Scalar(*k as f64),
            Resolved::Reals(v) => Value::Vector(v.iter().map(|s| s.value()).collect()),
        }
    }

    pub fn as_realized(&self) -> Option<Realized> {
        match self {
            Resolved::Real(s) => Some(Realized::Real(s.clone())),
            Resolved::Index(k) => Some(Realized::Index(*k)),
            Resolved::Reals(_) => None,
        }
    }

    pub fn as_index(&self) -> Option<i64> {
        self.as_realized().and_then(|r| r.as_index())
    }

    fn detach(&self) -> Resolved {
        match self {
            Resolved::Real(s) => Resolved::Real(stop_gradient(s)),
            Resolved::Index(k) => Resolved::Index(*k),
            Resolved::Reals(v) => Resolved::Reals(v.iter().map(stop_gradient).collect()),
        }
    }

    fn as_scalar(&self) -> Result<Scalar, GraphError> {
        match self {
            Resolved::Real(s) => Ok(s.clone()),
            Resolved::Index(k) => Ok(Scalar::constant(*k as f64)),
            Resolved::Reals(_) => Err(GraphError::Model(
                "rank-1 value used in a scalar parameter slot".into(),
            )),
        }
    }
}

/// The validated, immutable model IR.
#[derive(Clone)]
pub struct GenerativeFlowGraph {
    nodes: Vec<Node>,
    links: Vec<Link>,
    collections: Vec<NodeCollection>,
    name_index: BTreeMap<String, NodeId>,
    collection_index: BTreeMap<String, CollectionId>,
    in_links: Vec<Vec<usize>>,
    out_links: Vec<Vec<usize>>,
    topo: Vec<NodeId>,
    predicates: PredicateRegistry,
    /// Predicate names the model declares it needs.
    declared_predicates: Vec<String>,
}

impl PartialEq for GenerativeFlowGraph {
    fn eq(&self, other: &Self) -> bool {
        self.nodes == other.nodes
            && self.links == other.links
            && self.collections == other.collections
    }
}

impl fmt::Debug for GenerativeFlowGraph {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("GenerativeFlowGraph")
            .field("nodes", &self.nodes)
            .field("links", &self.links)
            .field("collections", &self.collections)
            .finish()
    }
}

impl GenerativeFlowGraph {
    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn links(&self) -> &[Link] {
        &self.links
    }

    pub fn collections(&self) -> &[NodeCollection] {
        &self.collections
    }

    pub fn node(&self, id: NodeId) -> &Node {
        &self.nodes[id.0 as usize]
    }

    pub fn name(&self, id: NodeId) -> &str {
        &self.node(id).name
    }

    pub fn node_by_name(&self, name: &str) -> Option<NodeId> {
        self.name_index.get(name).copied()
    }

    pub fn collection(&self, id: CollectionId) -> &NodeCollection {
        &self.collections[id.0 as usize]
    }

    pub fn collection_by_name(&self, name: &str) -> Option<CollectionId> {
        self.collection_index.get(name).copied()
    }

    pub fn predicates(&self) -> &PredicateRegistry {
        &self.predicates
    }

    /// Topological order over all links (generative, detached, influence).
    pub fn topo_order(&self) -> &[NodeId] {
        &self.topo
    }

    pub fn incoming(&self, id: NodeId) -> impl Iterator<Item = &Link> {
        self.in_links[id.0 as usize].iter().map(|&i| &self.links[i])
    }

    pub fn outgoing(&self, id: NodeId) -> impl Iterator<Item = &Link> {
        self.out_links[id.0 as usize].iter().map(|&i| &self.links[i])
    }

    /// Sources of incoming generative and detached links.
    pub fn flow_parents(&self, id: NodeId) -> impl Iterator<Item = (NodeId, LinkKind)> + '_ {
        self.incoming(id)
            .filter(|l| l.kind != LinkKind::Influence)
            .map(|l| (l.from, l.kind))
    }

    pub fn flow_children(&self, id: NodeId) -> impl Iterator<Item = (NodeId, LinkKind)> + '_ {
        self.outgoing(id)
            .filter(|l| l.kind != LinkKind::Influence)
            .map(|l| (l.to, l.kind))
    }

    /// True when the link from `from` into `to` is detached.
    pub fn is_detached(&self, from: NodeId, to: NodeId) -> bool {
        self.incoming(to)
            .any(|l| l.from == from && l.kind == LinkKind::Detached)
    }

    pub fn latents(&self) -> impl Iterator<Item = &Node> {
        self.nodes.iter().filter(|n| n.kind == NodeKind::Latent)
    }

    pub fn observed(&self) -> impl Iterator<Item = &Node> {
        self.nodes
            .iter()
            .filter(|n| matches!(n.kind, NodeKind::Observed(_)))
    }

    pub fn variable_params(&self) -> impl Iterator<Item = &Node> {
        self.nodes
            .iter()
            .filter(|n| matches!(n.kind, NodeKind::VariableParam(_)))
    }

    /// The stored value of a parameter node.
    pub fn param_value(&self, id: NodeId) -> Option<&Value> {
        match &self.node(id).kind {
            NodeKind::VariableParam(v) | NodeKind::FixedParam(v) => Some(v),
            _ => None,
        }
    }

    /// Number of discrete states of a variable node, when its family is
    /// discrete.
    pub fn support_size(&self, id: NodeId) -> Option<usize> {
        let d = self.node(id).dist.as_ref()?;
        match d.family {
            Family::Bernoulli => Some(2),
            Family::Categorical => match &d.params[0] {
                ParamSource::Const(Value::Vector(v)) => Some(v.len()),
                ParamSource::Node(n) => self.param_value(*n).and_then(|v| v.as_vector().map(|x| x.len())),
                ParamSource::Table { entries, .. } => {
                    entries.first().and_then(|e| e.as_vector().map(|v| v.len()))
                }
                _ => None,
            },
            Family::Normal => None,
        }
    }

    /// Ancestor closure of `seeds` along generative and detached links,
    /// including the seeds themselves.
    pub fn flow_ancestors(&self, seeds: &BTreeSet<NodeId>) -> BTreeSet<NodeId> {
        let mut out = seeds.clone();
        let mut stack: Vec<NodeId> = seeds.iter().copied().collect();
        while let Some(n) = stack.pop() {
            // Influence sources also have to be realized before a branch or
            // selection can route, so follow them too.
            for l in self.incoming(n) {
                if out.insert(l.from) {
                    stack.push(l.from);
                }
            }
        }
        out
    }

    /// Builds the concrete distribution of a variable node given a resolver
    /// for realized parent values. Values arriving over detached links are
    /// wrapped in stop-gradient.
    pub fn build_dist(
        &self,
        id: NodeId,
        resolve: &dyn Fn(NodeId) -> Option<Resolved>,
    ) -> Result<Dist, GraphError> {
        let node = self.node(id);
        let dist = node
            .dist
            .as_ref()
            .ok_or_else(|| GraphError::Model(format!("node {} has no distribution", node.name)))?;
        let fetch = |src: NodeId| -> Result<Resolved, GraphError> {
            let mut v = resolve(src).ok_or_else(|| {
                GraphError::Model(format!(
                    "value of {} needed by {} is not realized",
                    self.name(src),
                    node.name
                ))
            })?;
            if self.is_detached(src, id) {
                v = v.detach();
            }
            Ok(v)
        };
        let params: Vec<Resolved> = dist
            .params
            .iter()
            .map(|p| self.resolve_source(p, &fetch))
            .collect::<Result<_, _>>()?;
        match dist.family {
            Family::Normal => Ok(Dist::Normal {
                loc: params[0].as_scalar()?,
                scale: params[1].as_scalar()?,
            }),
            Family::Categorical => match &params[0] {
                Resolved::Reals(v) => Ok(Dist::Categorical { logits: v.clone() }),
                _ => Err(GraphError::Model(format!(
                    "categorical logits of {} must be rank 1",
                    node.name
                ))),
            },
            Family::Bernoulli => Ok(Dist::Bernoulli {
                logit: params[0].as_scalar()?,
            }),
        }
    }

    fn resolve_source(
        &self,
        src: &ParamSource,
        fetch: &dyn Fn(NodeId) -> Result<Resolved, GraphError>,
    ) -> Result<Resolved, GraphError> {
        match src {
            ParamSource::Node(id) => fetch(*id),
            ParamSource::Const(v) => Ok(Resolved::from_value(v)),
            ParamSource::Exp(inner) => {
                let r = self.resolve_source(inner, fetch)?;
                Ok(Resolved::Real(r.as_scalar()?.exp()))
            }
            ParamSource::Sum(items) => {
                let mut acc = Scalar::constant(0.0);
                for item in items {
                    let r = self.resolve_source(item, fetch)?;
                    acc = &acc + &r.as_scalar()?;
                }
                Ok(Resolved::Real(acc))
            }
            ParamSource::Table {
                entries,
                index_by,
                cards,
            } => {
                let mut flat = 0usize;
                for (node, card) in index_by.iter().zip(cards) {
                    let k = fetch(*node)?.as_index().ok_or_else(|| {
                        GraphError::Model(format!(
                            "table index {} is not an integer",
                            self.name(*node)
                        ))
                    })?;
                    if k < 0 || k as usize >= *card {
                        return Err(GraphError::Model(format!(
                            "table index {} = {k} outside 0..{card}",
                            self.name(*node)
                        )));
                    }
                    flat = flat * card + k as usize;
                }
                Ok(Resolved::from_value(&entries[flat]))
            }
        }
    }

    /// Checks every structural invariant; an empty report means valid.
    pub fn validate(&self) -> ValidationReport {
        let mut report = ValidationReport::default();
        let mut seen = BTreeSet::new();
        for n in &self.nodes {
            if !seen.insert(n.name.clone()) {
                report.violations.push(Violation::DuplicateName { name: n.name.clone() });
            }
        }
        for c in &self.collections {
            if !seen.insert(c.name.clone()) {
                report.violations.push(Violation::DuplicateName { name: c.name.clone() });
            }
        }

        for l in &self.links {
            let (from, to) = (self.node(l.from), self.node(l.to));
            match l.kind {
                LinkKind::Generative | LinkKind::Detached => {
                    if !(to.kind.is_variable() || to.kind.is_control()) {
                        report.violations.push(Violation::LinkTarget {
                            from: from.name.clone(),
                            to: to.name.clone(),
                            message: "generative links may only point at variable or condition nodes"
                                .into(),
                        });
                    }
                    if matches!(from.kind, NodeKind::Observed(_)) {
                        report.violations.push(Violation::LinkTarget {
                            from: from.name.clone(),
                            to: to.name.clone(),
                            message: "generative links may not start at observed nodes".into(),
                        });
                    }
                }
                LinkKind::Influence => {
                    if !to.kind.is_control() {
                        report.violations.push(Violation::LinkTarget {
                            from: from.name.clone(),
                            to: to.name.clone(),
                            message: "influence links may only point at branch or selection nodes"
                                .into(),
                        });
                    }
                }
            }
        }

        if let Err(cycle) = topo_sort(self.nodes.len(), &self.links) {
            report.violations.push(Violation::Cycle {
                involved: cycle.into_iter().map(|id| self.name(id).to_string()).collect(),
            });
        }

        for n in &self.nodes {
            match &n.kind {
                NodeKind::Latent | NodeKind::Observed(_) => {
                    let Some(dist) = &n.dist else {
                        report.violations.push(Violation::Arity {
                            node: n.name.clone(),
                            message: "variable node without a distribution".into(),
                        });
                        continue;
                    };
                    if dist.params.len() != dist.family.param_slots() {
                        report.violations.push(Violation::Arity {
                            node: n.name.clone(),
                            message: format!(
                                "{} takes {} parameter slots, got {}",
                                dist.family.name(),
                                dist.family.param_slots(),
                                dist.params.len()
                            ),
                        });
                    }
                    for p in &dist.params {
                        self.check_tables(n, p, &mut report);
                    }
                    let referenced = dist.referenced();
                    let parents: BTreeSet<NodeId> = self
                        .flow_parents(n.id)
                        .map(|(p, _)| p)
                        .filter(|p| !self.node(*p).kind.is_control())
                        .collect();
                    for r in &referenced {
                        if self.node(*r).kind.is_control() {
                            continue;
                        }
                        if !parents.contains(r) {
                            report.violations.push(Violation::Arity {
                                node: n.name.clone(),
                                message: format!(
                                    "distribution references {} without an incoming link",
                                    self.name(*r)
                                ),
                            });
                        }
                    }
                    for p in &parents {
                        if !referenced.contains(p) {
                            report.violations.push(Violation::Arity {
                                node: n.name.clone(),
                                message: format!(
                                    "incoming link from {} is not used by the distribution",
                                    self.name(*p)
                                ),
                            });
                        }
                    }
                }
                NodeKind::Branch(pred) => {
                    if !self.predicates.contains(pred) {
                        report.violations.push(Violation::PredicateMissing {
                            node: n.name.clone(),
                            predicate: pred.clone(),
                        });
                    }
                    let gen_in = self.flow_parents(n.id).count();
                    if gen_in > 1 {
                        report.violations.push(Violation::Routing {
                            node: n.name.clone(),
                            message: "a branch passes through at most one generative flow".into(),
                        });
                    }
                    let mut whens = BTreeSet::new();
                    let mut outs = 0usize;
                    for l in self.outgoing(n.id).filter(|l| l.kind != LinkKind::Influence) {
                        outs += 1;
                        match l.when {
                            Some(w) => {
                                if !whens.insert(w) {
                                    report.violations.push(Violation::Routing {
                                        node: n.name.clone(),
                                        message: format!("duplicate routing case {w}"),
                                    });
                                }
                            }
                            None => report.violations.push(Violation::Routing {
                                node: n.name.clone(),
                                message: format!(
                                    "outgoing link to {} lacks a routing case",
                                    self.name(l.to)
                                ),
                            }),
                        }
                    }
                    if outs == 0 {
                        report.violations.push(Violation::Routing {
                            node: n.name.clone(),
                            message: "branch has no outgoing generative links".into(),
                        });
                    }
                }
                NodeKind::Selection(pred) => {
                    if !self.predicates.contains(pred) {
                        report.violations.push(Violation::PredicateMissing {
                            node: n.name.clone(),
                            predicate: pred.clone(),
                        });
                    }
                    let mut whens = BTreeSet::new();
                    let mut ins = 0usize;
                    for l in self.incoming(n.id).filter(|l| l.kind != LinkKind::Influence) {
                        ins += 1;
                        match l.when {
                            Some(w) => {
                                if !whens.insert(w) {
                                    report.violations.push(Violation::Routing {
                                        node: n.name.clone(),
                                        message: format!("duplicate selection case {w}"),
                                    });
                                }
                            }
                            None => report.violations.push(Violation::Routing {
                                node: n.name.clone(),
                                message: format!(
                                    "incoming link from {} lacks a selection case",
                                    self.name(l.from)
                                ),
                            }),
                        }
                    }
                    if ins < 2 {
                        report.violations.push(Violation::Routing {
                            node: n.name.clone(),
                            message: "a selection chooses among two or more incoming flows".into(),
                        });
                    }
                }
                _ => {}
            }
        }

        for (i, a) in self.collections.iter().enumerate() {
            for b in self.collections.iter().skip(i + 1) {
                let shared: Vec<NodeId> = a.members.intersection(&b.members).copied().collect();
                if shared.is_empty() {
                    continue;
                }
                let nested = a.members.is_subset(&b.members) || b.members.is_subset(&a.members);
                if !nested {
                    report.violations.push(Violation::CollectionOverlap {
                        a: a.name.clone(),
                        b: b.name.clone(),
                        node: self.name(shared[0]).to_string(),
                    });
                }
            }
        }

        report
    }

    fn check_tables(&self, n: &Node, p: &ParamSource, report: &mut ValidationReport) {
        match p {
            ParamSource::Table {
                entries,
                index_by,
                cards,
            } => {
                let expected: usize = cards.iter().product();
                if index_by.len() != cards.len() || entries.len() != expected {
                    report.violations.push(Violation::Arity {
                        node: n.name.clone(),
                        message: format!(
                            "table of {} entries does not match index shape {:?}",
                            entries.len(),
                            cards
                        ),
                    });
                }
            }
            ParamSource::Exp(inner) => self.check_tables(n, inner, report),
            ParamSource::Sum(items) => {
                for item in items {
                    self.check_tables(n, item, report);
                }
            }
            _ => {}
        }
    }
}

/// Kahn topological sort over all links; ties broken by node id so the
/// order is deterministic. Returns the ids on a cycle on failure.
fn topo_sort(n: usize, links: &[Link]) -> Result<Vec<NodeId>, Vec<NodeId>> {
    let mut indegree = vec![0usize; n];
    let mut children: Vec<Vec<usize>> = vec![Vec::new(); n];
    for l in links {
        indegree[l.to.0 as usize] += 1;
        children[l.from.0 as usize].push(l.to.0 as usize);
    }
    let mut ready: BTreeSet<usize> = (0..n).filter(|&i| indegree[i] == 0).collect();
    let mut order = Vec::with_capacity(n);
    while let Some(&i) = ready.iter().next() {
        ready.remove(&i);
        order.push(NodeId(i as u32));
        for &c in &children[i] {
            indegree[c] -= 1;
            if indegree[c] == 0 {
                ready.insert(c);
            }
        }
    }
    if order.len() == n {
        Ok(order)
    } else {
        Err((0..n)
            .filter(|&i| indegree[i] > 0)
            .map(|i| NodeId(i as u32))
            .collect())
    }
}

/// Parameter slot specification used by [`GraphBuilder`]; generative and
/// detached links are derived from the node references inside.
#[derive(Debug, Clone)]
pub enum ParamSpec {
    Node { id: NodeId, detached: bool },
    Const(Value),
    Exp(Box<ParamSpec>),
    Sum(Vec<ParamSpec>),
    Table {
        entries: Vec<Value>,
        index_by: Vec<(NodeId, bool)>,
        /// Explicit per-index state counts; derived from the index nodes'
        /// distributions when absent.
        cards: Option<Vec<usize>>,
    },
}

impl ParamSpec {
    pub fn node(id: NodeId) -> Self {
        ParamSpec::Node { id, detached: false }
    }

    /// A parent whose link is detached: the value flows, gradients do not.
    pub fn detached(id: NodeId) -> Self {
        ParamSpec::Node { id, detached: true }
    }

    pub fn lit(v: f64) -> Self {
        ParamSpec::Const(Value::Scalar(v))
    }

    pub fn lit_vec(v: Vec<f64>) -> Self {
        ParamSpec::Const(Value::Vector(v))
    }

    pub fn exp_of(inner: ParamSpec) -> Self {
        ParamSpec::Exp(Box::new(inner))
    }

    pub fn sum(items: Vec<ParamSpec>) -> Self {
        ParamSpec::Sum(items)
    }

    pub fn table(entries: Vec<Value>, index_by: Vec<NodeId>) -> Self {
        ParamSpec::Table {
            entries,
            index_by: index_by.into_iter().map(|id| (id, false)).collect(),
            cards: None,
        }
    }

    pub fn table_shaped(entries: Vec<Value>, index_by: Vec<NodeId>, cards: Vec<usize>) -> Self {
        ParamSpec::Table {
            entries,
            index_by: index_by.into_iter().map(|id| (id, false)).collect(),
            cards: Some(cards),
        }
    }

    fn collect_links(&self, out: &mut BTreeMap<NodeId, bool>) {
        match self {
            ParamSpec::Node { id, detached } => {
                let e = out.entry(*id).or_insert(false);
                *e = *e || *detached;
            }
            ParamSpec::Const(_) => {}
            ParamSpec::Exp(inner) => inner.collect_links(out),
            ParamSpec::Sum(items) => {
                for i in items {
                    i.collect_links(out);
                }
            }
            ParamSpec::Table { index_by, .. } => {
                for (id, detached) in index_by {
                    let e = out.entry(*id).or_insert(false);
                    *e = *e || *detached;
                }
            }
        }
    }
}

/// Distribution specification for [`GraphBuilder`].
#[derive(Debug, Clone)]
pub struct DistSpec {
    pub family: Family,
    pub params: Vec<ParamSpec>,
}

impl DistSpec {
    pub fn normal(loc: ParamSpec, scale: ParamSpec) -> Self {
        DistSpec { family: Family::Normal, params: vec![loc, scale] }
    }

    pub fn categorical(logits: ParamSpec) -> Self {
        DistSpec { family: Family::Categorical, params: vec![logits] }
    }

    pub fn bernoulli(logit: ParamSpec) -> Self {
        DistSpec { family: Family::Bernoulli, params: vec![logit] }
    }
}

/// Incremental construction of a graph; `build` validates and freezes it.
pub struct GraphBuilder {
    nodes: Vec<Node>,
    links: Vec<Link>,
    collections: Vec<NodeCollection>,
    predicates: PredicateRegistry,
    declared_predicates: Vec<String>,
}

impl Default for GraphBuilder {
    fn default() -> Self {
        Self::new()
    }
}

impl GraphBuilder {
    pub fn new() -> Self {
        GraphBuilder {
            nodes: Vec::new(),
            links: Vec::new(),
            collections: Vec::new(),
            predicates: PredicateRegistry::standard(),
            declared_predicates: Vec::new(),
        }
    }

    pub fn with_registry(registry: PredicateRegistry) -> Self {
        GraphBuilder {
            predicates: registry,
            ..Self::new()
        }
    }

    pub fn node_by_name(&self, name: &str) -> Option<NodeId> {
        self.nodes.iter().find(|n| n.name == name).map(|n| n.id)
    }

    pub fn node_kind(&self, id: NodeId) -> &NodeKind {
        &self.nodes[id.0 as usize].kind
    }

    pub fn node_dist(&self, id: NodeId) -> Option<&DistRef> {
        self.nodes[id.0 as usize].dist.as_ref()
    }

    fn push_node(&mut self, name: &str, kind: NodeKind, dist: Option<DistRef>) -> NodeId {
        let id = NodeId(self.nodes.len() as u32);
        self.nodes.push(Node {
            id,
            name: name.to_string(),
            kind,
            dist,
        });
        id
    }

    /// Adds a node without deriving any links; used by the model-file
    /// loader, where links are declared explicitly.
    pub(crate) fn push_raw(&mut self, name: &str, kind: NodeKind) -> NodeId {
        self.push_node(name, kind, None)
    }

    pub(crate) fn set_dist(&mut self, id: NodeId, dist: DistRef) {
        self.nodes[id.0 as usize].dist = Some(dist);
    }

    fn add_dist_links(&mut self, target: NodeId, spec: &[ParamSpec]) {
        let mut parents = BTreeMap::new();
        for p in spec {
            p.collect_links(&mut parents);
        }
        for (from, detached) in parents {
            self.link(
                from,
                target,
                if detached { LinkKind::Detached } else { LinkKind::Generative },
                None,
            );
        }
    }

    fn lower_spec(p: &ParamSpec, cards: &dyn Fn(NodeId) -> Option<usize>) -> ParamSource {
        match p {
            ParamSpec::Node { id, .. } => ParamSource::Node(*id),
            ParamSpec::Const(v) => ParamSource::Const(v.clone()),
            ParamSpec::Exp(inner) => ParamSource::Exp(Box::new(Self::lower_spec(inner, cards))),
            ParamSpec::Sum(items) => {
                ParamSource::Sum(items.iter().map(|i| Self::lower_spec(i, cards)).collect())
            }
            ParamSpec::Table { entries, index_by, cards: explicit } => ParamSource::Table {
                entries: entries.clone(),
                index_by: index_by.iter().map(|(id, _)| *id).collect(),
                cards: explicit.clone().unwrap_or_else(|| {
                    index_by.iter().map(|(id, _)| cards(*id).unwrap_or(0)).collect()
                }),
            },
        }
    }

    /// Discrete state count of an already-declared node, when derivable.
    pub fn support_of(&self, id: NodeId) -> Option<usize> {
        let n = &self.nodes[id.0 as usize];
        match &n.dist {
            Some(d) if d.family == Family::Bernoulli => Some(2),
            Some(d) if d.family == Family::Categorical => match &d.params[0] {
                ParamSource::Const(Value::Vector(v)) => Some(v.len()),
                ParamSource::Node(p) => match &self.nodes[p.0 as usize].kind {
                    NodeKind::FixedParam(Value::Vector(v))
                    | NodeKind::VariableParam(Value::Vector(v)) => Some(v.len()),
                    _ => None,
                },
                ParamSource::Table { entries, .. } => {
                    entries.first().and_then(|e| e.as_vector().map(|v| v.len()))
                }
                _ => None,
            },
            _ => None,
        }
    }

    fn lower_dist(&self, spec: &DistSpec) -> DistRef {
        let cards = |id: NodeId| -> Option<usize> { self.support_of(id) };
        DistRef {
            family: spec.family,
            params: spec.params.iter().map(|p| Self::lower_spec(p, &cards)).collect(),
        }
    }

    pub fn latent(&mut self, name: &str, spec: DistSpec) -> NodeId {
        let dist = self.lower_dist(&spec);
        let id = self.push_node(name, NodeKind::Latent, Some(dist));
        self.add_dist_links(id, &spec.params);
        id
    }

    pub fn observed(&mut self, name: &str, spec: DistSpec, value: Value) -> NodeId {
        let dist = self.lower_dist(&spec);
        let id = self.push_node(name, NodeKind::Observed(value), Some(dist));
        self.add_dist_links(id, &spec.params);
        id
    }

    pub fn variable_param(&mut self, name: &str, init: Value) -> NodeId {
        self.push_node(name, NodeKind::VariableParam(init), None)
    }

    pub fn fixed_param(&mut self, name: &str, value: Value) -> NodeId {
        self.push_node(name, NodeKind::FixedParam(value), None)
    }

    /// A branch condition node fed by influence links from `influences`.
    pub fn branch(&mut self, name: &str, predicate: &str, influences: &[NodeId]) -> NodeId {
        let id = self.push_node(name, NodeKind::Branch(predicate.to_string()), None);
        for &src in influences {
            self.link(src, id, LinkKind::Influence, None);
        }
        self.declare_predicate(predicate);
        id
    }

    /// Routes the generative flow out of `branch` to `to` for predicate
    /// case `when`.
    pub fn route(&mut self, branch: NodeId, when: i64, to: NodeId) {
        self.link(branch, to, LinkKind::Generative, Some(when));
    }

    /// A selection condition node choosing among `arms` (case, source).
    pub fn selection(
        &mut self,
        name: &str,
        predicate: &str,
        influences: &[NodeId],
        arms: &[(i64, NodeId)],
    ) -> NodeId {
        let id = self.push_node(name, NodeKind::Selection(predicate.to_string()), None);
        for &src in influences {
            self.link(src, id, LinkKind::Influence, None);
        }
        for &(when, src) in arms {
            self.link(src, id, LinkKind::Generative, Some(when));
        }
        self.declare_predicate(predicate);
        id
    }

    pub fn link(&mut self, from: NodeId, to: NodeId, kind: LinkKind, when: Option<i64>) {
        let candidate = Link { from, to, kind, when };
        if !self.links.contains(&candidate) {
            self.links.push(candidate);
        }
    }

    pub fn collection(&mut self, name: &str, members: &[NodeId]) -> CollectionId {
        self.collection_full(name, members, None, None)
    }

    pub fn collection_full(
        &mut self,
        name: &str,
        members: &[NodeId],
        index: Option<String>,
        replicated: Option<u32>,
    ) -> CollectionId {
        let id = CollectionId(self.collections.len() as u32);
        self.collections.push(NodeCollection {
            id,
            name: name.to_string(),
            members: members.iter().copied().collect(),
            index,
            replicated,
        });
        id
    }

    pub fn declare_predicate(&mut self, name: &str) {
        if !self.declared_predicates.iter().any(|p| p == name) {
            self.declared_predicates.push(name.to_string());
        }
    }

    /// Validates and freezes the graph.
    pub fn build(self) -> Result<GenerativeFlowGraph, GraphError> {
        let n = self.nodes.len();
        let mut in_links = vec![Vec::new(); n];
        let mut out_links = vec![Vec::new(); n];
        for (i, l) in self.links.iter().enumerate() {
            in_links[l.to.0 as usize].push(i);
            out_links[l.from.0 as usize].push(i);
        }
        let topo = topo_sort(n, &self.links).unwrap_or_default();
        let graph = GenerativeFlowGraph {
            name_index: self.nodes.iter().map(|x| (x.name.clone(), x.id)).collect(),
            collection_index: self
                .collections
                .iter()
                .map(|c| (c.name.clone(), c.id))
                .collect(),
            nodes: self.nodes,
            links: self.links,
            collections: self.collections,
            in_links,
            out_links,
            topo,
            predicates: self.predicates,
            declared_predicates: self.declared_predicates,
        };
        let report = graph.validate();
        if report.is_empty() {
            Ok(graph)
        } else {
            Err(GraphError::Invalid(report))
        }
    }
}

impl GenerativeFlowGraph {
    pub fn declared_predicates(&self) -> &[String] {
        &self.declared_predicates
    }
}
