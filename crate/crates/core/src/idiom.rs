//! Reusable graph-fragment templates with free distribution slots.
//!
//! A template is a builder over the graph IR parameterized by named
//! distribution slots (the free distributions), horizon/range arguments,
//! and input node bindings. Instantiating a template with all slots bound
//! yields a valid sub-graph that merges into a host graph; instance names
//! prefix every generated node, so composition cannot collide.
//!
//! Three templates ship here: the state/action transition step, the
//! simultaneous localization and mapping fragment built from chained
//! transition steps plus a replicated map and per-step perception, and the
//! decision-process fragment whose per-step observed optimality child
//! turns action selection into posterior inference.

use std::collections::BTreeMap;

use thiserror::Error;

use crate::graph::model::{IdiomDecl, SlotDecl, SlotParamDecl};
use crate::graph::{
    CollectionId, DistSpec, Family, GenerativeFlowGraph, GraphBuilder, GraphError, NodeId,
    ParamSpec,
};
use crate::value::Value;

#[derive(Debug, Error)]
pub enum IdiomError {
    #[error("slot signature error: {0}")]
    SlotSignature(String),
    #[error("binding error: {0}")]
    Binding(String),
    #[error(transparent)]
    Graph(#[from] GraphError),
}

/// One free-distribution slot: a family plus parameter sources over the
/// slot's conditioning roles.
#[derive(Debug, Clone, PartialEq)]
pub struct SlotSpec {
    pub family: Family,
    pub params: Vec<SlotParam>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum SlotParam {
    /// A conditioning variable of the slot, by role name.
    Role(String),
    Const(Value),
    Exp(Box<SlotParam>),
    Sum(Vec<SlotParam>),
    /// Dense lookup indexed by the (flattened) roles; `shape` gives the
    /// state count per flattened index position.
    Table {
        entries: Vec<Value>,
        index_by: Vec<String>,
        shape: Vec<usize>,
    },
}

impl SlotSpec {
    pub fn new(family: Family, params: Vec<SlotParam>) -> Self {
        SlotSpec { family, params }
    }

    fn roles_used(&self) -> Vec<String> {
        fn walk(p: &SlotParam, out: &mut Vec<String>) {
            match p {
                SlotParam::Role(r) => out.push(r.clone()),
                SlotParam::Const(_) => {}
                SlotParam::Exp(inner) => walk(inner, out),
                SlotParam::Sum(items) => items.iter().for_each(|i| walk(i, out)),
                SlotParam::Table { index_by, .. } => out.extend(index_by.iter().cloned()),
            }
        }
        let mut out = Vec::new();
        self.params.iter().for_each(|p| walk(p, &mut out));
        out
    }
}

/// Template kinds with their range arguments.
#[derive(Debug, Clone, PartialEq)]
enum IdiomKind {
    Transition,
    Slam { horizon: usize, map_size: usize },
    Mdp { horizon: usize },
}

/// A reusable fragment with its slots bound.
#[derive(Debug, Clone, PartialEq)]
pub struct IdiomTemplate {
    pub name: String,
    kind: IdiomKind,
    slots: BTreeMap<String, SlotSpec>,
}

/// Node bindings produced by instantiation: output roles and the
/// collections the fragment declared.
#[derive(Debug, Clone)]
pub struct IdiomOutputs {
    pub outputs: BTreeMap<String, NodeId>,
    pub collections: BTreeMap<String, CollectionId>,
}

/// How a role resolves at instantiation.
#[derive(Debug, Clone)]
enum RoleBinding {
    One(NodeId),
    Many(Vec<NodeId>),
}

fn check_slots(
    kind: &str,
    slots: &BTreeMap<String, SlotSpec>,
    required: &[(&str, &[&str])],
) -> Result<(), IdiomError> {
    for (name, allowed) in required {
        let slot = slots.get(*name).ok_or_else(|| {
            IdiomError::SlotSignature(format!("{kind} requires a {name} slot"))
        })?;
        if slot.params.len() != slot.family.param_slots() {
            return Err(IdiomError::SlotSignature(format!(
                "{kind}.{name}: {} takes {} parameter slots, got {}",
                slot.family.name(),
                slot.family.param_slots(),
                slot.params.len()
            )));
        }
        for role in slot.roles_used() {
            if !allowed.contains(&role.as_str()) {
                return Err(IdiomError::SlotSignature(format!(
                    "{kind}.{name}: unknown role {role} (allowed: {allowed:?})"
                )));
            }
        }
        for p in &slot.params {
            check_tables(kind, name, p)?;
        }
    }
    for name in slots.keys() {
        if !required.iter().any(|(r, _)| r == name) {
            return Err(IdiomError::SlotSignature(format!(
                "{kind} does not take a {name} slot"
            )));
        }
    }
    Ok(())
}

fn check_tables(kind: &str, slot: &str, p: &SlotParam) -> Result<(), IdiomError> {
    match p {
        SlotParam::Table { entries, shape, .. } => {
            let expected: usize = shape.iter().product();
            if entries.len() != expected {
                return Err(IdiomError::SlotSignature(format!(
                    "{kind}.{slot}: table with {} entries does not match shape {shape:?}",
                    entries.len()
                )));
            }
            Ok(())
        }
        SlotParam::Exp(inner) => check_tables(kind, slot, inner),
        SlotParam::Sum(items) => items.iter().try_for_each(|i| check_tables(kind, slot, i)),
        _ => Ok(()),
    }
}

/// One timestep of a state/action chain: the action from its prior and the
/// next state from the transition, grouped as one collection. Input:
/// `state_in`.
pub fn transition_idiom(slots: BTreeMap<String, SlotSpec>) -> Result<IdiomTemplate, IdiomError> {
    check_slots(
        "transition_idiom",
        &slots,
        &[("transition", &["state", "action"]), ("policy_prior", &[])],
    )?;
    Ok(IdiomTemplate {
        name: "transition".to_string(),
        kind: IdiomKind::Transition,
        slots,
    })
}

/// The localization-and-mapping fragment: an initial-state prior, a
/// replicated map of independent pixel priors, and `horizon` chained
/// transition steps each emitting a perception latent that reads the map.
pub fn slam_idiom(
    slots: BTreeMap<String, SlotSpec>,
    horizon: usize,
    map_size: usize,
) -> Result<IdiomTemplate, IdiomError> {
    if horizon < 1 || map_size < 1 {
        return Err(IdiomError::SlotSignature(
            "slam_idiom needs horizon >= 1 and map_size >= 1".into(),
        ));
    }
    check_slots(
        "slam_idiom",
        &slots,
        &[
            ("initial_state", &[]),
            ("map_prior", &[]),
            ("policy_prior", &[]),
            ("transition", &["state", "action"]),
            ("perception", &["state", "action", "map"]),
        ],
    )?;
    Ok(IdiomTemplate {
        name: "slam".to_string(),
        kind: IdiomKind::Slam { horizon, map_size },
        slots,
    })
}

/// The decision-process fragment: per step an action from its prior, an
/// observed optimality child of (state, action) pinned to its optimal
/// value, and the next state. Input: `state_in`. Inference over the
/// actions given the pinned optimality realizes control as inference.
pub fn mdp_idiom(
    slots: BTreeMap<String, SlotSpec>,
    horizon: usize,
) -> Result<IdiomTemplate, IdiomError> {
    if horizon < 1 {
        return Err(IdiomError::SlotSignature("mdp_idiom needs horizon >= 1".into()));
    }
    check_slots(
        "mdp_idiom",
        &slots,
        &[
            ("policy_prior", &[]),
            ("transition", &["state", "action"]),
            ("optimality", &["state", "action"]),
        ],
    )?;
    Ok(IdiomTemplate {
        name: "mdp".to_string(),
        kind: IdiomKind::Mdp { horizon },
        slots,
    })
}

impl IdiomTemplate {
    /// Input roles the template needs bound before instantiation.
    pub fn inputs(&self) -> &'static [&'static str] {
        match self.kind {
            IdiomKind::Transition | IdiomKind::Mdp { .. } => &["state_in"],
            IdiomKind::Slam { .. } => &[],
        }
    }

    /// Expected discrete state count of the bound `state_in`, when the
    /// slot tables pin it down.
    fn expected_state_card(&self, map_size: usize) -> Option<usize> {
        for slot in self.slots.values() {
            for p in &slot.params {
                if let SlotParam::Table { index_by, shape, .. } = p {
                    let mut pos = 0usize;
                    for role in index_by {
                        if role == "state" {
                            return shape.get(pos).copied();
                        }
                        pos += if role == "map" { map_size } else { 1 };
                    }
                }
            }
        }
        None
    }

    /// Builds the fragment into `gb`, prefixing every generated name with
    /// `instance.`.
    pub fn instantiate(
        &self,
        gb: &mut GraphBuilder,
        instance: &str,
        bindings: &BTreeMap<String, NodeId>,
    ) -> Result<IdiomOutputs, IdiomError> {
        for input in self.inputs() {
            if !bindings.contains_key(*input) {
                return Err(IdiomError::Binding(format!(
                    "input {input} of {} is unbound",
                    self.name
                )));
            }
        }
        let map_size = match self.kind {
            IdiomKind::Slam { map_size, .. } => map_size,
            _ => 0,
        };
        if let (Some(&state_in), Some(expected)) = (
            bindings.get("state_in"),
            self.expected_state_card(map_size),
        ) {
            match gb.support_of(state_in) {
                Some(actual) if actual != expected => {
                    return Err(IdiomError::Binding(format!(
                        "state_in has {actual} states, the slot tables expect {expected}"
                    )));
                }
                _ => {}
            }
        }

        let pfx = |n: String| format!("{instance}.{n}");
        let mut outputs = BTreeMap::new();
        let mut collections = BTreeMap::new();

        match self.kind {
            IdiomKind::Transition => {
                let state_in = bindings["state_in"];
                let (s, a, cid) = self.emit_step(gb, instance, state_in, 1, None)?;
                collections.insert("step{1}".to_string(), cid);
                outputs.insert("state_out".to_string(), s);
                outputs.insert("action".to_string(), a);
            }
            IdiomKind::Mdp { horizon } => {
                let mut state = bindings["state_in"];
                for tau in 0..horizon {
                    let a = gb.latent(
                        &pfx(format!("z_a{{{tau}}}")),
                        self.lower("policy_prior", &BTreeMap::new(), map_size)?,
                    );
                    let roles = BTreeMap::from([
                        ("state".to_string(), RoleBinding::One(state)),
                        ("action".to_string(), RoleBinding::One(a)),
                    ]);
                    let _x = gb.observed(
                        &pfx(format!("x_O{{{tau}}}")),
                        self.lower("optimality", &roles, map_size)?,
                        Value::Scalar(1.0),
                    );
                    let s_next = gb.latent(
                        &pfx(format!("z_s{{{}}}", tau + 1)),
                        self.lower("transition", &roles, map_size)?,
                    );
                    let cid = gb.collection(&pfx(format!("step{{{}}}", tau + 1)), &[s_next, a]);
                    collections.insert(format!("step{{{}}}", tau + 1), cid);
                    state = s_next;
                }
                outputs.insert("state_out".to_string(), state);
            }
            IdiomKind::Slam { horizon, map_size } => {
                let s0 = gb.latent(
                    &pfx("z_s{0}".to_string()),
                    self.lower("initial_state", &BTreeMap::new(), map_size)?,
                );
                let init_cid = gb.collection(&pfx("init".to_string()), &[s0]);
                collections.insert("init".to_string(), init_cid);
                let mut pixels = Vec::new();
                for i in 1..=map_size {
                    pixels.push(gb.latent(
                        &pfx(format!("z_m{{{i}}}")),
                        self.lower("map_prior", &BTreeMap::new(), map_size)?,
                    ));
                }
                let map_cid = gb.collection_full(
                    &pfx("map".to_string()),
                    &pixels,
                    Some(format!("i=1..{map_size}")),
                    Some(map_size as u32),
                );
                collections.insert("map".to_string(), map_cid);

                let mut state = s0;
                let mut chain = Vec::new();
                let mut percepts = Vec::new();
                let mut steps = Vec::new();
                for tau in 1..=horizon {
                    let (s, a, cid) = self.emit_step(gb, instance, state, tau, None)?;
                    collections.insert(format!("step{{{tau}}}"), cid);
                    steps.push(cid);
                    let roles = BTreeMap::from([
                        ("state".to_string(), RoleBinding::One(s)),
                        ("action".to_string(), RoleBinding::One(a)),
                        ("map".to_string(), RoleBinding::Many(pixels.clone())),
                    ]);
                    let p = gb.latent(
                        &pfx(format!("z_p{{{tau}}}")),
                        self.lower("perception", &roles, map_size)?,
                    );
                    percepts.push(p);
                    chain.push(s);
                    chain.push(a);
                    state = s;
                }
                let chain_cid = gb.collection_full(
                    &pfx("chain".to_string()),
                    &chain,
                    Some(format!("tau=1..{horizon}")),
                    None,
                );
                collections.insert("chain".to_string(), chain_cid);
                let percept_cid = gb.collection_full(
                    &pfx("perception".to_string()),
                    &percepts,
                    Some(format!("tau=1..{horizon}")),
                    None,
                );
                collections.insert("perception".to_string(), percept_cid);
                outputs.insert("state_out".to_string(), state);
                outputs.insert("initial_state".to_string(), s0);
            }
        }

        Ok(IdiomOutputs { outputs, collections })
    }

    /// Emits one transition step `tau`: action from the policy prior, next
    /// state from the transition, one step collection.
    fn emit_step(
        &self,
        gb: &mut GraphBuilder,
        instance: &str,
        state_in: NodeId,
        tau: usize,
        map_size: Option<usize>,
    ) -> Result<(NodeId, NodeId, CollectionId), IdiomError> {
        let map_size = map_size.unwrap_or(0);
        let pfx = |n: String| format!("{instance}.{n}");
        let a = gb.latent(
            &pfx(format!("z_a{{{}}}", tau - 1)),
            self.lower("policy_prior", &BTreeMap::new(), map_size)?,
        );
        let roles = BTreeMap::from([
            ("state".to_string(), RoleBinding::One(state_in)),
            ("action".to_string(), RoleBinding::One(a)),
        ]);
        let s = gb.latent(
            &pfx(format!("z_s{{{tau}}}")),
            self.lower("transition", &roles, map_size)?,
        );
        let cid = gb.collection(&pfx(format!("step{{{tau}}}")), &[s, a]);
        Ok((s, a, cid))
    }

    fn lower(
        &self,
        slot: &str,
        roles: &BTreeMap<String, RoleBinding>,
        map_size: usize,
    ) -> Result<DistSpec, IdiomError> {
        let spec = self
            .slots
            .get(slot)
            .ok_or_else(|| IdiomError::SlotSignature(format!("missing slot {slot}")))?;
        let params = spec
            .params
            .iter()
            .map(|p| lower_slot_param(slot, p, roles, map_size))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(DistSpec { family: spec.family, params })
    }
}

fn lower_slot_param(
    slot: &str,
    p: &SlotParam,
    roles: &BTreeMap<String, RoleBinding>,
    map_size: usize,
) -> Result<ParamSpec, IdiomError> {
    let one = |role: &str| -> Result<NodeId, IdiomError> {
        match roles.get(role) {
            Some(RoleBinding::One(id)) => Ok(*id),
            Some(RoleBinding::Many(_)) => Err(IdiomError::SlotSignature(format!(
                "{slot}: role {role} is a set and cannot fill a scalar parameter"
            ))),
            None => Err(IdiomError::SlotSignature(format!(
                "{slot}: role {role} is not bound here"
            ))),
        }
    };
    match p {
        SlotParam::Role(r) => Ok(ParamSpec::node(one(r)?)),
        SlotParam::Const(v) => Ok(ParamSpec::Const(v.clone())),
        SlotParam::Exp(inner) => Ok(ParamSpec::Exp(Box::new(lower_slot_param(
            slot, inner, roles, map_size,
        )?))),
        SlotParam::Sum(items) => {
            let mut out = Vec::new();
            for item in items {
                match item {
                    SlotParam::Role(r) => match roles.get(r.as_str()) {
                        Some(RoleBinding::Many(ids)) => {
                            out.extend(ids.iter().map(|&id| ParamSpec::node(id)));
                        }
                        _ => out.push(ParamSpec::node(one(r)?)),
                    },
                    other => out.push(lower_slot_param(slot, other, roles, map_size)?),
                }
            }
            Ok(ParamSpec::Sum(out))
        }
        SlotParam::Table { entries, index_by, shape } => {
            let mut ids = Vec::new();
            for role in index_by {
                match roles.get(role.as_str()) {
                    Some(RoleBinding::One(id)) => ids.push(*id),
                    Some(RoleBinding::Many(list)) => ids.extend(list.iter().copied()),
                    None => {
                        return Err(IdiomError::SlotSignature(format!(
                            "{slot}: role {role} is not bound here"
                        )))
                    }
                }
            }
            if ids.len() != shape.len() {
                return Err(IdiomError::SlotSignature(format!(
                    "{slot}: table shape {shape:?} does not cover {} flattened indices (map size {map_size})",
                    ids.len()
                )));
            }
            Ok(ParamSpec::table_shaped(entries.clone(), ids, shape.clone()))
        }
    }
}

/// Instantiates an input-free template into a fresh graph.
pub fn instantiate_standalone(
    template: &IdiomTemplate,
    instance: &str,
) -> Result<GenerativeFlowGraph, IdiomError> {
    if !template.inputs().is_empty() {
        return Err(IdiomError::Binding(format!(
            "{} needs inputs {:?}; compose it with a host",
            template.name,
            template.inputs()
        )));
    }
    let mut gb = GraphBuilder::new();
    template.instantiate(&mut gb, instance, &BTreeMap::new())?;
    Ok(gb.build()?)
}

/// Merges a guest template into an instantiated host template.
///
/// `bindings` map each guest input to a host output role (looked up first)
/// or to a literal node name in the built host. Name collisions are ruled
/// out by the instance prefixes.
pub fn compose(
    host: &IdiomTemplate,
    host_instance: &str,
    guest: &IdiomTemplate,
    guest_instance: &str,
    bindings: &BTreeMap<String, String>,
) -> Result<GenerativeFlowGraph, IdiomError> {
    if !host.inputs().is_empty() {
        return Err(IdiomError::Binding(format!(
            "host {} needs inputs of its own",
            host.name
        )));
    }
    if host_instance == guest_instance {
        return Err(IdiomError::Binding(
            "host and guest instances need distinct names".into(),
        ));
    }
    let mut gb = GraphBuilder::new();
    let host_out = host.instantiate(&mut gb, host_instance, &BTreeMap::new())?;
    let mut resolved = BTreeMap::new();
    for input in guest.inputs() {
        let target = bindings.get(*input).ok_or_else(|| {
            IdiomError::Binding(format!("guest input {input} is unbound"))
        })?;
        let id = host_out
            .outputs
            .get(target)
            .copied()
            .or_else(|| gb.node_by_name(target))
            .ok_or_else(|| {
                IdiomError::Binding(format!("binding target {target} not found in host"))
            })?;
        resolved.insert(input.to_string(), id);
    }
    guest.instantiate(&mut gb, guest_instance, &resolved)?;
    Ok(gb.build()?)
}

fn slot_from_decl(decl: &SlotDecl) -> Result<SlotSpec, GraphError> {
    let family = match decl.family.as_str() {
        "normal" => Family::Normal,
        "categorical" => Family::Categorical,
        "bernoulli" => Family::Bernoulli,
        other => return Err(GraphError::Model(format!("unknown slot family {other}"))),
    };
    fn lower(p: &SlotParamDecl) -> SlotParam {
        match p {
            SlotParamDecl::Literal(v) => SlotParam::Const(Value::Scalar(*v)),
            SlotParamDecl::LiteralVec(v) => SlotParam::Const(Value::Vector(v.clone())),
            SlotParamDecl::Role { role } => SlotParam::Role(role.clone()),
            SlotParamDecl::Exp { exp } => SlotParam::Exp(Box::new(lower(exp))),
            SlotParamDecl::Sum { sum } => SlotParam::Sum(sum.iter().map(lower).collect()),
            SlotParamDecl::Table { table, index_by, shape } => SlotParam::Table {
                entries: table.clone(),
                index_by: index_by.clone(),
                shape: shape.clone(),
            },
        }
    }
    Ok(SlotSpec {
        family,
        params: decl.params.iter().map(lower).collect(),
    })
}

/// Hook for `idioms` stanzas in model files.
pub(crate) fn instantiate_decl(gb: &mut GraphBuilder, decl: &IdiomDecl) -> Result<(), GraphError> {
    let mut slots = BTreeMap::new();
    for (name, slot) in &decl.slots {
        slots.insert(name.clone(), slot_from_decl(slot)?);
    }
    let arg = |name: &str| -> Result<usize, GraphError> {
        decl.args
            .get(name)
            .copied()
            .ok_or_else(|| GraphError::Model(format!("idiom {} needs arg {name}", decl.name)))
    };
    let template = match decl.idiom.as_str() {
        "transition" => transition_idiom(slots),
        "slam" => slam_idiom(slots, arg("horizon")?, arg("map_size")?),
        "mdp" => mdp_idiom(slots, arg("horizon")?),
        other => return Err(GraphError::Model(format!("unknown idiom {other}"))),
    }
    .map_err(|e| GraphError::Model(e.to_string()))?;

    let mut bindings = BTreeMap::new();
    for (input, target) in &decl.bind {
        let id = gb
            .node_by_name(target)
            .ok_or_else(|| GraphError::UnknownNode(target.clone()))?;
        bindings.insert(input.clone(), id);
    }
    template
        .instantiate(gb, &decl.name, &bindings)
        .map_err(|e| GraphError::Model(e.to_string()))?;
    Ok(())
}
