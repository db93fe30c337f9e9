//! The model description file: a JSON document with top-level keys
//! `nodes`, `links`, `collections`, `predicates`, and `idioms`.
//!
//! Unknown keys are rejected. Links are listed explicitly and must agree
//! with each node's distribution parameters; validation reports any
//! mismatch. A collection may carry `replicate: N`, which unrolls its
//! member templates into `name{1}..name{N}` instances at build time;
//! serialized graphs instead carry `stacked: N` as a display annotation
//! that does not re-unroll.

use std::collections::BTreeMap;
use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use super::{
    CollectionId, DistRef, Family, GenerativeFlowGraph, GraphBuilder, GraphError, Link, LinkKind,
    NodeId, NodeKind, ParamSource, PredicateRegistry,
};
use crate::value::Value;

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelFile {
    #[serde(default)]
    pub nodes: Vec<NodeDecl>,
    #[serde(default)]
    pub links: Vec<LinkDecl>,
    #[serde(default)]
    pub collections: Vec<CollectionDecl>,
    #[serde(default)]
    pub predicates: Vec<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub idioms: Vec<IdiomDecl>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NodeDecl {
    pub name: String,
    pub kind: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub distribution: Option<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub params: Vec<ParamDecl>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub value: Option<Value>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub init: Option<Value>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub predicate: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ParamDecl {
    Literal(f64),
    LiteralVec(Vec<f64>),
    Ref(ParamRef),
    Exp {
        exp: Box<ParamDecl>,
    },
    Sum {
        sum: Vec<ParamDecl>,
    },
    Table {
        table: Vec<Value>,
        index_by: Vec<String>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        shape: Option<Vec<usize>>,
    },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParamRef {
    pub node: String,
    /// Optional smooth map applied to the referenced value; `exp` is the
    /// positivity map for scale slots.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub map: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LinkDecl {
    pub from: String,
    pub to: String,
    #[serde(default = "default_link_kind")]
    pub kind: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub when: Option<i64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub subset: Option<Vec<String>>,
}

fn default_link_kind() -> String {
    "generative".to_string()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CollectionDecl {
    pub name: String,
    pub members: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub index: Option<String>,
    /// Unroll directive: member templates become indexed instances.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub replicate: Option<u32>,
    /// Display annotation on an already-unrolled collection.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stacked: Option<u32>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IdiomDecl {
    /// Instance name; all generated nodes are prefixed with `name.`.
    pub name: String,
    /// Template kind: `transition`, `slam`, or `mdp`.
    pub idiom: String,
    #[serde(default)]
    pub args: BTreeMap<String, usize>,
    #[serde(default)]
    pub slots: BTreeMap<String, SlotDecl>,
    /// Bindings from template inputs to node names in this model.
    #[serde(default)]
    pub bind: BTreeMap<String, String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SlotDecl {
    pub family: String,
    pub params: Vec<SlotParamDecl>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(untagged)]
pub enum SlotParamDecl {
    Literal(f64),
    LiteralVec(Vec<f64>),
    Role {
        role: String,
    },
    Exp {
        exp: Box<SlotParamDecl>,
    },
    Sum {
        sum: Vec<SlotParamDecl>,
    },
    Table {
        table: Vec<Value>,
        index_by: Vec<String>,
        shape: Vec<usize>,
    },
}

pub fn parse_model(text: &str) -> Result<ModelFile, GraphError> {
    serde_json::from_str(text).map_err(|e| GraphError::Model(format!("model parse error: {e}")))
}

pub fn to_json_string(file: &ModelFile) -> String {
    serde_json::to_string_pretty(file).expect("model files serialize")
}

/// Parses and builds in one step.
pub fn load_model_str(
    text: &str,
    registry: &PredicateRegistry,
) -> Result<GenerativeFlowGraph, GraphError> {
    build_graph(&parse_model(text)?, registry)
}

fn family_from_name(name: &str) -> Result<Family, GraphError> {
    match name {
        "normal" => Ok(Family::Normal),
        "categorical" => Ok(Family::Categorical),
        "bernoulli" => Ok(Family::Bernoulli),
        other => Err(GraphError::Model(format!("unknown distribution family {other}"))),
    }
}

/// Builds a validated graph from a parsed model description.
pub fn build_graph(
    file: &ModelFile,
    registry: &PredicateRegistry,
) -> Result<GenerativeFlowGraph, GraphError> {
    let (file, stacked_info) = expand_replicates(file)?;
    let mut gb = GraphBuilder::with_registry(registry.clone());

    let decl_index: BTreeMap<&str, &NodeDecl> =
        file.nodes.iter().map(|d| (d.name.as_str(), d)).collect();
    if decl_index.len() != file.nodes.len() {
        // Let validation produce the duplicate-name report.
    }

    // Create nodes in declaration order so ids match positions.
    let mut ids: BTreeMap<String, NodeId> = BTreeMap::new();
    for d in &file.nodes {
        let kind = decl_kind(d)?;
        let id = gb.push_raw(&d.name, kind);
        ids.insert(d.name.clone(), id);
    }

    // Attach distributions now that every name is known.
    for d in &file.nodes {
        if matches!(d.kind.as_str(), "latent" | "observed") {
            let family_name = d.distribution.as_deref().ok_or_else(|| {
                GraphError::Model(format!("node {} needs a distribution", d.name))
            })?;
            let family = family_from_name(family_name)?;
            let params = d
                .params
                .iter()
                .map(|p| lower_param(p, &ids, &decl_index, &file))
                .collect::<Result<Vec<_>, _>>()?;
            gb.set_dist(ids[&d.name], DistRef { family, params });
        } else if !d.params.is_empty() {
            return Err(GraphError::Model(format!(
                "node {} of kind {} cannot take distribution params",
                d.name, d.kind
            )));
        }
    }

    for l in &file.links {
        let kind = match l.kind.as_str() {
            "generative" => LinkKind::Generative,
            "detached" => LinkKind::Detached,
            "influence" => LinkKind::Influence,
            other => return Err(GraphError::Model(format!("unknown link kind {other}"))),
        };
        let targets = resolve_link_sources(&l.from, l.subset.as_deref(), &ids, &file)?;
        let to = *ids
            .get(&l.to)
            .ok_or_else(|| GraphError::UnknownNode(l.to.clone()))?;
        for from in targets {
            gb.link(from, to, kind, l.when);
        }
    }

    for c in &file.collections {
        let members = c
            .members
            .iter()
            .map(|m| {
                ids.get(m)
                    .copied()
                    .ok_or_else(|| GraphError::UnknownNode(m.clone()))
            })
            .collect::<Result<Vec<_>, _>>()?;
        let stacked = c.stacked.or_else(|| stacked_info.get(&c.name).copied());
        gb.collection_full(&c.name, &members, c.index.clone(), stacked);
    }

    for p in &file.predicates {
        gb.declare_predicate(p);
    }

    for idiom in &file.idioms {
        crate::idiom::instantiate_decl(&mut gb, idiom)?;
    }

    gb.build()
}

fn decl_kind(d: &NodeDecl) -> Result<NodeKind, GraphError> {
    let need_value = |v: &Option<Value>| {
        v.clone()
            .ok_or_else(|| GraphError::Model(format!("node {} needs a value", d.name)))
    };
    match d.kind.as_str() {
        "latent" => Ok(NodeKind::Latent),
        "observed" => Ok(NodeKind::Observed(need_value(&d.value)?)),
        "variable_param" => Ok(NodeKind::VariableParam(
            d.init
                .clone()
                .ok_or_else(|| GraphError::Model(format!("node {} needs an init", d.name)))?,
        )),
        "fixed_param" => Ok(NodeKind::FixedParam(need_value(&d.value)?)),
        "branch" => Ok(NodeKind::Branch(d.predicate.clone().ok_or_else(|| {
            GraphError::Model(format!("branch {} needs a predicate", d.name))
        })?)),
        "selection" => Ok(NodeKind::Selection(d.predicate.clone().ok_or_else(|| {
            GraphError::Model(format!("selection {} needs a predicate", d.name))
        })?)),
        other => Err(GraphError::Model(format!("unknown node kind {other}"))),
    }
}

/// A link source may be a node or a collection; collection sources expand
/// to the value-bearing members (or the stated subset).
fn resolve_link_sources(
    from: &str,
    subset: Option<&[String]>,
    ids: &BTreeMap<String, NodeId>,
    file: &ModelFile,
) -> Result<Vec<NodeId>, GraphError> {
    if let Some(&id) = ids.get(from) {
        if subset.is_some() {
            return Err(GraphError::Model(format!(
                "subset annotation on link from plain node {from}"
            )));
        }
        return Ok(vec![id]);
    }
    let collection = file
        .collections
        .iter()
        .find(|c| c.name == from)
        .ok_or_else(|| GraphError::UnknownNode(from.to_string()))?;
    let chosen: Vec<&String> = match subset {
        Some(sub) => {
            for s in sub {
                if !collection.members.contains(s) {
                    return Err(GraphError::Model(format!(
                        "subset entry {s} is not a member of collection {from}"
                    )));
                }
            }
            sub.iter().collect()
        }
        None => collection.members.iter().collect(),
    };
    chosen
        .into_iter()
        .map(|m| {
            ids.get(m)
                .copied()
                .ok_or_else(|| GraphError::UnknownNode(m.clone()))
        })
        .collect()
}

fn lower_param(
    p: &ParamDecl,
    ids: &BTreeMap<String, NodeId>,
    decls: &BTreeMap<&str, &NodeDecl>,
    file: &ModelFile,
) -> Result<ParamSource, GraphError> {
    match p {
        ParamDecl::Literal(v) => Ok(ParamSource::Const(Value::Scalar(*v))),
        ParamDecl::LiteralVec(v) => Ok(ParamSource::Const(Value::Vector(v.clone()))),
        ParamDecl::Ref(r) => {
            let inner = ParamSource::Node(
                *ids.get(&r.node)
                    .ok_or_else(|| GraphError::UnknownNode(r.node.clone()))?,
            );
            match r.map.as_deref() {
                None => Ok(inner),
                Some("exp") => Ok(ParamSource::Exp(Box::new(inner))),
                Some(other) => Err(GraphError::Model(format!("unknown param map {other}"))),
            }
        }
        ParamDecl::Exp { exp } => Ok(ParamSource::Exp(Box::new(lower_param(
            exp, ids, decls, file,
        )?))),
        ParamDecl::Sum { sum } => {
            let mut items = Vec::new();
            for s in sum {
                items.push(lower_param(s, ids, decls, file)?);
            }
            Ok(ParamSource::Sum(items))
        }
        ParamDecl::Table { table, index_by, shape } => {
            let mut nodes = Vec::new();
            for name in index_by {
                // A collection name expands to its members, in member order.
                if ids.contains_key(name) {
                    nodes.push(name.clone());
                } else if let Some(c) = file.collections.iter().find(|c| &c.name == name) {
                    nodes.extend(c.members.iter().cloned());
                } else {
                    return Err(GraphError::UnknownNode(name.clone()));
                }
            }
            let mut index_ids = Vec::new();
            for name in &nodes {
                index_ids.push(
                    *ids.get(name)
                        .ok_or_else(|| GraphError::UnknownNode(name.clone()))?,
                );
            }
            let cards = match shape {
                Some(explicit) => {
                    if explicit.len() != nodes.len() {
                        return Err(GraphError::Model(format!(
                            "table shape {explicit:?} does not cover {} indices",
                            nodes.len()
                        )));
                    }
                    explicit.clone()
                }
                None => nodes
                    .iter()
                    .map(|name| {
                        decl_support(decls, name).ok_or_else(|| {
                            GraphError::Model(format!(
                                "cannot determine state count of table index {name}"
                            ))
                        })
                    })
                    .collect::<Result<Vec<_>, _>>()?,
            };
            Ok(ParamSource::Table {
                entries: table.clone(),
                index_by: index_ids,
                cards,
            })
        }
    }
}

/// Number of discrete states a declared node can take, resolved statically
/// from the declarations.
fn decl_support(decls: &BTreeMap<&str, &NodeDecl>, name: &str) -> Option<usize> {
    let d = decls.get(name)?;
    match d.distribution.as_deref() {
        Some("bernoulli") => Some(2),
        Some("categorical") => match d.params.first()? {
            ParamDecl::LiteralVec(v) => Some(v.len()),
            ParamDecl::Ref(r) => {
                let p = decls.get(r.node.as_str())?;
                let v = p.value.as_ref().or(p.init.as_ref())?;
                v.as_vector().map(|x| x.len())
            }
            ParamDecl::Table { table, .. } => table.first()?.as_vector().map(|v| v.len()),
            _ => None,
        },
        _ => None,
    }
}

/// Unrolls `replicate: N` collections into concrete indexed instances.
fn expand_replicates(file: &ModelFile) -> Result<(ModelFile, BTreeMap<String, u32>), GraphError> {
    let mut stacked = BTreeMap::new();
    let replicated: Vec<&CollectionDecl> =
        file.collections.iter().filter(|c| c.replicate.is_some()).collect();
    if replicated.is_empty() {
        return Ok((file.clone(), stacked));
    }

    // Template name -> (collection, count).
    let mut templates: BTreeMap<String, (String, u32)> = BTreeMap::new();
    for c in &replicated {
        let n = c.replicate.unwrap();
        if n == 0 {
            return Err(GraphError::Model(format!(
                "collection {} has replicate 0",
                c.name
            )));
        }
        if c.stacked.is_some() {
            return Err(GraphError::Model(format!(
                "collection {} sets both replicate and stacked",
                c.name
            )));
        }
        for m in &c.members {
            if templates.insert(m.clone(), (c.name.clone(), n)).is_some() {
                return Err(GraphError::Model(format!(
                    "node {m} is a template of two replicated collections"
                )));
            }
        }
        stacked.insert(c.name.clone(), n);
    }
    let instance = |name: &str, k: u32| format!("{name}{{{k}}}");

    let expand_names = |name: &String| -> Vec<String> {
        match templates.get(name) {
            Some((_, n)) => (1..=*n).map(|k| instance(name, k)).collect(),
            None => vec![name.clone()],
        }
    };

    let mut out = ModelFile {
        predicates: file.predicates.clone(),
        idioms: file.idioms.clone(),
        ..Default::default()
    };

    for d in &file.nodes {
        match templates.get(&d.name) {
            None => {
                let mut d = d.clone();
                d.params = d
                    .params
                    .iter()
                    .map(|p| expand_param(p, &templates, None, &instance))
                    .collect::<Result<_, _>>()?;
                out.nodes.push(d);
            }
            Some((col, n)) => {
                let (col, n) = (col.clone(), *n);
                for k in 1..=n {
                    let mut inst = d.clone();
                    inst.name = instance(&d.name, k);
                    // References to members of the same replicated
                    // collection stay within instance k.
                    inst.params = d
                        .params
                        .iter()
                        .map(|p| expand_param(p, &templates, Some((&col, k)), &instance))
                        .collect::<Result<_, _>>()?;
                    out.nodes.push(inst);
                }
            }
        }
    }

    for l in &file.links {
        let from_t = templates.get(&l.from);
        let to_t = templates.get(&l.to);
        match (from_t, to_t) {
            (None, None) => out.links.push(l.clone()),
            (Some((ca, n)), Some((cb, _))) if ca == cb => {
                for k in 1..=*n {
                    let mut inst = l.clone();
                    inst.from = instance(&l.from, k);
                    inst.to = instance(&l.to, k);
                    out.links.push(inst);
                }
            }
            (Some((_, n)), _) => {
                for k in 1..=*n {
                    let mut inst = l.clone();
                    inst.from = instance(&l.from, k);
                    out.links.push(inst);
                }
            }
            (None, Some((_, n))) => {
                for k in 1..=*n {
                    let mut inst = l.clone();
                    inst.to = instance(&l.to, k);
                    out.links.push(inst);
                }
            }
        }
    }

    for c in &file.collections {
        let mut c = c.clone();
        if c.replicate.is_some() {
            c.replicate = None;
        }
        c.members = c.members.iter().flat_map(&expand_names).collect();
        out.collections.push(c);
    }

    Ok((out, stacked))
}

fn expand_param(
    p: &ParamDecl,
    templates: &BTreeMap<String, (String, u32)>,
    own_instance: Option<(&String, u32)>,
    instance: &dyn Fn(&str, u32) -> String,
) -> Result<ParamDecl, GraphError> {
    let expand_ref = |name: &String| -> Result<Vec<String>, GraphError> {
        match templates.get(name) {
            None => Ok(vec![name.clone()]),
            Some((col, n)) => match own_instance {
                Some((own_col, k)) if own_col == col => Ok(vec![instance(name, k)]),
                _ => Ok((1..=*n).map(|k| instance(name, k)).collect()),
            },
        }
    };
    match p {
        ParamDecl::Literal(_) | ParamDecl::LiteralVec(_) => Ok(p.clone()),
        ParamDecl::Ref(r) => {
            let names = expand_ref(&r.node)?;
            if names.len() != 1 {
                return Err(GraphError::Model(format!(
                    "replicated node {} referenced in a scalar parameter slot; use a table or sum",
                    r.node
                )));
            }
            Ok(ParamDecl::Ref(ParamRef {
                node: names.into_iter().next().unwrap(),
                map: r.map.clone(),
            }))
        }
        ParamDecl::Exp { exp } => Ok(ParamDecl::Exp {
            exp: Box::new(expand_param(exp, templates, own_instance, instance)?),
        }),
        ParamDecl::Sum { sum } => {
            let mut items = Vec::new();
            for s in sum {
                match s {
                    ParamDecl::Ref(r) => {
                        for name in expand_ref(&r.node)? {
                            items.push(ParamDecl::Ref(ParamRef {
                                node: name,
                                map: r.map.clone(),
                            }));
                        }
                    }
                    other => items.push(expand_param(other, templates, own_instance, instance)?),
                }
            }
            Ok(ParamDecl::Sum { sum: items })
        }
        ParamDecl::Table { table, index_by, shape } => {
            let mut names = Vec::new();
            for n in index_by {
                names.extend(expand_ref(n)?);
            }
            Ok(ParamDecl::Table {
                table: table.clone(),
                index_by: names,
                shape: shape.clone(),
            })
        }
    }
}

/// Serializes a built graph back into the model-file form. Parsing the
/// result reproduces the graph exactly.
pub fn serialize_model(g: &GenerativeFlowGraph) -> ModelFile {
    let param_decl = |p: &ParamSource| serialize_param(g, p);
    let nodes = g
        .nodes()
        .iter()
        .map(|n| {
            let (kind, value, init, predicate) = match &n.kind {
                NodeKind::Latent => ("latent", None, None, None),
                NodeKind::Observed(v) => ("observed", Some(v.clone()), None, None),
                NodeKind::VariableParam(v) => ("variable_param", None, Some(v.clone()), None),
                NodeKind::FixedParam(v) => ("fixed_param", Some(v.clone()), None, None),
                NodeKind::Branch(p) => ("branch", None, None, Some(p.clone())),
                NodeKind::Selection(p) => ("selection", None, None, Some(p.clone())),
            };
            NodeDecl {
                name: n.name.clone(),
                kind: kind.to_string(),
                distribution: n.dist.as_ref().map(|d| d.family.name().to_string()),
                params: n
                    .dist
                    .as_ref()
                    .map(|d| d.params.iter().map(param_decl).collect())
                    .unwrap_or_default(),
                value,
                init,
                predicate,
            }
        })
        .collect();

    let links = g
        .links()
        .iter()
        .map(|l: &Link| LinkDecl {
            from: g.name(l.from).to_string(),
            to: g.name(l.to).to_string(),
            kind: match l.kind {
                LinkKind::Generative => "generative",
                LinkKind::Detached => "detached",
                LinkKind::Influence => "influence",
            }
            .to_string(),
            when: l.when,
            subset: None,
        })
        .collect();

    let collections = g
        .collections()
        .iter()
        .map(|c| CollectionDecl {
            name: c.name.clone(),
            members: c.members.iter().map(|m| g.name(*m).to_string()).collect(),
            index: c.index.clone(),
            replicate: None,
            stacked: c.replicated,
        })
        .collect();

    ModelFile {
        nodes,
        links,
        collections,
        predicates: g.declared_predicates().to_vec(),
        idioms: Vec::new(),
    }
}

fn serialize_param(g: &GenerativeFlowGraph, p: &ParamSource) -> ParamDecl {
    match p {
        ParamSource::Node(id) => ParamDecl::Ref(ParamRef {
            node: g.name(*id).to_string(),
            map: None,
        }),
        ParamSource::Const(Value::Scalar(v)) => ParamDecl::Literal(*v),
        ParamSource::Const(Value::Vector(v)) => ParamDecl::LiteralVec(v.clone()),
        ParamSource::Const(Value::Matrix(_)) => ParamDecl::LiteralVec(Vec::new()),
        ParamSource::Exp(inner) => ParamDecl::Exp {
            exp: Box::new(serialize_param(g, inner)),
        },
        ParamSource::Sum(items) => ParamDecl::Sum {
            sum: items.iter().map(|i| serialize_param(g, i)).collect(),
        },
        ParamSource::Table { entries, index_by, cards } => ParamDecl::Table {
            table: entries.clone(),
            index_by: index_by.iter().map(|id| g.name(*id).to_string()).collect(),
            shape: Some(cards.clone()),
        },
    }
}

impl GenerativeFlowGraph {
    /// Members of a collection resolved to names, for reports.
    pub fn collection_member_names(&self, id: CollectionId) -> Vec<String> {
        self.collection(id)
            .members
            .iter()
            .map(|m| self.name(*m).to_string())
            .collect()
    }

    /// Latent member ids of a collection.
    pub fn collection_latents(&self, id: CollectionId) -> BTreeSet<NodeId> {
        self.collection(id)
            .members
            .iter()
            .copied()
            .filter(|m| self.node(*m).kind == NodeKind::Latent)
            .collect()
    }
}
