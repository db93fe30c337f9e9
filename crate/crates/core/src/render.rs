//! DOT export of a generative flow graph.
//!
//! Node and link styles follow the graph semantics: latents are unfilled
//! circles, observed nodes filled circles, variable parameters unfilled
//! squares, fixed parameters filled squares, condition nodes polygons.
//! Generative links are solid, detached links carry a distinct arrowhead
//! plus a "detached" label (the half-circle glyph has no DOT equivalent),
//! influence links are dashed. Collections become labeled clusters;
//! replicated collections carry their index range and doubled periphery.

use std::collections::BTreeSet;

use crate::graph::{GenerativeFlowGraph, LinkKind, NodeId, NodeKind};

/// Deterministic DOT text for a graph.
pub fn render_dot(g: &GenerativeFlowGraph) -> String {
    let mut out = String::from("digraph gfg {\n");
    out.push_str("  rankdir=LR;\n");

    // Nested collections render as nested clusters; a node is emitted in
    // its innermost collection.
    let mut innermost: Vec<Option<usize>> = vec![None; g.nodes().len()];
    for (ci, c) in g.collections().iter().enumerate() {
        for &m in &c.members {
            let slot = &mut innermost[m.0 as usize];
            match slot {
                Some(prev) if g.collections()[*prev].members.len() <= c.members.len() => {}
                _ => *slot = Some(ci),
            }
        }
    }

    fn node_attrs(kind: &NodeKind) -> &'static str {
        match kind {
            NodeKind::Latent => "shape=circle",
            NodeKind::Observed(_) => "shape=circle, style=filled, fillcolor=lightgray",
            NodeKind::VariableParam(_) => "shape=square",
            NodeKind::FixedParam(_) => "shape=square, style=filled, fillcolor=lightgray",
            NodeKind::Branch(_) => "shape=diamond",
            NodeKind::Selection(_) => "shape=invtriangle",
        }
    }

    fn emit_node(g: &GenerativeFlowGraph, id: NodeId, indent: &str, out: &mut String) {
        let n = g.node(id);
        out.push_str(&format!(
            "{indent}\"{}\" [{}];\n",
            n.name,
            node_attrs(&n.kind)
        ));
    }

    // Containment forest over collections (by member-set inclusion).
    let cols = g.collections();
    let mut parent: Vec<Option<usize>> = vec![None; cols.len()];
    for (i, a) in cols.iter().enumerate() {
        let mut best: Option<usize> = None;
        for (j, b) in cols.iter().enumerate() {
            if i != j && a.members.is_subset(&b.members) && a.members.len() < b.members.len() {
                match best {
                    Some(k) if cols[k].members.len() <= b.members.len() => {}
                    _ => best = Some(j),
                }
            }
        }
        parent[i] = best;
    }

    #[allow(clippy::too_many_arguments)]
    fn emit_cluster(
        g: &GenerativeFlowGraph,
        cols_children: &[Vec<usize>],
        innermost: &[Option<usize>],
        ci: usize,
        indent: String,
        out: &mut String,
        emitted: &mut BTreeSet<NodeId>,
    ) {
        let c = &g.collections()[ci];
        out.push_str(&format!("{indent}subgraph cluster_{} {{\n", c.id.0));
        let mut label = c.name.clone();
        if let Some(idx) = &c.index {
            label.push_str(&format!(" [{idx}]"));
        }
        if let Some(n) = c.replicated {
            label.push_str(&format!(" (x{n})"));
            out.push_str(&format!("{indent}  peripheries=2;\n"));
        }
        out.push_str(&format!("{indent}  label=\"{label}\";\n"));
        for &child in &cols_children[ci] {
            emit_cluster(g, cols_children, innermost, child, format!("{indent}  "), out, emitted);
        }
        let mut members: Vec<NodeId> = c.members.iter().copied().collect();
        members.sort();
        for m in members {
            if innermost[m.0 as usize] == Some(ci) && emitted.insert(m) {
                emit_node(g, m, &format!("{indent}  "), out);
            }
        }
        out.push_str(&format!("{indent}}}\n"));
    }

    let mut children: Vec<Vec<usize>> = vec![Vec::new(); cols.len()];
    for (i, p) in parent.iter().enumerate() {
        if let Some(p) = p {
            children[*p].push(i);
        }
    }
    let mut emitted: BTreeSet<NodeId> = BTreeSet::new();
    for (i, p) in parent.iter().enumerate() {
        if p.is_none() {
            emit_cluster(g, &children, &innermost, i, "  ".to_string(), &mut out, &mut emitted);
        }
    }
    for n in g.nodes() {
        if !emitted.contains(&n.id) {
            emit_node(g, n.id, "  ", &mut out);
        }
    }

    for l in g.links() {
        let mut attrs: Vec<String> = Vec::new();
        match l.kind {
            LinkKind::Generative => {}
            LinkKind::Detached => {
                attrs.push("arrowhead=odot".into());
                attrs.push("label=\"detached\"".into());
            }
            LinkKind::Influence => attrs.push("style=dashed".into()),
        }
        if let Some(w) = l.when {
            attrs.push(format!("taillabel=\"{w}\""));
        }
        let attr_text = if attrs.is_empty() {
            String::new()
        } else {
            format!(" [{}]", attrs.join(", "))
        };
        out.push_str(&format!(
            "  \"{}\" -> \"{}\"{};\n",
            g.name(l.from),
            g.name(l.to),
            attr_text
        ));
    }

    out.push_str("}\n");
    out
}

/// Minimal DOT syntax check used by tests: directed-graph header, balanced
/// braces, and statement shapes for nodes, edges, subgraphs, and
/// attribute assignments.
pub fn check_dot_syntax(text: &str) -> Result<(), String> {
    let trimmed = text.trim();
    let body = trimmed
        .strip_prefix("digraph")
        .ok_or("missing digraph header")?
        .trim_start();
    let brace = body.find('{').ok_or("missing opening brace")?;
    let name = body[..brace].trim();
    if !name.is_empty() && !name.chars().all(|c| c.is_alphanumeric() || c == '_') {
        return Err(format!("bad graph name: {name}"));
    }
    let mut depth = 0i32;
    for c in trimmed.chars() {
        match c {
            '{' => depth += 1,
            '}' => {
                depth -= 1;
                if depth < 0 {
                    return Err("unbalanced braces".into());
                }
            }
            _ => {}
        }
    }
    if depth != 0 {
        return Err("unbalanced braces".into());
    }

    for raw in trimmed.lines().skip(1) {
        let line = raw.trim();
        if line.is_empty() || line == "}" {
            continue;
        }
        let ok = line.starts_with("subgraph")
            || line.ends_with('{')
            || line.ends_with(';')
            || line.ends_with('}');
        if !ok {
            return Err(format!("statement not terminated: {line}"));
        }
        if let Some(stmt) = line.strip_suffix(';') {
            // Quote-aware view: brackets inside quoted strings don't count.
            let mut outside = String::new();
            let mut in_quotes = false;
            for c in stmt.chars() {
                match c {
                    '"' => {
                        in_quotes = !in_quotes;
                        outside.push(c);
                    }
                    _ if !in_quotes => outside.push(c),
                    _ => {}
                }
            }
            if in_quotes {
                return Err(format!("unterminated string: {stmt}"));
            }
            let well_formed = if let Some((lhs, _)) = outside.split_once("->") {
                lhs.trim().starts_with('"')
            } else if outside.contains('[') {
                outside.trim_start().starts_with('"') && outside.trim_end().ends_with(']')
            } else {
                outside.contains('=') || outside.trim_start().starts_with('"')
            };
            if !well_formed {
                return Err(format!("malformed statement: {stmt}"));
            }
        }
    }
    Ok(())
}
