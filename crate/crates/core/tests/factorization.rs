//! Joint/posterior factor derivation, the message-passing partition, and
//! trace scoring.

mod common;

use std::collections::BTreeMap;

use gfg::autodiff::{backward, Tape};
use gfg::factorize::{
    expand_posterior, factorize_joint, factorize_posterior, log_joint, log_joint_traced,
    partition_for_smp, render_factor, render_joint, render_posterior, FactorizeError,
};
use gfg::graph::{DistSpec, GraphBuilder, ParamSpec, Trace};
use gfg::oracle;
use gfg::value::Value;

#[test]
fn single_latent_has_one_bare_factor() {
    let mut gb = GraphBuilder::new();
    gb.latent("z", DistSpec::normal(ParamSpec::lit(0.0), ParamSpec::lit(1.0)));
    let g = gb.build().unwrap();
    let j = factorize_joint(&g);
    assert_eq!(j.factors.len(), 1);
    assert!(j.factors[0].parent_latents.is_empty());
    assert!(j.factors[0].parent_params.is_empty());
    assert_eq!(render_joint(&g, &j), "p(z)");
}

#[test]
fn detached_pair_joint_factors() {
    let m = common::detached_pair(true);
    let g = &m.graph;
    let j = factorize_joint(g);
    assert_eq!(
        render_joint(g, &j),
        "p(x_a | z_a) · p(x_b | z_b) · p[theta_a](z_a) · p[theta_a, theta_b](z_b | z_a)"
    );
    let zb_factor = j.factors.iter().find(|f| f.target == m.z_b).unwrap();
    assert!(zb_factor.via_detached.contains(&m.z_a));
    assert!(zb_factor.via_detached.contains(&m.theta_a));
    assert_eq!(
        render_factor(g, zb_factor),
        "p[theta_a, theta_b](z_b | z_a)"
    );
}

#[test]
fn posterior_splits_along_detached_links() {
    let m = common::detached_pair(true);
    let p = factorize_posterior(&m.graph);
    assert_eq!(p.blocks.len(), 2);
    assert_eq!(
        render_posterior(&m.graph, &p),
        "p[theta_a](z_a | x_a) · p[theta_b, ˘theta_a](z_b | ˘z_a, x_b)"
    );
}

#[test]
fn posterior_with_generative_links_is_one_block() {
    let m = common::detached_pair(false);
    let p = factorize_posterior(&m.graph);
    assert_eq!(p.blocks.len(), 1);
    assert_eq!(
        render_posterior(&m.graph, &p),
        "p[theta_a, theta_b](z_a, z_b | x_a, x_b)"
    );
}

#[test]
fn posterior_without_observations_expands_to_the_prior() {
    let mut gb = GraphBuilder::new();
    let z1 = gb.latent("z1", DistSpec::normal(ParamSpec::lit(0.0), ParamSpec::lit(1.0)));
    let _z2 = gb.latent("z2", DistSpec::normal(ParamSpec::node(z1), ParamSpec::lit(1.0)));
    let g = gb.build().unwrap();
    let posterior = factorize_posterior(&g);
    let joint = factorize_joint(&g);
    let mut expected = joint.factors.clone();
    expected.sort();
    assert_eq!(expand_posterior(&g, &posterior), expected);
}

#[test]
fn partition_finds_global_observed() {
    let (g, z_a, z_b) = common::gaussian_pair_shared_child();
    let p = partition_for_smp(&g).unwrap();
    let x_g = g.node_by_name("x_g").unwrap();
    assert_eq!(p.global_observed.len(), 1);
    assert!(p.global_observed.contains(&x_g));
    let a = g.collection_by_name("A").unwrap();
    let b = g.collection_by_name("B").unwrap();
    assert_eq!(p.latent_owner[&z_a], a);
    assert_eq!(p.latent_owner[&z_b], b);
    // Co-parents of the shared child couple the collections both ways.
    assert!(p.parent_map[&a].contains(&(b, false)));
    assert!(p.parent_map[&b].contains(&(a, false)));
}

#[test]
fn partition_marks_detached_parents() {
    let m = common::detached_pair(true);
    let p = partition_for_smp(&m.graph).unwrap();
    assert!(p.global_observed.is_empty());
    let a = m.graph.collection_by_name("A").unwrap();
    let b = m.graph.collection_by_name("B").unwrap();
    assert_eq!(
        p.parent_map.get(&b).cloned().unwrap_or_default(),
        [(a, true)].into_iter().collect()
    );
    assert!(!p.parent_map.contains_key(&a));
}

#[test]
fn single_collection_partition_is_trivial() {
    let (g, _) = common::conjugate_graph();
    let p = partition_for_smp(&g).unwrap();
    assert_eq!(p.collections.len(), 1);
    assert!(p.global_observed.is_empty());
    assert!(p.parent_map.is_empty());
}

#[test]
fn uncovered_latent_is_an_error() {
    let mut gb = GraphBuilder::new();
    let _z = gb.latent("z", DistSpec::bernoulli(ParamSpec::lit(0.0)));
    let g = gb.build().unwrap();
    assert!(matches!(
        partition_for_smp(&g),
        Err(FactorizeError::UncoveredNode(_))
    ));
}

#[test]
fn partition_is_invariant_to_declaration_order() {
    // The same model declared in two different node orders produces the
    // same named partition.
    let build = |flip: bool| {
        let mut gb = GraphBuilder::new();
        let (z_a, z_b) = if flip {
            let z_b = gb.latent("z_b", DistSpec::normal(ParamSpec::lit(0.0), ParamSpec::lit(1.0)));
            let z_a = gb.latent("z_a", DistSpec::normal(ParamSpec::lit(0.0), ParamSpec::lit(1.0)));
            (z_a, z_b)
        } else {
            let z_a = gb.latent("z_a", DistSpec::normal(ParamSpec::lit(0.0), ParamSpec::lit(1.0)));
            let z_b = gb.latent("z_b", DistSpec::normal(ParamSpec::lit(0.0), ParamSpec::lit(1.0)));
            (z_a, z_b)
        };
        let _x_g = gb.observed(
            "x_g",
            DistSpec::normal(
                ParamSpec::sum(vec![ParamSpec::node(z_a), ParamSpec::node(z_b)]),
                ParamSpec::lit(1.0),
            ),
            Value::Scalar(0.2),
        );
        if flip {
            gb.collection("B", &[z_b]);
            gb.collection("A", &[z_a]);
        } else {
            gb.collection("A", &[z_a]);
            gb.collection("B", &[z_b]);
        }
        let g = gb.build().unwrap();
        let p = partition_for_smp(&g).unwrap();
        let owner_names: Vec<(String, String)> = p
            .latent_owner
            .iter()
            .map(|(n, c)| (g.name(*n).to_string(), g.collection(*c).name.clone()))
            .collect();
        let globals: Vec<String> = p
            .global_observed
            .iter()
            .map(|n| g.name(*n).to_string())
            .collect();
        (owner_names, globals)
    };
    let mut a = build(false);
    let mut b = build(true);
    a.0.sort();
    b.0.sort();
    assert_eq!(a, b);
}

fn trace_of(g: &gfg::graph::GenerativeFlowGraph, values: &[(&str, f64)]) -> Trace {
    let mut map = BTreeMap::new();
    let mut path = Vec::new();
    for &id in g.topo_order() {
        let node = g.node(id);
        match &node.kind {
            gfg::graph::NodeKind::Latent => {
                let v = values
                    .iter()
                    .find(|(n, _)| *n == node.name)
                    .unwrap_or_else(|| panic!("no value for {}", node.name))
                    .1;
                map.insert(id, Value::Scalar(v));
                path.push(id);
            }
            gfg::graph::NodeKind::Observed(v) => {
                map.insert(id, v.clone());
                path.push(id);
            }
            _ => {}
        }
    }
    Trace {
        values: map,
        path,
        branch_choices: BTreeMap::new(),
    }
}

#[test]
fn log_joint_matches_gaussian_closed_forms() {
    let mut gb = GraphBuilder::new();
    gb.latent("z", DistSpec::normal(ParamSpec::lit(0.0), ParamSpec::lit(1.0)));
    let g = gb.build().unwrap();
    let lp = log_joint(&g, &trace_of(&g, &[("z", 0.0)])).unwrap();
    assert!((lp - (-0.918_938_533_204_672_7)).abs() < 1e-9);

    let (g, _) = common::conjugate_graph();
    // Pin x = 2 but evaluate at z = 0 against an x = 0 twin model for the
    // two-standard-normal check.
    let mut gb = GraphBuilder::new();
    let z = gb.latent("z", DistSpec::normal(ParamSpec::lit(0.0), ParamSpec::lit(1.0)));
    gb.observed(
        "x",
        DistSpec::normal(ParamSpec::node(z), ParamSpec::lit(1.0)),
        Value::Scalar(0.0),
    );
    let twin = gb.build().unwrap();
    let lp = log_joint(&twin, &trace_of(&twin, &[("z", 0.0)])).unwrap();
    assert!((lp - 2.0 * (-0.918_938_533_204_672_7)).abs() < 1e-9);
    drop(g);

    let mut gb = GraphBuilder::new();
    gb.latent("z", DistSpec::categorical(ParamSpec::lit_vec(vec![0.0; 4])));
    let g = gb.build().unwrap();
    let lp = log_joint(&g, &trace_of(&g, &[("z", 2.0)])).unwrap();
    assert!((lp - 0.25f64.ln()).abs() < 1e-12);
}

#[test]
fn enumerated_log_joint_normalizes_to_the_evidence() {
    // Summing exp(log_joint) over every latent assignment reproduces the
    // marginal likelihood of the observations.
    let m = common::two_bernoulli_shared_child();
    let g = &m.graph;
    let exact = oracle::enumerate_posterior(g).unwrap();
    let mut total = 0.0;
    for za in 0..2 {
        for zb in 0..2 {
            let t = trace_of(g, &[("z_a", za as f64), ("z_b", zb as f64)]);
            total += log_joint(g, &t).unwrap().exp();
        }
    }
    assert!((total.ln() - exact.log_evidence).abs() < 1e-10);
}

#[test]
fn detached_links_freeze_upstream_gradients() {
    // In the detached graph the downstream factor contributes nothing to
    // the gradient with respect to upstream quantities; flipping the links
    // to generative restores those paths.
    let values = [("z_a", 0.7), ("z_b", -0.2)];
    let analytic_block_a = |theta_a: f64, z_a: f64, x_a: f64| (z_a - theta_a) + 0.0 * x_a;

    let detached = common::detached_pair(true);
    let tape = Tape::new();
    let t = trace_of(&detached.graph, &values);
    let eval = log_joint_traced(&detached.graph, &t, Some(&tape)).unwrap();
    let grad = backward(&eval.total);
    let d_theta_a = grad.wrt(&eval.param_leaves[&detached.theta_a][0]);
    assert!(
        (d_theta_a - analytic_block_a(0.0, 0.7, 1.0)).abs() < 1e-10,
        "detached gradient must come from the upstream block alone"
    );
    // d/dz_a: prior + own likelihood only: (theta_a - z_a) + (x_a - z_a).
    let d_z_a = grad.wrt(&eval.latent_leaves[&detached.z_a]);
    assert!((d_z_a - ((0.0 - 0.7) + (1.0 - 0.7))).abs() < 1e-10);

    let generative = common::detached_pair(false);
    let tape = Tape::new();
    let t = trace_of(&generative.graph, &values);
    let eval = log_joint_traced(&generative.graph, &t, Some(&tape)).unwrap();
    let grad = backward(&eval.total);
    let d_theta_a_gen = grad.wrt(&eval.param_leaves[&generative.theta_a][0]);
    assert!(
        (d_theta_a_gen - analytic_block_a(0.0, 0.7, 1.0)).abs() > 1e-3,
        "generative links must leak downstream influence upstream"
    );
}

#[test]
fn posterior_block_count_matches_detached_separation() {
    // Chain of three blocks, each detached from the previous one.
    let mut gb = GraphBuilder::new();
    let mut prev = None;
    for i in 0..3 {
        let spec = match prev {
            None => DistSpec::normal(ParamSpec::lit(0.0), ParamSpec::lit(1.0)),
            Some(p) => DistSpec::normal(ParamSpec::detached(p), ParamSpec::lit(1.0)),
        };
        let z = gb.latent(&format!("z{i}"), spec);
        gb.observed(
            &format!("x{i}"),
            DistSpec::normal(ParamSpec::node(z), ParamSpec::lit(1.0)),
            Value::Scalar(0.1 * i as f64),
        );
        prev = Some(z);
    }
    let g = gb.build().unwrap();
    assert_eq!(factorize_posterior(&g).blocks.len(), 3);
}
