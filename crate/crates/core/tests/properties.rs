//! Property tests over randomly generated small graphs.

use std::collections::BTreeMap;

use proptest::prelude::*;

use gfg::graph::model::{build_graph, parse_model, serialize_model, to_json_string};
use gfg::graph::{
    sample_trace, DistSpec, Family, GenerativeFlowGraph, GraphBuilder, LinkKind, ParamSpec,
    PredicateRegistry,
};
use gfg::value::Value;

#[derive(Debug, Clone)]
enum NodePlan {
    Latent { family: FamilyPlan, parent: Option<(usize, bool)> },
    Observed { family: FamilyPlan, parent: Option<(usize, bool)>, value: f64 },
    FixedParam { value: f64 },
}

#[derive(Debug, Clone)]
enum FamilyPlan {
    Normal { loc_lit: f64, scale: f64 },
    Bernoulli { logit: f64 },
    Categorical { logits: Vec<f64> },
}

fn family_plan() -> impl Strategy<Value = FamilyPlan> {
    prop_oneof![
        (-2.0..2.0f64, 0.4..2.0f64)
            .prop_map(|(loc_lit, scale)| FamilyPlan::Normal { loc_lit, scale }),
        (-2.0..2.0f64).prop_map(|logit| FamilyPlan::Bernoulli { logit }),
        proptest::collection::vec(-1.5..1.5f64, 2..4)
            .prop_map(|logits| FamilyPlan::Categorical { logits }),
    ]
}

fn node_plan() -> impl Strategy<Value = NodePlan> {
    prop_oneof![
        6 => (family_plan(), proptest::option::of((0usize..16, any::<bool>())))
            .prop_map(|(family, parent)| NodePlan::Latent { family, parent }),
        3 => (family_plan(), proptest::option::of((0usize..16, any::<bool>())), -2.0..2.0f64)
            .prop_map(|(family, parent, value)| NodePlan::Observed { family, parent, value }),
        1 => (-2.0..2.0f64).prop_map(|value| NodePlan::FixedParam { value }),
    ]
}

/// Assembles a valid graph from the plans: parents resolve to earlier
/// value-bearing nodes, discrete observations snap into their support.
fn realize(plans: &[NodePlan]) -> GenerativeFlowGraph {
    let mut gb = GraphBuilder::new();
    let mut sources: Vec<gfg::graph::NodeId> = Vec::new();
    for (i, plan) in plans.iter().enumerate() {
        let pick_parent = |choice: &Option<(usize, bool)>| -> Option<ParamSpec> {
            let (idx, detached) = choice.as_ref()?;
            if sources.is_empty() {
                return None;
            }
            let id = sources[idx % sources.len()];
            Some(if *detached { ParamSpec::detached(id) } else { ParamSpec::node(id) })
        };
        let spec = |family: &FamilyPlan, parent: &Option<(usize, bool)>| match family {
            FamilyPlan::Normal { loc_lit, scale } => DistSpec::normal(
                pick_parent(parent).unwrap_or(ParamSpec::lit(*loc_lit)),
                ParamSpec::lit(*scale),
            ),
            FamilyPlan::Bernoulli { logit } => DistSpec::bernoulli(
                pick_parent(parent).unwrap_or(ParamSpec::lit(*logit)),
            ),
            FamilyPlan::Categorical { logits } => {
                DistSpec::categorical(ParamSpec::lit_vec(logits.clone()))
            }
        };
        match plan {
            NodePlan::Latent { family, parent } => {
                let id = gb.latent(&format!("n{i}"), spec(family, parent));
                sources.push(id);
            }
            NodePlan::Observed { family, parent, value } => {
                let v = match family {
                    FamilyPlan::Normal { .. } => Value::Scalar(*value),
                    FamilyPlan::Bernoulli { .. } => {
                        Value::Scalar(if *value > 0.0 { 1.0 } else { 0.0 })
                    }
                    FamilyPlan::Categorical { logits } => Value::Scalar(
                        ((value.abs() * 10.0) as usize % logits.len()) as f64,
                    ),
                };
                gb.observed(&format!("n{i}"), spec(family, parent), v);
            }
            NodePlan::FixedParam { value } => {
                let id = gb.fixed_param(&format!("n{i}"), Value::Scalar(*value));
                sources.push(id);
            }
        }
    }
    gb.build().expect("generated graphs are valid")
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn generated_graphs_validate_and_order(plans in proptest::collection::vec(node_plan(), 1..8)) {
        let g = realize(&plans);
        prop_assert!(g.validate().is_empty());
        let order = g.topo_order();
        let pos: BTreeMap<_, _> = order.iter().enumerate().map(|(i, id)| (*id, i)).collect();
        for l in g.links() {
            prop_assert!(pos[&l.from] < pos[&l.to]);
        }
    }

    #[test]
    fn serialization_round_trips(plans in proptest::collection::vec(node_plan(), 1..8)) {
        let g = realize(&plans);
        let text = to_json_string(&serialize_model(&g));
        let back = build_graph(&parse_model(&text).unwrap(), &PredicateRegistry::standard()).unwrap();
        prop_assert_eq!(g, back);
    }

    #[test]
    fn traces_are_deterministic_and_detachment_free(
        plans in proptest::collection::vec(node_plan(), 1..8),
        seed in 0u64..1000,
    ) {
        let g = realize(&plans);
        let t1 = sample_trace(&g, seed).unwrap();
        let t2 = sample_trace(&g, seed).unwrap();
        prop_assert_eq!(&t1, &t2);

        // Flip every detached link to generative: traces stay identical.
        if g.links().iter().any(|l| l.kind == LinkKind::Detached) {
            let mut file = serialize_model(&g);
            for link in &mut file.links {
                if link.kind == "detached" {
                    link.kind = "generative".to_string();
                }
            }
            let flipped = build_graph(&file, &PredicateRegistry::standard()).unwrap();
            let t3 = sample_trace(&flipped, seed).unwrap();
            prop_assert_eq!(t1.values, t3.values);
            prop_assert_eq!(t1.path, t3.path);
        }
    }

    #[test]
    fn log_joint_is_finite_on_sampled_traces(
        plans in proptest::collection::vec(node_plan(), 1..8),
        seed in 0u64..1000,
    ) {
        let g = realize(&plans);
        let t = sample_trace(&g, seed).unwrap();
        let lp = gfg::factorize::log_joint(&g, &t).unwrap();
        prop_assert!(lp.is_finite());
    }

    #[test]
    fn posterior_blocks_partition_the_variable_nodes(
        plans in proptest::collection::vec(node_plan(), 1..8),
    ) {
        let g = realize(&plans);
        let posterior = gfg::factorize::factorize_posterior(&g);
        let mut seen = BTreeMap::new();
        for (i, block) in posterior.blocks.iter().enumerate() {
            for id in block.latents.iter().chain(block.observed.iter()) {
                prop_assert!(seen.insert(*id, i).is_none(), "node in two blocks");
            }
        }
        let total: usize = posterior.blocks.iter().map(|b| b.latents.len() + b.observed.len()).sum();
        let expected = g.nodes().iter().filter(|n| n.kind.is_variable()).count();
        prop_assert_eq!(total, expected);
    }

    #[test]
    fn categorical_family_in_dists_matches_support(
        logits in proptest::collection::vec(-2.0..2.0f64, 2..5),
        seed in 0u64..500,
    ) {
        let mut gb = GraphBuilder::new();
        let z = gb.latent("z", DistSpec::categorical(ParamSpec::lit_vec(logits.clone())));
        let g = gb.build().unwrap();
        prop_assert_eq!(g.support_size(z), Some(logits.len()));
        prop_assert_eq!(g.node(z).dist.as_ref().unwrap().family, Family::Categorical);
        let t = sample_trace(&g, seed).unwrap();
        let k = t.values[&z].as_index().unwrap();
        prop_assert!(k >= 0 && (k as usize) < logits.len());
    }
}
