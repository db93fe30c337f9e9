//! Idiom templates: structure, factorization views, composition, and the
//! control-as-inference fragment.

mod common;

use std::collections::{BTreeMap, BTreeSet};

use gfg::factorize::{expand_view, factorize_joint, factorize_view, render_joint, render_view};
use gfg::graph::{Family, GraphBuilder};
use gfg::idiom::{
    compose, instantiate_standalone, mdp_idiom, slam_idiom, transition_idiom, IdiomError,
    SlotParam, SlotSpec,
};
use gfg::oracle::{enumerate_posterior, logit, total_variation};
use gfg::value::Value;

fn gaussian_transition_slots() -> BTreeMap<String, SlotSpec> {
    BTreeMap::from([
        (
            "transition".to_string(),
            SlotSpec::new(
                Family::Normal,
                vec![
                    SlotParam::Sum(vec![
                        SlotParam::Role("state".to_string()),
                        SlotParam::Role("action".to_string()),
                    ]),
                    SlotParam::Const(Value::Scalar(1.0)),
                ],
            ),
        ),
        (
            "policy_prior".to_string(),
            SlotSpec::new(
                Family::Normal,
                vec![SlotParam::Const(Value::Scalar(0.0)), SlotParam::Const(Value::Scalar(1.0))],
            ),
        ),
    ])
}

/// Discrete slots matching the bundled navigation model: 3 grid cells, 2
/// actions, 3 binary map pixels.
fn discrete_slam_slots() -> BTreeMap<String, SlotSpec> {
    let s = 3usize;
    let mut transition = Vec::new();
    for state in 0..s {
        for action in 0..2usize {
            let target = if action == 0 { state.saturating_sub(1) } else { (state + 1).min(s - 1) };
            let mut probs = vec![0.0f64; s];
            if target == state {
                probs[state] = 1.0;
            } else {
                probs[target] = 0.8;
                probs[state] = 0.2;
            }
            transition.push(Value::Vector(
                probs.iter().map(|p| p.max(1e-12).ln()).collect(),
            ));
        }
    }
    let mut perception = Vec::new();
    for state in 0..s {
        for _action in 0..2usize {
            for m1 in 0..2usize {
                for m2 in 0..2usize {
                    for m3 in 0..2usize {
                        let m = [m1, m2, m3];
                        let p = if m[state] == 1 { 0.85 } else { 0.15 };
                        perception.push(Value::Scalar(logit(p)));
                    }
                }
            }
        }
    }
    BTreeMap::from([
        (
            "initial_state".to_string(),
            SlotSpec::new(Family::Categorical, vec![SlotParam::Const(Value::Vector(vec![0.0; s]))]),
        ),
        (
            "map_prior".to_string(),
            SlotSpec::new(Family::Bernoulli, vec![SlotParam::Const(Value::Scalar(0.0))]),
        ),
        (
            "policy_prior".to_string(),
            SlotSpec::new(Family::Categorical, vec![SlotParam::Const(Value::Vector(vec![0.0; 2]))]),
        ),
        (
            "transition".to_string(),
            SlotSpec::new(
                Family::Categorical,
                vec![SlotParam::Table {
                    entries: transition,
                    index_by: vec!["state".to_string(), "action".to_string()],
                    shape: vec![s, 2],
                }],
            ),
        ),
        (
            "perception".to_string(),
            SlotSpec::new(
                Family::Bernoulli,
                vec![SlotParam::Table {
                    entries: perception,
                    index_by: vec!["state".to_string(), "action".to_string(), "map".to_string()],
                    shape: vec![s, 2, 2, 2, 2],
                }],
            ),
        ),
    ])
}

fn mdp_slots(rewards: &[(usize, usize, f64)], states: usize) -> BTreeMap<String, SlotSpec> {
    let rmax = rewards.iter().map(|&(_, _, r)| r).fold(f64::NEG_INFINITY, f64::max);
    let mut table = vec![Value::Scalar(0.0); states * 2];
    for &(s, a, r) in rewards {
        table[s * 2 + a] = Value::Scalar(logit((r - rmax - 1.0).exp()));
    }
    // Soft transitions: at horizon one they marginalize out of the action
    // posterior exactly, and they keep the mean-field coupling between the
    // action and the next state mild.
    let mut transition = Vec::new();
    for s in 0..states {
        for a in 0..2usize {
            let favored = 0.45 + 0.1 / states as f64;
            let rest = (1.0 - favored) / (states as f64 - 1.0);
            let mut probs = vec![rest; states];
            probs[(s + a) % states] = favored;
            transition.push(Value::Vector(probs.iter().map(|p| p.ln()).collect()));
        }
    }
    BTreeMap::from([
        (
            "policy_prior".to_string(),
            SlotSpec::new(Family::Categorical, vec![SlotParam::Const(Value::Vector(vec![0.0; 2]))]),
        ),
        (
            "transition".to_string(),
            SlotSpec::new(
                Family::Categorical,
                vec![SlotParam::Table {
                    entries: transition,
                    index_by: vec!["state".to_string(), "action".to_string()],
                    shape: vec![states, 2],
                }],
            ),
        ),
        (
            "optimality".to_string(),
            SlotSpec::new(
                Family::Bernoulli,
                vec![SlotParam::Table {
                    entries: table,
                    index_by: vec!["state".to_string(), "action".to_string()],
                    shape: vec![states, 2],
                }],
            ),
        ),
    ])
}

#[test]
fn transition_idiom_yields_one_step_collection() {
    let template = transition_idiom(gaussian_transition_slots()).unwrap();
    let mut gb = GraphBuilder::new();
    let s0 = gb.latent(
        "s0",
        gfg::graph::DistSpec::normal(gfg::graph::ParamSpec::lit(0.0), gfg::graph::ParamSpec::lit(1.0)),
    );
    let out = template
        .instantiate(&mut gb, "t1", &BTreeMap::from([("state_in".to_string(), s0)]))
        .unwrap();
    let g = gb.build().unwrap();
    assert_eq!(g.latents().count(), 3, "input + action + next state");
    assert_eq!(g.collections().len(), 1);
    assert!(out.outputs.contains_key("state_out"));
}

#[test]
fn chained_transitions_render_the_expected_product() {
    let template = transition_idiom(gaussian_transition_slots()).unwrap();
    let mut gb = GraphBuilder::new();
    let s0 = gb.latent(
        "s0",
        gfg::graph::DistSpec::normal(gfg::graph::ParamSpec::lit(0.0), gfg::graph::ParamSpec::lit(1.0)),
    );
    let out1 = template
        .instantiate(&mut gb, "t1", &BTreeMap::from([("state_in".to_string(), s0)]))
        .unwrap();
    let _out2 = template
        .instantiate(
            &mut gb,
            "t2",
            &BTreeMap::from([("state_in".to_string(), out1.outputs["state_out"])]),
        )
        .unwrap();
    let g = gb.build().unwrap();
    let rendered = render_joint(&g, &factorize_joint(&g));
    assert_eq!(
        rendered,
        "p(s0) · p(t1.z_a{0}) · p(t1.z_s{1} | s0, t1.z_a{0}) · p(t2.z_a{0}) · p(t2.z_s{1} | t1.z_s{1}, t2.z_a{0})"
    );
}

#[test]
fn missing_slot_is_a_signature_error() {
    let mut slots = gaussian_transition_slots();
    slots.remove("policy_prior");
    assert!(matches!(
        transition_idiom(slots),
        Err(IdiomError::SlotSignature(_))
    ));
}

#[test]
fn slam_idiom_node_counts() {
    let template = slam_idiom(discrete_slam_slots(), 2, 3).unwrap();
    let g = instantiate_standalone(&template, "nav").unwrap();
    // 1 initial state + 3 map pixels + per step (state, action, percept).
    assert_eq!(g.latents().count(), 1 + 3 + 2 * 3);
    assert!(g.validate().is_empty());

    let degenerate = slam_idiom(discrete_slam_slots(), 1, 1);
    // Table shapes no longer match a single-pixel map.
    assert!(degenerate.is_ok());
    let mut slots = discrete_slam_slots();
    slots.insert(
        "perception".to_string(),
        SlotSpec::new(
            Family::Bernoulli,
            vec![SlotParam::Table {
                entries: (0..12).map(|_| Value::Scalar(0.0)).collect(),
                index_by: vec!["state".to_string(), "action".to_string(), "map".to_string()],
                shape: vec![3, 2, 2],
            }],
        ),
    );
    let t = slam_idiom(slots, 1, 1).unwrap();
    let g = instantiate_standalone(&t, "nav").unwrap();
    // initial state + one pixel + one step's action, state, and percept
    assert_eq!(g.latents().count(), 1 + 1 + 3);
}

#[test]
fn slam_factorization_views_match_the_three_abstraction_levels() {
    let template = slam_idiom(discrete_slam_slots(), 2, 3).unwrap();
    let g = instantiate_standalone(&template, "nav").unwrap();

    // Finest level: one factor per node, the per-step triple of action
    // prior, transition, and perception times the initial-state and
    // map-pixel priors.
    let atomic = factorize_joint(&g);
    assert_eq!(
        render_joint(&g, &atomic),
        "p(nav.z_a{0}) · p(nav.z_a{1}) · p(nav.z_m{1}) · p(nav.z_m{2}) · p(nav.z_m{3}) · \
         p(nav.z_p{1} | nav.z_a{0}, nav.z_m{1}, nav.z_m{2}, nav.z_m{3}, nav.z_s{1}) · \
         p(nav.z_p{2} | nav.z_a{1}, nav.z_m{1}, nav.z_m{2}, nav.z_m{3}, nav.z_s{2}) · \
         p(nav.z_s{0}) · p(nav.z_s{1} | nav.z_a{0}, nav.z_s{0}) · \
         p(nav.z_s{2} | nav.z_a{1}, nav.z_s{1})"
    );

    // Middle level: each step's state/action pair becomes one collection
    // factor conditioned on the previous state.
    let step_view: Vec<_> = ["nav.step{1}", "nav.step{2}"]
        .iter()
        .map(|n| g.collection_by_name(n).unwrap())
        .collect();
    let v2 = factorize_view(&g, &step_view).unwrap();
    assert_eq!(
        render_view(&g, &v2),
        "p(nav.z_a{0}, nav.z_s{1} | nav.z_s{0}) · p(nav.z_a{1}, nav.z_s{2} | nav.z_s{1}) · \
         p(nav.z_m{1}) · p(nav.z_m{2}) · p(nav.z_m{3}) · \
         p(nav.z_p{1} | nav.z_a{0}, nav.z_m{1}, nav.z_m{2}, nav.z_m{3}, nav.z_s{1}) · \
         p(nav.z_p{2} | nav.z_a{1}, nav.z_m{1}, nav.z_m{2}, nav.z_m{3}, nav.z_s{2}) · \
         p(nav.z_s{0})"
    );

    // Coarsest level: the whole state/action chain given the initial
    // state, and all perceptions given chain and map.
    let coarse: Vec<_> = ["nav.chain", "nav.perception"]
        .iter()
        .map(|n| g.collection_by_name(n).unwrap())
        .collect();
    let v1 = factorize_view(&g, &coarse).unwrap();
    assert_eq!(
        render_view(&g, &v1),
        "p(nav.z_a{0}, nav.z_a{1}, nav.z_s{1}, nav.z_s{2} | nav.z_s{0}) · \
         p(nav.z_m{1}) · p(nav.z_m{2}) · p(nav.z_m{3}) · \
         p(nav.z_p{1}, nav.z_p{2} | nav.z_a{0}, nav.z_a{1}, nav.z_m{1}, nav.z_m{2}, nav.z_m{3}, nav.z_s{1}, nav.z_s{2}) · \
         p(nav.z_s{0})"
    );

    // All three views expand to the same atomic factor set.
    let mut base = atomic.factors.clone();
    base.sort();
    assert_eq!(expand_view(&g, &v2), base);
    assert_eq!(expand_view(&g, &v1), base);
}

#[test]
fn mdp_posterior_action_is_softmax_of_rewards() {
    let rewards = [(0usize, 0usize, 0.0f64), (0, 1, 1.0), (1, 0, 0.5), (1, 1, 0.2)];
    let template = mdp_idiom(mdp_slots(&rewards, 2), 1).unwrap();
    let mut gb = GraphBuilder::new();
    let s0 = gb.fixed_param("s0", Value::Scalar(0.0));
    let out = template
        .instantiate(&mut gb, "plan", &BTreeMap::from([("state_in".to_string(), s0)]))
        .unwrap();
    let g = gb.build().unwrap();
    let action = g.node_by_name("plan.z_a{0}").unwrap();
    let _ = out;

    let exact = enumerate_posterior(&g).unwrap();
    let marginal = exact.marginal(action);
    // Known start state: the posterior over the action is the softmax of
    // the rewards at that state.
    let e0 = 0.0f64.exp();
    let e1 = 1.0f64.exp();
    assert!((marginal[&0] - e0 / (e0 + e1)).abs() < 1e-9);
    assert!((marginal[&1] - e1 / (e0 + e1)).abs() < 1e-9);
}

#[test]
fn equal_rewards_give_a_uniform_action_posterior() {
    let rewards = [(0usize, 0usize, 0.4f64), (0, 1, 0.4), (1, 0, 0.4), (1, 1, 0.4)];
    let template = mdp_idiom(mdp_slots(&rewards, 2), 1).unwrap();
    let mut gb = GraphBuilder::new();
    let s0 = gb.fixed_param("s0", Value::Scalar(0.0));
    template
        .instantiate(&mut gb, "plan", &BTreeMap::from([("state_in".to_string(), s0)]))
        .unwrap();
    let g = gb.build().unwrap();
    let action = g.node_by_name("plan.z_a{0}").unwrap();
    let marginal = enumerate_posterior(&g).unwrap().marginal(action);
    assert!((marginal[&0] - 0.5).abs() < 1e-12);
}

#[test]
fn mdp_factorization_has_one_optimality_factor_per_step() {
    let rewards = [(0usize, 0usize, 0.0f64), (0, 1, 1.0), (1, 0, 0.5), (1, 1, 0.2)];
    let template = mdp_idiom(mdp_slots(&rewards, 2), 3).unwrap();
    let mut gb = GraphBuilder::new();
    let s0 = gb.fixed_param("s0", Value::Scalar(0.0));
    template
        .instantiate(&mut gb, "plan", &BTreeMap::from([("state_in".to_string(), s0)]))
        .unwrap();
    let g = gb.build().unwrap();
    let joint = factorize_joint(&g);
    for tau in 0..3 {
        let x = g.node_by_name(&format!("plan.x_O{{{tau}}}")).unwrap();
        let f = joint.factors.iter().find(|f| f.target == x).unwrap();
        let s = g.node_by_name(&format!("plan.z_s{{{tau}}}")).map(Some).unwrap_or(None);
        let a = g.node_by_name(&format!("plan.z_a{{{tau}}}")).unwrap();
        assert!(f.parent_latents.contains(&a));
        if let Some(s) = s {
            assert!(f.parent_latents.contains(&s) || tau == 0);
        }
    }
}

#[test]
fn composition_binds_the_final_state_estimate() {
    let slam = slam_idiom(discrete_slam_slots(), 2, 3).unwrap();
    let rewards = [
        (0usize, 0usize, 0.2f64),
        (0, 1, 0.8),
        (1, 0, 0.0),
        (1, 1, 1.0),
        (2, 0, 0.6),
        (2, 1, 0.1),
    ];
    let mdp = mdp_idiom(mdp_slots(&rewards, 3), 2).unwrap();
    let g = compose(
        &slam,
        "nav",
        &mdp,
        "plan",
        &BTreeMap::from([("state_in".to_string(), "nav.z_s{2}".to_string())]),
    )
    .unwrap();
    assert!(g.validate().is_empty());
    // The planner's first factors condition on the navigation chain's
    // final state.
    let joint = factorize_joint(&g);
    let nav_out = g.node_by_name("nav.z_s{2}").unwrap();
    let first_action_child = g.node_by_name("plan.x_O{0}").unwrap();
    let f = joint.factors.iter().find(|f| f.target == first_action_child).unwrap();
    assert!(f.parent_latents.contains(&nav_out));
}

#[test]
fn unbound_input_is_a_binding_error() {
    let rewards = [(0usize, 0usize, 0.0f64), (0, 1, 1.0)];
    let mdp = mdp_idiom(mdp_slots(&rewards, 1), 1).unwrap();
    assert!(matches!(
        instantiate_standalone(&mdp, "plan"),
        Err(IdiomError::Binding(_))
    ));
    let slam = slam_idiom(discrete_slam_slots(), 1, 3).unwrap();
    assert!(matches!(
        compose(&slam, "nav", &mdp, "plan", &BTreeMap::new()),
        Err(IdiomError::Binding(_))
    ));
}

#[test]
fn self_composed_transitions_match_the_navigation_chain() {
    // Chaining the transition idiom twice is isomorphic to the state/action
    // chain inside the navigation fragment: same kinds, same families, and
    // the same link structure under the name correspondence.
    let slam = slam_idiom(discrete_slam_slots(), 2, 3).unwrap();
    let nav = instantiate_standalone(&slam, "nav").unwrap();

    let trans_slots = BTreeMap::from([
        ("transition".to_string(), discrete_slam_slots()["transition"].clone()),
        ("policy_prior".to_string(), discrete_slam_slots()["policy_prior"].clone()),
    ]);
    let template = transition_idiom(trans_slots).unwrap();
    let mut gb = GraphBuilder::new();
    let s0 = gb.latent(
        "s0",
        gfg::graph::DistSpec::categorical(gfg::graph::ParamSpec::lit_vec(vec![0.0; 3])),
    );
    let out1 = template
        .instantiate(&mut gb, "t1", &BTreeMap::from([("state_in".to_string(), s0)]))
        .unwrap();
    template
        .instantiate(
            &mut gb,
            "t2",
            &BTreeMap::from([("state_in".to_string(), out1.outputs["state_out"])]),
        )
        .unwrap();
    let chain = gb.build().unwrap();

    let correspondence = [
        ("s0", "nav.z_s{0}"),
        ("t1.z_a{0}", "nav.z_a{0}"),
        ("t1.z_s{1}", "nav.z_s{1}"),
        ("t2.z_a{0}", "nav.z_a{1}"),
        ("t2.z_s{1}", "nav.z_s{2}"),
    ];
    for (left, right) in correspondence {
        let l = chain.node_by_name(left).unwrap();
        let r = nav.node_by_name(right).unwrap();
        assert_eq!(chain.node(l).kind, nav.node(r).kind);
        assert_eq!(
            chain.node(l).dist.as_ref().map(|d| d.family),
            nav.node(r).dist.as_ref().map(|d| d.family)
        );
        let lp: BTreeSet<String> = chain
            .flow_parents(l)
            .map(|(p, _)| chain.name(p).to_string())
            .collect();
        let rp: BTreeSet<String> = nav
            .flow_parents(r)
            .map(|(p, _)| nav.name(p).to_string())
            .collect();
        let translate = |n: &str| -> String {
            correspondence
                .iter()
                .find(|(a, _)| *a == n)
                .map(|(_, b)| b.to_string())
                .unwrap_or_else(|| n.to_string())
        };
        let lp: BTreeSet<String> = lp.iter().map(|n| translate(n)).collect();
        assert_eq!(lp, rp, "parents of {left} vs {right}");
    }
}

#[test]
fn idiom_instantiation_is_deterministic() {
    let slam = slam_idiom(discrete_slam_slots(), 2, 3).unwrap();
    let g1 = instantiate_standalone(&slam, "nav").unwrap();
    let g2 = instantiate_standalone(&slam, "nav").unwrap();
    assert_eq!(g1, g2);
}

#[test]
fn every_instantiated_idiom_validates() {
    let slam = slam_idiom(discrete_slam_slots(), 3, 3).unwrap();
    assert!(instantiate_standalone(&slam, "a").unwrap().validate().is_empty());
    let rewards = [(0usize, 0usize, 0.0f64), (0, 1, 1.0), (1, 0, 0.5), (1, 1, 0.2)];
    let mdp = mdp_idiom(mdp_slots(&rewards, 2), 2).unwrap();
    let mut gb = GraphBuilder::new();
    let s0 = gb.fixed_param("s0", Value::Scalar(1.0));
    mdp.instantiate(&mut gb, "p", &BTreeMap::from([("state_in".to_string(), s0)])).unwrap();
    assert!(gb.build().unwrap().validate().is_empty());
}

#[test]
fn bound_state_cardinality_is_checked() {
    // A two-state planner cannot consume a three-state estimate.
    let rewards = [(0usize, 0usize, 0.0f64), (0, 1, 1.0), (1, 0, 0.5), (1, 1, 0.2)];
    let mdp2 = mdp_idiom(mdp_slots(&rewards, 2), 1).unwrap();
    let mut gb = GraphBuilder::new();
    let s0 = gb.latent(
        "s0",
        gfg::graph::DistSpec::categorical(gfg::graph::ParamSpec::lit_vec(vec![0.0; 3])),
    );
    let err = mdp2.instantiate(&mut gb, "plan", &BTreeMap::from([("state_in".to_string(), s0)]));
    assert!(matches!(err, Err(IdiomError::Binding(_))));
}

#[test]
fn svi_matches_enumeration_on_the_planning_model() {
    use gfg::svi::{fit, FactorParams, SviConfig, VariationalFactor};
    let rewards = [(0usize, 0usize, 0.0f64), (0, 1, 1.0), (1, 0, 0.5), (1, 1, 0.2)];
    let template = mdp_idiom(mdp_slots(&rewards, 2), 1).unwrap();
    let mut gb = GraphBuilder::new();
    let s0 = gb.fixed_param("s0", Value::Scalar(0.0));
    template
        .instantiate(&mut gb, "plan", &BTreeMap::from([("state_in".to_string(), s0)]))
        .unwrap();
    let g = gb.build().unwrap();
    let action = g.node_by_name("plan.z_a{0}").unwrap();

    let exact = enumerate_posterior(&g).unwrap().marginal(action);
    let q = VariationalFactor::per_latent(&g).unwrap();
    let cfg = SviConfig { steps: 3000, mc_samples: 32, seed: 2, ..Default::default() };
    let fitted = fit(&g, &q, &cfg).unwrap();
    let FactorParams::Categorical { logits } = &fitted.phi[&action] else { panic!() };
    let probs = gfg::dist::softmax_values(
        &logits.iter().map(|&l| gfg::autodiff::Scalar::constant(l)).collect::<Vec<_>>(),
    );
    let fitted_marginal: BTreeMap<i64, f64> =
        probs.iter().enumerate().map(|(k, p)| (k as i64, *p)).collect();
    let tv = total_variation(&fitted_marginal, &exact).unwrap();
    assert!(tv <= 0.05, "tv {tv}");
}
