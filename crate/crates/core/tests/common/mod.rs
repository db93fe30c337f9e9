//! Shared test models.
#![allow(dead_code)]

use std::collections::BTreeSet;

use gfg::graph::{DistSpec, GenerativeFlowGraph, GraphBuilder, NodeId, ParamSpec};
use gfg::value::Value;

pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// Prior N(0,1) via fixed parameter nodes, likelihood noise 1, one
/// observation at 2. Exact posterior N(1, 1/sqrt(2)).
pub fn conjugate_graph() -> (GenerativeFlowGraph, NodeId) {
    let mut gb = GraphBuilder::new();
    let mu = gb.fixed_param("theta_mu", Value::Scalar(0.0));
    let sd = gb.fixed_param("theta_sigma", Value::Scalar(1.0));
    let z = gb.latent("z", DistSpec::normal(ParamSpec::node(mu), ParamSpec::node(sd)));
    let x = gb.observed(
        "x",
        DistSpec::normal(ParamSpec::node(z), ParamSpec::lit(1.0)),
        Value::Scalar(2.0),
    );
    gb.collection("model", &[z, x, mu, sd]);
    (gb.build().unwrap(), z)
}

pub struct DetachedPair {
    pub graph: GenerativeFlowGraph,
    pub theta_a: NodeId,
    pub theta_b: NodeId,
    pub z_a: NodeId,
    pub z_b: NodeId,
    pub x_a: NodeId,
    pub x_b: NodeId,
}

/// Two chained blocks: upstream (theta_a, z_a, x_a) and downstream
/// (theta_b, z_b, x_b), with z_b depending on z_a and theta_a. When
/// `detached`, those two incoming links block all influence of the
/// downstream evidence on the upstream block.
pub fn detached_pair(detached: bool) -> DetachedPair {
    let mut gb = GraphBuilder::new();
    let theta_a = gb.variable_param("theta_a", Value::Scalar(0.0));
    let theta_b = gb.variable_param("theta_b", Value::Scalar(0.0));
    let z_a = gb.latent(
        "z_a",
        DistSpec::normal(ParamSpec::node(theta_a), ParamSpec::lit(1.0)),
    );
    let x_a = gb.observed(
        "x_a",
        DistSpec::normal(ParamSpec::node(z_a), ParamSpec::lit(1.0)),
        Value::Scalar(1.0),
    );
    let cross = |id: NodeId| {
        if detached {
            ParamSpec::detached(id)
        } else {
            ParamSpec::node(id)
        }
    };
    let z_b = gb.latent(
        "z_b",
        DistSpec::normal(
            ParamSpec::sum(vec![cross(z_a), ParamSpec::node(theta_b)]),
            ParamSpec::exp_of(cross(theta_a)),
        ),
    );
    let x_b = gb.observed(
        "x_b",
        DistSpec::normal(ParamSpec::node(z_b), ParamSpec::lit(1.0)),
        Value::Scalar(-0.5),
    );
    gb.collection("A", &[z_a, x_a, theta_a]);
    gb.collection("B", &[z_b, x_b, theta_b]);
    DetachedPair {
        graph: gb.build().unwrap(),
        theta_a,
        theta_b,
        z_a,
        z_b,
        x_a,
        x_b,
    }
}

/// The upstream block alone, bit-compatible with `detached_pair`'s A side.
pub fn block_a_alone() -> (GenerativeFlowGraph, NodeId) {
    let mut gb = GraphBuilder::new();
    let theta_a = gb.variable_param("theta_a", Value::Scalar(0.0));
    // Declared to keep node ids aligned with the paired graph.
    let _theta_b = gb.variable_param("theta_b", Value::Scalar(0.0));
    let z_a = gb.latent(
        "z_a",
        DistSpec::normal(ParamSpec::node(theta_a), ParamSpec::lit(1.0)),
    );
    let x_a = gb.observed(
        "x_a",
        DistSpec::normal(ParamSpec::node(z_a), ParamSpec::lit(1.0)),
        Value::Scalar(1.0),
    );
    gb.collection("A", &[z_a, x_a, theta_a]);
    (gb.build().unwrap(), z_a)
}

pub struct TwoBernoulli {
    pub graph: GenerativeFlowGraph,
    pub z_a: NodeId,
    pub z_b: NodeId,
}

/// Two one-latent collections coupled only through a shared observed
/// child; mild coupling keeps the mean-field optimum close to the exact
/// posterior.
pub fn two_bernoulli_shared_child() -> TwoBernoulli {
    let mut gb = GraphBuilder::new();
    let z_a = gb.latent("z_a", DistSpec::bernoulli(ParamSpec::lit(0.2)));
    let z_b = gb.latent("z_b", DistSpec::bernoulli(ParamSpec::lit(-0.3)));
    let _x_a = gb.observed(
        "x_a",
        DistSpec::bernoulli(ParamSpec::table(
            vec![Value::Scalar(logit(0.3)), Value::Scalar(logit(0.8))],
            vec![z_a],
        )),
        Value::Scalar(1.0),
    );
    // logit(x_g = 1 | z_a, z_b) = -0.6 + 0.5 z_a + 0.7 z_b
    let _x_g = gb.observed(
        "x_g",
        DistSpec::bernoulli(ParamSpec::table(
            vec![
                Value::Scalar(-0.6),
                Value::Scalar(0.1),
                Value::Scalar(-0.1),
                Value::Scalar(0.6),
            ],
            vec![z_a, z_b],
        )),
        Value::Scalar(1.0),
    );
    gb.collection("A", &[z_a]);
    gb.collection("B", &[z_b]);
    TwoBernoulli {
        graph: gb.build().unwrap(),
        z_a,
        z_b,
    }
}

/// Three independent discrete latents, coupled pairwise through two shared
/// observed children; three collections.
pub fn chain_three_shared() -> (GenerativeFlowGraph, [NodeId; 3]) {
    let mut gb = GraphBuilder::new();
    let z1 = gb.latent("z1", DistSpec::bernoulli(ParamSpec::lit(0.1)));
    let z2 = gb.latent("z2", DistSpec::categorical(ParamSpec::lit_vec(vec![0.0, 0.3, -0.2])));
    let z3 = gb.latent("z3", DistSpec::bernoulli(ParamSpec::lit(-0.4)));
    let t12: Vec<Value> = [
        -0.5, 0.0, 0.4, // z1 = 0
        0.0, 0.5, -0.3, // z1 = 1
    ]
    .iter()
    .map(|&v| Value::Scalar(v))
    .collect();
    let _x12 = gb.observed(
        "x12",
        DistSpec::bernoulli(ParamSpec::table(t12, vec![z1, z2])),
        Value::Scalar(1.0),
    );
    let t23: Vec<Value> = [
        0.2, -0.4, // z2 = 0
        -0.2, 0.3, // z2 = 1
        0.5, 0.0, // z2 = 2
    ]
    .iter()
    .map(|&v| Value::Scalar(v))
    .collect();
    let _x23 = gb.observed(
        "x23",
        DistSpec::bernoulli(ParamSpec::table(t23, vec![z2, z3])),
        Value::Scalar(0.0),
    );
    gb.collection("C1", &[z1]);
    gb.collection("C2", &[z2]);
    gb.collection("C3", &[z3]);
    (gb.build().unwrap(), [z1, z2, z3])
}

/// One four-state latent with a categorical observation; the variational
/// family can represent the exact posterior.
pub fn categorical_single() -> (GenerativeFlowGraph, NodeId) {
    let mut gb = GraphBuilder::new();
    let z = gb.latent(
        "z",
        DistSpec::categorical(ParamSpec::lit_vec(vec![0.2, -0.1, 0.4, 0.0])),
    );
    let table: Vec<Value> = (0..4)
        .map(|k| {
            // Observation prefers matching the latent state.
            let logits: Vec<f64> = (0..3)
                .map(|j| if j == k % 3 { 1.2 } else { -0.3 })
                .collect();
            Value::Vector(logits)
        })
        .collect();
    let _x = gb.observed(
        "x",
        DistSpec::categorical(ParamSpec::table(table, vec![z])),
        Value::Scalar(2.0),
    );
    gb.collection("model", &[z]);
    (gb.build().unwrap(), z)
}

/// Two Gaussian collections coupled by one global observed child whose
/// location is the sum of both latents.
pub fn gaussian_pair_shared_child() -> (GenerativeFlowGraph, NodeId, NodeId) {
    let mut gb = GraphBuilder::new();
    let z_a = gb.latent("z_a", DistSpec::normal(ParamSpec::lit(0.0), ParamSpec::lit(1.0)));
    let x_a = gb.observed(
        "x_a",
        DistSpec::normal(ParamSpec::node(z_a), ParamSpec::lit(1.0)),
        Value::Scalar(0.5),
    );
    let z_b = gb.latent("z_b", DistSpec::normal(ParamSpec::lit(0.0), ParamSpec::lit(1.0)));
    let x_b = gb.observed(
        "x_b",
        DistSpec::normal(ParamSpec::node(z_b), ParamSpec::lit(1.0)),
        Value::Scalar(-0.3),
    );
    let _x_g = gb.observed(
        "x_g",
        DistSpec::normal(
            ParamSpec::sum(vec![ParamSpec::node(z_a), ParamSpec::node(z_b)]),
            ParamSpec::lit(1.0),
        ),
        Value::Scalar(1.0),
    );
    gb.collection("A", &[z_a, x_a]);
    gb.collection("B", &[z_b, x_b]);
    (gb.build().unwrap(), z_a, z_b)
}

/// Latent-free parameter-learning model: many observations of N(theta, 1).
pub fn theta_learning(n: usize, theta_true: f64, seed: u64) -> (GenerativeFlowGraph, NodeId, f64) {
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(seed);
    let mut gb = GraphBuilder::new();
    let theta = gb.variable_param("theta", Value::Scalar(0.0));
    let mut sum = 0.0;
    let mut members = vec![theta];
    for i in 0..n {
        let y = theta_true + gfg::dist::standard_normal(&mut rng);
        sum += y;
        let x = gb.observed(
            &format!("y{{{i}}}"),
            DistSpec::normal(ParamSpec::node(theta), ParamSpec::lit(1.0)),
            Value::Scalar(y),
        );
        members.push(x);
    }
    gb.collection("data", &members);
    (gb.build().unwrap(), theta, sum / n as f64)
}

/// Branching model: a sign gate routes to one of two latents.
pub fn branch_graph() -> (GenerativeFlowGraph, NodeId, NodeId, NodeId) {
    let mut gb = GraphBuilder::new();
    let z = gb.latent("z", DistSpec::normal(ParamSpec::lit(0.0), ParamSpec::lit(1.0)));
    let gate = gb.branch("gate", "positive", &[z]);
    let z_pos = gb.latent("z_pos", DistSpec::normal(ParamSpec::lit(2.0), ParamSpec::lit(0.5)));
    let z_neg = gb.latent("z_neg", DistSpec::normal(ParamSpec::lit(-2.0), ParamSpec::lit(0.5)));
    gb.route(gate, 1, z_pos);
    gb.route(gate, 0, z_neg);
    let g = gb.build().unwrap();
    (g, z, z_pos, z_neg)
}

pub fn ids(names: &[&str], g: &GenerativeFlowGraph) -> BTreeSet<NodeId> {
    names.iter().map(|n| g.node_by_name(n).unwrap()).collect()
}
