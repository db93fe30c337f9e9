//! Message passing over factorized variational problems.
//!
//! Each node collection owns a sub-problem: maximize the local dual
//! objective over its latents and parameters while every other collection's
//! variational factors stay frozen. Solutions circulate as messages
//! carrying the sender's current variational parameters; receivers draw
//! their own parent samples from the frozen factors. Sweeps repeat until
//! the variational parameters stop moving or the sweep budget runs out;
//! convergence is not guaranteed for general problems, so hitting the
//! budget is reported as a warning, not an error.
//!
//! Within a sweep, sub-problems update in collection order and later
//! sub-problems see earlier updates from the same sweep. The parallel
//! scheduler reproduces exactly that data flow: a worker waits for
//! same-sweep messages from lower-id dependencies and uses last-sweep
//! messages from higher-id ones, so serial and parallel runs are
//! bit-identical under the per-(seed, collection, sweep) seeding scheme.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::mpsc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{backward, Scalar, Tape};
use crate::factorize::{FactorizeError, PosteriorPartition};
use crate::graph::{CollectionId, GenerativeFlowGraph, NodeId, NodeKind};
use crate::svi::{
    FactorParams, FitResult, Owner, Packing, ParamKey, Sampling, Scope, SviConfig, SviError,
    VariationalFactor,
};
use crate::value::Value;

#[derive(Debug, Error)]
pub enum SmpError {
    #[error("missing message from collection {0}")]
    MissingMessage(String),
    #[error(transparent)]
    Svi(#[from] SviError),
    #[error(transparent)]
    Factorize(#[from] FactorizeError),
    #[error("worker channel failure: {0}")]
    Channel(String),
}

/// One collection's local variational problem.
#[derive(Debug, Clone)]
pub struct SubProblem {
    pub collection: CollectionId,
    /// Latents owned by this collection.
    pub latents: BTreeSet<NodeId>,
    /// Variable parameters owned by this collection.
    pub params: BTreeSet<NodeId>,
    /// Observed nodes local to this collection.
    pub observed: BTreeSet<NodeId>,
    /// Parent collections with their detached-only flags.
    pub parents: BTreeSet<(CollectionId, bool)>,
    /// Global observed children of the owned latents.
    pub global_children: BTreeSet<NodeId>,
    /// Collections whose frozen factors the local objective needs:
    /// parents plus co-parents of shared global observed nodes.
    pub frozen_needed: BTreeSet<CollectionId>,
    /// Initial variational factor over the owned latents.
    pub q_init: VariationalFactor,
}

/// The parameter packet exchanged between solvers: the sender's
/// variational factors and its current variable-parameter estimates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MessagePayload {
    pub phi: BTreeMap<NodeId, FactorParams>,
    pub theta: BTreeMap<NodeId, Value>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Message {
    pub sender: CollectionId,
    pub iteration: usize,
    pub payload: MessagePayload,
}

impl Message {
    /// Serialized payload size, reported in the communication log.
    pub fn byte_len(&self) -> usize {
        serde_json::to_vec(&self.payload).map(|v| v.len()).unwrap_or(0)
    }
}

#[derive(Debug, Copy, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum Mode {
    Serial,
    Parallel,
}

/// How stale a worker's view of its peers may get in parallel mode.
#[derive(Debug, Copy, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum Staleness {
    /// Sweep-aligned: reproduces the serial schedule bit-exactly.
    Barrier,
    /// Workers use whatever they have received; nondeterministic.
    Unbounded,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SmpConfig {
    pub mode: Mode,
    pub sweeps_max: usize,
    /// Convergence threshold on the largest absolute parameter change per
    /// sweep; objective values are too noisy to gate on.
    pub convergence_eps: f64,
    pub svi: SviConfig,
    pub staleness: Staleness,
}

impl Default for SmpConfig {
    fn default() -> Self {
        SmpConfig {
            mode: Mode::Serial,
            sweeps_max: 8,
            convergence_eps: 0.02,
            svi: SviConfig::default(),
            staleness: Staleness::Barrier,
        }
    }
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Deterministic per-solve seed, so any (collection, sweep) cell can be
/// re-executed in isolation.
pub fn per_sweep_seed(base: u64, collection: CollectionId, sweep: usize) -> u64 {
    splitmix64(base ^ splitmix64(((collection.0 as u64) << 32) ^ sweep as u64))
}

/// Builds one sub-problem per collection in the partition.
pub fn build_subproblems(
    g: &GenerativeFlowGraph,
    partition: &PosteriorPartition,
) -> Result<Vec<SubProblem>, SmpError> {
    let mut out = Vec::new();
    for &cid in &partition.collections {
        let latents: BTreeSet<NodeId> = partition
            .latent_owner
            .iter()
            .filter(|(_, c)| **c == cid)
            .map(|(n, _)| *n)
            .collect();
        let params: BTreeSet<NodeId> = partition
            .param_owner
            .iter()
            .filter(|(n, c)| {
                **c == cid && matches!(g.node(**n).kind, NodeKind::VariableParam(_))
            })
            .map(|(n, _)| *n)
            .collect();
        let observed: BTreeSet<NodeId> = partition
            .observed_owner
            .iter()
            .filter(|(_, c)| **c == cid)
            .map(|(n, _)| *n)
            .collect();
        let parents: BTreeSet<(CollectionId, bool)> = partition
            .parent_map
            .get(&cid)
            .cloned()
            .unwrap_or_default();
        let global_children: BTreeSet<NodeId> = partition
            .global_observed
            .iter()
            .copied()
            .filter(|&x| {
                g.flow_parents(x)
                    .any(|(p, _)| partition.latent_owner.get(&p) == Some(&cid))
            })
            .collect();
        let mut frozen_needed: BTreeSet<CollectionId> =
            parents.iter().map(|(c, _)| *c).collect();
        for &x in &global_children {
            for (p, _) in g.flow_parents(x) {
                if let Some(&c) = partition.latent_owner.get(&p) {
                    if c != cid {
                        frozen_needed.insert(c);
                    }
                }
            }
        }
        let q_init = VariationalFactor::mean_field(g, Owner::Collection(cid), &latents)?;
        out.push(SubProblem {
            collection: cid,
            latents,
            params,
            observed,
            parents,
            global_children,
            frozen_needed,
            q_init,
        });
    }
    Ok(out)
}

/// Current per-collection estimates (the frozen view a solver sees).
pub type State = BTreeMap<CollectionId, MessagePayload>;

/// Initial state: neutral variational factors and the graph's stored
/// parameter initializations.
pub fn initial_state(g: &GenerativeFlowGraph, subproblems: &[SubProblem]) -> State {
    subproblems
        .iter()
        .map(|sp| {
            let theta: BTreeMap<NodeId, Value> = sp
                .params
                .iter()
                .map(|&p| (p, g.param_value(p).cloned().expect("param has a value")))
                .collect();
            (
                sp.collection,
                MessagePayload {
                    phi: sp.q_init.factors.clone(),
                    theta,
                },
            )
        })
        .collect()
}

fn scope_for(
    g: &GenerativeFlowGraph,
    sp: &SubProblem,
    frozen: &State,
) -> Result<(Scope, BTreeMap<NodeId, FactorParams>), SmpError> {
    for c in &sp.frozen_needed {
        if !frozen.contains_key(c) {
            return Err(SmpError::MissingMessage(g.collection(*c).name.clone()));
        }
    }
    let mut frozen_latents: BTreeMap<NodeId, FactorParams> = BTreeMap::new();
    let mut frozen_theta: BTreeMap<NodeId, Value> = BTreeMap::new();
    for (cid, payload) in frozen {
        if *cid == sp.collection {
            continue;
        }
        for (n, f) in &payload.phi {
            frozen_latents.insert(*n, f.clone());
        }
        for (n, v) in &payload.theta {
            frozen_theta.insert(*n, v.clone());
        }
    }
    let mut score: BTreeSet<NodeId> = sp.latents.clone();
    score.extend(sp.observed.iter().copied());
    score.extend(sp.global_children.iter().copied());
    let own_phi: BTreeMap<NodeId, FactorParams> = frozen
        .get(&sp.collection)
        .map(|p| p.phi.clone())
        .unwrap_or_else(|| sp.q_init.factors.clone());
    let scope = Scope::scoped(
        g,
        score,
        sp.latents.clone(),
        frozen_latents,
        frozen_theta,
        sp.params.clone(),
    );
    Ok((scope, own_phi))
}

/// Monte-Carlo estimate of the local dual objective of one sub-problem:
/// parent latents and co-parents of shared global observed nodes are drawn
/// from their frozen factors, the owned latents from the current local
/// factor, and the integrand sums the global children's log density, the
/// local model's log density, and minus the local entropy term.
pub fn local_objective(
    g: &GenerativeFlowGraph,
    sp: &SubProblem,
    frozen: &State,
    cfg: &SviConfig,
) -> Result<f64, SmpError> {
    let (scope, own_phi) = scope_for(g, sp, frozen)?;
    let theta_values = frozen
        .get(&sp.collection)
        .map(|p| p.theta.clone())
        .unwrap_or_default();
    let (packing, flat) = crate::svi::Packing::new(g, &scope.theta, &theta_values, &own_phi);
    let bound = packing.bind(None, &flat);
    let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(cfg.seed);
    use rand::SeedableRng;
    let n = cfg.mc_samples.max(1);
    let mut total = 0.0;
    for _ in 0..n {
        let eval =
            crate::svi::evaluate_sample(g, &scope, &bound, crate::svi::Sampling::Hybrid, &mut rng)?;
        total += eval.objective.value();
    }
    Ok(total / n as f64)
}

/// Mean gradient of one sub-problem's objective with the given outside
/// parameters taped alongside the local ones.
///
/// Quantities that reach the objective only over detached links or through
/// frozen factors receive exactly zero: detached links stop the backward
/// pass, and frozen factors are sampled without recording a path. Flipping
/// such a link to generative makes the corresponding entry nonzero.
pub fn local_objective_gradient_wrt(
    g: &GenerativeFlowGraph,
    sp: &SubProblem,
    frozen: &State,
    cfg: &SviConfig,
    extra_theta: &std::collections::BTreeSet<NodeId>,
    extra_phi: &[CollectionId],
) -> Result<BTreeMap<ParamKey, f64>, SmpError> {
    use rand::SeedableRng;
    let (mut scope, own_phi) = scope_for(g, sp, frozen)?;
    for id in extra_theta {
        scope.theta.insert(*id);
        scope.frozen_theta.remove(id);
    }
    let mut theta_values = frozen
        .get(&sp.collection)
        .map(|p| p.theta.clone())
        .unwrap_or_default();
    for id in extra_theta {
        for payload in frozen.values() {
            if let Some(v) = payload.theta.get(id) {
                theta_values.insert(*id, v.clone());
            }
        }
    }
    let (packing, flat) = Packing::new(g, &scope.theta, &theta_values, &own_phi);
    let keys = packing.keys();
    let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(cfg.seed);
    let n = cfg.mc_samples.max(1);
    let mut acc: BTreeMap<ParamKey, f64> = BTreeMap::new();
    for _ in 0..n {
        let tape = Tape::new();
        let bound = packing.bind(Some(&tape), &flat);
        // Leaves for the chosen frozen collections' factor parameters: the
        // frozen sampler reads their values, so the tape sees no path into
        // them.
        let mut extra_leaves: Vec<(ParamKey, Scalar)> = Vec::new();
        let mut scope_step = scope.clone();
        for cid in extra_phi {
            let Some(payload) = frozen.get(cid) else { continue };
            for (nid, f) in &payload.phi {
                match f {
                    FactorParams::Normal { mean, log_std } => {
                        let lm = tape.var(*mean);
                        let ls = tape.var(*log_std);
                        scope_step.frozen.insert(
                            *nid,
                            FactorParams::Normal { mean: lm.value(), log_std: ls.value() },
                        );
                        extra_leaves.push((ParamKey::PhiMean(*nid), lm));
                        extra_leaves.push((ParamKey::PhiLogStd(*nid), ls));
                    }
                    FactorParams::Categorical { logits } => {
                        let leaves: Vec<Scalar> = logits.iter().map(|&l| tape.var(l)).collect();
                        scope_step.frozen.insert(
                            *nid,
                            FactorParams::Categorical {
                                logits: leaves.iter().map(|s| s.value()).collect(),
                            },
                        );
                        for (k, s) in leaves.into_iter().enumerate() {
                            extra_leaves.push((ParamKey::PhiLogit(*nid, k), s));
                        }
                    }
                }
            }
        }
        let eval = crate::svi::evaluate_sample(g, &scope_step, &bound, Sampling::Hybrid, &mut rng)?;
        let grad = backward(&eval.objective);
        for (key, leaf) in keys.iter().zip(bound.leaves.iter()) {
            *acc.entry(key.clone()).or_insert(0.0) += grad.wrt(leaf) / n as f64;
        }
        for (key, leaf) in &extra_leaves {
            *acc.entry(key.clone()).or_insert(0.0) += grad.wrt(leaf) / n as f64;
        }
    }
    Ok(acc)
}

/// Solves one sub-problem by stochastic variational inference against the
/// frozen state, warm-starting from that state's own entry.
pub fn solve_subproblem(
    g: &GenerativeFlowGraph,
    sp: &SubProblem,
    frozen: &State,
    cfg: &SviConfig,
) -> Result<FitResult, SmpError> {
    let (scope, own_phi) = scope_for(g, sp, frozen)?;
    let theta_values = frozen
        .get(&sp.collection)
        .map(|p| p.theta.clone())
        .unwrap_or_default();
    Ok(crate::svi::fit_scoped(g, scope, own_phi, &theta_values, cfg)?)
}

/// Importance-style Monte-Carlo estimate of the approximate marginal
/// likelihood of the global observed nodes given the local evidence:
/// frozen factors supply the other collections' latents, the local prior
/// supplies the owned latents, and the local observed nodes reweight the
/// draws. Diagnostic only; constant with respect to the local factors.
pub fn approx_marginal_likelihood(
    g: &GenerativeFlowGraph,
    sp: &SubProblem,
    frozen: &State,
    partition: &PosteriorPartition,
    n: usize,
    seed: u64,
) -> Result<f64, SmpError> {
    use rand::SeedableRng;
    if partition.global_observed.is_empty() {
        return Ok(1.0);
    }
    let mut frozen_latents: BTreeMap<NodeId, FactorParams> = BTreeMap::new();
    let mut frozen_theta: BTreeMap<NodeId, Value> = BTreeMap::new();
    for (cid, payload) in frozen {
        if *cid != sp.collection {
            for (nid, f) in &payload.phi {
                frozen_latents.insert(*nid, f.clone());
            }
        }
        // Parameters freeze at their current estimates, own ones included:
        // nothing is optimized by this diagnostic.
        for (nid, v) in &payload.theta {
            frozen_theta.insert(*nid, v.clone());
        }
    }
    let mut score: BTreeSet<NodeId> = partition.global_observed.clone();
    score.extend(sp.observed.iter().copied());
    score.extend(sp.latents.iter().copied());
    let scope = Scope::scoped(
        g,
        score,
        BTreeSet::new(),
        frozen_latents.clone(),
        frozen_theta,
        BTreeSet::new(),
    );

    let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(seed);
    let mut numerator = 0.0;
    let mut denominator = 0.0;
    for _ in 0..n.max(1) {
        let mut latent_fn = |id: NodeId,
                             dist: Option<&crate::dist::Dist>|
         -> Result<Option<crate::graph::Resolved>, crate::graph::GraphError> {
            if let Some(f) = frozen_latents.get(&id) {
                return Ok(Some(f.sample(&mut rng)));
            }
            let Some(dist) = dist else { return Ok(None) };
            let v = dist.sample(&mut rng)?;
            Ok(Some(match dist.is_discrete() {
                true => crate::graph::Resolved::Index(v.as_index().expect("integral")),
                false => crate::graph::Resolved::from_value(&v),
            }))
        };
        let theta_fn = |id: NodeId| -> Option<crate::graph::Resolved> {
            scope.frozen_theta.get(&id).map(crate::graph::Resolved::from_value)
        };
        let out = crate::graph::trace::forward_walk(
            g,
            Some(&scope.needed),
            &theta_fn,
            &mut latent_fn,
        )
        .map_err(SviError::from)?;
        let mut log_global = 0.0;
        let mut log_local_obs = 0.0;
        for (id, dist, realized) in &out.scored {
            if partition.global_observed.contains(id) {
                log_global += dist.log_prob(realized).map_err(SviError::from)?.value();
            } else if sp.observed.contains(id) {
                log_local_obs += dist.log_prob(realized).map_err(SviError::from)?.value();
            }
        }
        let w = log_local_obs.exp();
        numerator += w * log_global.exp();
        denominator += w;
    }
    if denominator == 0.0 {
        return Ok(0.0);
    }
    Ok(numerator / denominator)
}

/// Record of one sweep for the communication log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRecord {
    pub sweep: usize,
    pub max_delta: f64,
    pub messages: usize,
    pub bytes: usize,
}

/// Full outcome of a message-passing run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SmpResult {
    pub state: State,
    pub sweeps_run: usize,
    pub converged: bool,
    /// Set when the sweep budget ran out before convergence.
    pub warning: Option<String>,
    pub sweep_log: Vec<SweepRecord>,
    /// Every message broadcast, in deterministic (sweep, sender) order;
    /// replaying this log serially reproduces the final state.
    pub message_log: Vec<Message>,
    /// Final local objective value per collection.
    pub objectives: BTreeMap<CollectionId, f64>,
}

fn flat_of(state: &State) -> Vec<f64> {
    let mut out = Vec::new();
    for payload in state.values() {
        for f in payload.phi.values() {
            match f {
                FactorParams::Normal { mean, log_std } => out.extend([*mean, *log_std]),
                FactorParams::Categorical { logits } => out.extend(logits.iter().copied()),
            }
        }
        for v in payload.theta.values() {
            match v {
                Value::Scalar(x) => out.push(*x),
                Value::Vector(xs) => out.extend(xs.iter().copied()),
                Value::Matrix(m) => out.extend(m.iter().flatten().copied()),
            }
        }
    }
    out
}

fn max_delta(a: &State, b: &State) -> f64 {
    flat_of(a)
        .iter()
        .zip(flat_of(b).iter())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

/// Runs sweeps of coupled sub-problem solves until the variational
/// parameters converge or the sweep budget is exhausted.
pub fn run_message_passing(
    g: &GenerativeFlowGraph,
    subproblems: &[SubProblem],
    cfg: &SmpConfig,
) -> Result<SmpResult, SmpError> {
    match cfg.mode {
        Mode::Serial => run_serial(g, subproblems, cfg),
        Mode::Parallel => run_parallel(g, subproblems, cfg),
    }
}

fn finish(
    state: State,
    sweeps_run: usize,
    converged: bool,
    sweep_log: Vec<SweepRecord>,
    message_log: Vec<Message>,
    objectives: BTreeMap<CollectionId, f64>,
    sweeps_max: usize,
) -> SmpResult {
    let warning = (!converged).then(|| {
        format!("no convergence within {sweeps_max} sweeps; message passing is not guaranteed to converge for general problems")
    });
    SmpResult {
        state,
        sweeps_run,
        converged,
        warning,
        sweep_log,
        message_log,
        objectives,
    }
}

fn run_serial(
    g: &GenerativeFlowGraph,
    subproblems: &[SubProblem],
    cfg: &SmpConfig,
) -> Result<SmpResult, SmpError> {
    let mut order: Vec<&SubProblem> = subproblems.iter().collect();
    order.sort_by_key(|sp| sp.collection);
    let mut state = initial_state(g, subproblems);
    let mut sweep_log = Vec::new();
    let mut message_log = Vec::new();
    let mut objectives = BTreeMap::new();
    let mut converged = false;
    let mut sweeps_run = 0;

    for sweep in 1..=cfg.sweeps_max {
        sweeps_run = sweep;
        let prev = state.clone();
        let mut bytes = 0usize;
        let mut count = 0usize;
        for sp in &order {
            let mut local_cfg = cfg.svi.clone();
            local_cfg.seed = per_sweep_seed(cfg.svi.seed, sp.collection, sweep);
            let fit = solve_subproblem(g, sp, &state, &local_cfg)?;
            objectives.insert(sp.collection, fit.final_objective);
            let payload = MessagePayload {
                phi: fit.phi,
                theta: fit.theta,
            };
            let msg = Message {
                sender: sp.collection,
                iteration: sweep,
                payload: payload.clone(),
            };
            bytes += msg.byte_len();
            count += 1;
            message_log.push(msg);
            state.insert(sp.collection, payload);
        }
        let delta = max_delta(&state, &prev);
        sweep_log.push(SweepRecord {
            sweep,
            max_delta: delta,
            messages: count,
            bytes,
        });
        if delta < cfg.convergence_eps {
            converged = true;
            break;
        }
    }
    Ok(finish(
        state,
        sweeps_run,
        converged,
        sweep_log,
        message_log,
        objectives,
        cfg.sweeps_max,
    ))
}

enum WorkerIn {
    Peer(Message),
    Proceed(usize),
    Stop,
}

struct WorkerOut {
    sender: CollectionId,
    payload: MessagePayload,
    objective: f64,
    error: Option<String>,
}

fn run_parallel(
    g: &GenerativeFlowGraph,
    subproblems: &[SubProblem],
    cfg: &SmpConfig,
) -> Result<SmpResult, SmpError> {
    let mut order: Vec<&SubProblem> = subproblems.iter().collect();
    order.sort_by_key(|sp| sp.collection);
    let init = initial_state(g, subproblems);

    let (result_tx, result_rx) = mpsc::channel::<WorkerOut>();
    let mut worker_txs: BTreeMap<CollectionId, mpsc::Sender<WorkerIn>> = BTreeMap::new();
    let mut worker_rxs: BTreeMap<CollectionId, mpsc::Receiver<WorkerIn>> = BTreeMap::new();
    for sp in &order {
        let (tx, rx) = mpsc::channel::<WorkerIn>();
        worker_txs.insert(sp.collection, tx);
        worker_rxs.insert(sp.collection, rx);
    }

    std::thread::scope(|scope_handle| -> Result<SmpResult, SmpError> {
        for sp in &order {
            let rx = worker_rxs.remove(&sp.collection).expect("worker channel");
            let tx = result_tx.clone();
            let init = init.clone();
            let cfg = cfg.clone();
            let sp: SubProblem = (*sp).clone();
            scope_handle.spawn(move || {
                worker_loop(g, sp, init, cfg, rx, tx);
            });
        }
        drop(result_tx);

        let mut state = init.clone();
        let mut sweep_log = Vec::new();
        let mut message_log = Vec::new();
        let mut objectives = BTreeMap::new();
        let mut converged = false;
        let mut sweeps_run = 0;
        let mut failure: Option<SmpError> = None;

        'sweeps: for sweep in 1..=cfg.sweeps_max {
            sweeps_run = sweep;
            let prev = state.clone();
            for tx in worker_txs.values() {
                let _ = tx.send(WorkerIn::Proceed(sweep));
            }
            let mut results: BTreeMap<CollectionId, WorkerOut> = BTreeMap::new();
            for _ in 0..order.len() {
                match result_rx.recv() {
                    Ok(out) => {
                        if let Some(e) = &out.error {
                            failure = Some(SmpError::Channel(format!(
                                "worker for {} failed: {e}",
                                g.collection(out.sender).name
                            )));
                            break 'sweeps;
                        }
                        // Relay to every other worker right away so
                        // same-sweep dependents can start.
                        let msg = Message {
                            sender: out.sender,
                            iteration: sweep,
                            payload: out.payload.clone(),
                        };
                        for (cid, tx) in &worker_txs {
                            if *cid != out.sender {
                                let _ = tx.send(WorkerIn::Peer(msg.clone()));
                            }
                        }
                        results.insert(out.sender, out);
                    }
                    Err(_) => {
                        failure = Some(SmpError::Channel("worker exited early".into()));
                        break 'sweeps;
                    }
                }
            }
            // Deterministic log order regardless of arrival order.
            let mut bytes = 0usize;
            let mut count = 0usize;
            for (cid, out) in results {
                objectives.insert(cid, out.objective);
                let msg = Message {
                    sender: cid,
                    iteration: sweep,
                    payload: out.payload.clone(),
                };
                bytes += msg.byte_len();
                count += 1;
                message_log.push(msg);
                state.insert(cid, out.payload);
            }
            let delta = max_delta(&state, &prev);
            sweep_log.push(SweepRecord {
                sweep,
                max_delta: delta,
                messages: count,
                bytes,
            });
            if delta < cfg.convergence_eps {
                converged = true;
                break;
            }
        }

        for tx in worker_txs.values() {
            let _ = tx.send(WorkerIn::Stop);
        }
        if let Some(e) = failure {
            return Err(e);
        }
        Ok(finish(
            state,
            sweeps_run,
            converged,
            sweep_log,
            message_log,
            objectives,
            cfg.sweeps_max,
        ))
    })
}

fn worker_loop(
    g: &GenerativeFlowGraph,
    sp: SubProblem,
    init: State,
    cfg: SmpConfig,
    rx: mpsc::Receiver<WorkerIn>,
    tx: mpsc::Sender<WorkerOut>,
) {
    // Versioned peer views: (collection, sweep) -> payload. Sweep 0 holds
    // the shared initialization.
    let mut versions: BTreeMap<(CollectionId, usize), MessagePayload> = BTreeMap::new();
    for (cid, payload) in &init {
        versions.insert((*cid, 0), payload.clone());
    }
    let mut own = init
        .get(&sp.collection)
        .cloned()
        .expect("own initial payload");
    let deps: BTreeSet<CollectionId> = sp.frozen_needed.clone();

    loop {
        match rx.recv() {
            Err(_) | Ok(WorkerIn::Stop) => return,
            Ok(WorkerIn::Peer(msg)) => {
                versions.insert((msg.sender, msg.iteration), msg.payload);
            }
            Ok(WorkerIn::Proceed(sweep)) => {
                // Wait for same-sweep updates from lower-id dependencies
                // unless staleness is unbounded.
                if cfg.staleness == Staleness::Barrier {
                    let waiting: Vec<CollectionId> = deps
                        .iter()
                        .copied()
                        .filter(|d| *d < sp.collection)
                        .collect();
                    while waiting
                        .iter()
                        .any(|d| !versions.contains_key(&(*d, sweep)))
                    {
                        match rx.recv() {
                            Err(_) | Ok(WorkerIn::Stop) => return,
                            Ok(WorkerIn::Peer(msg)) => {
                                versions.insert((msg.sender, msg.iteration), msg.payload);
                            }
                            Ok(WorkerIn::Proceed(_)) => {}
                        }
                    }
                }
                // Assemble the frozen view for this sweep: same-sweep for
                // lower ids, previous sweep for higher ids.
                let mut frozen: State = BTreeMap::new();
                frozen.insert(sp.collection, own.clone());
                for d in &deps {
                    let version = if cfg.staleness == Staleness::Unbounded {
                        (0..=sweep)
                            .rev()
                            .find(|s| versions.contains_key(&(*d, *s)))
                            .unwrap_or(0)
                    } else if *d < sp.collection {
                        sweep
                    } else {
                        sweep - 1
                    };
                    match versions.get(&(*d, version)) {
                        Some(p) => {
                            frozen.insert(*d, p.clone());
                        }
                        None => {
                            let _ = tx.send(WorkerOut {
                                sender: sp.collection,
                                payload: own.clone(),
                                objective: f64::NAN,
                                error: Some(format!(
                                    "missing message from {} at sweep {version}",
                                    g.collection(*d).name
                                )),
                            });
                            return;
                        }
                    }
                }
                let mut local_cfg = cfg.svi.clone();
                local_cfg.seed = per_sweep_seed(cfg.svi.seed, sp.collection, sweep);
                match solve_subproblem(g, &sp, &frozen, &local_cfg) {
                    Ok(fit) => {
                        own = MessagePayload {
                            phi: fit.phi,
                            theta: fit.theta,
                        };
                        let _ = tx.send(WorkerOut {
                            sender: sp.collection,
                            payload: own.clone(),
                            objective: fit.final_objective,
                            error: None,
                        });
                    }
                    Err(e) => {
                        let _ = tx.send(WorkerOut {
                            sender: sp.collection,
                            payload: own.clone(),
                            objective: f64::NAN,
                            error: Some(e.to_string()),
                        });
                        return;
                    }
                }
            }
        }
    }
}

/// Serially re-executes the solves recorded in a message log; with the
/// original graph, sub-problems, and configuration this reproduces the
/// final parameters bit-identically.
pub fn replay(
    g: &GenerativeFlowGraph,
    subproblems: &[SubProblem],
    cfg: &SmpConfig,
    log: &[Message],
) -> Result<State, SmpError> {
    let by_id: BTreeMap<CollectionId, &SubProblem> =
        subproblems.iter().map(|sp| (sp.collection, sp)).collect();
    let mut state = initial_state(g, subproblems);
    for msg in log {
        let sp = by_id
            .get(&msg.sender)
            .ok_or_else(|| SmpError::MissingMessage(format!("{:?}", msg.sender)))?;
        let mut local_cfg = cfg.svi.clone();
        local_cfg.seed = per_sweep_seed(cfg.svi.seed, msg.sender, msg.iteration);
        let fit = solve_subproblem(g, sp, &state, &local_cfg)?;
        state.insert(
            msg.sender,
            MessagePayload {
                phi: fit.phi,
                theta: fit.theta,
            },
        );
    }
    Ok(state)
}
