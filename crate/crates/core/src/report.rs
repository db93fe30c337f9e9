//! Structured reports of inference runs: a machine-readable JSON form and
//! a human-readable text rendering. Reports embed the seed and are
//! byte-identical across re-runs with the same seed.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::graph::GenerativeFlowGraph;
use crate::smp::{SmpConfig, SmpResult};
use crate::svi::{FactorParams, FitResult, SviConfig};
use crate::value::Value;

/// Posterior parameters of one latent, in user-facing form.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family")]
pub enum PosteriorReport {
    #[serde(rename = "normal")]
    Normal { mean: f64, std: f64 },
    #[serde(rename = "categorical")]
    Categorical { probs: Vec<f64> },
}

impl PosteriorReport {
    fn from_factor(f: &FactorParams) -> Self {
        match f {
            FactorParams::Normal { mean, log_std } => PosteriorReport::Normal {
                mean: *mean,
                std: log_std.exp(),
            },
            FactorParams::Categorical { logits } => {
                let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let exps: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
                let z: f64 = exps.iter().sum();
                PosteriorReport::Categorical {
                    probs: exps.into_iter().map(|e| e / z).collect(),
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    pub kind: String,
    pub seed: u64,
    pub steps: usize,
    pub status: String,
    pub posterior: BTreeMap<String, PosteriorReport>,
    pub theta: BTreeMap<String, Value>,
    pub final_objective: f64,
    pub elbo_trace: Vec<f64>,
    pub elbo_smoothed: Vec<f64>,
}

/// Builds the report for a plain variational fit.
pub fn fit_report(g: &GenerativeFlowGraph, result: &FitResult, cfg: &SviConfig) -> FitReport {
    FitReport {
        kind: "fit".to_string(),
        seed: cfg.seed,
        steps: cfg.steps,
        status: "completed".to_string(),
        posterior: result
            .phi
            .iter()
            .map(|(id, f)| (g.name(*id).to_string(), PosteriorReport::from_factor(f)))
            .collect(),
        theta: result
            .theta
            .iter()
            .map(|(id, v)| (g.name(*id).to_string(), v.clone()))
            .collect(),
        final_objective: result.final_objective,
        elbo_trace: result.elbo_trace.clone(),
        elbo_smoothed: result.elbo_smoothed.clone(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CollectionReport {
    pub posterior: BTreeMap<String, PosteriorReport>,
    pub theta: BTreeMap<String, Value>,
    pub final_objective: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub sweep: usize,
    pub max_delta: f64,
    pub messages: usize,
    pub bytes: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SmpReport {
    pub kind: String,
    pub seed: u64,
    pub mode: String,
    pub status: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub warning: Option<String>,
    pub sweeps: usize,
    pub collections: BTreeMap<String, CollectionReport>,
    pub messages_sent: usize,
    pub bytes_sent: usize,
    pub sweep_log: Vec<SweepReport>,
}

/// Builds the report for a message-passing run.
pub fn smp_report(g: &GenerativeFlowGraph, result: &SmpResult, cfg: &SmpConfig) -> SmpReport {
    let collections = result
        .state
        .iter()
        .map(|(cid, payload)| {
            let name = g.collection(*cid).name.clone();
            (
                name,
                CollectionReport {
                    posterior: payload
                        .phi
                        .iter()
                        .map(|(id, f)| (g.name(*id).to_string(), PosteriorReport::from_factor(f)))
                        .collect(),
                    theta: payload
                        .theta
                        .iter()
                        .map(|(id, v)| (g.name(*id).to_string(), v.clone()))
                        .collect(),
                    final_objective: result.objectives.get(cid).copied().unwrap_or(f64::NAN),
                },
            )
        })
        .collect();
    SmpReport {
        kind: "smp".to_string(),
        seed: cfg.svi.seed,
        mode: match cfg.mode {
            crate::smp::Mode::Serial => "serial".to_string(),
            crate::smp::Mode::Parallel => "parallel".to_string(),
        },
        status: if result.converged {
            "converged".to_string()
        } else {
            "max-sweeps".to_string()
        },
        warning: result.warning.clone(),
        sweeps: result.sweeps_run,
        collections,
        messages_sent: result.sweep_log.iter().map(|s| s.messages).sum(),
        bytes_sent: result.sweep_log.iter().map(|s| s.bytes).sum(),
        sweep_log: result
            .sweep_log
            .iter()
            .map(|s| SweepReport {
                sweep: s.sweep,
                max_delta: s.max_delta,
                messages: s.messages,
                bytes: s.bytes,
            })
            .collect(),
    }
}

fn render_posteriors(out: &mut String, posterior: &BTreeMap<String, PosteriorReport>, indent: &str) {
    for (name, p) in posterior {
        match p {
            PosteriorReport::Normal { mean, std } => {
                out.push_str(&format!("{indent}{name}: normal(mean={mean:.6}, std={std:.6})\n"));
            }
            PosteriorReport::Categorical { probs } => {
                let text: Vec<String> = probs.iter().map(|p| format!("{p:.6}")).collect();
                out.push_str(&format!("{indent}{name}: categorical([{}])\n", text.join(", ")));
            }
        }
    }
}

/// Human-readable rendering of a fit report.
pub fn fit_report_text(r: &FitReport) -> String {
    let mut out = String::new();
    out.push_str(&format!(
        "variational fit: {} steps, seed {}, status {}\n",
        r.steps, r.seed, r.status
    ));
    out.push_str(&format!("final objective estimate: {:.6}\n", r.final_objective));
    out.push_str("posterior:\n");
    render_posteriors(&mut out, &r.posterior, "  ");
    if !r.theta.is_empty() {
        out.push_str("parameters:\n");
        for (name, v) in &r.theta {
            out.push_str(&format!("  {name}: {}\n", serde_json::to_string(v).unwrap()));
        }
    }
    if !r.elbo_smoothed.is_empty() {
        let first = r.elbo_smoothed.first().unwrap();
        let last = r.elbo_smoothed.last().unwrap();
        out.push_str(&format!(
            "objective trace (smoothed): {first:.4} -> {last:.4} over {} steps\n",
            r.elbo_smoothed.len()
        ));
    }
    out
}

/// Human-readable rendering of a message-passing report.
pub fn smp_report_text(r: &SmpReport) -> String {
    let mut out = String::new();
    out.push_str(&format!(
        "message passing ({}): seed {}, status {}, {} sweeps\n",
        r.mode, r.seed, r.status, r.sweeps
    ));
    if let Some(w) = &r.warning {
        out.push_str(&format!("warning: {w}\n"));
    }
    out.push_str(&format!(
        "communication: {} messages, {} bytes\n",
        r.messages_sent, r.bytes_sent
    ));
    for (name, c) in &r.collections {
        out.push_str(&format!(
            "collection {name} (final objective {:.6}):\n",
            c.final_objective
        ));
        render_posteriors(&mut out, &c.posterior, "  ");
        for (pname, v) in &c.theta {
            out.push_str(&format!("  {pname} = {}\n", serde_json::to_string(v).unwrap()));
        }
    }
    for s in &r.sweep_log {
        out.push_str(&format!(
            "sweep {}: max delta {:.6}, {} messages, {} bytes\n",
            s.sweep, s.max_delta, s.messages, s.bytes
        ));
    }
    out
}
