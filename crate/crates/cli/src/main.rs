//! Command-line surface: model loading, validation, symbolic
//! factorization, DOT rendering, inference runs, and posterior reports.
//!
//! Exit codes: 0 on success, 1 when a model fails validation, 2 on any
//! runtime error (bad files, unsupported queries, diverged runs).

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use gfg::factorize::{
    factorize_joint, factorize_posterior, partition_for_smp, render_joint, render_posterior,
};
use gfg::graph::model::{build_graph, parse_model};
use gfg::graph::{GenerativeFlowGraph, GraphError, PredicateRegistry};
use gfg::oracle;
use gfg::render::render_dot;
use gfg::report::{fit_report, fit_report_text, smp_report, smp_report_text};
use gfg::smp;
use gfg::svi;
use gfg::value::Value;

#[derive(Parser)]
#[command(name = "gfg", version, about = "Inference engine for generative flow graphs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Check a model file against every structural invariant.
    Validate { model: PathBuf },
    /// Print the symbolic joint and posterior factorizations.
    Factorize {
        model: PathBuf,
        /// Emit machine-readable JSON instead of plain text.
        #[arg(long)]
        json: bool,
        /// Render an additional collection-level view (comma-separated
        /// collection names); may be repeated.
        #[arg(long)]
        view: Vec<String>,
    },
    /// Emit the graph as DOT text.
    Render {
        model: PathBuf,
        /// Write to this path instead of standard output.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Fit variational factors and model parameters jointly.
    #[command(name = "infer-svi")]
    InferSvi {
        model: PathBuf,
        #[command(flatten)]
        svi: SviArgs,
        #[arg(long)]
        json: bool,
        /// Also write the JSON report to this path.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run message passing over the model's collections.
    #[command(name = "infer-smp")]
    InferSmp {
        model: PathBuf,
        #[arg(long, value_enum, default_value_t = ModeArg::Serial)]
        mode: ModeArg,
        /// Sweep budget.
        #[arg(long, default_value_t = 8)]
        sweeps: usize,
        /// Convergence threshold on the largest parameter change per sweep.
        #[arg(long, default_value_t = 0.02)]
        eps: f64,
        #[arg(long, value_enum, default_value_t = StalenessArg::Barrier)]
        staleness: StalenessArg,
        #[command(flatten)]
        svi: SviArgs,
        #[arg(long)]
        json: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print exact posteriors for enumerable or conjugate models.
    Oracle {
        model: PathBuf,
        #[arg(long)]
        json: bool,
    },
    /// Re-render a saved JSON report as text.
    Report { result: PathBuf },
}

#[derive(Args)]
struct SviArgs {
    /// Optimization steps (per sub-problem solve for message passing).
    #[arg(long, default_value_t = 2000)]
    steps: usize,
    /// Root seed; every random draw derives from it.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Learning rate for the constant schedule.
    #[arg(long, default_value_t = 1e-2)]
    lr: f64,
    /// Monte-Carlo samples per step.
    #[arg(long, default_value_t = 8)]
    mc_samples: usize,
    /// `constant` or `rm:<a>,<kappa>` (the decaying schedule
    /// `a * step^(-kappa)`).
    #[arg(long, default_value = "constant")]
    schedule: String,
    #[arg(long, value_enum, default_value_t = OptimizerArg::Adaptive)]
    optimizer: OptimizerArg,
}

#[derive(Copy, Clone, ValueEnum)]
enum ModeArg {
    Serial,
    Parallel,
}

#[derive(Copy, Clone, ValueEnum)]
enum StalenessArg {
    Barrier,
    Unbounded,
}

#[derive(Copy, Clone, ValueEnum)]
enum OptimizerArg {
    Adaptive,
    Sga,
}

enum CliError {
    Validation(String),
    Runtime(String),
}

impl From<GraphError> for CliError {
    fn from(e: GraphError) -> Self {
        match e {
            GraphError::Invalid(report) => CliError::Validation(report.to_string()),
            other => CliError::Runtime(other.to_string()),
        }
    }
}

macro_rules! runtime_from {
    ($ty:ty) => {
        impl From<$ty> for CliError {
            fn from(e: $ty) -> Self {
                CliError::Runtime(e.to_string())
            }
        }
    };
}
runtime_from!(std::io::Error);
runtime_from!(serde_json::Error);
runtime_from!(gfg::svi::SviError);
runtime_from!(gfg::oracle::OracleError);

impl From<gfg::factorize::FactorizeError> for CliError {
    fn from(e: gfg::factorize::FactorizeError) -> Self {
        match e {
            gfg::factorize::FactorizeError::Graph(g) => g.into(),
            other => CliError::Runtime(other.to_string()),
        }
    }
}

impl From<gfg::smp::SmpError> for CliError {
    fn from(e: gfg::smp::SmpError) -> Self {
        CliError::Runtime(e.to_string())
    }
}

fn load(path: &Path) -> Result<GenerativeFlowGraph, CliError> {
    let text = std::fs::read_to_string(path)?;
    let file = parse_model(&text)?;
    Ok(build_graph(&file, &PredicateRegistry::standard())?)
}

fn svi_config(args: &SviArgs) -> Result<svi::SviConfig, CliError> {
    let lr_schedule = if args.schedule == "constant" {
        svi::LrSchedule::Constant(args.lr)
    } else if let Some(spec) = args.schedule.strip_prefix("rm:") {
        let (a, kappa) = spec
            .split_once(',')
            .ok_or_else(|| CliError::Runtime("schedule syntax: rm:<a>,<kappa>".into()))?;
        let schedule = svi::LrSchedule::RobbinsMonro {
            a: a.parse().map_err(|_| CliError::Runtime(format!("bad rate factor {a}")))?,
            kappa: kappa
                .parse()
                .map_err(|_| CliError::Runtime(format!("bad decay exponent {kappa}")))?,
        };
        if !svi::validate_robbins_monro(&schedule) {
            return Err(CliError::Runtime(
                "schedule violates the step-size conditions: kappa must lie in (0.5, 1]".into(),
            ));
        }
        schedule
    } else {
        return Err(CliError::Runtime(format!("unknown schedule {}", args.schedule)));
    };
    Ok(svi::SviConfig {
        steps: args.steps,
        mc_samples: args.mc_samples,
        lr_schedule,
        seed: args.seed,
        optimizer: match args.optimizer {
            OptimizerArg::Adaptive => svi::OptimizerKind::AdaptiveMoment,
            OptimizerArg::Sga => svi::OptimizerKind::Sga,
        },
        trace_params: false,
    })
}

fn emit(text: &str, json: Option<&str>, use_json: bool, out: Option<&Path>) -> Result<(), CliError> {
    if use_json {
        println!("{}", json.unwrap_or("{}"));
    } else {
        print!("{text}");
    }
    if let (Some(path), Some(json)) = (out, json) {
        std::fs::write(path, json)?;
    }
    Ok(())
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Validate { model } => {
            let text = std::fs::read_to_string(&model)?;
            let file = parse_model(&text)?;
            match build_graph(&file, &PredicateRegistry::standard()) {
                Ok(g) => {
                    println!(
                        "valid: {} nodes, {} links, {} collections",
                        g.nodes().len(),
                        g.links().len(),
                        g.collections().len()
                    );
                    Ok(())
                }
                Err(GraphError::Invalid(report)) => {
                    println!("invalid:\n{report}");
                    Err(CliError::Validation(String::new()))
                }
                Err(other) => Err(other.into()),
            }
        }
        Command::Factorize { model, json, view } => {
            let g = load(&model)?;
            let joint = factorize_joint(&g);
            let posterior = factorize_posterior(&g);
            let mut views = Vec::new();
            for spec in &view {
                let ids = spec
                    .split(',')
                    .map(|name| {
                        g.collection_by_name(name.trim())
                            .ok_or_else(|| CliError::Runtime(format!("unknown collection {name}")))
                    })
                    .collect::<Result<Vec<_>, _>>()?;
                let factors = gfg::factorize::factorize_view(&g, &ids)?;
                views.push((spec.clone(), gfg::factorize::render_view(&g, &factors)));
            }
            if json {
                let mut doc = BTreeMap::new();
                doc.insert("joint".to_string(), render_joint(&g, &joint));
                doc.insert("posterior".to_string(), render_posterior(&g, &posterior));
                for (spec, rendered) in &views {
                    doc.insert(format!("view:{spec}"), rendered.clone());
                }
                println!("{}", serde_json::to_string_pretty(&doc)?);
            } else {
                println!("joint:     {}", render_joint(&g, &joint));
                println!("posterior: {}", render_posterior(&g, &posterior));
                for (spec, rendered) in &views {
                    println!("view [{spec}]: {rendered}");
                }
            }
            Ok(())
        }
        Command::Render { model, out } => {
            let g = load(&model)?;
            let dot = render_dot(&g);
            match out {
                Some(path) => std::fs::write(path, dot)?,
                None => print!("{dot}"),
            }
            Ok(())
        }
        Command::InferSvi { model, svi: args, json, out } => {
            let g = load(&model)?;
            let cfg = svi_config(&args)?;
            let q = svi::VariationalFactor::per_latent(&g)?;
            let result = svi::fit(&g, &q, &cfg)?;
            let report = fit_report(&g, &result, &cfg);
            let json_text = serde_json::to_string_pretty(&report)?;
            emit(&fit_report_text(&report), Some(&json_text), json, out.as_deref())
        }
        Command::InferSmp {
            model,
            mode,
            sweeps,
            eps,
            staleness,
            svi: args,
            json,
            out,
        } => {
            let g = load(&model)?;
            let cfg = smp::SmpConfig {
                mode: match mode {
                    ModeArg::Serial => smp::Mode::Serial,
                    ModeArg::Parallel => smp::Mode::Parallel,
                },
                sweeps_max: sweeps,
                convergence_eps: eps,
                svi: svi_config(&args)?,
                staleness: match staleness {
                    StalenessArg::Barrier => smp::Staleness::Barrier,
                    StalenessArg::Unbounded => smp::Staleness::Unbounded,
                },
            };
            let partition = partition_for_smp(&g)?;
            let subproblems = smp::build_subproblems(&g, &partition)?;
            let result = smp::run_message_passing(&g, &subproblems, &cfg)?;
            let report = smp_report(&g, &result, &cfg);
            let json_text = serde_json::to_string_pretty(&report)?;
            emit(&smp_report_text(&report), Some(&json_text), json, out.as_deref())
        }
        Command::Oracle { model, json } => {
            let g = load(&model)?;
            oracle_command(&g, json)
        }
        Command::Report { result } => {
            let text = std::fs::read_to_string(&result)?;
            let value: serde_json::Value = serde_json::from_str(&text)?;
            match value.get("kind").and_then(|k| k.as_str()) {
                Some("fit") => {
                    let report: gfg::report::FitReport = serde_json::from_str(&text)?;
                    print!("{}", fit_report_text(&report));
                    Ok(())
                }
                Some("smp") => {
                    let report: gfg::report::SmpReport = serde_json::from_str(&text)?;
                    print!("{}", smp_report_text(&report));
                    Ok(())
                }
                other => Err(CliError::Runtime(format!(
                    "unrecognized report kind {other:?}"
                ))),
            }
        }
    }
}

/// Exact posteriors: enumeration for all-discrete models, the closed-form
/// update for single-latent conjugate normal chains.
fn oracle_command(g: &GenerativeFlowGraph, json: bool) -> Result<(), CliError> {
    let all_discrete = g.latents().all(|n| {
        n.dist
            .as_ref()
            .map(|d| d.family.is_discrete())
            .unwrap_or(false)
    });
    if all_discrete && g.latents().count() > 0 {
        let table = oracle::enumerate_posterior(g)?;
        let mut marginals: BTreeMap<String, BTreeMap<String, f64>> = BTreeMap::new();
        for latent in g.latents() {
            let m = table.marginal(latent.id);
            marginals.insert(
                latent.name.clone(),
                m.into_iter().map(|(k, v)| (k.to_string(), v)).collect(),
            );
        }
        if json {
            let doc = serde_json::json!({
                "kind": "oracle",
                "method": "enumeration",
                "log_evidence": table.log_evidence,
                "marginals": marginals,
            });
            println!("{}", serde_json::to_string_pretty(&doc)?);
        } else {
            println!("exact posterior by enumeration (log evidence {:.6}):", table.log_evidence);
            for (name, m) in &marginals {
                let body: Vec<String> = m.iter().map(|(k, v)| format!("{k}: {v:.6}")).collect();
                println!("  {name}: {{{}}}", body.join(", "));
            }
        }
        return Ok(());
    }

    if let Some((latent, prior_mean, prior_std, noise, obs)) = conjugate_chain(g) {
        let (mean, std) = oracle::conjugate_gaussian_posterior(prior_mean, prior_std, noise, &obs);
        let log_evidence =
            oracle::conjugate_gaussian_log_evidence(prior_mean, prior_std, noise, &obs);
        if json {
            let doc = serde_json::json!({
                "kind": "oracle",
                "method": "conjugate",
                "log_evidence": log_evidence,
                "posterior": { g.name(latent): { "mean": mean, "std": std } },
            });
            println!("{}", serde_json::to_string_pretty(&doc)?);
        } else {
            println!("exact posterior by conjugate update (log evidence {log_evidence:.6}):");
            println!("  {}: normal(mean={mean:.6}, std={std:.6})", g.name(latent));
        }
        return Ok(());
    }

    Err(CliError::Runtime(
        "model is not eligible for an exact oracle: needs all-discrete latents or a single conjugate normal chain".into(),
    ))
}

/// Matches one normal latent with constant parameters whose observed
/// children are normal with the latent as location and one shared constant
/// noise scale.
fn conjugate_chain(
    g: &GenerativeFlowGraph,
) -> Option<(gfg::graph::NodeId, f64, f64, f64, Vec<f64>)> {
    use gfg::graph::{Family, ParamSource};
    let mut latents = g.latents();
    let z = latents.next()?;
    if latents.next().is_some() {
        return None;
    }
    let dist = z.dist.as_ref()?;
    if dist.family != Family::Normal {
        return None;
    }
    let constant = |p: &ParamSource| -> Option<f64> {
        match p {
            ParamSource::Const(Value::Scalar(v)) => Some(*v),
            ParamSource::Node(id) => g.param_value(*id)?.as_scalar(),
            _ => None,
        }
    };
    let prior_mean = constant(&dist.params[0])?;
    let prior_std = constant(&dist.params[1])?;
    let mut noise: Option<f64> = None;
    let mut obs = Vec::new();
    for node in g.observed() {
        let d = node.dist.as_ref()?;
        if d.family != Family::Normal || d.params[0] != ParamSource::Node(z.id) {
            return None;
        }
        let sigma = constant(&d.params[1])?;
        match noise {
            None => noise = Some(sigma),
            Some(n) if (n - sigma).abs() < 1e-12 => {}
            _ => return None,
        }
        match &node.kind {
            gfg::graph::NodeKind::Observed(v) => obs.push(v.as_scalar()?),
            _ => unreachable!(),
        }
    }
    if obs.is_empty() {
        noise = Some(1.0);
    }
    Some((z.id, prior_mean, prior_std, noise?, obs))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Validation(msg)) => {
            if !msg.is_empty() {
                eprintln!("{msg}");
            }
            ExitCode::from(1)
        }
        Err(CliError::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}
