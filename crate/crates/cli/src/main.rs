//! `fedstats`: batch entry points over the library.
//!
//! Exit codes: 0 success, 1 a query was denied or a round gated, 2 usage or
//! configuration error.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use fedstats::accountant::{Accountant, BudgetConfig, Decision, QueryCost};
use fedstats::amplification::{amplification_curve, curve_to_csv};
use fedstats::engine::synthetic::SimulationConfig;
use fedstats::engine::{histogram_csv, phrases_csv, run_discovery, to_canonical_json, DiscoveryStatus};
use fedstats::ldp::{LocalEpsilon, OheMode};
use fedstats_api::ApiConfig;

#[derive(Parser)]
#[command(name = "fedstats", version, about = "Private federated statistics: simulations and tools")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Format {
    Csv,
    Json,
}

#[derive(Subcommand)]
enum Command {
    /// Certified aggregate epsilon over a grid of local epsilons and cohorts.
    AmplificationCurve {
        /// JSON document `{eps0s, ns, delta, renyi}`; overrides the flags.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, value_delimiter = ',', default_value = "1,3,5,8")]
        eps0: Vec<f64>,
        #[arg(long, value_delimiter = ',', default_value = "1000,2000,5000,10000,20000,50000,100000,1000000")]
        n: Vec<u64>,
        #[arg(long, default_value_t = 1e-6)]
        delta: f64,
        /// Add the symmetric Rényi column (cohorts up to 20000).
        #[arg(long)]
        renyi: bool,
        #[arg(long, value_enum, default_value = "csv")]
        format: Format,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Adaptive n-gram discovery on a synthetic fleet.
    Discover {
        /// Simulation document (plan, fleet, mode).
        #[arg(long)]
        config: Option<PathBuf>,
        /// Overrides the fleet seed.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, value_enum, default_value = "json")]
        format: Format,
        /// Writes report.json, phrases.csv and one histogram CSV per round.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Replays a query script against a device budget table.
    AccountantDemo {
        /// JSON document `{budget, queries}`; the keyboard tables when absent.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "csv")]
        format: Format,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Serves the /v1 HTTP API.
    Serve {
        /// Service limits (`ApiConfig` JSON).
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value = "127.0.0.1:8080")]
        addr: String,
    },
}

#[derive(Debug)]
enum Failure {
    Usage(String),
    Denied(String),
}

type Outcome = Result<(), Failure>;

fn usage(e: impl std::fmt::Display) -> Failure {
    Failure::Usage(e.to_string())
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, Failure> {
    let text = fs::read_to_string(path).map_err(|e| usage(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| usage(format!("{}: {e}", path.display())))
}

fn emit(out: Option<&Path>, name: &str, body: &str) -> Outcome {
    match out {
        Some(dir) => {
            fs::create_dir_all(dir).map_err(usage)?;
            fs::write(dir.join(name), body).map_err(usage)
        }
        None => {
            print!("{body}");
            Ok(())
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CurveConfig {
    eps0s: Vec<f64>,
    ns: Vec<u64>,
    delta: f64,
    #[serde(default)]
    renyi: bool,
}

fn cmd_curve(cfg: CurveConfig, format: Format, out: Option<&Path>) -> Outcome {
    let rows = amplification_curve(&cfg.eps0s, &cfg.ns, cfg.delta, cfg.renyi).map_err(usage)?;
    match format {
        Format::Csv => emit(out, "curve.csv", &curve_to_csv(&rows)),
        Format::Json => emit(out, "curve.json", &(to_canonical_json(&rows) + "\n")),
    }
}

#[derive(Serialize)]
struct DiscoveryReport<'a> {
    config: &'a SimulationConfig,
    state: &'a fedstats::engine::DiscoveryState,
}

fn cmd_discover(mut cfg: SimulationConfig, seed: Option<u64>, format: Format, out: Option<&Path>) -> Outcome {
    if let Some(s) = seed {
        cfg.fleet.seed = s;
    }
    let (mut engine, mut fleet, _) = cfg.build().map_err(usage)?;
    let state = run_discovery(&cfg.plan, &mut engine, &mut fleet).map_err(usage)?;
    let report = to_canonical_json(&DiscoveryReport {
        config: &cfg,
        state: &state,
    }) + "\n";
    let phrases = phrases_csv(&state);
    match out {
        Some(dir) => {
            emit(out, "report.json", &report)?;
            emit(out, "phrases.csv", &phrases)?;
            for (i, outcome) in state.history.iter().enumerate() {
                if let Some(r) = outcome.published() {
                    emit(Some(dir), &format!("round{}.csv", i + 1), &histogram_csv(r))?;
                }
            }
        }
        None => match format {
            Format::Json => emit(None, "", &report)?,
            Format::Csv => emit(None, "", &phrases)?,
        },
    }
    match state.status {
        DiscoveryStatus::Gated => Err(Failure::Denied("a discovery round was gated".into())),
        _ => Ok(()),
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct AccountantScript {
    budget: BudgetConfig,
    queries: Vec<QueryCost>,
}

/// The keyboard tables replaying an age query over its field budget, an
/// n-gram query that fits, and a second n-gram query once the analysis
/// report is spent.
fn keyboard_script() -> AccountantScript {
    let eps = |v: f64| LocalEpsilon::new(v).expect("positive");
    let m = QueryCost::closed_form_cohort(eps(5.0), 0.3, 1e-7).expect("closed form applies");
    let cost = |field: &str, e0: f64, e: f64| QueryCost {
        local_epsilon: eps(e0),
        aggregate_epsilon: e,
        aggregate_delta: 1e-7,
        fields_accessed: [field.to_string()].into(),
        min_cohort: m,
        mode: OheMode::Asymmetric,
    };
    AccountantScript {
        budget: BudgetConfig::keyboard_example(),
        queries: vec![cost("age", 2.0, 0.4), cost("ngram", 5.0, 0.3), cost("ngram", 5.0, 0.1)],
    }
}

#[derive(Serialize)]
struct TraceRow {
    index: usize,
    fields: Vec<String>,
    local_epsilon: f64,
    aggregate_epsilon: f64,
    decision: Decision,
    used_epsilon: f64,
    used_reports: u64,
}

fn cmd_accountant(script: AccountantScript, format: Format, out: Option<&Path>) -> Outcome {
    let mut acc = Accountant::new(script.budget).map_err(usage)?;
    let mut trace = Vec::with_capacity(script.queries.len());
    for (index, cost) in script.queries.iter().enumerate() {
        let decision = acc.check_and_charge(cost).map_err(usage)?;
        let snap = acc.snapshot();
        trace.push(TraceRow {
            index,
            fields: cost.fields_accessed.iter().cloned().collect(),
            local_epsilon: cost.local_epsilon.value(),
            aggregate_epsilon: cost.aggregate_epsilon,
            decision,
            used_epsilon: snap.analysis.used_epsilon,
            used_reports: snap.analysis.used_reports,
        });
    }
    let body = match format {
        Format::Json => to_canonical_json(&trace) + "\n",
        Format::Csv => {
            let mut s = String::from("index,fields,local_epsilon,aggregate_epsilon,decision,check,detail,used_epsilon,used_reports\n");
            for t in &trace {
                let (decision, check, detail) = match &t.decision {
                    Decision::Approve { m, certified_epsilon } => {
                        ("approve", String::new(), format!("m={m} certified={certified_epsilon}"))
                    }
                    Decision::Deny { reason } => ("deny", reason.check_number().to_string(), reason.to_string()),
                };
                s.push_str(&format!(
                    "{},{},{},{},{},{},\"{}\",{},{}\n",
                    t.index,
                    t.fields.join(";"),
                    t.local_epsilon,
                    t.aggregate_epsilon,
                    decision,
                    check,
                    detail.replace('"', "\"\""),
                    t.used_epsilon,
                    t.used_reports
                ));
            }
            s
        }
    };
    let name = if format == Format::Json { "trace.json" } else { "trace.csv" };
    emit(out, name, &body)?;
    if trace.iter().any(|t| !t.decision.is_approve()) {
        return Err(Failure::Denied("at least one query was denied".into()));
    }
    Ok(())
}

fn cmd_serve(config: ApiConfig, addr: &str) -> Outcome {
    let rt = tokio::runtime::Runtime::new().map_err(usage)?;
    eprintln!("listening on {addr}");
    rt.block_on(fedstats_api::serve(config, addr)).map_err(usage)
}

fn run(cli: Cli) -> Outcome {
    match cli.command {
        Command::AmplificationCurve {
            config,
            eps0,
            n,
            delta,
            renyi,
            format,
            out,
        } => {
            let cfg = match config {
                Some(p) => read_json(&p)?,
                None => CurveConfig {
                    eps0s: eps0,
                    ns: n,
                    delta,
                    renyi,
                },
            };
            cmd_curve(cfg, format, out.as_deref())
        }
        Command::Discover {
            config,
            seed,
            format,
            out,
        } => {
            let cfg = match config {
                Some(p) => read_json(&p)?,
                None => SimulationConfig::reference(seed.unwrap_or(0)),
            };
            cmd_discover(cfg, seed, format, out.as_deref())
        }
        Command::AccountantDemo { config, format, out } => {
            let script = match config {
                Some(p) => read_json(&p)?,
                None => keyboard_script(),
            };
            cmd_accountant(script, format, out.as_deref())
        }
        Command::Serve { config, addr } => {
            let cfg = match config {
                Some(p) => read_json(&p)?,
                None => ApiConfig::default(),
            };
            cmd_serve(cfg, &addr)
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Denied(msg)) => {
            eprintln!("fedstats: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Usage(msg)) => {
            eprintln!("fedstats: {msg}");
            ExitCode::from(2)
        }
    }
}
