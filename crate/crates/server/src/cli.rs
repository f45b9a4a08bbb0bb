//! Command-line driver over session files.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Parser, Subcommand, ValueEnum};
use dpexplore::accuracy::{ci_half_length, DEFAULT_CONFIDENCE};
use dpexplore::curator::{Curator, DataRequest};
use dpexplore::recommender::{recommend, JobControl, QConfig};
use dpexplore::schema::{validate_division, Partition};
use dpexplore::session::{IntentSpec, Priors, Session};
use dpexplore::{NoisyResponse, StrategyCandidate};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::de::DeserializeOwned;

use crate::error::AppError;
use crate::store::Store;

#[derive(Debug, Parser)]
#[command(name = "dpexplore", version, about = "Differentially-private data exploration")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Validate a CSV table against a schema and copy both into a store.
    Ingest {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        schema: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Dataset name inside the store; defaults to the CSV file stem.
        #[arg(long)]
        name: Option<String>,
    },
    /// Run the HTTP session service.
    Serve {
        #[arg(long)]
        store: PathBuf,
        #[arg(long, default_value_t = 8080)]
        port: u16,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Create and edit session files.
    #[command(subcommand)]
    Session(SessionCommand),
    /// Print ranked strategy candidates.
    Plan {
        #[arg(long)]
        session: PathBuf,
        #[arg(long, default_value_t = 5)]
        k: usize,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        episodes: Option<usize>,
    },
    /// Preview a request on simulated data; the session file is not modified.
    Simulate {
        #[arg(long)]
        session: PathBuf,
        /// Request JSON, or `@path` to a file holding it.
        #[arg(long)]
        request: String,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Spend budget on a real request and store the response.
    Execute {
        #[arg(long)]
        session: PathBuf,
        #[arg(long)]
        request: String,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Print the budget ledger and the summary matrix.
    Report {
        #[arg(long)]
        session: PathBuf,
        #[arg(long, value_enum, default_value_t = Format::Text)]
        format: Format,
    },
}

#[derive(Debug, Subcommand)]
pub enum SessionCommand {
    /// Create a session file under `<store>/sessions/`.
    New {
        #[arg(long)]
        store: PathBuf,
        #[arg(long)]
        dataset: String,
        #[arg(long)]
        epsilon: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        id: Option<String>,
    },
    /// Replace the intent graph (`{"nodes": [...], "edges": [[a, b], ...]}`).
    Intent {
        #[arg(long)]
        session: PathBuf,
        #[arg(long)]
        intent: String,
    },
    /// Set finest marginals and rank-correlation guesses.
    Priors {
        #[arg(long)]
        session: PathBuf,
        #[arg(long)]
        priors: String,
    },
    /// Set the exploration progress estimate.
    Progress {
        #[arg(long)]
        session: PathBuf,
        #[arg(long)]
        p: f64,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Text,
    Csv,
}

/// JSON given inline or as `@path`.
fn json_arg<T: DeserializeOwned>(arg: &str) -> Result<T, AppError> {
    let text = match arg.strip_prefix('@') {
        Some(path) => std::fs::read_to_string(path).map_err(|e| AppError::io(format!("{path}: {e}")))?,
        None => arg.to_string(),
    };
    serde_json::from_str(&text).map_err(|e| AppError::validation(format!("invalid JSON argument: {e}")))
}

fn load(path: &Path) -> Result<Session, AppError> {
    Ok(Session::load(path)?)
}

fn save(session: &Session, path: &Path) -> Result<(), AppError> {
    Ok(session.save(path)?)
}

/// Runs one command and returns its standard output.
pub fn run(command: Command) -> Result<String, AppError> {
    match command {
        Command::Ingest { data, schema, out, name } => {
            let name = name.unwrap_or_else(|| data.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default());
            let store = Store::open(out)?;
            let d = store.ingest(&name, &data, &schema)?;
            Ok(format!("ingested `{name}`: {} records, {} attributes\n", d.n(), d.schema().len()))
        }
        Command::Serve { store, port, seed } => {
            let store = Store::open(store)?;
            let rt = tokio::runtime::Runtime::new()?;
            rt.block_on(crate::api::serve(store, port, seed))?;
            Ok(String::new())
        }
        Command::Session(cmd) => run_session(cmd),
        Command::Plan { session, k, seed, episodes } => {
            let s = load(&session)?;
            let mut config = QConfig { seed: seed.unwrap_or(s.seed), ..QConfig::default() };
            if let Some(e) = episodes {
                config.episodes = e;
            }
            let candidates = recommend(s.planner_input(), &config, k.max(1), JobControl::default())?;
            Ok(plan_table(&candidates))
        }
        Command::Simulate { session, request, seed } => {
            let s = load(&session)?;
            let request: DataRequest = json_arg(&request)?;
            let mut rng = ChaCha8Rng::seed_from_u64(seed.unwrap_or(s.seed));
            let r = s.simulate(&request, &mut rng)?;
            cells_table(&s, &r)
        }
        Command::Execute { session, request, seed } => {
            let mut s = load(&session)?;
            let request: DataRequest = json_arg(&request)?;
            let dataset = Arc::new(Store::of_session_file(&session)?.dataset(&s.dataset)?);
            let stream = s.seed ^ (s.responses.len() as u64).wrapping_mul(0x9e37_79b9);
            let mut curator = seed
                .and_then(|seed| Curator::seeded(dataset.clone(), seed ^ stream))
                .unwrap_or_else(|| Curator::new(dataset));
            let r = s.execute(&mut curator, &request)?;
            save(&s, &session)?;
            let mut out = cells_table(&s, &r)?;
            let _ = writeln!(out, "epsilon_remain {}", s.ledger.epsilon_remain());
            Ok(out)
        }
        Command::Report { session, format } => report(&load(&session)?, format),
    }
}

fn run_session(cmd: SessionCommand) -> Result<String, AppError> {
    match cmd {
        SessionCommand::New { store, dataset, epsilon, seed, id } => {
            let store = Store::open(store)?;
            let schema = store.schema(&dataset)?;
            let n = store.dataset(&dataset)?.n();
            let id = id.unwrap_or_else(|| uuid::Uuid::new_v4().simple().to_string());
            let path = store.session_path(&id)?;
            if path.exists() {
                return Err(AppError::new(crate::error::ErrorKind::Conflict, format!("session `{id}` exists")));
            }
            save(&Session::new(&id, &dataset, &schema, n, epsilon, seed)?, &path)?;
            Ok(format!("{}\n", path.display()))
        }
        SessionCommand::Intent { session, intent } => {
            let mut s = load(&session)?;
            s.set_intent(&json_arg::<IntentSpec>(&intent)?)?;
            save(&s, &session)?;
            Ok(format!("{} targets\n", s.intent.targets().len()))
        }
        SessionCommand::Priors { session, priors } => {
            let mut s = load(&session)?;
            s.set_priors(&json_arg::<Priors>(&priors)?)?;
            save(&s, &session)?;
            Ok("priors updated\n".into())
        }
        SessionCommand::Progress { session, p } => {
            let mut s = load(&session)?;
            s.set_progress(p)?;
            save(&s, &session)?;
            Ok(format!("p = {}\n", s.progress.p()))
        }
    }
}

fn division_summary(request: &DataRequest) -> String {
    request
        .division
        .divisions
        .iter()
        .map(|d| {
            let groups = match &d.partition {
                Partition::Intervals(iv) => iv.len(),
                Partition::Groups(g) => g.len(),
            };
            format!("{}[{groups}]", d.attribute)
        })
        .collect::<Vec<_>>()
        .join(" x ")
}

pub fn plan_table(candidates: &[StrategyCandidate]) -> String {
    let mut out = String::new();
    for (rank, c) in candidates.iter().enumerate() {
        let _ = writeln!(out, "#{} score {:.6} total_epsilon {}", rank + 1, c.score, c.total_epsilon);
        let _ = writeln!(out, "  order  epsilon     division");
        for r in &c.requests {
            let _ = writeln!(out, "  {:<5}  {:<10}  {}", r.order + 1, r.epsilon, division_summary(r));
        }
    }
    out
}

fn cells_table(session: &Session, r: &NoisyResponse) -> Result<String, AppError> {
    let layout = validate_division(&r.request.division, session.schema())?;
    let h = ci_half_length(1, r.request.epsilon, DEFAULT_CONFIDENCE);
    let mut out = format!("{} epsilon {}{}\n", r.id, r.request.epsilon, if r.simulated { " (simulated)" } else { "" });
    for (flat, v) in r.values.iter().enumerate() {
        let cell = layout.cell(flat);
        let bounds: Vec<String> = layout.describe(session.schema(), &cell).iter().map(ToString::to_string).collect();
        let _ = writeln!(out, "{}\t{v:.3}\t±{h:.3}", bounds.join(" "));
    }
    Ok(out)
}

fn report(s: &Session, format: Format) -> Result<String, AppError> {
    let summary = s.summary();
    let mut out = String::new();
    match format {
        Format::Csv => {
            out.push_str("kind,key,epsilon,detail\n");
            let _ = writeln!(out, "budget,total,{},", s.ledger.epsilon_total());
            let _ = writeln!(out, "budget,remain,{},", s.ledger.epsilon_remain());
            for e in s.ledger.entries() {
                let _ = writeln!(out, "charge,{},{},", e.request_id, e.epsilon);
            }
            for e in &summary {
                let _ = writeln!(
                    out,
                    "summary,{},{},{}",
                    e.target.attributes.join("|"),
                    e.epsilon.map(|x| x.to_string()).unwrap_or_default(),
                    e.response_id.as_deref().unwrap_or("")
                );
            }
        }
        Format::Text => {
            let _ = writeln!(out, "budget: total {} remain {}", s.ledger.epsilon_total(), s.ledger.epsilon_remain());
            for e in s.ledger.entries() {
                let _ = writeln!(out, "  {}  epsilon {}", e.request_id, e.epsilon);
            }
            let nodes: Vec<&str> = s.intent.nodes().collect();
            if !nodes.is_empty() {
                let width = nodes.iter().map(|n| n.len()).max().unwrap_or(0).max(8);
                let _ = write!(out, "summary:\n{:width$}", "");
                for n in &nodes {
                    let _ = write!(out, " {n:>width$}");
                }
                out.push('\n');
                for a in &nodes {
                    let _ = write!(out, "{a:width$}");
                    for b in &nodes {
                        let cell = if a == b {
                            summary.iter().find(|e| e.target.attributes == [a.to_string()])
                        } else if s.intent.has_edge(a, b) {
                            summary.iter().find(|e| e.target.attributes.len() == 2 && e.target.attributes.contains(&a.to_string()) && e.target.attributes.contains(&b.to_string()))
                        } else {
                            None
                        };
                        let text = match cell {
                            Some(e) => match (&e.response_id, e.ci_half_length) {
                                (Some(id), Some(ci)) => format!("{id}±{ci:.1}"),
                                _ => "[empty]".to_string(),
                            },
                            None => "-".to_string(),
                        };
                        let _ = write!(out, " {text:>width$}");
                    }
                    out.push('\n');
                }
            }
        }
    }
    Ok(out)
}
