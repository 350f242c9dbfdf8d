//! Command-line entry point: `serve` plus admin subcommands.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, Context};
use clap::{Parser, Subcommand, ValueEnum};

use adventure_core::assessment::{CachingRunner, CodeRunner};
use adventure_core::events::{read_log, LoadedLog, Mode};
use adventure_core::graph::{load_graph, sample_graph, validate_graph, Severity};
use adventure_core::sim::{simulate, SimConfig, SimProfile};
use adventure_core::telemetry::{groups_from_modes, report};

use crate::accounts::AccountStore;
use crate::config::ServiceConfig;

#[derive(Debug, Parser)]
#[command(
    name = "adventure",
    version,
    about = "Adaptive and GenAI programming-exercise service"
)]
pub struct Cli {
    /// Service config file (TOML); defaults to $ADVENTURE_CONFIG.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    Adaptive,
    Genai,
    Hybrid,
    All,
}

impl ModeArg {
    fn modes(self) -> Vec<Mode> {
        match self {
            ModeArg::Adaptive => vec![Mode::Adaptive],
            ModeArg::Genai => vec![Mode::GenAi],
            ModeArg::Hybrid => vec![Mode::Hybrid],
            ModeArg::All => Mode::ALL.to_vec(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ReportFormat {
    Json,
    Text,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ExportFormat {
    Jsonl,
    Csv,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run the HTTP service.
    Serve,
    /// Validate a knowledge-graph file and install it into the data directory.
    LoadKg { path: PathBuf },
    /// Create accounts from a roster CSV (username,password,mode[,locale][,role]).
    CreateAccounts {
        #[arg(long)]
        csv: PathBuf,
    },
    /// Run a simulated cohort and write its event log.
    Simulate {
        #[arg(long, value_enum, default_value = "all")]
        mode: ModeArg,
        /// Learners per mode.
        #[arg(long, default_value_t = 10)]
        learners: usize,
        #[arg(long, default_value_t = 50)]
        steps: usize,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        /// Population profile (JSON).
        #[arg(long)]
        profile: Option<PathBuf>,
        /// Output file; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Knowledge graph; the bundled sample when omitted.
        #[arg(long)]
        graph: Option<PathBuf>,
        #[arg(long)]
        language: Option<String>,
    },
    /// Compute learning-log analytics.
    Analyze {
        #[arg(long)]
        log: PathBuf,
        /// CSV with columns learner,group; learners' modes when omitted.
        #[arg(long)]
        groups: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "json")]
        format: ReportFormat,
    },
    /// Export the service's event log.
    ExportLog {
        /// Log to export; the configured data directory's log when omitted.
        #[arg(long)]
        log: Option<PathBuf>,
        #[arg(long)]
        learner: Option<String>,
        #[arg(long, value_enum, default_value = "jsonl")]
        format: ExportFormat,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;

fn init_logging(default: &str) {
    let filter = tracing_subscriber::EnvFilter::try_from_default_env()
        .unwrap_or_else(|_| tracing_subscriber::EnvFilter::new(default));
    let _ = tracing_subscriber::fmt()
        .with_env_filter(filter)
        .with_writer(std::io::stderr)
        .try_init();
}

/// Parses arguments and runs a subcommand; returns the process exit code.
pub fn run<I, T>(args: I, stdout: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    init_logging(if matches!(cli.command, Command::Serve) {
        "info"
    } else {
        "warn"
    });
    match execute(cli, stdout) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e:#}");
            EXIT_DATA
        }
    }
}

fn write_output(out: Option<&Path>, stdout: &mut dyn Write, bytes: &[u8]) -> anyhow::Result<()> {
    match out {
        Some(p) => {
            std::fs::write(p, bytes).with_context(|| format!("cannot write {}", p.display()))
        }
        None => stdout.write_all(bytes).context("cannot write to stdout"),
    }
}

fn execute(cli: Cli, stdout: &mut dyn Write) -> anyhow::Result<()> {
    let config = || ServiceConfig::load(cli.config.as_deref());
    match cli.command {
        Command::Serve => {
            let cfg = config()?;
            tokio::runtime::Runtime::new()?.block_on(crate::server::serve(cfg))
        }
        Command::LoadKg { ref path } => load_kg(&config()?, path, stdout),
        Command::CreateAccounts { ref csv } => {
            let cfg = config()?;
            let mut store = AccountStore::load(&cfg.paths().accounts)?;
            let file = std::fs::File::open(csv)
                .with_context(|| format!("cannot open {}", csv.display()))?;
            let added = store.import_csv(file)?;
            store.save()?;
            for a in &added {
                let mode = a.mode.map_or("-".to_string(), |m| m.to_string());
                writeln!(stdout, "{}\t{mode}\t{}", a.username, a.locale)?;
            }
            Ok(())
        }
        Command::Simulate {
            mode,
            learners,
            steps,
            seed,
            ref profile,
            ref out,
            ref graph,
            ref language,
        } => {
            let cfg = config()?;
            let kg = match graph {
                Some(p) => load_graph(p)?,
                None => sample_graph(),
            };
            let mut sim = SimConfig::new(mode.modes(), learners, steps, seed);
            sim.engine = cfg.engine_config();
            sim.language = language.clone();
            if let Some(p) = profile {
                let text = std::fs::read_to_string(p)
                    .with_context(|| format!("cannot read {}", p.display()))?;
                sim.profile = serde_json::from_str::<SimProfile>(&text)
                    .with_context(|| format!("profile {}", p.display()))?;
            }
            let runner: Arc<dyn CodeRunner> = Arc::new(CachingRunner::new(cfg.runners.clone()));
            let result = simulate(kg, runner, &sim)?;
            let mut buf = String::new();
            for r in &result.events {
                buf.push_str(&r.to_line());
                buf.push('\n');
            }
            write_output(out.as_deref(), stdout, buf.as_bytes())?;
            tracing::info!(
                events = result.events.len(),
                llm_calls = result.llm_calls,
                "simulation done"
            );
            Ok(())
        }
        Command::Analyze {
            log,
            groups,
            format,
        } => {
            let loaded = read_existing_log(&log)?;
            if loaded.dropped_partial_line {
                tracing::warn!("ignored a partially written final line");
            }
            let group_of = match groups {
                Some(p) => read_groups(&p)?,
                None => groups_from_modes(&loaded.records),
            };
            let r = report(&loaded.records, &group_of);
            let text = match format {
                ReportFormat::Json => r.to_json(),
                ReportFormat::Text => r.to_text(),
            };
            writeln!(stdout, "{text}")?;
            Ok(())
        }
        Command::ExportLog {
            log,
            learner,
            format,
            out,
        } => {
            let loaded = match log {
                Some(p) => read_existing_log(&p)?,
                None => read_log(config()?.paths().events)?,
            };
            let records = loaded
                .records
                .iter()
                .filter(|r| learner.as_deref().is_none_or(|l| r.learner == l));
            let bytes = match format {
                ExportFormat::Jsonl => records
                    .map(|r| r.to_line() + "\n")
                    .collect::<String>()
                    .into_bytes(),
                ExportFormat::Csv => {
                    let mut w = csv::Writer::from_writer(Vec::new());
                    w.write_record(["ts", "learner", "session", "type", "payload"])?;
                    for r in records {
                        let v = serde_json::to_value(r)?;
                        let payload = v.get("payload").map(|p| p.to_string()).unwrap_or_default();
                        w.write_record([
                            &r.ts.to_string(),
                            &r.learner,
                            &r.session,
                            r.event.kind(),
                            &payload,
                        ])?;
                    }
                    w.into_inner().context("csv buffer")?
                }
            };
            write_output(out.as_deref(), stdout, &bytes)
        }
    }
}

fn load_kg(cfg: &ServiceConfig, path: &Path, stdout: &mut dyn Write) -> anyhow::Result<()> {
    let kg = load_graph(path).with_context(|| format!("{}", path.display()))?;
    let violations = validate_graph(&kg);
    for v in &violations {
        eprintln!("{:?}: {}", v.severity, v.message);
    }
    if violations.iter().any(|v| v.severity == Severity::Error) {
        bail!("knowledge graph {} is invalid", path.display());
    }
    let dest = cfg.paths().graph;
    std::fs::create_dir_all(&cfg.data_dir)?;
    std::fs::write(&dest, kg.to_json_string())
        .with_context(|| format!("cannot write {}", dest.display()))?;
    writeln!(
        stdout,
        "{}",
        serde_json::json!({
            "concepts": kg.concepts().len(),
            "exercises": kg.exercises().len(),
            "warnings": violations.len(),
            "installed": dest,
        })
    )?;
    Ok(())
}

fn read_existing_log(path: &Path) -> anyhow::Result<LoadedLog> {
    if !path.is_file() {
        bail!("event log {} does not exist", path.display());
    }
    Ok(read_log(path)?)
}

fn read_groups(path: &Path) -> anyhow::Result<BTreeMap<String, String>> {
    #[derive(serde::Deserialize)]
    struct Row {
        learner: String,
        group: String,
    }
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .with_context(|| format!("cannot open {}", path.display()))?;
    let mut out = BTreeMap::new();
    for (i, row) in rdr.deserialize::<Row>().enumerate() {
        let row = row.with_context(|| format!("{} row {}", path.display(), i + 2))?;
        out.insert(row.learner, row.group);
    }
    Ok(out)
}
