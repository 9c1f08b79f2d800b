//! Command-line front end for the lumen tracking engine.
//!
//! Subcommands chain into a pipeline: `simulate` renders a synthetic scope
//! run to files, `track` runs the engine over a detection stream, and
//! `evaluate` scores the output against ground truth. `graph validate` and
//! `config init` cover the two file formats users author by hand.
//!
//! Failures print a one-line machine-readable JSON record to stderr and
//! exit nonzero. Output files are written atomically (write-then-rename),
//! so no partial file is ever left behind.

use clap::{Parser, Subcommand, ValueEnum};
use lumentrack_core::airway::AirwayGraph;
use lumentrack_core::config::{ConfigError, EngineConfig};
use lumentrack_core::formats::{atomic_write, read_graph, FormatError};
use lumentrack_core::pipeline::{
    evaluate_to_dir, simulate_to_dir, track_to_dir, PipelineError, REPORT_FILE,
};
use lumentrack_core::sim::{Scenario, SimError};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

#[derive(Parser)]
#[command(
    name = "lumentrack",
    version,
    about = "Branch-level bronchoscope tracking and localization"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Copy, Clone, ValueEnum)]
enum Switch {
    On,
    Off,
}

impl Switch {
    fn as_bool(self) -> bool {
        matches!(self, Switch::On)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Render a scenario into detections, ground truth, and an airway graph
    Simulate {
        /// Scenario description (TOML)
        #[arg(long)]
        scenario: PathBuf,
        /// Output directory
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the tracking engine over a detection stream
    Track {
        /// Airway graph (JSON)
        #[arg(long)]
        graph: PathBuf,
        /// Detection stream (JSONL)
        #[arg(long)]
        detections: PathBuf,
        /// Engine configuration (TOML)
        #[arg(long)]
        config: PathBuf,
        /// Output directory
        #[arg(long)]
        out: PathBuf,
        /// Override the configured loop-closure setting
        #[arg(long, value_enum)]
        loop_closure: Option<Switch>,
        /// Override the configured re-identification setting
        #[arg(long, value_enum)]
        reid: Option<Switch>,
    },
    /// Score tracking output against ground truth
    Evaluate {
        /// Track output directory (tracks.jsonl + localization.jsonl)
        #[arg(long)]
        pred: PathBuf,
        /// Ground-truth stream (JSONL)
        #[arg(long)]
        truth: PathBuf,
        /// Airway graph (JSON)
        #[arg(long)]
        graph: PathBuf,
        /// Report output directory
        #[arg(long)]
        out: PathBuf,
    },
    /// Airway-graph utilities
    Graph {
        #[command(subcommand)]
        command: GraphCommand,
    },
    /// Configuration utilities
    Config {
        #[command(subcommand)]
        command: ConfigCommand,
    },
}

#[derive(Subcommand)]
enum GraphCommand {
    /// Check structural and geometric invariants of a graph file
    Validate {
        /// Graph file to check
        #[arg(long = "in")]
        input: PathBuf,
    },
}

#[derive(Subcommand)]
enum ConfigCommand {
    /// Emit the default configuration with every key documented
    Init {
        /// Destination file (stdout when omitted)
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

/// A failure with a machine-readable category.
struct CliError {
    kind: &'static str,
    message: String,
}

impl CliError {
    fn record(&self) -> String {
        serde_json::json!({
            "error": { "kind": self.kind, "message": self.message }
        })
        .to_string()
    }
}

fn format_kind(e: &FormatError) -> &'static str {
    match e {
        FormatError::Io { .. } => "io",
        FormatError::Malformed { .. } => "malformed",
        FormatError::Version { .. } => "version",
    }
}

impl From<PipelineError> for CliError {
    fn from(e: PipelineError) -> Self {
        let kind = match &e {
            PipelineError::Format(f) => format_kind(f),
            PipelineError::Sim(_) => "scenario",
            PipelineError::Graph(_) => "graph",
            PipelineError::Config(_) => "config",
            PipelineError::Metrics(_) => "metrics",
            PipelineError::Io { .. } => "io",
            PipelineError::NonMonotonicFrames { .. } => "malformed",
            PipelineError::FrameCountMismatch { .. } => "mismatch",
        };
        CliError {
            kind,
            message: e.to_string(),
        }
    }
}

impl From<FormatError> for CliError {
    fn from(e: FormatError) -> Self {
        CliError {
            kind: format_kind(&e),
            message: e.to_string(),
        }
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        CliError {
            kind: "config",
            message: e.to_string(),
        }
    }
}

impl From<SimError> for CliError {
    fn from(e: SimError) -> Self {
        CliError {
            kind: "scenario",
            message: e.to_string(),
        }
    }
}

fn read_file(path: &Path) -> Result<String, CliError> {
    std::fs::read_to_string(path).map_err(|e| CliError {
        kind: "io",
        message: format!("{}: {e}", path.display()),
    })
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Simulate { scenario, out } => {
            let scenario = Scenario::from_toml_str(&read_file(&scenario)?)?;
            let frames = simulate_to_dir(&scenario, &out)?;
            println!("simulated {frames} frames into {}", out.display());
        }
        Command::Track {
            graph,
            detections,
            config,
            out,
            loop_closure,
            reid,
        } => {
            let mut cfg = EngineConfig::from_toml_str(&read_file(&config)?)?;
            if let Some(s) = loop_closure {
                cfg.loop_closure.enabled = s.as_bool();
            }
            if let Some(s) = reid {
                cfg.matching.use_reid = s.as_bool();
            }
            let stats = track_to_dir(&graph, &detections, cfg, &out)?;
            println!(
                "tracked {} frames into {} ({} loop closures)",
                stats.frames,
                out.display(),
                stats.loops_closed
            );
        }
        Command::Evaluate {
            pred,
            truth,
            graph,
            out,
        } => {
            let report = evaluate_to_dir(&pred, &truth, &graph, &out)?;
            println!(
                "MOTA {:.4}  IDF1 {:.4}  HOTA {:.4}  (FP {}  FN {}  IDSW {})",
                report.mot.mota,
                report.mot.idf1,
                report.mot.hota,
                report.mot.false_positives,
                report.mot.false_negatives,
                report.mot.id_switches
            );
            println!(
                "localization accuracy {:.4} over {} frames ({} unlocalized), mean generation error {:.4}",
                report.localization.accuracy,
                report.localization.frames,
                report.localization.unlocalized,
                report.localization.mean_generation_error
            );
            println!("branch                    correct    total");
            for (branch, tally) in &report.localization.per_branch {
                println!("{branch:<24} {:>9} {:>8}", tally.correct, tally.total);
            }
            println!("report: {}", out.join(REPORT_FILE).display());
        }
        Command::Graph {
            command: GraphCommand::Validate { input },
        } => {
            let raw = read_graph(&input)?;
            let graph = AirwayGraph::load_and_normalize(&raw).map_err(|e| CliError {
                kind: "graph",
                message: e.to_string(),
            })?;
            println!(
                "ok: {} branches, root {}, designations trachea={} lmb={} rmb={}",
                graph.len(),
                graph.root(),
                graph.designations().trachea,
                graph.designations().lmb,
                graph.designations().rmb
            );
        }
        Command::Config {
            command: ConfigCommand::Init { out },
        } => {
            let template = EngineConfig::template();
            match out {
                Some(path) => {
                    atomic_write(&path, template.as_bytes())?;
                    println!("wrote {}", path.display());
                }
                None => print!("{template}"),
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", e.record());
            ExitCode::FAILURE
        }
    }
}
