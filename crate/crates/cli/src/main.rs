//! `reefpipe`: run the survey pipeline with its review service, evaluate
//! against ground truth, sweep configurations and export curated archives.

mod commands;
mod config;

use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use config::{AppConfig, ModeArg, PipelineFlags, ShapeFlags};

/// Configuration or invocation problem; exits with status 2.
#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

#[derive(Debug, Parser)]
#[command(name = "reefpipe", version, about = "Underwater survey analytics: detect, track, review and archive")]
struct Cli {
    /// JSON config file; flags override its values.
    #[arg(long, global = true, env = "REEFPIPE_CONFIG")]
    config: Option<PathBuf>,
    /// Print the resolved configuration as JSON and exit.
    #[arg(long, global = true)]
    print_config: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run the pipeline on a source, recording into --out, optionally serving the review API.
    Run(RunArgs),
    /// Replay a source and score detections or tracks against ground truth.
    Eval(EvalArgs),
    /// Evaluate every combination of batch size, input size and skip interval.
    Sweep(SweepArgs),
    /// Write a curated archive from a run directory.
    Export(ExportArgs),
    /// Serve the review API over an existing run directory.
    ServeOnly(ServeArgs),
}

#[derive(Debug, Args)]
struct RunArgs {
    #[command(flatten)]
    pipeline: PipelineFlags,
    #[command(flatten)]
    shape: ShapeFlags,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Listen address for the review API, e.g. 127.0.0.1:8080.
    #[arg(long)]
    serve: Option<String>,
    /// Directory of review console assets served at `/`.
    #[arg(long = "static")]
    static_dir: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[command(flatten)]
    pipeline: PipelineFlags,
    #[command(flatten)]
    shape: ShapeFlags,
    #[arg(long, value_enum)]
    mode: Option<ModeArg>,
    /// Score at one IoU threshold instead of the 0.30..0.80 sweep.
    #[arg(long)]
    iou: Option<f64>,
    /// Emit the report as JSON.
    #[arg(long)]
    json: bool,
}

#[derive(Debug, Args)]
struct SweepArgs {
    #[command(flatten)]
    pipeline: PipelineFlags,
    #[arg(long, value_delimiter = ',')]
    batch_size: Vec<usize>,
    #[arg(long, value_delimiter = ',')]
    input_size: Vec<u32>,
    #[arg(long, value_delimiter = ',')]
    skip: Vec<u32>,
    #[arg(long, value_enum)]
    mode: Option<ModeArg>,
    #[arg(long)]
    json: bool,
}

#[derive(Debug, Args)]
struct ExportArgs {
    /// Run directory to export from.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    dest: Option<PathBuf>,
    /// Include only tracks with a true-positive verdict.
    #[arg(long)]
    labeled_only: bool,
}

#[derive(Debug, Args)]
struct ServeArgs {
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    serve: Option<String>,
    #[arg(long = "static")]
    static_dir: Option<PathBuf>,
}

fn resolve(cli: &Cli) -> Result<AppConfig, UsageError> {
    let mut c = match &cli.config {
        Some(p) => AppConfig::load(p)?,
        None => AppConfig::default(),
    };
    match &cli.command {
        Command::Run(a) => {
            a.pipeline.apply(&mut c);
            a.shape.apply(&mut c);
            config::set(&mut c.out, a.out.clone());
            config::set(&mut c.serve, a.serve.clone());
            config::set(&mut c.static_dir, a.static_dir.clone());
        }
        Command::Eval(a) => {
            a.pipeline.apply(&mut c);
            a.shape.apply(&mut c);
            if let Some(m) = a.mode {
                c.eval.mode = config::eval_mode(m);
            }
            config::set(&mut c.eval.iou_threshold, a.iou);
            c.eval.json |= a.json;
        }
        Command::Sweep(a) => {
            a.pipeline.apply(&mut c);
            if !a.batch_size.is_empty() {
                c.sweep.batch_sizes = a.batch_size.clone();
            }
            if !a.input_size.is_empty() {
                c.sweep.input_sizes = a.input_size.clone();
            }
            if !a.skip.is_empty() {
                c.sweep.skip_intervals = a.skip.clone();
            }
            if let Some(m) = a.mode {
                c.eval.mode = config::eval_mode(m);
            }
            c.eval.json |= a.json;
        }
        Command::Export(a) => {
            config::set(&mut c.out, a.out.clone());
            config::set(&mut c.export.dest, a.dest.clone());
            c.export.labeled_only |= a.labeled_only;
        }
        Command::ServeOnly(a) => {
            config::set(&mut c.out, a.out.clone());
            config::set(&mut c.serve, a.serve.clone());
            config::set(&mut c.static_dir, a.static_dir.clone());
        }
    }
    c.validate()?;
    Ok(c)
}

fn dispatch(cli: &Cli) -> anyhow::Result<()> {
    let cfg = resolve(cli)?;
    if cli.print_config {
        println!("{}", serde_json::to_string_pretty(&cfg)?);
        return Ok(());
    }
    match &cli.command {
        Command::Run(_) => commands::run(&cfg),
        Command::Eval(_) => commands::eval(&cfg),
        Command::Sweep(_) => commands::sweep(&cfg),
        Command::Export(_) => commands::export(&cfg),
        Command::ServeOnly(_) => commands::serve_only(&cfg),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match dispatch(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let _ = std::io::stdout().flush();
            let msg = format!("{e:#}").replace('\n', " ");
            if e.downcast_ref::<UsageError>().is_some() {
                eprintln!("reefpipe: usage error: {msg}");
                ExitCode::from(2)
            } else {
                eprintln!("reefpipe: error: {msg}");
                ExitCode::from(1)
            }
        }
    }
}
