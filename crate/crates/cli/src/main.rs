//! `mislabel`: generate, corrupt, clean and evaluate labeled corpora, and
//! serve the review panel.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

/// Output root used when `--out` is absent.
pub const OUT_ENV: &str = "MISLABEL_OUT";

#[derive(Debug, Parser)]
#[command(name = "mislabel", version, about = "Detect, correct and filter mislabeled samples")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args, Clone)]
pub struct Common {
    /// Experiment config (JSON). Sections: synthetic, injection, pipeline, review.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Overrides the seed the command uses.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory. Defaults to `$MISLABEL_OUT/<command>`, else `mislabel-out/<command>`.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic Gaussian-blob corpus.
    Gen(commands::GenArgs),
    /// Flip a fraction of dev labels, preferring uncertain samples.
    Inject(commands::InjectArgs),
    /// Run the two-stage correct-then-filter pipeline.
    Detect(commands::DetectArgs),
    /// Apply a cleaning plan and write the cleaned manifests.
    Clean(commands::CleanArgs),
    /// Train on the dev split and score the test split.
    TrainEval(commands::TrainEvalArgs),
    /// Detection and classification tables, mixture densities, PCA export.
    Report(commands::ReportArgs),
    /// Serve the adjudication panel over HTTP.
    Review(commands::ReviewArgs),
}

fn category(err: &anyhow::Error) -> &'static str {
    if let Some(e) = err.downcast_ref::<mislabel_core::Error>() {
        return e.category();
    }
    if let Some(e) = err.downcast_ref::<mislabel_review::ServiceError>() {
        return match e {
            mislabel_review::ServiceError::Bind { .. } => "bind",
            mislabel_review::ServiceError::Serve(_) => "io",
            mislabel_review::ServiceError::Core(c) => c.category(),
        };
    }
    if err.downcast_ref::<std::io::Error>().is_some() {
        return "io";
    }
    if err.downcast_ref::<commands::UsageError>().is_some() {
        return "usage";
    }
    "internal"
}

/// Joins the error chain, skipping causes already spelled out by their parent.
fn render(err: &anyhow::Error) -> String {
    let mut msg = String::new();
    for cause in err.chain() {
        let text = cause.to_string();
        if !msg.contains(&text) {
            if !msg.is_empty() {
                msg.push_str(": ");
            }
            msg.push_str(&text);
        }
    }
    one_line(&msg)
}

fn one_line(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or("invalid arguments");
            eprintln!("error[usage]: {}", one_line(first.trim_start_matches("error: ")));
            return ExitCode::from(2);
        }
    };
    tracing_subscriber::fmt()
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env()
                .unwrap_or_else(|_| tracing_subscriber::EnvFilter::new("warn")),
        )
        .with_writer(std::io::stderr)
        .init();

    let result = match cli.command {
        Command::Gen(a) => commands::gen(a),
        Command::Inject(a) => commands::inject(a),
        Command::Detect(a) => commands::detect(a),
        Command::Clean(a) => commands::clean(a),
        Command::TrainEval(a) => commands::train_eval(a),
        Command::Report(a) => commands::report(a),
        Command::Review(a) => commands::review(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let cat = category(&e);
            eprintln!("error[{cat}]: {}", render(&e));
            ExitCode::from(if cat == "usage" { 2 } else { 1 })
        }
    }
}
