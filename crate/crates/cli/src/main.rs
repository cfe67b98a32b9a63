use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use modagent_cli::commands::{self, CliError, EvalArgs};
use modagent_cli::ServiceConfig;
use modagent_core::guidelines::DEFAULT_MAX_CHUNK_CHARS;
use tracing_subscriber::EnvFilter;

/// Agent-based hate speech moderation: ingestion, HTTP service and evaluation.
#[derive(Parser)]
#[command(name = "modagent", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArg {
    /// JSON config file. Without it built-in defaults and MODAGENT_* variables apply.
    #[arg(long, env = "MODAGENT_CONFIG")]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct EvalFlags {
    /// Labelled TSV corpus (`id<TAB>0|1<TAB>text`).
    #[arg(long)]
    corpus: PathBuf,
    #[command(flatten)]
    config: ConfigArg,
    /// Overrides `agent.mode` from the config.
    #[arg(long, value_parser = ["planner", "fallback"])]
    mode: Option<String>,
    /// Run directory; defaults to runs/run-<unix seconds>.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Seed for stub endpoints.
    #[arg(long)]
    seed: Option<u64>,
    /// Parallel workers; 1 keeps trace order reproducible.
    #[arg(long, default_value_t = 1)]
    workers: usize,
}

#[derive(Subcommand)]
enum Command {
    /// Embed a labelled TSV corpus into the posts index.
    IngestPosts {
        #[arg(long)]
        corpus: PathBuf,
        #[command(flatten)]
        config: ConfigArg,
    },
    /// Chunk, annotate and embed guideline documents into the guidelines index.
    IngestGuidelines {
        /// Directory holding <source>.md files (reddit, x, meta, unesco, un).
        #[arg(long)]
        dir: PathBuf,
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long, default_value_t = DEFAULT_MAX_CHUNK_CHARS)]
        max_chunk_chars: usize,
    },
    /// Run the HTTP API.
    Serve {
        #[command(flatten)]
        config: ConfigArg,
        /// Overrides `listen` from the config.
        #[arg(long)]
        listen: Option<String>,
    },
    /// Evaluate the agent on a labelled corpus.
    Eval {
        #[command(flatten)]
        flags: EvalFlags,
        /// Run the six-configuration ablation instead of a single run.
        #[arg(long)]
        ablate: bool,
    },
    /// Same as `eval --ablate`.
    Ablate {
        #[command(flatten)]
        flags: EvalFlags,
    },
}

fn load(config: &ConfigArg) -> Result<ServiceConfig, CliError> {
    Ok(ServiceConfig::load(config.config.as_deref())?)
}

fn eval_args(flags: EvalFlags, ablate: bool) -> Result<(ServiceConfig, EvalArgs), CliError> {
    let config = load(&flags.config)?;
    let mode = flags
        .mode
        .map(|m| m.parse())
        .transpose()
        .map_err(|e: String| CliError::new("config_invalid", e))?;
    Ok((
        config,
        EvalArgs {
            corpus: flags.corpus,
            mode,
            ablate,
            out: flags.out,
            seed: flags.seed,
            workers: flags.workers,
        },
    ))
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::IngestPosts { corpus, config } => {
            let out = commands::ingest_posts(&load(&config)?, &corpus)?;
            println!("{out}");
        }
        Command::IngestGuidelines {
            dir,
            config,
            max_chunk_chars,
        } => {
            let out = commands::ingest_guideline_dir(&load(&config)?, &dir, max_chunk_chars)?;
            println!("{out}");
        }
        Command::Serve { config, listen } => {
            let mut config = load(&config)?;
            if let Some(listen) = listen {
                config.listen = listen;
                config.validate()?;
            }
            let rt =
                tokio::runtime::Runtime::new().map_err(|e| CliError::new("io", e.to_string()))?;
            rt.block_on(commands::serve(config))?;
        }
        Command::Eval { flags, ablate } => {
            let (config, args) = eval_args(flags, ablate)?;
            print_eval(commands::evaluate(config, &args)?);
        }
        Command::Ablate { flags } => {
            let (config, args) = eval_args(flags, true)?;
            print_eval(commands::evaluate(config, &args)?);
        }
    }
    Ok(())
}

fn print_eval(out: commands::EvalOutput) {
    print!("{}", out.table);
    println!("run directory: {}", out.out_dir.display());
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(
            EnvFilter::try_from_env("MODAGENT_LOG").unwrap_or_else(|_| EnvFilter::new("warn")),
        )
        .with_writer(std::io::stderr)
        .init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", e.to_json());
            ExitCode::FAILURE
        }
    }
}
