//! Command-line driver for the benchmark pipeline and the rating service.

use std::net::SocketAddr;
use std::path::PathBuf;
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Parser, Subcommand};
use ophtha_bench::pipeline::{self, PipelineError, RunConfig, RunOptions, Stage, StageOutcome};

#[derive(Debug, Parser)]
#[command(name = "ophtha-bench", version, about = "Curate, evaluate and report on ophthalmology LLM benchmarks")]
struct Cli {
    /// Run configuration (TOML).
    #[arg(long, short, global = true, default_value = "ophtha-bench.toml")]
    config: PathBuf,
    /// Overrides the global seed from the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overrides the output directory from the config.
    #[arg(long, global = true)]
    output_dir: Option<PathBuf>,
    /// Worker threads within a stage.
    #[arg(long, short, global = true, default_value_t = 4)]
    jobs: usize,
    /// Rerun stages even when the manifest says they are up to date.
    #[arg(long, global = true)]
    force: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Read corpus sources into the document store.
    Ingest,
    /// Build instruction instances from the corpus.
    Curate,
    /// Seeded train/validation split.
    Split,
    /// Query every model on the validation items.
    Infer,
    /// Pull answers out of raw responses.
    Extract,
    /// Per-item metrics, Macro-F1 and neural scores.
    Score,
    /// Bootstrap summaries and rank-sum tests against the reference.
    Compare,
    /// Render the markdown report and CSV tables.
    Report,
    /// Every stage in order.
    Run,
    /// Start the human-evaluation HTTP service.
    Serve {
        /// Listen address; defaults to the config value.
        #[arg(long)]
        bind: Option<SocketAddr>,
    },
}

fn load_config(cli: &Cli) -> Result<RunConfig, PipelineError> {
    let mut cfg = RunConfig::load(&cli.config)?;
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(dir) = &cli.output_dir {
        cfg.output_dir = std::env::current_dir().map(|d| d.join(dir)).unwrap_or_else(|_| dir.clone());
    }
    cfg.validate()?;
    Ok(cfg)
}

fn serve(cfg: &RunConfig, bind: Option<SocketAddr>) -> Result<(), PipelineError> {
    let state = Arc::new(pipeline::prepare_humaneval(cfg)?);
    let addr = match bind {
        Some(a) => a,
        None => {
            let h = cfg.humaneval.as_ref().expect("checked by prepare_humaneval");
            h.bind
                .parse()
                .map_err(|e| PipelineError::ConfigInvalid(format!("bind address {:?}: {e}", h.bind)))?
        }
    };
    let io = |source| PipelineError::Io {
        path: PathBuf::from(addr.to_string()),
        source,
    };
    tokio::runtime::Runtime::new()
        .map_err(io)?
        .block_on(ophtha_bench::humaneval::service::serve(addr, state))
        .map_err(io)
}

fn run(cli: &Cli) -> Result<(), PipelineError> {
    let cfg = load_config(cli)?;
    let stages: Vec<Stage> = match &cli.command {
        Command::Serve { bind } => return serve(&cfg, *bind),
        Command::Run => Stage::ALL.to_vec(),
        Command::Ingest => vec![Stage::Ingest],
        Command::Curate => vec![Stage::Curate],
        Command::Split => vec![Stage::Split],
        Command::Infer => vec![Stage::Infer],
        Command::Extract => vec![Stage::Extract],
        Command::Score => vec![Stage::Score],
        Command::Compare => vec![Stage::Compare],
        Command::Report => vec![Stage::Report],
    };
    let opts = RunOptions {
        jobs: cli.jobs.max(1),
        force: cli.force,
    };
    for (stage, outcome) in pipeline::run_pipeline(&cfg, &stages, opts)? {
        let status = match outcome {
            StageOutcome::Ran => "done",
            StageOutcome::UpToDate => "up to date",
        };
        println!("{stage}: {status}");
    }
    println!("artifacts in {}", cfg.out_dir().display());
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
