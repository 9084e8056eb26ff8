//! Command-line entry point wiring the whole workflow:
//! world generation -> contrastive pretraining -> index build ->
//! LM training per grounding mode -> evaluation -> benchmarks,
//! plus `reproduce`, which chains everything under one seed.
//!
//! Exit codes: 0 success, 1 usage or config error, 2 runtime failure,
//! 3 expected-ordering violation (`bench compare`, `reproduce`).

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};

use glim::bench::comparison_table as bench_table;
use glim::config::RunConfig;
use glim::pipeline::{self, PipelineError};

#[derive(Parser)]
#[command(
    name = "glim",
    about = "Tiny visually-grounded language models: train, evaluate and benchmark retrieval-based vs retrieval-free grounding",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArg {
    /// Run configuration file (flat `key = value` lines).
    #[arg(long)]
    config: PathBuf,
    /// Override the grounding mode (none, direct-text, image-retrieval).
    #[arg(long)]
    mode: Option<String>,
}

impl ConfigArg {
    fn load(&self) -> anyhow::Result<RunConfig> {
        let mut cfg = RunConfig::load(&self.config)
            .with_context(|| format!("loading config {}", self.config.display()))?;
        if let Some(mode) = &self.mode {
            cfg.mode = mode.clone();
            cfg.validate()?;
        }
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic world: corpora, pairs, image features,
    /// ground truth, vocabulary and probe tasks.
    World(ConfigArg),
    /// Contrastively pretrain the dual encoder on the world's pairs and
    /// freeze it.
    ClipTrain(ConfigArg),
    /// Build the image-embedding index from the world's image features.
    Index(ConfigArg),
    /// Train (or resume) the language model in the configured grounding
    /// mode.
    Train {
        #[command(flatten)]
        config: ConfigArg,
        /// Raise the total step budget (continued pretraining).
        #[arg(long)]
        total_steps: Option<u64>,
    },
    /// Evaluate a trained checkpoint: probe tasks, validation perplexity,
    /// last-word accuracy.
    Eval(ConfigArg),
    /// Measure per-step cost for all three modes; `compare` also enforces
    /// the expected efficiency ordering.
    Bench {
        #[command(flatten)]
        config: ConfigArg,
        /// "report" (default) or "compare".
        action: Option<String>,
    },
    /// Run the whole pipeline for all three modes under one seed and render
    /// the comparison table.
    Reproduce {
        /// Seed for the entire chain.
        #[arg(long, default_value_t = 7)]
        seed: u64,
        /// Artifact directory.
        #[arg(long, default_value = "runs/reproduce")]
        out: PathBuf,
        /// Optional base config; seed and out flags override it.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Override the training step budget.
        #[arg(long)]
        steps: Option<u64>,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // clap prints its own message; help/version are not failures
            let _ = e.print();
            return match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => {
                    ExitCode::SUCCESS
                }
                _ => ExitCode::from(1),
            };
        }
    };
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(classify(&e))
        }
    }
}

/// Maps error kinds onto the documented exit codes.
fn classify(e: &anyhow::Error) -> u8 {
    if let Some(p) = e.downcast_ref::<PipelineError>() {
        return match p {
            PipelineError::Ordering(_) => 3,
            PipelineError::Config(_) => 1,
            _ => 2,
        };
    }
    if e.downcast_ref::<glim::config::ConfigError>().is_some() {
        return 1;
    }
    2
}

fn run(cli: Cli) -> anyhow::Result<ExitCode> {
    match cli.command {
        Command::World(args) => {
            let cfg = args.load()?;
            let world = pipeline::run_world(&cfg)?;
            println!(
                "world: {} concepts ({} probe), artifacts in {}",
                world.concepts.len(),
                world.probe_concepts().len(),
                cfg.world_dir().display()
            );
        }
        Command::ClipTrain(args) => {
            let cfg = args.load()?;
            let (encoder, losses) = pipeline::run_clip_train(&cfg)?;
            println!(
                "dual encoder trained: loss {:.3} -> {:.3}, temperature {:.4}, saved to {}",
                losses.first().copied().unwrap_or(f64::NAN),
                losses.last().copied().unwrap_or(f64::NAN),
                encoder.temperature(),
                cfg.encoder_path().display()
            );
        }
        Command::Index(args) => {
            let cfg = args.load()?;
            let index = pipeline::run_index(&cfg)?;
            println!(
                "index: {} entries of dim {}, saved to {}",
                index.len(),
                index.dim(),
                cfg.index_path().display()
            );
        }
        Command::Train { config, total_steps } => {
            let mut cfg = config.load()?;
            if let Some(steps) = total_steps {
                cfg.total_steps = steps;
            }
            let metrics = pipeline::run_train(&cfg)?;
            match (metrics.first(), metrics.last()) {
                (Some(first), Some(last)) => println!(
                    "trained {} steps ({} -> {}): loss {:.3} -> {:.3}, checkpoint {}",
                    metrics.len(),
                    first.step,
                    last.step,
                    first.loss,
                    last.loss,
                    cfg.checkpoint_path(&cfg.mode).display()
                ),
                _ => println!("checkpoint already at the requested step budget; nothing to do"),
            }
        }
        Command::Eval(args) => {
            let cfg = args.load()?;
            let result = pipeline::run_eval(&cfg)?;
            print!("{}", result.table());
            println!("reports written to {}", cfg.report_dir().display());
        }
        Command::Bench { config, action } => {
            let cfg = config.load()?;
            let compare = match action.as_deref() {
                None | Some("report") => false,
                Some("compare") => true,
                Some(other) => anyhow::bail!("unknown bench action {other} (report or compare)"),
            };
            let (reports, speedup) = pipeline::run_bench(&cfg, compare)?;
            print!("{}", bench_table(&reports));
            if let Some(s) = speedup {
                println!("direct-text speedup over image-retrieval: {s:.2}x");
            }
        }
        Command::Reproduce { seed, out, config, steps } => {
            let mut cfg = match config {
                Some(path) => RunConfig::load(&path)
                    .with_context(|| format!("loading config {}", path.display()))?,
                None => RunConfig::default(),
            };
            cfg.seed = seed;
            cfg.out_dir = out;
            if let Some(steps) = steps {
                cfg.total_steps = steps;
            }
            let outcome = pipeline::run_reproduce(&cfg, &mut std::io::stdout())?;
            println!();
            print!("{}", outcome.table);
            println!();
            for (desc, ok) in &outcome.checks {
                println!("{} {desc}", if *ok { "PASS" } else { "FAIL" });
            }
            println!(
                "PASS bench: direct-text {:.2}x faster than image-retrieval per step",
                outcome.bench_speedup
            );
            if !outcome.all_passed() {
                return Ok(ExitCode::from(3));
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}
