//! `plom` — train, reduce, learn, and constrain stochastic-solver ensembles
//! from the command line. Every subcommand is a pipeline stage; `pipeline`
//! runs them all. Stages are cached by content hash, so reruns with an
//! unchanged config perform no recomputation.

use anyhow::Context;
use clap::{Parser, Subcommand};
use plom::constraints::Algo;
use plom::pipeline::{Pipeline, PipelineConfig};
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "plom", version, about = "probabilistic learning on manifolds for stochastic PDE solvers")]
struct Cli {
    /// Path to the TOML configuration.
    #[arg(long, global = true, default_value = "plom.toml")]
    config: PathBuf,

    /// Override the dataset seed from the config.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Override the output directory from the config.
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the training dataset by solving the model N_d times.
    Train,
    /// Karhunen-Loève and PCA reduction of the training dataset.
    Reduce,
    /// Unconstrained generation of n_MC additional realizations.
    Learn,
    /// Reference and learned-set residual reports.
    Residual,
    /// Constrained generation with a Newton iteration on the multipliers.
    LearnConstrained {
        /// Newton flavor: 1 residual-only, 2 coupled, 3 decoupled blocks.
        #[arg(long, value_parser = clap::value_parser!(u8).range(1..=3))]
        algo: u8,
    },
    /// Density curves, moments, residual summaries, confidence envelope.
    Report,
    /// Run every stage in order.
    Pipeline,
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let mut config = PipelineConfig::load(&cli.config)
        .with_context(|| format!("loading config {}", cli.config.display()))?;
    if let Some(seed) = cli.seed {
        config.dataset.seed = seed;
    }
    let pipeline = Pipeline::new(config, cli.out.as_deref())?;

    let describe = |name: &str, computed: bool| {
        if computed {
            log::info!("stage {name}: computed");
        } else {
            log::info!("stage {name}: up to date, skipped");
        }
    };

    match cli.command {
        Command::Train => {
            let (_, computed) = pipeline.train()?;
            describe("train", computed);
        }
        Command::Reduce => {
            let (_, _, computed) = pipeline.reduce()?;
            describe("reduce", computed);
        }
        Command::Learn => {
            let (_, computed) = pipeline.learn()?;
            describe("learn", computed);
        }
        Command::Residual => {
            let (_, computed) = pipeline.residual()?;
            describe("residual", computed);
        }
        Command::LearnConstrained { algo } => {
            let (_, computed) = pipeline.learn_constrained(Algo::from_id(algo)?)?;
            describe("learn-constrained", computed);
        }
        Command::Report => {
            let (_, computed) = pipeline.report()?;
            describe("report", computed);
        }
        Command::Pipeline => {
            let summary = pipeline.run_all()?;
            for (name, computed) in &summary.stages {
                describe(name, *computed);
            }
            println!(
                "pipeline complete: {} of {} stages computed, artifacts in {}",
                summary.computed_count(),
                summary.stages.len(),
                summary.out_dir.display()
            );
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::FAILURE
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cli_parses_every_subcommand() {
        for args in [
            vec!["plom", "train"],
            vec!["plom", "reduce"],
            vec!["plom", "learn"],
            vec!["plom", "residual"],
            vec!["plom", "learn-constrained", "--algo", "3"],
            vec!["plom", "report"],
            vec!["plom", "pipeline", "--config", "x.toml", "--out", "dir", "--seed", "9"],
        ] {
            Cli::try_parse_from(args).unwrap();
        }
    }

    #[test]
    fn algo_out_of_range_is_rejected() {
        assert!(Cli::try_parse_from(["plom", "learn-constrained", "--algo", "4"]).is_err());
    }
}
