use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use dropsearch::harness::{
    cmd_eval_genome, cmd_random_search, cmd_render_mask, cmd_replay, cmd_report, cmd_search,
    RunConfig,
};
use dropsearch::Result;

#[derive(Parser)]
#[command(name = "dropsearch", version, about = "Structured-dropout pattern search")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the policy-driven pattern search and write a run directory
    Search {
        #[arg(long)]
        config: PathBuf,
        /// Override the evaluation budget from the config
        #[arg(long)]
        budget: Option<u64>,
        /// Override the search seed
        #[arg(long)]
        seed: Option<u64>,
        /// Override the in-flight job capacity C
        #[arg(long)]
        capacity: Option<usize>,
        /// Override the update batch size M
        #[arg(long)]
        batch_m: Option<usize>,
        /// Override the parent output directory
        #[arg(long)]
        out: Option<PathBuf>,
        /// Overwrite an existing run directory
        #[arg(long)]
        force: bool,
    },
    /// Evaluate uniformly random genomes under the same logging
    RandomSearch {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        budget: Option<u64>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        force: bool,
    },
    /// Score a single genome string under the configured evaluator
    EvalGenome {
        #[arg(long)]
        config: PathBuf,
        /// Genome text, e.g. `xfmr:size=70,stride=0,share_t=T,share_c=F;...`
        #[arg(long)]
        genome: String,
        /// Per-call evaluation seed
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Render one mask draw per pattern group as plain-PGM images
    RenderMask {
        #[arg(long)]
        genome: String,
        /// Drop rate (top of the ramp for conv genomes)
        #[arg(long, default_value_t = 0.3)]
        rate: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Directory the .pgm files are written into
        #[arg(long)]
        out: PathBuf,
    },
    /// Regenerate curves.csv and report.json inside a run directory
    Report {
        #[arg(long)]
        run: PathBuf,
    },
    /// Re-execute a simulated run and verify the stored log byte-for-byte
    Replay {
        #[arg(long)]
        run: PathBuf,
    },
}

#[allow(clippy::too_many_arguments)]
fn load_with_overrides(
    path: &PathBuf,
    budget: Option<u64>,
    seed: Option<u64>,
    capacity: Option<usize>,
    batch_m: Option<usize>,
    out: Option<PathBuf>,
) -> Result<RunConfig> {
    let mut config = RunConfig::load(path)?;
    if let Some(v) = budget {
        config.search.budget = v;
    }
    if let Some(v) = seed {
        config.search.seed = v;
    }
    if let Some(v) = capacity {
        config.search.capacity = v;
    }
    if let Some(v) = batch_m {
        config.search.batch_m = v;
    }
    if let Some(v) = out {
        config.out_dir = v;
    }
    Ok(config)
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Search { config, budget, seed, capacity, batch_m, out, force } => {
            let config = load_with_overrides(&config, budget, seed, capacity, batch_m, out)?;
            let (dir, outcome) = cmd_search(&config, force)?;
            println!(
                "{} evaluations, {} updates, {} failures",
                outcome.evaluated_ok, outcome.updates, outcome.failed
            );
            println!("run written to {}", dir.display());
        }
        Command::RandomSearch { config, budget, seed, out, force } => {
            let config = load_with_overrides(&config, budget, seed, None, None, out)?;
            let (dir, log) = cmd_random_search(&config, force)?;
            let best = log.best_so_far().last().map_or(f64::NAN, |&(_, _, b)| b);
            println!("{} evaluations, best perf {best}", log.records.len());
            println!("run written to {}", dir.display());
        }
        Command::EvalGenome { config, genome, seed } => {
            let config = RunConfig::load(&config)?;
            print!("{}", cmd_eval_genome(&config, &genome, seed)?);
        }
        Command::RenderMask { genome, rate, seed, out } => {
            let written = cmd_render_mask(&genome, rate, seed, &out)?;
            println!("wrote {} renders to {}", written.len(), out.display());
        }
        Command::Report { run } => {
            let (curves, report) = cmd_report(&run)?;
            println!("wrote {} and {}", curves.display(), report.display());
        }
        Command::Replay { run } => {
            let n = cmd_replay(&run)?;
            println!("replay ok: {n} evaluations reproduced bit-exactly");
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
