//! `selfpose`: run collection campaigns, relabel stores, fit learning curves
//! and inspect record lineage.
//!
//! stdout carries `key=value` lines only; diagnostics go to stderr.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

#[derive(Debug, Parser)]
#[command(name = "selfpose", version, about = "Self-supervised pose-label data engine on a simulated workcell")]
struct Cli {
    /// Overrides the campaign seed (`run`) or selects a single evaluation seed (`curve`).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory. Defaults to `output.dir` for `run`, the store's directory otherwise.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run a collection campaign and write store.log, config.toml and clouds/.
    Run {
        /// Campaign config (TOML).
        config: PathBuf,
    },
    /// Relabel every stored episode and print accepted/discarded counts.
    Label {
        store: PathBuf,
        /// Also write the training samples, one tab-separated line each.
        #[arg(long)]
        export: Option<PathBuf>,
    },
    /// Recall against number of training samples, as CSV.
    Curve {
        store: PathBuf,
        /// Comma-separated sample counts.
        #[arg(long, value_delimiter = ',', default_values_t = selfpose_core::learner::DEFAULT_CHECKPOINTS)]
        checkpoints: Vec<usize>,
        /// Comma-separated evaluation seeds.
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
        /// Evaluation episodes per checkpoint and seed.
        #[arg(long, default_value_t = 500)]
        episodes: usize,
        /// CSV path. Defaults to `curve.csv` in the output directory.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Print the lineage of a record, or the children of a task.
    Inspect { store: PathBuf, id: u64 },
    /// Write the object model as PLY (and the default config when none is given).
    GenModel {
        /// Campaign config whose `object` section is used.
        config: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run { config } => commands::run(&config, cli.seed, cli.out.as_deref()),
        Command::Label { store, export } => commands::label(&store, export.as_deref()),
        Command::Curve { store, checkpoints, seeds, episodes, csv } => {
            let seeds = seeds.unwrap_or_else(|| cli.seed.map_or_else(|| vec![0, 1, 2, 3, 4], |s| vec![s]));
            commands::curve(&store, &checkpoints, &seeds, episodes, csv.as_deref(), cli.out.as_deref())
        }
        Command::Inspect { store, id } => commands::inspect(&store, id),
        Command::GenModel { config } => commands::gen_model(config.as_deref(), cli.seed, cli.out.as_deref()),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
