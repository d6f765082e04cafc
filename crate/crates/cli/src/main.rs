mod commands;
mod settings;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use settings::{BoundsArg, Model, Preset, Settings};

/// Searches federated-learning configurations that trade communication volume
/// against accuracy.
#[derive(Debug, Parser)]
#[command(name = "flcop", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run NSGA-II campaigns and write fronts, hypervolume traces and a report.
    Optimize {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        search: SearchArgs,
        /// Write one JSON line per generation to this file.
        #[arg(long)]
        trace: Option<PathBuf>,
    },
    /// Train with every client, every step, uncompressed, and write baseline.json.
    Baseline {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        rounds: RoundTrace,
    },
    /// Evaluate one genome and print its objectives and bit ledger.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Genome as a JSON array [m, E, mu_1.., b_1..].
        #[arg(long)]
        genome: String,
        /// Comma-separated parameter-array sizes; skips training and reports
        /// the communication objective only.
        #[arg(long, value_delimiter = ',')]
        layer_sizes: Option<Vec<usize>>,
        #[command(flatten)]
        rounds: RoundTrace,
    },
    /// Rebuild the merged front, genome statistics and summary of a campaign directory.
    Report {
        dir: PathBuf,
    },
}

#[derive(Debug, Args)]
struct Common {
    /// Settings file (JSON object or key = value lines).
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_enum)]
    preset: Option<Preset>,
    /// Directory holding the four MNIST IDX files [default: data/mnist].
    #[arg(long, env = "FLCOP_MNIST_DIR")]
    mnist_dir: Option<PathBuf>,
    #[arg(long, value_enum)]
    model: Option<Model>,
    /// Training images to keep (seeded subsample).
    #[arg(long)]
    train_limit: Option<usize>,
    /// Test images to keep (seeded subsample).
    #[arg(long)]
    test_limit: Option<usize>,
    /// Number of clients N [default: 4].
    #[arg(long)]
    clients: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// SGD learning rate [default: 0.5].
    #[arg(long)]
    lr: Option<f64>,
    /// Mini-batch size [default: 64].
    #[arg(long)]
    batch: Option<usize>,
    /// Training budget in epochs of the largest shard [default: 1].
    #[arg(long)]
    epochs: Option<usize>,
    /// Output directory [default: results].
    #[arg(long)]
    out: Option<PathBuf>,
    /// Evaluation threads [default: one per core].
    #[arg(long)]
    workers: Option<usize>,
}

#[derive(Debug, Args)]
struct SearchArgs {
    /// Population size U (even, at least 4) [default: 100].
    #[arg(long)]
    pop: Option<usize>,
    /// [default: 300 for fc, 120 for conv]
    #[arg(long)]
    generations: Option<usize>,
    /// Independent searches [default: 30].
    #[arg(long)]
    runs: Option<usize>,
    #[arg(long, value_enum)]
    bounds: Option<BoundsArg>,
}

#[derive(Debug, Args)]
struct RoundTrace {
    /// Write one JSON line per communication round to this file.
    #[arg(long)]
    trace: Option<PathBuf>,
    /// Include global test accuracy in every trace line.
    #[arg(long, requires = "trace")]
    trace_accuracy: bool,
}

impl Common {
    fn settings(&self, search: Option<&SearchArgs>) -> Settings {
        Settings {
            preset: self.preset,
            mnist_dir: self.mnist_dir.clone(),
            model: self.model,
            train_limit: self.train_limit,
            test_limit: self.test_limit,
            clients: self.clients,
            pop: search.and_then(|s| s.pop),
            generations: search.and_then(|s| s.generations),
            runs: search.and_then(|s| s.runs),
            seed: self.seed,
            bounds: search.and_then(|s| s.bounds),
            lr: self.lr,
            batch: self.batch,
            epochs: self.epochs,
            out: self.out.clone(),
            workers: self.workers,
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(commands::EXIT_CONFIG)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let result = match &cli.command {
        Command::Optimize { common, search, trace } => {
            commands::resolve(&common.settings(Some(search)), common.config.as_deref())
                .and_then(|s| commands::optimize(&s, trace.as_deref()))
        }
        Command::Baseline { common, rounds } => commands::resolve(&common.settings(None), common.config.as_deref())
            .and_then(|s| commands::baseline(&s, rounds.trace.as_deref(), rounds.trace_accuracy)),
        Command::Eval {
            common,
            genome,
            layer_sizes,
            rounds,
        } => commands::resolve(&common.settings(None), common.config.as_deref()).and_then(|s| {
            commands::eval(
                &s,
                genome,
                layer_sizes.as_deref(),
                rounds.trace.as_deref(),
                rounds.trace_accuracy,
            )
        }),
        Command::Report { dir } => commands::report(dir),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code())
        }
    }
}
