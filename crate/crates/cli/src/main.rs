use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use forgetbench::pipeline::{commands, config_help, BenchConfig, Workspace};
use forgetbench::unlearn::AlgorithmId;
use forgetbench::BenchError;
use serde_json::json;

/// Iterative machine-unlearning benchmark.
#[derive(Parser)]
#[command(name = "fbench", version, after_help = "Run `fbench <command> --help` for per-command flags.")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// JSON config file; omitted fields take their defaults.
    #[arg(long, short)]
    config: Option<PathBuf>,
    /// Override a config field, e.g. `--set attack.shadows=16`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Args)]
struct AlgoArg {
    /// Algorithm id; defaults to `unlearn.algorithm` from the config.
    #[arg(long)]
    algo: Option<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Train (or look up) the base model.
    TrainBase(Common),
    /// Build and store the split plan.
    MakePlan(Common),
    /// One unlearning step on the first forget set.
    Unlearn {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        algo: AlgoArg,
    },
    /// Train the LiRA shadow population and the algorithm's shadow pairs.
    Shadows {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        algo: AlgoArg,
    },
    /// Single-step privacy evaluation with every attack.
    Attack {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        algo: AlgoArg,
        #[arg(long)]
        run_id: Option<String>,
    },
    /// Iterative unlearning runs; `--algo` takes a comma-separated list.
    Iterate {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_delimiter = ',')]
        algo: Vec<String>,
        #[arg(long)]
        iterations: Option<usize>,
        #[arg(long)]
        run_id: Option<String>,
    },
    /// Random-search hyperparameter tuning on the first forget set.
    Tune {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        algo: AlgoArg,
        #[arg(long)]
        trials: Option<usize>,
        /// Also write the best configuration here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Tables and plots from stored runs.
    Report {
        #[command(flatten)]
        common: Common,
        /// Run ids to include; defaults to every algorithm's default runs.
        #[arg(long, value_delimiter = ',')]
        runs: Vec<String>,
        #[arg(long)]
        run_id: Option<String>,
    },
    /// Print the config schema with defaults.
    Schema,
}

fn workspace(common: &Common) -> forgetbench::Result<Workspace> {
    Workspace::open(BenchConfig::load(common.config.as_deref(), &common.overrides)?)
}

fn algorithm(ws: &Workspace, arg: &Option<String>) -> forgetbench::Result<AlgorithmId> {
    match arg {
        Some(s) => s.parse(),
        None => Ok(ws.config.unlearn.algorithm),
    }
}

fn run(command: Command) -> forgetbench::Result<commands::CommandOutput> {
    match command {
        Command::Schema => Ok(json!({ "help": config_help() }).into()),
        Command::TrainBase(c) => commands::train_base(&workspace(&c)?),
        Command::MakePlan(c) => commands::make_plan(&workspace(&c)?),
        Command::Unlearn { common, algo } => {
            let ws = workspace(&common)?;
            commands::unlearn(&ws, algorithm(&ws, &algo.algo)?)
        }
        Command::Shadows { common, algo } => {
            let ws = workspace(&common)?;
            commands::shadows(&ws, algorithm(&ws, &algo.algo)?)
        }
        Command::Attack { common, algo, run_id } => {
            let ws = workspace(&common)?;
            commands::attack(&ws, algorithm(&ws, &algo.algo)?, run_id.as_deref())
        }
        Command::Iterate {
            common,
            algo,
            iterations,
            run_id,
        } => {
            let ws = workspace(&common)?;
            let algos = if algo.is_empty() {
                vec![ws.config.unlearn.algorithm]
            } else {
                algo.iter().map(|a| a.trim().parse()).collect::<forgetbench::Result<Vec<AlgorithmId>>>()?
            };
            commands::iterate(&ws, &algos, iterations, run_id.as_deref())
        }
        Command::Tune {
            common,
            algo,
            trials,
            out,
        } => {
            let ws = workspace(&common)?;
            commands::tune(&ws, algorithm(&ws, &algo.algo)?, trials, out.as_deref())
        }
        Command::Report { common, runs, run_id } => commands::report(&workspace(&common)?, &runs, run_id.as_deref()),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            // --help and --version
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let _ = e.print();
            eprintln!("\n{}", config_help());
            return ExitCode::from(2);
        }
    };
    match run(cli.command) {
        Ok(out) => {
            println!("{}", serde_json::to_string_pretty(&out.value).expect("output serializes"));
            if out.failed {
                ExitCode::FAILURE
            } else {
                ExitCode::SUCCESS
            }
        }
        Err(e) => {
            let usage = matches!(e, BenchError::Config(_) | BenchError::UnknownAlgo(_));
            eprintln!("{}", json!({ "error": e.code(), "message": e.to_string() }));
            if usage {
                eprintln!("\n{}", config_help());
            }
            ExitCode::FAILURE
        }
    }
}
