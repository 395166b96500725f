use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use routelab::config::ExperimentConfig;
use routelab::pipeline::{self, EvalMode, TrainStage};

#[derive(Parser, Debug)]
#[command(name = "routelab", version, about = "Boundary-guided small/large router experiments")]
struct Cli {
    /// TOML experiment config; built-in defaults when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the master seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overrides the output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate tasks, profile them and write the taxonomy tables.
    Profile,
    /// Build expert records and the SFT dataset.
    Synthesize,
    /// Train the SFT warm start or the BoPO policies.
    Train {
        #[arg(long, value_enum)]
        stage: StageArg,
        /// Continue BoPO from existing checkpoints.
        #[arg(long)]
        resume: bool,
    },
    /// Write evaluation reports.
    Eval {
        #[arg(long, value_enum)]
        mode: ModeArg,
    },
    /// Print the effective config.
    ShowConfig,
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum StageArg {
    Sft,
    Bopo,
}

#[derive(ValueEnum, Clone, Copy, Debug)]
#[value(rename_all = "snake_case")]
enum ModeArg {
    Frontier,
    HardBudget,
    Allocation,
}

fn run(cli: Cli) -> routelab::Result<()> {
    let mut cfg = match &cli.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(out) = cli.out {
        cfg.output_dir = out;
    }
    let written = match cli.command {
        Command::Profile => pipeline::cmd_profile(&cfg)?,
        Command::Synthesize => pipeline::cmd_synthesize(&cfg)?,
        Command::Train { stage, resume } => {
            let stage = match stage {
                StageArg::Sft => TrainStage::Sft,
                StageArg::Bopo => TrainStage::Bopo,
            };
            pipeline::cmd_train(&cfg, stage, resume)?
        }
        Command::Eval { mode } => {
            let mode = match mode {
                ModeArg::Frontier => EvalMode::Frontier,
                ModeArg::HardBudget => EvalMode::HardBudget,
                ModeArg::Allocation => EvalMode::Allocation,
            };
            pipeline::cmd_eval(&cfg, mode)?
        }
        Command::ShowConfig => {
            print!("{}", cfg.to_toml_string());
            return Ok(());
        }
    };
    for path in written {
        println!("{}", path.display());
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = e.to_string().replace('\n', " ");
            eprintln!("error class={}: {msg}", e.class());
            ExitCode::from(2)
        }
    }
}
