use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};

use advsum::config::TrainingConfig;
use advsum_cli::{apply_overrides, Overrides, Phase};

#[derive(Parser)]
#[command(name = "advsum", version, about = "Adversarially trained pointer-generator summarizer")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Configuration file (`key = value` lines).
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    /// Length of this phase: MLE epochs, discriminator epochs or adversarial rounds.
    #[arg(long)]
    epochs: Option<usize>,
    /// Discriminator weight in the mixed reward.
    #[arg(long)]
    lambda: Option<f64>,
    /// Monte-Carlo rollouts per action value.
    #[arg(long)]
    rollouts: Option<usize>,
    /// Generator checkpoint path.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Maximum-likelihood pretraining of the generator.
    PretrainGen {
        #[command(flatten)]
        common: Common,
        /// Continue from an existing checkpoint.
        #[arg(long)]
        resume: bool,
    },
    /// Pretrain the discriminator against generator samples.
    PretrainDisc {
        #[command(flatten)]
        common: Common,
    },
    /// Alternate policy-gradient generator updates with discriminator training.
    AdvTrain {
        #[command(flatten)]
        common: Common,
    },
    /// Greedy-decode one summary per input line.
    Summarize {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        input: PathBuf,
        /// Write here instead of standard output.
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Report corpus ROUGE on a `source<TAB>target` file.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        test: PathBuf,
        /// Score these summary lines instead of decoding.
        #[arg(long)]
        summaries: Option<PathBuf>,
    },
}

fn config_for(common: &Common, phase: Phase) -> Result<TrainingConfig> {
    let mut config = TrainingConfig::load(&common.config)?;
    let overrides = Overrides {
        seed: common.seed,
        epochs: common.epochs,
        lambda: common.lambda,
        rollouts: common.rollouts,
        checkpoint: common.checkpoint.clone(),
    };
    apply_overrides(&mut config, phase, &overrides)?;
    Ok(config)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::PretrainGen { common, resume } => {
            let config = config_for(&common, Phase::PretrainGenerator)?;
            let losses = advsum_cli::pretrain_generator(&config, resume)?;
            if let Some(last) = losses.last() {
                println!("final MLE loss {last:.6}");
            }
        }
        Command::PretrainDisc { common } => {
            let config = config_for(&common, Phase::PretrainDiscriminator)?;
            let losses = advsum_cli::pretrain_discriminator(&config)?;
            if let Some(last) = losses.last() {
                println!("final discriminator loss {last:.6}");
            }
        }
        Command::AdvTrain { common } => {
            let config = config_for(&common, Phase::Adversarial)?;
            for m in advsum_cli::adversarial(&config)? {
                println!("{}", m.trace_line());
            }
        }
        Command::Summarize { common, input, output } => {
            let config = config_for(&common, Phase::Inference)?;
            match output {
                Some(path) => {
                    let mut file = std::fs::File::create(&path)
                        .with_context(|| format!("cannot create {}", path.display()))?;
                    advsum_cli::summarize(&config, &input, &mut file)?;
                    file.flush()?;
                }
                None => {
                    let stdout = std::io::stdout();
                    let mut lock = stdout.lock();
                    advsum_cli::summarize(&config, &input, &mut lock)?;
                    lock.flush()?;
                }
            }
        }
        Command::Evaluate {
            common,
            test,
            summaries,
        } => {
            let config = config_for(&common, Phase::Inference)?;
            println!("{}", advsum_cli::evaluate(&config, &test, summaries.as_deref())?);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
