use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use forknet_cli::commands::{self, EvalOptions};
use forknet_cli::config::parse_override;
use forknet_cli::{Result, RunConfig};

#[derive(Parser)]
#[command(
    name = "forknet",
    version,
    about = "Causal speech enhancement: train, enhance, evaluate, verify"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct ConfigArgs {
    /// Run configuration file (`key = value` lines).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one key, e.g. `--set lr=1e-3`; may be repeated.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl ConfigArgs {
    fn load(&self) -> Result<RunConfig> {
        let overrides = self
            .overrides
            .iter()
            .map(|s| parse_override(s))
            .collect::<Result<Vec<_>>>()?;
        match &self.config {
            Some(path) => RunConfig::load(path, &overrides),
            None => RunConfig::from_sources(None, &overrides),
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Enhance a mono 16 kHz WAV file.
    Enhance {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long = "out")]
        output: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Train on synthetic mixtures; checkpoints go to `out_dir`.
    Train(ConfigArgs),
    /// Mean SI-SDR of noisy and enhanced held-out synthetic mixtures.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Number of held-out mixtures.
        #[arg(long, default_value_t = 8)]
        seeds: usize,
        /// Seed of the held-out stream.
        #[arg(long, default_value_t = 1000)]
        seed: u64,
        #[arg(long, default_value_t = 4.0)]
        chunk_s: f64,
        #[arg(long, default_value_t = -5.0, allow_hyphen_values = true)]
        snr_low_db: f64,
        #[arg(long, default_value_t = 20.0, allow_hyphen_values = true)]
        snr_high_db: f64,
        /// Program run as `PROGRAM clean.wav noisy.wav enhanced.wav` per utterance.
        #[arg(long)]
        scorer: Option<PathBuf>,
    },
    /// Finite-difference check of every operation, layer and a small model.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Coordinates checked per tensor in the end-to-end case (all if omitted).
        #[arg(long)]
        max_entries: Option<usize>,
    },
    /// Parameter counts per submodule.
    Params(ConfigArgs),
    /// Parameter counts of Ref1, Ref2 and the full model.
    Ablate,
    /// Write a checkpoint whose mask is the identity (for debugging the pipeline).
    IdentityCheckpoint {
        #[arg(long = "out")]
        output: PathBuf,
        #[command(flatten)]
        config: ConfigArgs,
    },
}

fn run(cli: Cli, out: &mut dyn Write) -> Result<()> {
    match cli.command {
        Command::Enhance {
            input,
            output,
            checkpoint,
        } => commands::enhance(&input, &output, &checkpoint, out),
        Command::Train(args) => commands::train_cmd(&args.load()?, out),
        Command::Eval {
            checkpoint,
            seeds,
            seed,
            chunk_s,
            snr_low_db,
            snr_high_db,
            scorer,
        } => {
            let opts = EvalOptions {
                utterances: seeds,
                seed,
                chunk_s,
                snr_range_db: (snr_low_db, snr_high_db),
                scorer,
            };
            commands::eval(&checkpoint, &opts, out)
        }
        Command::Gradcheck { seed, max_entries } => commands::gradcheck(seed, max_entries, out),
        Command::Params(args) => {
            let cfg = args.load()?;
            commands::params(&cfg.model, &cfg.preset, out).map(|_| ())
        }
        Command::Ablate => commands::ablate(out),
        Command::IdentityCheckpoint { output, config } => {
            let cfg = config.load()?;
            commands::identity_checkpoint(&cfg.model, cfg.train.seed, &output, out)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let stdout = std::io::stdout();
    let mut out = stdout.lock();
    match run(cli, &mut out) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let _ = out.flush();
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
