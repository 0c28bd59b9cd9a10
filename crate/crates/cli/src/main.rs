use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use kernel_se::error::{Error, Result};
use kernel_se::pipeline::{
    cmd_autotune, cmd_enhance, cmd_evaluate, cmd_mix, cmd_train, MaskKind, RunConfig,
};
use log::{info, warn};

/// Kernel-machine speech enhancement.
#[derive(Debug, Parser)]
#[command(name = "kse", version)]
struct Cli {
    /// Maximum worker threads for all parallel work.
    #[arg(long, global = true)]
    threads: Option<usize>,

    /// Increase log verbosity (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Overrides {
    /// Number of frequency subbands.
    #[arg(long)]
    subbands: Option<usize>,
    /// Mixture SNR in dB, applied to every noise setting.
    #[arg(long, allow_hyphen_values = true)]
    snr: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_parser = parse_mask)]
    mask: Option<MaskKind>,
}

fn parse_mask(s: &str) -> std::result::Result<MaskKind, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write the clean and noisy waveforms of every mixture.
    Mix {
        #[arg(long)]
        config: PathBuf,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Select kernel parameters per subband on subsamples.
    Autotune {
        #[arg(long)]
        config: PathBuf,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Tune, train and save a subband model.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Enhance a mono WAV file with a saved model.
    Enhance {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        /// Accepted for symmetry; the model carries its own configuration.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Score a saved model on the test split.
    Evaluate {
        #[arg(long)]
        model: PathBuf,
        /// Defaults to the configuration embedded in the model.
        #[arg(long)]
        config: Option<PathBuf>,
        #[command(flatten)]
        overrides: Overrides,
    },
}

fn load(path: &PathBuf, o: &Overrides, threads: Option<usize>) -> Result<RunConfig> {
    let mut cfg = RunConfig::load(path)?;
    if let Some(b) = o.subbands {
        cfg.subbands = b;
    }
    if let Some(snr) = o.snr {
        cfg.override_snr(snr);
    }
    if let Some(seed) = o.seed {
        cfg.override_seed(seed);
    }
    if let Some(m) = o.mask {
        cfg.mask = m;
    }
    if let Some(t) = threads {
        cfg.workers = cfg.workers.min(t);
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: Cli) -> Result<()> {
    if let Some(t) = cli.threads {
        if t == 0 {
            return Err(Error::Config("--threads must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(t)
            .build_global()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    }
    let threads = cli.threads;
    match cli.command {
        Command::Mix { config, overrides } => {
            let cfg = load(&config, &overrides, threads)?;
            let files = cmd_mix(&cfg)?;
            println!(
                "wrote {} files under {}",
                files.len(),
                cfg.output_dir.join("mix").display()
            );
        }
        Command::Autotune { config, overrides } => {
            let cfg = load(&config, &overrides, threads)?;
            let run = cmd_autotune(&cfg)?;
            print!("{}", run.report);
        }
        Command::Train { config, overrides } => {
            let cfg = load(&config, &overrides, threads)?;
            let out = cmd_train(&cfg)?;
            for i in out.run.slow_subbands() {
                warn!("subband {i} did not converge within 10 epochs");
            }
            println!("model: {}", out.model_path.display());
            println!("report: {}", out.report_path.display());
            println!("val_mse: {:.6e}", out.run.val_mse);
        }
        Command::Enhance {
            model,
            input,
            output,
            config,
        } => {
            if config.is_some() {
                info!("--config is ignored by enhance");
            }
            cmd_enhance(&model, &input, &output)?;
            println!("wrote {}", output.display());
        }
        Command::Evaluate {
            model,
            config,
            overrides,
        } => {
            let cfg = match config {
                Some(p) => Some(load(&p, &overrides, threads)?),
                None => None,
            };
            let run = cmd_evaluate(&model, cfg.as_ref())?;
            print!("{}", run.summary());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.category().exit_code() as u8)
        }
    }
}
