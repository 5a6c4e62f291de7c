use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use mrcae_cli::{cmd_evaluate, cmd_gradcheck, cmd_separate, cmd_synth, cmd_train, exit_code, Precision, RunConfig};
use mrcae_core::dataset::manifest_root;
use mrcae_core::gradcheck::TOLERANCE;
use mrcae_core::Result;

#[derive(Parser)]
#[command(name = "mrcae", version, about = "Raw-waveform source separation with a multi-resolution convolutional auto-encoder")]
struct Cli {
    /// JSON run configuration; built-in defaults when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render a seeded synthetic corpus with a manifest.
    Synth {
        #[arg(long)]
        seed: Option<u64>,
        /// Corpus directory (default: the manifest's directory).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train on the manifest's training songs.
    Train {
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        max_epochs: Option<usize>,
        /// Start from this checkpoint's weights.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Checkpoint directory (default: paths.checkpoint_dir).
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t)]
        precision: Precision,
        #[arg(long)]
        quiet: bool,
    },
    /// Separate a mixture WAV, or every test song when no input is given.
    Separate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value_t)]
        precision: Precision,
        input: Option<PathBuf>,
    },
    /// Score separated songs against reference images.
    Evaluate {
        /// Directory with one sub-directory of source WAVs per song.
        #[arg(long)]
        estimates: PathBuf,
        /// Corpus directory holding manifest.json.
        #[arg(long)]
        references: PathBuf,
        /// Report file (default: <paths.report_dir>/eval_report.json).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Check analytic gradients of the tiny reference model.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, hide = true)]
        corrupt_backward: bool,
    },
}

fn load(path: Option<&Path>) -> Result<RunConfig> {
    match path {
        Some(p) => RunConfig::load(p),
        None => Ok(RunConfig::default()),
    }
}

fn run(cli: Cli) -> Result<bool> {
    let mut cfg = load(cli.config.as_deref())?;
    match cli.command {
        Command::Synth { seed, out } => {
            if let Some(s) = seed {
                cfg.data.synth.seed = s;
            }
            let dir = out.unwrap_or_else(|| manifest_root(&cfg.data.manifest));
            let m = cmd_synth(&cfg, &dir)?;
            println!("wrote {} songs to {}", m.songs.len(), dir.display());
        }
        Command::Train {
            seed,
            max_epochs,
            checkpoint,
            out,
            precision,
            quiet,
        } => {
            if let Some(s) = seed {
                cfg.hyper.seed = s;
                cfg.model.seed = s;
            }
            if let Some(n) = max_epochs {
                cfg.hyper.max_epochs = n;
            }
            let dir = out.unwrap_or_else(|| cfg.paths.checkpoint_dir.clone());
            let s = cmd_train(&cfg, precision, checkpoint.as_deref(), &dir, !quiet)?;
            match (s.history.best_val, s.history.best_epoch) {
                (Some(v), Some(e)) => println!(
                    "trained {} epochs on {} segments; best validation loss {v:.6} at epoch {e}",
                    s.history.records.len(),
                    s.train_pairs
                ),
                _ => println!("no epochs run"),
            }
            println!("checkpoints in {}", s.checkpoint_dir.display());
        }
        Command::Separate {
            checkpoint,
            out,
            precision,
            input,
        } => {
            for p in cmd_separate(&cfg, precision, &checkpoint, input.as_deref(), &out)? {
                println!("{}", p.display());
            }
        }
        Command::Evaluate {
            estimates,
            references,
            out,
        } => {
            let path = out.unwrap_or_else(|| cfg.paths.report_dir.join("eval_report.json"));
            let report = cmd_evaluate(&cfg, &estimates, &references, &path)?;
            if let Some(m) = &report.median {
                for s in &m.sources {
                    println!(
                        "{:<12} median over {} songs: SDR {:7.2}  ISR {:7.2}  SIR {:7.2}  SAR {:7.2}",
                        s.source, m.songs, s.metrics.sdr, s.metrics.isr, s.metrics.sir, s.metrics.sar
                    );
                }
            }
            println!("report written to {}", path.display());
        }
        Command::Gradcheck { seed, corrupt_backward } => {
            let report = cmd_gradcheck(seed, corrupt_backward)?;
            for g in &report.groups {
                let verdict = if g.max_rel_err < TOLERANCE { "ok" } else { "FAIL" };
                println!("{:<28} {:>4} params  max rel err {:.3e}  {verdict}", g.name, g.params, g.max_rel_err);
            }
            let passed = report.passed();
            println!(
                "gradcheck {}: max rel err {:.3e} (tolerance {TOLERANCE:e})",
                if passed { "passed" } else { "FAILED" },
                report.max_rel_err()
            );
            return Ok(passed);
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(4),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
