//! Command-line entry point: run experiments stage by stage or end to end,
//! generate reports, and run the self-check suite.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use bpo_lab::config::{resolve_out_dir, AlgoChoice, RunConfig};
use bpo_lab::error::LabError;
use bpo_lab::report::report;
use bpo_lab::runner::{self, cmd_curate, cmd_eval, cmd_rl, cmd_sft, run_experiment};
use bpo_lab::selfcheck::{run_all_timed, CheckSettings};

#[derive(Parser)]
#[command(
    name = "bpo-lab",
    about = "Desk-scale laboratory for bi-mode policy optimization",
    version
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run the full pipeline: curate, SFT, RL, final evaluation.
    Run {
        /// Path to the run configuration (TOML).
        #[arg(long)]
        config: PathBuf,
        /// Run directory (defaults to the config's output_dir, then
        /// $BPO_OUT_ROOT/run-<algo>-seed<seed>).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Curate the training corpus into the run directory.
    Curate {
        /// Path to the run configuration (TOML).
        #[arg(long)]
        config: PathBuf,
        /// Run directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Supervised warm-up from the curated corpus.
    Sft {
        /// Path to the run configuration (TOML).
        #[arg(long)]
        config: PathBuf,
        /// Run directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Reinforcement learning from the warm-up checkpoint.
    Rl {
        /// Path to the run configuration (TOML).
        #[arg(long)]
        config: PathBuf,
        /// Run directory.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Training arm (overrides the config).
        #[arg(long, value_enum)]
        algo: Option<AlgoChoice>,
    },
    /// Evaluate both checkpoints on a fresh held-out suite.
    Eval {
        /// Path to the run configuration (TOML).
        #[arg(long)]
        config: PathBuf,
        /// Run directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Generate report tables from a completed run directory.
    Report {
        /// Path to the run configuration (TOML); only used to locate the
        /// run directory when --out is absent.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Run directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the invariant and gradient self-check suite.
    Check {
        /// Ignored; accepted so every subcommand takes the same flags.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Ignored; accepted so every subcommand takes the same flags.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Seed for the check's private random streams.
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn load(config: &Path) -> Result<RunConfig, LabError> {
    let cfg = RunConfig::load(config)?;
    cfg.validate()?;
    Ok(cfg)
}

fn run() -> Result<(), LabError> {
    match Cli::parse().cmd {
        Cmd::Run { config, out } => {
            let cfg = load(&config)?;
            let dir = resolve_out_dir(out, &cfg)?;
            let outcome = run_experiment(&cfg, &dir)?;
            let manifest = runner::read_manifest(&dir.join(runner::MANIFEST_FILE))?;
            for s in &manifest.stages {
                println!("{}: {}", s.stage, s.detail);
            }
            println!(
                "run complete in {:.1}s -> {}",
                manifest.wall_clock_secs,
                outcome.dir.display()
            );
            Ok(())
        }
        Cmd::Curate { config, out } => {
            let cfg = load(&config)?;
            let dir = resolve_out_dir(out, &cfg)?;
            let s = cmd_curate(&cfg, &dir)?;
            println!(
                "kept {} items ({} reasoning, {} direct); rejected {} (consistency {}, keyword {}, duplicate {})",
                s.kept,
                s.reasoning,
                s.kept - s.reasoning,
                s.rejected.total(),
                s.rejected.consistency,
                s.rejected.keyword,
                s.rejected.duplicate,
            );
            Ok(())
        }
        Cmd::Sft { config, out } => {
            let cfg = load(&config)?;
            let dir = resolve_out_dir(out, &cfg)?;
            let s = cmd_sft(&cfg, &dir)?;
            match (s.epoch_losses.first(), s.epoch_losses.last()) {
                (Some(first), Some(last)) => println!(
                    "{} items, {} epochs, loss {first:.4} -> {last:.4}",
                    s.items,
                    s.epoch_losses.len()
                ),
                _ => println!("{} items, 0 epochs (no-op)", s.items),
            }
            if s.single_label {
                println!("warning: corpus carries a single label; the policy cannot become bi-modal");
            }
            Ok(())
        }
        Cmd::Rl { config, out, algo } => {
            let cfg = load(&config)?;
            let dir = resolve_out_dir(out, &cfg)?;
            let s = cmd_rl(&cfg, &dir, algo.unwrap_or(cfg.algo))?;
            println!("{} steps of {}", s.steps, s.algo.name());
            Ok(())
        }
        Cmd::Eval { config, out } => {
            let cfg = load(&config)?;
            let dir = resolve_out_dir(out, &cfg)?;
            let e = cmd_eval(&cfg, &dir)?;
            for (name, cp) in [("post-SFT", &e.post_sft), ("post-RL", &e.post_rl)] {
                println!(
                    "{name}: auto acc {:.3} (trigger easy {} hard {}), thinking acc {:.3}, non-thinking acc {:.3}",
                    cp.auto.overall.accuracy,
                    cp.auto
                        .easy
                        .trigger_rate
                        .map_or_else(|| "-".into(), |t| format!("{t:.3}")),
                    cp.auto
                        .hard
                        .trigger_rate
                        .map_or_else(|| "-".into(), |t| format!("{t:.3}")),
                    cp.thinking.overall.accuracy,
                    cp.nonthinking.overall.accuracy,
                );
            }
            Ok(())
        }
        Cmd::Report { config, out } => {
            let dir = match (out, config) {
                (Some(dir), _) => dir,
                (None, Some(path)) => {
                    let cfg = RunConfig::load(&path)?;
                    resolve_out_dir(None, &cfg)?
                }
                (None, None) => return Err(LabError::NoOutputDir),
            };
            let paths = report(&dir)?;
            println!("reports written to {}", paths.dir.display());
            Ok(())
        }
        Cmd::Check { seed, .. } => {
            let settings = CheckSettings {
                seed,
                ..CheckSettings::default()
            };
            let (outcomes, secs) = run_all_timed(&settings);
            let mut failed = 0usize;
            for o in &outcomes {
                println!("{}", o.line());
                failed += usize::from(!o.passed);
            }
            println!(
                "{} of {} checks passed in {secs:.1}s",
                outcomes.len() - failed,
                outcomes.len()
            );
            if failed > 0 {
                return Err(LabError::Config(format!("{failed} self-checks failed")));
            }
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
