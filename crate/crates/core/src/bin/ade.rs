use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use ade_core::cli::{self, ExperimentConfig, SurgeryArgs};
use ade_core::surgery::{AdjustMode, InitStrategy};

#[derive(Parser)]
#[command(
    name = "ade",
    version,
    about = "Block importance, freezing and expansion for continued pre-training"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment config (TOML). Defaults to the built-in tiny config.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the config's seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory; defaults to the config's output_dir.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Score every block of a checkpoint by angular distance.
    Importance {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Fraction of the importance holdout to use.
        #[arg(long)]
        fraction: Option<f64>,
    },
    /// Select the top-k blocks and freeze and/or expand around them.
    Surgery {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        k: Option<usize>,
        #[arg(long, value_enum)]
        mode: Option<ModeArg>,
        #[arg(long, value_enum)]
        init: Option<InitArg>,
        #[arg(long)]
        fraction: Option<f64>,
        /// Importance CSV to select from instead of scoring the checkpoint.
        #[arg(long)]
        importance: Option<PathBuf>,
    },
    /// Run the config's training arm.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Interval checkpoint to continue from.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Score a checkpoint on the evaluation suite.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// eval.json of the reference model.
        #[arg(long)]
        reference: Option<PathBuf>,
    },
    /// Pretrain, run every arm at every duplicate fraction, and report.
    Reproduce {
        #[command(flatten)]
        common: Common,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Freeze,
    Expand,
    Both,
}

#[derive(Clone, Copy, ValueEnum)]
enum InitArg {
    RandomScaled,
    Copy,
    Identity,
}

impl From<ModeArg> for AdjustMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Freeze => AdjustMode::FreezeOnly,
            ModeArg::Expand => AdjustMode::ExpandOnly,
            ModeArg::Both => AdjustMode::FreezeAndExpand,
        }
    }
}

impl From<InitArg> for InitStrategy {
    fn from(i: InitArg) -> Self {
        match i {
            InitArg::RandomScaled => InitStrategy::RandomScaled { gain: 1.0 },
            InitArg::Copy => InitStrategy::CopyPrevious,
            InitArg::Identity => InitStrategy::IdentityZeroOut { gain: 1.0 },
        }
    }
}

fn setup(common: &Common) -> Result<(ExperimentConfig, PathBuf)> {
    let mut cfg = match &common.config {
        Some(p) => ExperimentConfig::load(p).with_context(|| format!("loading {}", p.display()))?,
        None => ExperimentConfig::tiny(),
    };
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    let out = common.out.clone().unwrap_or_else(|| cfg.output_dir.clone());
    Ok((cfg, out))
}

fn real_main() -> Result<bool> {
    let cli = Cli::parse();
    match cli.command {
        Command::Importance {
            common,
            checkpoint,
            fraction,
        } => {
            let (cfg, out) = setup(&common)?;
            cli::cmd_importance(&cfg, &checkpoint, fraction, &out)?;
        }
        Command::Surgery {
            common,
            checkpoint,
            k,
            mode,
            init,
            fraction,
            importance,
        } => {
            let (cfg, out) = setup(&common)?;
            let args = SurgeryArgs {
                k,
                mode: mode.map(Into::into),
                init: init.map(Into::into),
                fraction,
                importance,
            };
            cli::cmd_surgery(&cfg, &checkpoint, args, &out)?;
        }
        Command::Train {
            common,
            checkpoint,
            resume,
        } => {
            let (cfg, out) = setup(&common)?;
            let log = cli::cmd_train(&cfg, checkpoint.as_deref(), resume.as_deref(), &out)?;
            if let Some(last) = log.steps.last() {
                println!("{} steps, final loss {:.4}", log.steps.len(), last.loss);
            }
        }
        Command::Eval {
            common,
            checkpoint,
            reference,
        } => {
            let (cfg, out) = setup(&common)?;
            let report = cli::cmd_eval(&cfg, &checkpoint, reference.as_deref(), &out)?;
            for s in &report.scores {
                println!("{}: perplexity {:.4}", s.corpus, s.perplexity);
            }
            if let Some(v) = report.avg_improvement {
                println!("avg improvement {v:+.2}");
            }
        }
        Command::Reproduce { common } => {
            let (cfg, out) = setup(&common)?;
            let summary = cli::cmd_reproduce(&cfg, &out)?;
            print!("{}", summary.checks_text());
            println!("summary written to {}", Path::new(&out).join("summary.csv").display());
            return Ok(summary.passed());
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    match real_main() {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
