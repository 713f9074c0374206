//! Library surface of the `ohda` binary: argument definitions, config
//! resolution, and the command implementations. Kept as a library so the
//! integration tests can build configs programmatically.

pub mod commands;
pub mod config;

use std::path::PathBuf;

use clap::{Parser, Subcommand};

use ohda_core::error::{Error, Result};

use config::RunConfig;

#[derive(Parser, Debug)]
#[command(
    name = "ohda",
    version,
    about = "Synthetic-to-real adaptation for a point cloud detector"
)]
pub struct Cli {
    /// TOML run configuration; omitted sections use built-in defaults.
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,

    /// Override the run seed.
    #[arg(long, global = true, value_name = "N")]
    pub seed: Option<u64>,

    /// Override the output directory.
    #[arg(long, global = true, value_name = "DIR")]
    pub out: Option<PathBuf>,

    /// Override the invoked stage's epoch count (pretrain epochs for
    /// `pretrain`, adapt epochs for `adapt` and `ablate`).
    #[arg(long, global = true, value_name = "N")]
    pub epochs: Option<usize>,

    /// Training state to start from (for `adapt`/`ablate`), or the
    /// checkpoint to score (for `eval`). Defaults to the pretrain state in
    /// the output directory.
    #[arg(long, global = true, value_name = "PATH")]
    pub checkpoint: Option<PathBuf>,

    /// Disable object-level augmentation of source scenes.
    #[arg(long, global = true)]
    pub no_oaa: bool,

    /// Disable scene-level augmentation of source scenes.
    #[arg(long, global = true)]
    pub no_vss: bool,

    /// Disable the pseudo-label consistency loss.
    #[arg(long, global = true)]
    pub no_cla: bool,

    /// Disable the feature alignment loss.
    #[arg(long, global = true)]
    pub no_hla: bool,

    /// Freeze pseudo-label thresholds at their upper clamp.
    #[arg(long, global = true)]
    pub no_pcat: bool,

    /// Score pseudo labels with unit weights.
    #[arg(long, global = true)]
    pub no_mpr: bool,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate the four dataset splits under the data root.
    GenData,
    /// Train the detector on the labeled source split.
    Pretrain,
    /// Run the adaptation loop from a pretrained state.
    Adapt,
    /// Score a checkpoint or a stored detections file on a dataset split.
    Eval {
        /// Dataset directory; defaults to the target eval split.
        #[arg(long, value_name = "DIR")]
        dataset: Option<PathBuf>,
        /// Detections file to score instead of a checkpoint.
        #[arg(long, value_name = "PATH")]
        detections: Option<PathBuf>,
    },
    /// One adaptation run per declared toggle set, plus a summary table.
    Ablate,
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::GenData => "gen-data",
            Command::Pretrain => "pretrain",
            Command::Adapt => "adapt",
            Command::Eval { .. } => "eval",
            Command::Ablate => "ablate",
        }
    }
}

/// Merge the config file with command line overrides.
pub fn resolve(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = config::load(cli.config.as_deref())?;
    if let Some(seed) = cli.seed {
        cfg.train.seed = seed;
    }
    if let Some(out) = &cli.out {
        cfg.out_dir = out.clone();
    }
    if let Some(epochs) = cli.epochs {
        match cli.command {
            Command::Pretrain => cfg.train.pretrain_epochs = epochs,
            Command::Adapt | Command::Ablate => cfg.train.adapt_epochs = epochs,
            _ => {
                return Err(Error::InvalidArgument(
                    "--epochs only applies to pretrain, adapt, and ablate".into(),
                ))
            }
        }
    }
    let toggles = &mut cfg.train.toggles;
    if cli.no_oaa {
        toggles.oaa = false;
    }
    if cli.no_vss {
        toggles.vss = false;
    }
    if cli.no_cla {
        toggles.cla = false;
    }
    if cli.no_hla {
        toggles.hla = false;
    }
    if cli.no_pcat {
        toggles.pcat = false;
    }
    if cli.no_mpr {
        toggles.mpr = false;
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Install a stderr logger. The level comes from `OHDA_LOG_LEVEL` (error,
/// info, or debug; default info); anything else is an error rather than a
/// silent fallback.
pub fn init_logging() -> Result<()> {
    let level = match std::env::var("OHDA_LOG_LEVEL") {
        Err(_) => log::LevelFilter::Info,
        Ok(value) => match value.as_str() {
            "error" => log::LevelFilter::Error,
            "info" => log::LevelFilter::Info,
            "debug" => log::LevelFilter::Debug,
            other => {
                return Err(Error::InvalidArgument(format!(
                    "OHDA_LOG_LEVEL {other:?} is not one of error, info, debug"
                )))
            }
        },
    };
    static LOGGER: StderrLogger = StderrLogger;
    // Ignore double-install; tests may call this more than once per process.
    let _ = log::set_logger(&LOGGER);
    log::set_max_level(level);
    Ok(())
}

struct StderrLogger;

impl log::Log for StderrLogger {
    fn enabled(&self, _: &log::Metadata) -> bool {
        true
    }

    fn log(&self, record: &log::Record) {
        eprintln!(
            "[{}] {}",
            record.level().to_string().to_lowercase(),
            record.args()
        );
    }

    fn flush(&self) {}
}

/// Run one parsed invocation end to end.
pub fn run(cli: &Cli) -> Result<()> {
    let cfg = resolve(cli)?;
    commands::write_run_echo(&cfg, cli.command.name())?;
    match &cli.command {
        Command::GenData => commands::cmd_gen_data(&cfg),
        Command::Pretrain => commands::cmd_pretrain(&cfg).map(|_| ()),
        Command::Adapt => commands::cmd_adapt(&cfg, cli.checkpoint.as_deref()).map(|_| ()),
        Command::Eval {
            dataset,
            detections,
        } => commands::cmd_eval(
            &cfg,
            cli.checkpoint.as_deref(),
            detections.as_deref(),
            dataset.as_deref(),
        )
        .map(|_| ()),
        Command::Ablate => commands::cmd_ablate(&cfg, cli.checkpoint.as_deref()),
    }
}
