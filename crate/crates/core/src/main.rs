use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use toolshape::harness::{self, read_binary_pgm, read_trajectory_csv, ExperimentConfig};
use toolshape::optimizer::OptimizeMode;
use toolshape::Error;

#[derive(Parser)]
#[command(name = "toolshape", version, about = "Learned tool shape and trajectory optimization")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// JSON experiment configuration; missing fields take defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Use the reduced tool and epoch counts.
    #[arg(long, global = true)]
    desk_scale: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Tool,
    Traj,
    Both,
}

impl From<Mode> for OptimizeMode {
    fn from(m: Mode) -> Self {
        match m {
            Mode::Tool => OptimizeMode::ToolOnly,
            Mode::Traj => OptimizeMode::TrajectoryOnly,
            Mode::Both => OptimizeMode::Both,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Simulate random tools and write the training dataset.
    Collect,
    /// Train the forward model on the collected dataset.
    Train,
    /// Optimize tool and/or trajectory for the configured tasks.
    Optimize {
        #[arg(long, value_enum, default_value = "both")]
        mode: Mode,
        /// Fixed tool image (PGM) for trajectory-only mode.
        #[arg(long)]
        tool: Option<PathBuf>,
        /// Fixed trajectory CSV for tool-only mode; the first row is used.
        #[arg(long)]
        trajectory: Option<PathBuf>,
        /// Optimize one tool for all tasks together.
        #[arg(long)]
        multitask: bool,
    },
    /// Compare the fabricated optimized tools against random baselines.
    Eval,
    /// Render tasks and dataset records as PGM images.
    Render,
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::Json(_) => 2,
        Error::Io { .. } => 3,
        Error::Format { .. } | Error::Truncated { .. } | Error::Architecture(_) => 4,
        Error::Diverged { .. } => 5,
        Error::Unresolved { .. } | Error::MotionBudget { .. } | Error::Placement(_) => 6,
        _ => 1,
    }
}

fn run(cli: Cli) -> toolshape::Result<()> {
    let mut cfg = match &cli.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(o) = cli.out {
        cfg.out_dir = o;
    }
    cfg.desk_scale |= cli.desk_scale;
    match cli.command {
        Command::Collect => harness::cmd_collect(&cfg),
        Command::Train => harness::cmd_train(&cfg),
        Command::Optimize {
            mode,
            tool,
            trajectory,
            multitask,
        } => {
            cfg.optimize.mode = mode.into();
            cfg.multitask |= multitask;
            let t = tool.as_deref().map(read_binary_pgm).transpose()?;
            let u = match trajectory.as_deref() {
                Some(p) => Some(
                    read_trajectory_csv(p)?
                        .into_iter()
                        .next()
                        .ok_or_else(|| Error::Config(format!("{}: no trajectory rows", p.display())))?,
                ),
                None => None,
            };
            match cfg.optimize.mode {
                OptimizeMode::TrajectoryOnly if t.is_none() => {
                    return Err(Error::Config("--mode traj needs --tool".into()))
                }
                OptimizeMode::ToolOnly if u.is_none() => {
                    return Err(Error::Config("--mode tool needs --trajectory".into()))
                }
                _ => {}
            }
            harness::cmd_optimize(&cfg, t.as_ref(), u.as_ref()).map(|_| ())
        }
        Command::Eval => harness::cmd_eval(&cfg).map(|_| ()),
        Command::Render => harness::cmd_render(&cfg),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
