mod commands;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use dlsched_core::baselines::Heuristic;
use dlsched_core::experiment::SchedulerKind;
use dlsched_core::rl::Ablation;

/// Trace-driven simulator and learned scheduler for parameter-server training clusters.
#[derive(Debug, Parser)]
#[command(name = "dlsched", version)]
pub struct Cli {
    /// TOML experiment config; omitted keys take their defaults.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Slot budget: simulation length, or online training slots.
    #[arg(long, global = true)]
    pub slots: Option<u64>,
    #[arg(long, global = true, default_value = "out")]
    pub out_dir: PathBuf,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run one scheduler on one trace.
    Simulate {
        #[arg(long, default_value = "drf")]
        scheduler: SchedulerKind,
        /// Trace file; generated from the config and seed when omitted.
        #[arg(long)]
        trace: Option<PathBuf>,
        /// Policy checkpoint for the learned schedulers; trained when omitted.
        #[arg(long)]
        policy: Option<PathBuf>,
    },
    /// Evaluate several schedulers over the configured seeds.
    Compare {
        #[arg(long, value_delimiter = ',', default_value = "dl2,drf,fifo,srtf,tetris,optimus")]
        scheduler: Vec<SchedulerKind>,
    },
    /// Supervised bootstrap from a heuristic teacher.
    TrainSl {
        #[arg(long)]
        teacher: Option<Heuristic>,
    },
    /// Online actor-critic training.
    TrainRl {
        /// Starting policy; a supervised bootstrap is trained when omitted.
        #[arg(long)]
        policy: Option<PathBuf>,
        #[arg(long)]
        teacher: Option<Heuristic>,
        #[arg(long)]
        ablate: Option<Ablation>,
    },
    /// Train the full system and each ablation over the configured seeds.
    Ablate {
        #[arg(long, value_delimiter = ',', default_value = "no-critic,no-explore,no-replay,alt-reward")]
        ablate: Vec<Ablation>,
    },
    /// Add PSs one by one to a running job and report worker suspension.
    ScaleDemo {
        #[arg(long, default_value_t = 8)]
        max_added: u32,
        #[arg(long, default_value_t = 4)]
        workers: u32,
        #[arg(long, default_value_t = 10)]
        repeats: u64,
    },
    /// Write a synthetic trace.
    GenTrace {
        #[arg(long)]
        jobs: Option<usize>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match commands::run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
