//! Heuristic schedulers: comparison points and supervised-learning teachers.

mod drf;
mod optimus;
mod priority;
mod teacher;
mod tetris;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

pub use drf::Drf;
pub use optimus::{fit_speed_model, Optimus, SpeedModel};
pub use priority::{Fifo, Srtf};
pub use teacher::{replay, teacher_replay, TeacherDecision};
pub use tetris::Tetris;

use crate::error::{Error, Result};
use crate::model::{Allocation, ClusterState, JobCatalog, JobRecord, JobTypeSpec};
use crate::sim::{reference_epochs_per_slot, SlotReport};

/// A whole-slot allocator.
pub trait Scheduler {
    fn name(&self) -> &str;

    fn allocate(&mut self, state: &ClusterState, catalog: &JobCatalog) -> Result<Allocation>;

    /// Called with the outcome of every slot this scheduler allocated.
    fn observe(&mut self, _report: &SlotReport) {}
}

impl<S: Scheduler + ?Sized> Scheduler for Box<S> {
    fn name(&self) -> &str {
        (**self).name()
    }

    fn allocate(&mut self, state: &ClusterState, catalog: &JobCatalog) -> Result<Allocation> {
        (**self).allocate(state, catalog)
    }

    fn observe(&mut self, report: &SlotReport) {
        (**self).observe(report)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HeuristicConfig {
    /// Pairs FIFO and SRTF request per job, and the reference allocation for
    /// remaining-time estimates.
    pub r_ref: u32,
    /// Maximum (worker, PS) pairs per job for DRF and Tetris, and the
    /// per-kind cap for Optimus.
    pub task_cap: u32,
    pub tetris_alpha: f64,
    /// PS-bottleneck coefficient assumed by Optimus before it has a fit.
    pub optimus_prior_b: f64,
    /// Most recent samples Optimus keeps per job type.
    pub optimus_window: usize,
    /// Noisy steps Optimus averages per profiled configuration before a job
    /// type is first scheduled; 0 disables profiling.
    pub optimus_profile_steps: u32,
    /// Relative std-dev of the noise seen while profiling.
    pub optimus_profile_sigma: f64,
    pub optimus_seed: u64,
}

impl Default for HeuristicConfig {
    fn default() -> Self {
        Self {
            r_ref: 4,
            task_cap: 16,
            tetris_alpha: 0.5,
            optimus_prior_b: 0.5,
            optimus_window: 1024,
            optimus_profile_steps: 10,
            optimus_profile_sigma: 0.273,
            optimus_seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Heuristic {
    Drf,
    Fifo,
    Srtf,
    Tetris,
    Optimus,
}

impl Heuristic {
    pub const ALL: [Heuristic; 5] = [Heuristic::Drf, Heuristic::Fifo, Heuristic::Srtf, Heuristic::Tetris, Heuristic::Optimus];

    pub fn as_str(&self) -> &'static str {
        match self {
            Heuristic::Drf => "drf",
            Heuristic::Fifo => "fifo",
            Heuristic::Srtf => "srtf",
            Heuristic::Tetris => "tetris",
            Heuristic::Optimus => "optimus",
        }
    }

    pub fn build(&self, cfg: &HeuristicConfig) -> Box<dyn Scheduler> {
        match self {
            Heuristic::Drf => Box::new(Drf::new(cfg.task_cap)),
            Heuristic::Fifo => Box::new(Fifo::new(cfg.r_ref)),
            Heuristic::Srtf => Box::new(Srtf::new(cfg.r_ref)),
            Heuristic::Tetris => Box::new(Tetris::new(cfg.tetris_alpha, cfg.task_cap, cfg.r_ref)),
            Heuristic::Optimus => Box::new(Optimus::new(cfg)),
        }
    }
}

impl fmt::Display for Heuristic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Heuristic {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Heuristic::ALL
            .into_iter()
            .find(|h| h.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown heuristic `{s}`")))
    }
}

/// Noise-free slots a job still needs at `r_ref` workers and PSs.
pub(crate) fn reference_remaining_slots(job: &JobRecord, spec: &JobTypeSpec, r_ref: u32) -> f64 {
    let rate = reference_epochs_per_slot(spec, r_ref);
    (job.total_epochs - job.epochs_trained).max(0.0) / rate
}

#[cfg(test)]
pub(crate) mod testutil {
    use crate::model::{JobCatalog, JobId, JobRecord, JobTypeSpec, ResourceVector, SpeedConstants};

    pub fn spec(id: usize, worker: ResourceVector, ps: ResourceVector) -> JobTypeSpec {
        JobTypeSpec {
            type_id: id,
            name: format!("t{id}"),
            samples_per_epoch: 100.0,
            speed: SpeedConstants { c0: 50.0, c1: 0.2, c2: 0.05 },
            worker_demand: worker,
            ps_demand: ps,
            global_batch: 256,
        }
    }

    pub fn uniform(types: usize) -> JobCatalog {
        JobCatalog::new(
            (0..types)
                .map(|i| spec(i, ResourceVector::new(1.0, 2.0, 4.0), ResourceVector::new(0.0, 2.0, 4.0)))
                .collect(),
        )
        .unwrap()
    }

    pub fn job(id: u32, type_id: usize, arrival: u64, epochs: f64) -> JobRecord {
        JobRecord::new(JobId(id), type_id, arrival, epochs, 256)
    }
}
