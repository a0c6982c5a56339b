//! Running a scheduler over a trace and summarizing the outcome.

use serde::{Deserialize, Serialize};

use crate::agent::ClusterSetup;
use crate::baselines::Scheduler;
use crate::error::Result;
use crate::sim::SlotReport;
use crate::trace::WorkloadTrace;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub scheduler: String,
    /// Mean JCT in slots; jobs left unfinished are charged up to the last slot.
    pub avg_jct: f64,
    pub finished: usize,
    pub unfinished: usize,
    pub slots: u64,
    pub total_reward: f64,
    /// Slots whose allocation passed the capacity check (all of them, or the
    /// run would have failed).
    pub checked_steps: u64,
}

/// Steps `sched` on `trace` until every job finished or `max_slots` elapsed.
pub fn run_to_completion(
    setup: &ClusterSetup,
    sched: &mut dyn Scheduler,
    trace: &WorkloadTrace,
    seed: u64,
    max_slots: u64,
    mut on_slot: impl FnMut(&SlotReport),
) -> Result<RunResult> {
    let mut sim = setup.simulator(trace, seed)?;
    let mut total_reward = 0.0;
    while !sim.is_done() && sim.state().slot < max_slots {
        let alloc = sched.allocate(sim.state(), &setup.catalog)?;
        let report = sim.step(&alloc)?;
        sched.observe(&report);
        total_reward += report.reward;
        on_slot(&report);
    }
    let unfinished = sim.state().active_jobs.len() + sim.pending_jobs();
    Ok(RunResult {
        scheduler: sched.name().to_string(),
        avg_jct: sim.avg_jct_with_unfinished(),
        finished: sim.finished().len(),
        unfinished,
        slots: sim.state().slot,
        total_reward,
        checked_steps: sim.checked_steps(),
    })
}

/// Mean of `avg_jct` over several validation traces (seeded `seed + k`).
pub fn mean_jct(
    setup: &ClusterSetup,
    sched: &mut dyn Scheduler,
    traces: &[WorkloadTrace],
    seed: u64,
    max_slots: u64,
) -> Result<f64> {
    let mut sum = 0.0;
    for (k, t) in traces.iter().enumerate() {
        sum += run_to_completion(setup, sched, t, seed.wrapping_add(k as u64), max_slots, |_| {})?.avg_jct;
    }
    Ok(sum / traces.len().max(1) as f64)
}
