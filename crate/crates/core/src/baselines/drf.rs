use super::Scheduler;
use crate::error::Result;
use crate::model::{Allocation, ClusterState, JobCatalog, ResourceVector};

/// Dominant resource fairness by progressive filling.
///
/// A task is one worker plus one PS. Each round the job with the smallest
/// dominant share (earliest arrival on ties) gets one more task; jobs whose
/// next task no longer fits, or that hit `task_cap`, drop out.
#[derive(Debug, Clone)]
pub struct Drf {
    pub task_cap: u32,
}

impl Drf {
    pub fn new(task_cap: u32) -> Self {
        Self { task_cap }
    }
}

impl Scheduler for Drf {
    fn name(&self) -> &str {
        "drf"
    }

    fn allocate(&mut self, state: &ClusterState, catalog: &JobCatalog) -> Result<Allocation> {
        let cap = state.capacity;
        let tasks: Vec<ResourceVector> =
            state.active_jobs.iter().map(|j| catalog.get(j.type_id).map(|s| s.pair_demand())).collect::<Result<_>>()?;
        let mut count = vec![0u32; tasks.len()];
        let mut open = vec![true; tasks.len()];
        let mut used = ResourceVector::ZERO;
        loop {
            let next = (0..tasks.len())
                .filter(|&i| open[i])
                .map(|i| (i, (tasks[i] * f64::from(count[i])).dominant_share(&cap)))
                .min_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
            let Some((i, _)) = next else { break };
            if count[i] >= self.task_cap || !(used + tasks[i]).fits_within(&cap) {
                open[i] = false;
                continue;
            }
            used += tasks[i];
            count[i] += 1;
        }
        Ok(state
            .active_jobs
            .iter()
            .zip(count)
            .filter(|(_, n)| *n > 0)
            .map(|(j, n)| (j.job_id, crate::model::Grant::new(n, n)))
            .collect())
    }
}
