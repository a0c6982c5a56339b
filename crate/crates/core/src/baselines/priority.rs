use super::{reference_remaining_slots, Scheduler};
use crate::error::Result;
use crate::model::{Allocation, ClusterState, Grant, JobCatalog, JobRecord, ResourceVector};

/// Grants up to `r_ref` pairs to each job in `order`, as many as still fit.
fn fill_in_order(state: &ClusterState, catalog: &JobCatalog, order: &[&JobRecord], r_ref: u32) -> Result<Allocation> {
    let mut used = ResourceVector::ZERO;
    let mut alloc = Allocation::new();
    for job in order {
        let pair = catalog.get(job.type_id)?.pair_demand();
        let mut n = 0;
        while n < r_ref && (used + pair).fits_within(&state.capacity) {
            used += pair;
            n += 1;
        }
        alloc.set(job.job_id, Grant::new(n, n));
    }
    Ok(alloc)
}

/// First in, first out.
#[derive(Debug, Clone)]
pub struct Fifo {
    pub r_ref: u32,
}

impl Fifo {
    pub fn new(r_ref: u32) -> Self {
        Self { r_ref }
    }
}

impl Scheduler for Fifo {
    fn name(&self) -> &str {
        "fifo"
    }

    fn allocate(&mut self, state: &ClusterState, catalog: &JobCatalog) -> Result<Allocation> {
        let order: Vec<&JobRecord> = state.active_jobs.iter().collect();
        fill_in_order(state, catalog, &order, self.r_ref)
    }
}

/// Shortest remaining time first, estimated at the reference allocation.
#[derive(Debug, Clone)]
pub struct Srtf {
    pub r_ref: u32,
}

impl Srtf {
    pub fn new(r_ref: u32) -> Self {
        Self { r_ref }
    }
}

impl Scheduler for Srtf {
    fn name(&self) -> &str {
        "srtf"
    }

    fn allocate(&mut self, state: &ClusterState, catalog: &JobCatalog) -> Result<Allocation> {
        let mut keyed: Vec<(f64, &JobRecord)> = state
            .active_jobs
            .iter()
            .map(|j| Ok((reference_remaining_slots(j, catalog.get(j.type_id)?, self.r_ref), j)))
            .collect::<Result<_>>()?;
        // stable: arrival order breaks ties
        keyed.sort_by(|a, b| a.0.total_cmp(&b.0));
        let order: Vec<&JobRecord> = keyed.into_iter().map(|(_, j)| j).collect();
        fill_in_order(state, catalog, &order, self.r_ref)
    }
}
