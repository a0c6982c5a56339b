use super::{reference_remaining_slots, Scheduler};
use crate::error::Result;
use crate::model::{Allocation, ClusterState, Grant, JobCatalog, ResourceVector};

/// Packing plus shortest-remaining-time scoring, one pair per round.
///
/// `score = α·align/max_align + (1 − α)·(1/T)/max(1/T)` over the jobs whose
/// next pair fits, where `align` is the dot product of the pair demand and
/// the free resources, both normalized by capacity.
#[derive(Debug, Clone)]
pub struct Tetris {
    pub alpha: f64,
    pub task_cap: u32,
    pub r_ref: u32,
}

impl Tetris {
    pub fn new(alpha: f64, task_cap: u32, r_ref: u32) -> Self {
        Self { alpha, task_cap, r_ref }
    }
}

fn normalized(v: &ResourceVector, cap: &ResourceVector) -> [f64; 3] {
    let c = cap.components();
    let mut out = [0.0; 3];
    for (k, x) in v.components().iter().enumerate() {
        out[k] = if c[k] > 0.0 { x / c[k] } else { 0.0 };
    }
    out
}

impl Scheduler for Tetris {
    fn name(&self) -> &str {
        "tetris"
    }

    fn allocate(&mut self, state: &ClusterState, catalog: &JobCatalog) -> Result<Allocation> {
        let cap = state.capacity;
        let jobs = &state.active_jobs;
        let mut pairs = Vec::with_capacity(jobs.len());
        let mut inv_time = Vec::with_capacity(jobs.len());
        for j in jobs {
            let spec = catalog.get(j.type_id)?;
            pairs.push(spec.pair_demand());
            inv_time.push(1.0 / reference_remaining_slots(j, spec, self.r_ref).max(1e-9));
        }
        let mut count = vec![0u32; jobs.len()];
        let mut used = ResourceVector::ZERO;
        loop {
            let free = normalized(&cap.saturating_sub(&used), &cap);
            let candidates: Vec<(usize, f64)> = (0..jobs.len())
                .filter(|&i| count[i] < self.task_cap && (used + pairs[i]).fits_within(&cap))
                .map(|i| {
                    let d = normalized(&pairs[i], &cap);
                    (i, d.iter().zip(free).map(|(a, b)| a * b).sum())
                })
                .collect();
            if candidates.is_empty() {
                break;
            }
            let max_align = candidates.iter().map(|c| c.1).fold(0.0, f64::max);
            let max_inv = candidates.iter().map(|c| inv_time[c.0]).fold(0.0, f64::max);
            let score = |(i, align): (usize, f64)| {
                let a = if max_align > 0.0 { align / max_align } else { 0.0 };
                let t = if max_inv > 0.0 { inv_time[i] / max_inv } else { 0.0 };
                self.alpha * a + (1.0 - self.alpha) * t
            };
            let best = candidates
                .iter()
                .copied()
                .max_by(|a, b| score(*a).total_cmp(&score(*b)).then(b.0.cmp(&a.0)))
                .expect("non-empty");
            used += pairs[best.0];
            count[best.0] += 1;
        }
        Ok(jobs.iter().zip(count).map(|(j, n)| (j.job_id, Grant::new(n, n))).collect())
    }
}
