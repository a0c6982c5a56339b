//! Converts a whole-slot allocation into incremental (state, action) pairs.

use crate::encoding::{encode, mask, Action, Decision, Window};
use crate::error::{Error, Result};
use crate::model::{check_capacity, Allocation, JobCatalog, JobRecord, ResourceVector};

/// The heuristic's choices for one slot, expressed in the policy's action space.
#[derive(Debug, Clone, PartialEq)]
pub struct TeacherDecision {
    pub steps: Vec<Decision>,
}

impl TeacherDecision {
    pub fn actions(&self) -> Vec<usize> {
        self.steps.iter().map(|s| s.action).collect()
    }
}

/// Canonical order per window of `J` jobs (arrival order): for each job,
/// `min(w, u)` AddBoth, then the extra workers, then the extra PSs; each
/// window ends with Void.
pub fn teacher_replay(
    alloc: &Allocation,
    jobs: &[JobRecord],
    capacity: &ResourceVector,
    catalog: &JobCatalog,
    window: Window,
) -> Result<TeacherDecision> {
    check_capacity(alloc, jobs, catalog, capacity)?;
    let mut partial = Allocation::new();
    let mut steps = Vec::new();
    let chunks: Vec<&[JobRecord]> = if jobs.is_empty() { vec![&[][..]] } else { jobs.chunks(window.jobs).collect() };
    for chunk in chunks {
        let mut plan = Vec::new();
        for (i, job) in chunk.iter().enumerate() {
            let g = alloc.get(job.job_id);
            let both = g.workers.min(g.ps);
            plan.extend(std::iter::repeat_n(Action::AddBoth(i), both as usize));
            plan.extend(std::iter::repeat_n(Action::AddWorker(i), (g.workers - both) as usize));
            plan.extend(std::iter::repeat_n(Action::AddPs(i), (g.ps - both) as usize));
        }
        plan.push(Action::Void);
        for act in plan {
            let state = encode(chunk, &partial, capacity, catalog, window)?;
            let m = mask(chunk, &partial, jobs, capacity, catalog, window)?;
            let index = act.index(window);
            if !m[index] {
                return Err(Error::CapacityViolation { used: crate::model::used_resources(&partial, jobs, catalog)?, capacity: *capacity });
            }
            let job = act.row().map(|i| chunk[i].job_id);
            if let Some(id) = job {
                let (w, u) = act.increment();
                partial.add(id, w, u);
            }
            steps.push(Decision { state, mask: m, action: index, behavior_prob: 1.0, explored: false, job });
        }
    }
    Ok(TeacherDecision { steps })
}

/// Applies the increments of `decision` to an empty allocation.
pub fn replay(decision: &TeacherDecision) -> Allocation {
    let mut a = Allocation::new();
    for s in &decision.steps {
        if let Some(id) = s.job {
            let act = Action::decode(s.action, s.state.window()).expect("recorded actions are in range");
            let (w, u) = act.increment();
            a.add(id, w, u);
        }
    }
    a
}

#[cfg(test)]
mod tests {
    use super::super::testutil::*;
    use super::super::Heuristic;
    use super::*;
    use crate::baselines::HeuristicConfig;
    use crate::model::{ClusterState, Grant, JobId};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn big() -> ResourceVector {
        ResourceVector::new(20.0, 100.0, 200.0)
    }

    fn kinds(d: &TeacherDecision, w: Window) -> Vec<Action> {
        d.actions().into_iter().map(|a| Action::decode(a, w).unwrap()).collect()
    }

    #[test]
    fn canonical_sequences() {
        let w = Window::new(2, 1);
        let cat = uniform(1);
        let jobs = vec![job(0, 0, 0, 5.0)];
        let single = |g: Grant| {
            let a: Allocation = [(JobId(0), g)].into_iter().collect();
            teacher_replay(&a, &jobs, &big(), &cat, w).unwrap()
        };
        assert_eq!(kinds(&single(Grant::new(1, 1)), w), vec![Action::AddBoth(0), Action::Void]);
        assert_eq!(kinds(&single(Grant::new(2, 1)), w), vec![Action::AddBoth(0), Action::AddWorker(0), Action::Void]);
        assert_eq!(kinds(&single(Grant::new(0, 0)), w), vec![Action::Void]);
        assert_eq!(kinds(&single(Grant::new(1, 3)), w), vec![Action::AddBoth(0), Action::AddPs(0), Action::AddPs(0), Action::Void]);
    }

    #[test]
    fn infeasible_allocation_rejected() {
        let w = Window::new(1, 1);
        let jobs = vec![job(0, 0, 0, 5.0)];
        let a: Allocation = [(JobId(0), Grant::new(30, 30))].into_iter().collect();
        assert!(matches!(teacher_replay(&a, &jobs, &big(), &uniform(1), w), Err(Error::CapacityViolation { .. })));
    }

    #[test]
    fn labels_are_never_masked_and_states_track_progress() {
        let w = Window::new(3, 1);
        let jobs: Vec<JobRecord> = (0..2).map(|i| job(i, 0, 0, 5.0)).collect();
        let a: Allocation = [(JobId(0), Grant::new(2, 2)), (JobId(1), Grant::new(1, 0))].into_iter().collect();
        let d = teacher_replay(&a, &jobs, &big(), &uniform(1), w).unwrap();
        assert!(d.steps.iter().all(|s| s.mask[s.action]));
        assert_eq!(d.steps[1].state.w(0), 1.0);
        assert_eq!(d.steps[2].state.w(0), 2.0);
        assert_eq!(replay(&d), a);
    }

    #[test]
    fn round_trip_over_random_states() {
        let cat = JobCatalog::new(vec![
            spec(0, ResourceVector::new(1.0, 2.0, 4.0), ResourceVector::new(0.0, 2.0, 4.0)),
            spec(1, ResourceVector::new(1.0, 1.0, 8.0), ResourceVector::new(0.0, 4.0, 2.0)),
            spec(2, ResourceVector::new(2.0, 1.0, 2.0), ResourceVector::new(0.0, 1.0, 12.0)),
        ])
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        for trial in 0..1000 {
            let n = rng.random_range(0..12);
            let mut state = ClusterState::new(ResourceVector::new(
                rng.random_range(1..24) as f64,
                rng.random_range(4..100) as f64,
                rng.random_range(8..200) as f64,
            ));
            state.active_jobs = (0..n).map(|i| job(i, rng.random_range(0..3), 0, rng.random_range(1..80) as f64)).collect();
            let h = Heuristic::ALL[trial % Heuristic::ALL.len()];
            let alloc = h.build(&HeuristicConfig::default()).allocate(&state, &cat).unwrap();
            let w = Window::new(rng.random_range(1..6), 3);
            let d = teacher_replay(&alloc, &state.active_jobs, &state.capacity, &cat, w).unwrap();
            assert_eq!(replay(&d), alloc, "trial {trial}");
            let voids = d.actions().iter().filter(|a| **a == w.void_index()).count();
            assert_eq!(voids, n.div_ceil(w.jobs as u32).max(1) as usize);
        }
    }
}
