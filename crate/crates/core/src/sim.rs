//! Slot-by-slot cluster simulation.
//!
//! Each call to [`Simulator::step`] applies one allocation for one slot,
//! advances every allocated job by its (noisy) training speed, retires jobs
//! that reached their epoch target, admits the next slot's arrivals and
//! returns the slot reward `Σ t_i / E_i`.

use std::collections::{BTreeMap, VecDeque};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{check_capacity, Allocation, ClusterState, JobCatalog, JobId, JobRecord, JobTypeSpec, ResourceVector};
use crate::trace::WorkloadTrace;

/// Samples per slot for a job of `spec` running `w` workers and `u` PSs.
///
/// `c0·w / (1 + c1·w/u + c2·w)`; zero when either count is zero.
pub fn throughput(spec: &JobTypeSpec, w: u32, u: u32) -> f64 {
    if w == 0 || u == 0 {
        return 0.0;
    }
    let (w, u) = (f64::from(w), f64::from(u));
    let s = spec.speed;
    s.c0 * w / (1.0 + s.c1 * (w / u) + s.c2 * w)
}

/// Noise-free epochs per slot at `r_ref` workers and `r_ref` PSs.
pub fn reference_epochs_per_slot(spec: &JobTypeSpec, r_ref: u32) -> f64 {
    throughput(spec, r_ref, r_ref) / spec.samples_per_epoch
}

/// Per-worker mini-batch that keeps the global batch fixed.
///
/// Panics if `workers == 0`.
pub fn synchronous_batch_adjust(global_batch: u32, workers: u32) -> u32 {
    assert!(workers >= 1, "batch adjustment needs at least one worker");
    global_batch.div_ceil(workers)
}

/// `Σ t_i / E_i` over the jobs that made progress.
pub fn slot_reward(gains: impl IntoIterator<Item = (f64, f64)>) -> f64 {
    gains.into_iter().map(|(t, e)| t / e).sum()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimConfig {
    /// Relative std-dev of the multiplicative interference noise.
    pub interference_sigma: f64,
    /// Noise draws below this are rejected and redrawn.
    pub noise_floor: f64,
    /// Relative epoch-estimate error: each job needs `E·(1 ± error)` epochs.
    pub epoch_error: f64,
    /// Wall-clock meaning of one slot; reporting only.
    pub slot_label: String,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self { interference_sigma: 0.273, noise_floor: 0.1, epoch_error: 0.0, slot_label: "20min".into() }
    }
}

/// Observed speed of one job in one slot.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpeedSample {
    pub job: JobId,
    pub workers: u32,
    pub ps: u32,
    pub speed: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlotReport {
    pub slot: u64,
    /// Epochs each allocated job gained (`t_i`).
    pub epochs_gained: BTreeMap<JobId, f64>,
    /// Declared epoch totals (`E_i`) of the jobs in `epochs_gained`.
    pub total_epochs: BTreeMap<JobId, f64>,
    pub reward: f64,
    pub completed: Vec<JobId>,
    /// Mean JCT over every job completed so far, in slots.
    pub avg_jct_running: f64,
    pub speed_samples: Vec<SpeedSample>,
}

impl SlotReport {
    /// Recomputes the reward from the per-job gains.
    pub fn recomputed_reward(&self) -> f64 {
        slot_reward(self.epochs_gained.iter().map(|(j, t)| (*t, self.total_epochs[j])))
    }

    /// Normalized progress of a single job (`t_i / E_i`), zero if it was idle.
    pub fn job_reward(&self, job: JobId) -> f64 {
        match (self.epochs_gained.get(&job), self.total_epochs.get(&job)) {
            (Some(t), Some(e)) => t / e,
            _ => 0.0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Simulator {
    catalog: JobCatalog,
    config: SimConfig,
    state: ClusterState,
    pending: VecDeque<JobRecord>,
    finished: Vec<JobRecord>,
    rng: ChaCha8Rng,
    noise: Option<Normal<f64>>,
    checked_steps: u64,
}

impl Simulator {
    pub fn new(
        catalog: JobCatalog,
        capacity: ResourceVector,
        trace: &WorkloadTrace,
        config: SimConfig,
        seed: u64,
    ) -> Result<Self> {
        catalog.validate()?;
        let rng = ChaCha8Rng::seed_from_u64(seed);
        let noise = if config.interference_sigma > 0.0 {
            Some(Normal::new(1.0, config.interference_sigma).map_err(|e| Error::Config(e.to_string()))?)
        } else {
            None
        };
        let mut pending = VecDeque::with_capacity(trace.jobs.len());
        // Separate stream for the estimate error so the noise draws do not
        // depend on whether an error is injected.
        let mut err_rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
        for (i, tj) in trace.jobs.iter().enumerate() {
            catalog.get(tj.type_id)?;
            if !(tj.total_epochs >= 1.0) {
                return Err(Error::InvalidJob(format!("trace job {i} has total_epochs {}", tj.total_epochs)));
            }
            let mut job = JobRecord::new(JobId(i as u32), tj.type_id, tj.arrival_slot, tj.total_epochs, tj.global_batch);
            if config.epoch_error > 0.0 {
                let sign = if err_rng.random::<bool>() { 1.0 } else { -1.0 };
                job.actual_epochs = (tj.total_epochs * (1.0 + sign * config.epoch_error)).max(1e-3);
            }
            pending.push_back(job);
        }
        if pending.iter().zip(pending.iter().skip(1)).any(|(a, b)| a.arrival_slot > b.arrival_slot) {
            return Err(Error::InvalidJob("trace arrivals must be non-decreasing".into()));
        }
        let mut sim = Self {
            catalog,
            config,
            state: ClusterState::new(capacity),
            pending,
            finished: Vec::new(),
            rng,
            noise,
            checked_steps: 0,
        };
        sim.admit();
        Ok(sim)
    }

    fn admit(&mut self) {
        while self.pending.front().is_some_and(|j| j.arrival_slot <= self.state.slot) {
            let job = self.pending.pop_front().expect("front checked");
            self.state.active_jobs.push(job);
        }
    }

    pub fn state(&self) -> &ClusterState {
        &self.state
    }

    pub fn catalog(&self) -> &JobCatalog {
        &self.catalog
    }

    pub fn config(&self) -> &SimConfig {
        &self.config
    }

    pub fn finished(&self) -> &[JobRecord] {
        &self.finished
    }

    /// Number of steps whose allocation passed the capacity check.
    pub fn checked_steps(&self) -> u64 {
        self.checked_steps
    }

    /// No active and no pending jobs remain.
    pub fn is_done(&self) -> bool {
        self.pending.is_empty() && self.state.active_jobs.is_empty()
    }

    pub fn pending_jobs(&self) -> usize {
        self.pending.len()
    }

    pub fn avg_jct(&self) -> f64 {
        if self.finished.is_empty() {
            return 0.0;
        }
        self.finished.iter().filter_map(|j| j.jct()).sum::<u64>() as f64 / self.finished.len() as f64
    }

    /// Mean JCT where jobs still unfinished are charged up to the current slot.
    pub fn avg_jct_with_unfinished(&self) -> f64 {
        let now = self.state.slot;
        let mut total = 0.0;
        let mut n = 0usize;
        for j in &self.finished {
            total += j.jct().unwrap_or(0) as f64;
            n += 1;
        }
        for j in self.state.active_jobs.iter().chain(self.pending.iter()) {
            total += (now + 1).saturating_sub(j.arrival_slot).max(1) as f64;
            n += 1;
        }
        if n == 0 {
            0.0
        } else {
            total / n as f64
        }
    }

    fn draw_noise(&mut self) -> f64 {
        match &self.noise {
            None => 1.0,
            Some(dist) => loop {
                let x = dist.sample(&mut self.rng);
                if x >= self.config.noise_floor {
                    break x;
                }
            },
        }
    }

    /// Applies `alloc` for the current slot and advances to the next one.
    pub fn step(&mut self, alloc: &Allocation) -> Result<SlotReport> {
        let slot = self.state.slot;
        for (id, _) in alloc.iter() {
            if self.state.job(id).is_none() {
                return Err(Error::InactiveJob { job: id, slot });
            }
        }
        check_capacity(alloc, &self.state.active_jobs, &self.catalog, &self.state.capacity)?;
        self.checked_steps += 1;

        let mut epochs_gained = BTreeMap::new();
        let mut total_epochs = BTreeMap::new();
        let mut speed_samples = Vec::new();
        let mut completed = Vec::new();
        for (id, grant) in alloc.iter() {
            let idx = self.state.active_jobs.iter().position(|j| j.job_id == id).expect("validated above");
            let spec = self.catalog.get(self.state.active_jobs[idx].type_id)?.clone();
            let base = throughput(&spec, grant.workers, grant.ps);
            let speed = if base > 0.0 { base * self.draw_noise() } else { 0.0 };
            let job = &mut self.state.active_jobs[idx];
            if grant.workers > 0 {
                job.slots_run += 1;
            }
            let raw = speed / spec.samples_per_epoch;
            let gained = raw.min(job.remaining_actual());
            if speed > 0.0 && gained >= raw {
                speed_samples.push(SpeedSample { job: id, workers: grant.workers, ps: grant.ps, speed });
            }
            job.epochs_trained += gained;
            if gained > 0.0 {
                epochs_gained.insert(id, gained);
                total_epochs.insert(id, job.total_epochs);
            }
            if job.epochs_trained >= job.actual_epochs - 1e-12 {
                job.epochs_trained = job.actual_epochs;
                job.completion_slot = Some(slot);
                completed.push(id);
            }
        }
        let reward = slot_reward(epochs_gained.iter().map(|(j, t)| (*t, total_epochs[j])));

        let (done, active): (Vec<_>, Vec<_>) =
            std::mem::take(&mut self.state.active_jobs).into_iter().partition(|j| j.is_complete());
        self.state.active_jobs = active;
        self.finished.extend(done);
        self.state.allocation = alloc.clone();
        self.state.slot += 1;
        self.admit();

        Ok(SlotReport {
            slot,
            epochs_gained,
            total_epochs,
            reward,
            completed,
            avg_jct_running: self.avg_jct(),
            speed_samples,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Grant, SpeedConstants};
    use crate::trace::TraceJob;

    fn spec(c0: f64, c1: f64, c2: f64) -> JobTypeSpec {
        JobTypeSpec {
            type_id: 0,
            name: "t".into(),
            samples_per_epoch: 100.0,
            speed: SpeedConstants { c0, c1, c2 },
            worker_demand: ResourceVector::new(1.0, 4.0, 10.0),
            ps_demand: ResourceVector::new(0.0, 4.0, 10.0),
            global_batch: 512,
        }
    }

    fn catalog(c0: f64) -> JobCatalog {
        JobCatalog::new(vec![spec(c0, 0.0, 0.0)]).unwrap()
    }

    fn trace(epochs: &[(u64, f64)]) -> WorkloadTrace {
        WorkloadTrace {
            jobs: epochs
                .iter()
                .map(|&(a, e)| TraceJob { arrival_slot: a, type_id: 0, total_epochs: e, global_batch: 512 })
                .collect(),
        }
    }

    fn quiet() -> SimConfig {
        SimConfig { interference_sigma: 0.0, ..SimConfig::default() }
    }

    #[test]
    fn throughput_zero_without_workers_or_ps() {
        let s = spec(100.0, 0.5, 0.1);
        assert_eq!(throughput(&s, 0, 5), 0.0);
        assert_eq!(throughput(&s, 5, 0), 0.0);
    }

    #[test]
    fn throughput_hand_value() {
        // 100·4 / (1 + 0.5 + 0.4) = 400 / 1.9
        let v = throughput(&spec(100.0, 0.5, 0.1), 4, 4);
        assert!((v - 210.526_315_789_473_7).abs() < 1e-9, "{v}");
    }

    #[test]
    fn seq2seq_has_interior_ps_optimum() {
        let cat = JobCatalog::standard();
        let s2s = cat.types.iter().find(|t| t.name == "seq2seq").unwrap();
        let speeds: Vec<(u32, f64)> = (1..12).map(|u| (u, throughput(s2s, 12 - u, u))).collect();
        let best = speeds.iter().cloned().fold((0, f64::MIN), |a, b| if b.1 > a.1 { b } else { a });
        assert_eq!(best.0, 4, "{speeds:?}");
    }

    #[test]
    fn speedup_is_concave_for_shipped_types() {
        for t in JobCatalog::standard().types {
            let s: Vec<f64> = (1..=16).map(|w| throughput(&t, w, w) / throughput(&t, 1, 1)).collect();
            for k in 1..s.len() - 1 {
                assert!(s[k + 1] - s[k] > 0.0, "{}: not increasing", t.name);
                assert!(s[k + 1] - 2.0 * s[k] + s[k - 1] <= 0.0, "{}: not concave", t.name);
            }
        }
    }

    #[test]
    fn batch_adjust_rounds_up() {
        assert_eq!(synchronous_batch_adjust(512, 4), 128);
        assert_eq!(synchronous_batch_adjust(512, 5), 103);
        assert_eq!(synchronous_batch_adjust(512, 1), 512);
    }

    #[test]
    #[should_panic]
    fn batch_adjust_rejects_zero_workers() {
        synchronous_batch_adjust(512, 0);
    }

    #[test]
    fn two_job_reward() {
        // c0 = 50 samples/slot with 1 worker, 100 samples/epoch: 0.5 epochs/slot
        let cat = JobCatalog::new(vec![spec(50.0, 0.0, 0.0)]).unwrap();
        let cap = ResourceVector::new(20.0, 100.0, 1000.0);
        let mut sim = Simulator::new(cat, cap, &trace(&[(0, 5.0), (0, 8.0)]), quiet(), 1).unwrap();
        let mut a = Allocation::new();
        a.set(JobId(0), Grant::new(1, 1));
        a.set(JobId(1), Grant::new(4, 4));
        let r = sim.step(&a).unwrap();
        assert!((r.epochs_gained[&JobId(0)] - 0.5).abs() < 1e-12);
        assert!((r.epochs_gained[&JobId(1)] - 2.0).abs() < 1e-12);
        assert!((r.reward - 0.35).abs() < 1e-12);
        assert_eq!(r.reward, r.recomputed_reward());
    }

    #[test]
    fn completion_boundary() {
        let cat = catalog(100.0);
        let cap = ResourceVector::new(20.0, 100.0, 1000.0);
        let mut sim = Simulator::new(cat, cap, &trace(&[(0, 2.0)]), quiet(), 1).unwrap();
        let mut a = Allocation::new();
        a.set(JobId(0), Grant::new(1, 1));
        let r = sim.step(&a).unwrap();
        assert!(r.completed.is_empty());
        assert_eq!(sim.state().active_jobs[0].remaining_epochs(), 1);
        let r = sim.step(&a).unwrap();
        assert_eq!(r.completed, vec![JobId(0)]);
        assert!(sim.state().active_jobs.is_empty());
        let done = &sim.finished()[0];
        assert_eq!(done.remaining_epochs(), 0);
        assert_eq!(done.completion_slot, Some(1));
        assert_eq!(done.jct(), Some(2));
        assert!(sim.is_done());
    }

    #[test]
    fn progress_is_clamped_at_total() {
        let cat = catalog(1000.0);
        let cap = ResourceVector::new(20.0, 100.0, 1000.0);
        let mut sim = Simulator::new(cat, cap, &trace(&[(0, 3.0)]), quiet(), 1).unwrap();
        let mut a = Allocation::new();
        a.set(JobId(0), Grant::new(1, 1));
        let r = sim.step(&a).unwrap();
        assert_eq!(r.epochs_gained[&JobId(0)], 3.0);
        assert!((r.reward - 1.0).abs() < 1e-12);
    }

    #[test]
    fn capacity_violation_is_an_error() {
        let cap = ResourceVector::new(1.0, 100.0, 1000.0);
        let mut sim = Simulator::new(catalog(10.0), cap, &trace(&[(0, 3.0)]), quiet(), 1).unwrap();
        let mut a = Allocation::new();
        a.set(JobId(0), Grant::new(2, 1));
        assert!(matches!(sim.step(&a), Err(Error::CapacityViolation { .. })));
    }

    #[test]
    fn allocating_inactive_job_is_an_error() {
        let cap = ResourceVector::new(10.0, 100.0, 1000.0);
        let mut sim = Simulator::new(catalog(10.0), cap, &trace(&[(0, 3.0), (5, 3.0)]), quiet(), 1).unwrap();
        let mut a = Allocation::new();
        a.set(JobId(1), Grant::new(1, 1));
        assert!(matches!(sim.step(&a), Err(Error::InactiveJob { .. })));
    }

    #[test]
    fn arrivals_admitted_on_their_slot() {
        let cap = ResourceVector::new(10.0, 100.0, 1000.0);
        let mut sim = Simulator::new(catalog(10.0), cap, &trace(&[(0, 3.0), (2, 3.0)]), quiet(), 1).unwrap();
        assert_eq!(sim.state().active_jobs.len(), 1);
        sim.step(&Allocation::new()).unwrap();
        assert_eq!(sim.state().active_jobs.len(), 1);
        sim.step(&Allocation::new()).unwrap();
        assert_eq!(sim.state().active_jobs.len(), 2);
        assert_eq!(sim.state().slot, 2);
    }

    #[test]
    fn zero_sigma_is_deterministic_regardless_of_seed() {
        let cap = ResourceVector::new(10.0, 100.0, 1000.0);
        let cat = JobCatalog::standard();
        let tr = WorkloadTrace {
            jobs: (0..4).map(|i| TraceJob { arrival_slot: 0, type_id: i, total_epochs: 30.0, global_batch: 256 }).collect(),
        };
        let mut a = Allocation::new();
        a.set(JobId(0), Grant::new(2, 1));
        a.set(JobId(2), Grant::new(1, 1));
        let r1 = Simulator::new(cat.clone(), cap, &tr, quiet(), 1).unwrap().step(&a).unwrap();
        let r2 = Simulator::new(cat, cap, &tr, quiet(), 99).unwrap().step(&a).unwrap();
        assert_eq!(r1, r2);
    }

    #[test]
    fn noise_respects_floor_and_seed() {
        let cap = ResourceVector::new(10.0, 100.0, 1000.0);
        let cfg = SimConfig { interference_sigma: 2.0, ..SimConfig::default() };
        let mut a = Allocation::new();
        a.set(JobId(0), Grant::new(1, 1));
        let run = |seed| {
            let mut sim = Simulator::new(catalog(10.0), cap, &trace(&[(0, 1e9)]), cfg.clone(), seed).unwrap();
            (0..200).map(|_| sim.step(&a).unwrap().speed_samples[0].speed).collect::<Vec<_>>()
        };
        let xs = run(5);
        assert!(xs.iter().all(|s| *s >= 10.0 * 0.1));
        assert_eq!(xs, run(5));
        assert_ne!(xs, run(6));
    }

    #[test]
    fn epoch_error_changes_actual_not_declared() {
        let cap = ResourceVector::new(10.0, 100.0, 1000.0);
        let cfg = SimConfig { epoch_error: 0.2, interference_sigma: 0.0, ..SimConfig::default() };
        let sim = Simulator::new(catalog(10.0), cap, &trace(&[(0, 10.0), (0, 10.0), (0, 10.0), (0, 10.0)]), cfg, 3).unwrap();
        for j in &sim.state().active_jobs {
            assert_eq!(j.total_epochs, 10.0);
            assert!((j.actual_epochs - 12.0).abs() < 1e-9 || (j.actual_epochs - 8.0).abs() < 1e-9);
        }
    }
}
