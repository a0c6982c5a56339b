//! Domain types shared by the simulator, the schedulers and the trainers.

use std::collections::BTreeMap;
use std::fmt;
use std::ops::{Add, AddAssign, Mul, Sub};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Tolerance used for componentwise capacity comparisons.
pub const RESOURCE_EPS: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct JobId(pub u32);

impl fmt::Display for JobId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "#{}", self.0)
    }
}

/// GPU count, CPU cores and memory in GB.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ResourceVector {
    pub gpu: f64,
    pub cpu: f64,
    pub mem: f64,
}

impl ResourceVector {
    pub const ZERO: ResourceVector = ResourceVector { gpu: 0.0, cpu: 0.0, mem: 0.0 };

    pub const fn new(gpu: f64, cpu: f64, mem: f64) -> Self {
        Self { gpu, cpu, mem }
    }

    pub fn components(&self) -> [f64; 3] {
        [self.gpu, self.cpu, self.mem]
    }

    pub fn is_nonnegative(&self) -> bool {
        self.components().iter().all(|c| *c >= 0.0 && c.is_finite())
    }

    pub fn is_zero(&self) -> bool {
        self.components().iter().all(|c| *c == 0.0)
    }

    /// Componentwise `self <= capacity`.
    pub fn fits_within(&self, capacity: &ResourceVector) -> bool {
        self.components()
            .iter()
            .zip(capacity.components())
            .all(|(u, c)| *u <= c + RESOURCE_EPS)
    }

    /// Largest fraction of any capacity component consumed by `self`.
    /// Components with zero capacity are ignored.
    pub fn dominant_share(&self, capacity: &ResourceVector) -> f64 {
        self.components()
            .iter()
            .zip(capacity.components())
            .filter(|(_, c)| *c > 0.0)
            .map(|(u, c)| u / c)
            .fold(0.0, f64::max)
    }

    /// Componentwise saturating difference.
    pub fn saturating_sub(&self, other: &ResourceVector) -> ResourceVector {
        ResourceVector::new(
            (self.gpu - other.gpu).max(0.0),
            (self.cpu - other.cpu).max(0.0),
            (self.mem - other.mem).max(0.0),
        )
    }
}

impl Add for ResourceVector {
    type Output = ResourceVector;
    fn add(self, o: ResourceVector) -> ResourceVector {
        ResourceVector::new(self.gpu + o.gpu, self.cpu + o.cpu, self.mem + o.mem)
    }
}

impl AddAssign for ResourceVector {
    fn add_assign(&mut self, o: ResourceVector) {
        *self = *self + o;
    }
}

impl Sub for ResourceVector {
    type Output = ResourceVector;
    fn sub(self, o: ResourceVector) -> ResourceVector {
        ResourceVector::new(self.gpu - o.gpu, self.cpu - o.cpu, self.mem - o.mem)
    }
}

impl Mul<f64> for ResourceVector {
    type Output = ResourceVector;
    fn mul(self, k: f64) -> ResourceVector {
        ResourceVector::new(self.gpu * k, self.cpu * k, self.mem * k)
    }
}

impl fmt::Display for ResourceVector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({} GPU, {} CPU, {} GB)", self.gpu, self.cpu, self.mem)
    }
}

/// Constants of the training-speed curve `c0·w / (1 + c1·w/u + c2·w)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpeedConstants {
    /// Per-worker samples per slot with free communication.
    pub c0: f64,
    /// Communication penalty per unit of worker:PS ratio.
    pub c1: f64,
    /// Synchronization penalty per worker; gives diminishing returns.
    pub c2: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JobTypeSpec {
    pub type_id: usize,
    pub name: String,
    pub samples_per_epoch: f64,
    pub speed: SpeedConstants,
    pub worker_demand: ResourceVector,
    pub ps_demand: ResourceVector,
    #[serde(default = "default_global_batch")]
    pub global_batch: u32,
}

fn default_global_batch() -> u32 {
    512
}

impl JobTypeSpec {
    /// Demand of one worker plus one PS.
    pub fn pair_demand(&self) -> ResourceVector {
        self.worker_demand + self.ps_demand
    }

    pub fn demand(&self, workers: u32, ps: u32) -> ResourceVector {
        self.worker_demand * f64::from(workers) + self.ps_demand * f64::from(ps)
    }
}

/// The table of job types, indexed by `type_id`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JobCatalog {
    pub types: Vec<JobTypeSpec>,
}

impl JobCatalog {
    pub fn new(types: Vec<JobTypeSpec>) -> Result<Self> {
        let catalog = Self { types };
        catalog.validate()?;
        Ok(catalog)
    }

    pub fn len(&self) -> usize {
        self.types.len()
    }

    pub fn is_empty(&self) -> bool {
        self.types.is_empty()
    }

    pub fn get(&self, type_id: usize) -> Result<&JobTypeSpec> {
        self.types.get(type_id).ok_or(Error::UnknownJobType(type_id))
    }

    pub fn validate(&self) -> Result<()> {
        for (i, t) in self.types.iter().enumerate() {
            let bad = |m: &str| Err(Error::Config(format!("job type {} ({}): {m}", i, t.name)));
            if t.type_id != i {
                return bad("type_id must equal its position in the catalogue");
            }
            if !(t.speed.c0 > 0.0) || t.speed.c1 < 0.0 || t.speed.c2 < 0.0 {
                return bad("speed constants need c0 > 0 and c1, c2 >= 0");
            }
            if !(t.samples_per_epoch > 0.0) {
                return bad("samples_per_epoch must be positive");
            }
            if !t.worker_demand.is_nonnegative() || !t.ps_demand.is_nonnegative() {
                return bad("demands must be non-negative");
            }
            if t.worker_demand.is_zero() || t.ps_demand.is_zero() {
                return bad("worker and PS demands must be non-zero");
            }
        }
        Ok(())
    }

    /// The eight model families used in the evaluation workload.
    ///
    /// Speed constants are synthetic: they give each family a distinct
    /// optimal PS:worker ratio and a distinct scaling efficiency.
    pub fn standard() -> Self {
        let t = |id: usize,
                 name: &str,
                 spe: f64,
                 (c0, c1, c2): (f64, f64, f64),
                 worker: (f64, f64, f64),
                 ps: (f64, f64),
                 batch: u32| JobTypeSpec {
            type_id: id,
            name: name.to_string(),
            samples_per_epoch: spe,
            speed: SpeedConstants { c0, c1, c2 },
            worker_demand: ResourceVector::new(worker.0, worker.1, worker.2),
            ps_demand: ResourceVector::new(0.0, ps.0, ps.1),
            global_batch: batch,
        };
        Self {
            types: vec![
                t(0, "resnet-50", 6000.0, (1200.0, 0.25, 0.05), (1.0, 2.0, 8.0), (3.0, 8.0), 256),
                t(1, "vgg-16", 5000.0, (900.0, 0.60, 0.05), (1.0, 2.0, 10.0), (4.0, 12.0), 256),
                t(2, "resnext-110", 4000.0, (1000.0, 0.08, 0.04), (1.0, 2.0, 6.0), (2.0, 4.0), 128),
                t(3, "inception-bn", 5000.0, (1100.0, 0.20, 0.05), (1.0, 2.0, 8.0), (2.0, 6.0), 256),
                t(4, "seq2seq", 3000.0, (800.0, 0.30, 0.05), (1.0, 3.0, 8.0), (3.0, 8.0), 512),
                t(5, "ctc", 2000.0, (600.0, 0.12, 0.07), (1.0, 1.0, 4.0), (1.0, 4.0), 512),
                t(6, "dssm", 2500.0, (700.0, 0.50, 0.05), (1.0, 2.0, 6.0), (4.0, 10.0), 1024),
                t(7, "wlm", 2000.0, (650.0, 0.35, 0.08), (1.0, 2.0, 6.0), (2.0, 6.0), 512),
            ],
        }
    }
}

/// One training job.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JobRecord {
    pub job_id: JobId,
    pub type_id: usize,
    pub arrival_slot: u64,
    /// Declared epoch count `E_i`, the value schedulers and the reward see.
    pub total_epochs: f64,
    /// Epochs actually needed to converge; equals `total_epochs` unless an
    /// estimation error is injected.
    pub actual_epochs: f64,
    pub epochs_trained: f64,
    /// Slots in which the job held workers.
    pub slots_run: u32,
    pub completion_slot: Option<u64>,
    pub global_batch: u32,
}

impl JobRecord {
    pub fn new(job_id: JobId, type_id: usize, arrival_slot: u64, total_epochs: f64, global_batch: u32) -> Self {
        Self {
            job_id,
            type_id,
            arrival_slot,
            total_epochs,
            actual_epochs: total_epochs,
            epochs_trained: 0.0,
            slots_run: 0,
            completion_slot: None,
            global_batch,
        }
    }

    /// Remaining declared epochs, rounded up (the `e_i` feature).
    pub fn remaining_epochs(&self) -> u64 {
        (self.total_epochs - self.epochs_trained).max(0.0).ceil() as u64
    }

    pub fn remaining_actual(&self) -> f64 {
        (self.actual_epochs - self.epochs_trained).max(0.0)
    }

    pub fn is_complete(&self) -> bool {
        self.completion_slot.is_some()
    }

    /// Completion time in slots, counting the arrival slot.
    pub fn jct(&self) -> Option<u64> {
        self.completion_slot.map(|c| c + 1 - self.arrival_slot)
    }
}

/// Workers and PSs granted to one job.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Grant {
    pub workers: u32,
    pub ps: u32,
}

impl Grant {
    pub const fn new(workers: u32, ps: u32) -> Self {
        Self { workers, ps }
    }

    pub fn is_empty(&self) -> bool {
        self.workers == 0 && self.ps == 0
    }
}

/// Per-job worker/PS counts for one slot.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Allocation {
    grants: BTreeMap<JobId, Grant>,
}

impl Allocation {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn get(&self, job: JobId) -> Grant {
        self.grants.get(&job).copied().unwrap_or_default()
    }

    pub fn set(&mut self, job: JobId, grant: Grant) {
        if grant.is_empty() {
            self.grants.remove(&job);
        } else {
            self.grants.insert(job, grant);
        }
    }

    pub fn add(&mut self, job: JobId, workers: u32, ps: u32) {
        let g = self.get(job);
        self.set(job, Grant::new(g.workers + workers, g.ps + ps));
    }

    pub fn iter(&self) -> impl Iterator<Item = (JobId, Grant)> + '_ {
        self.grants.iter().map(|(j, g)| (*j, *g))
    }

    pub fn len(&self) -> usize {
        self.grants.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grants.is_empty()
    }

    pub fn total_workers(&self) -> u32 {
        self.grants.values().map(|g| g.workers).sum()
    }

    pub fn total_ps(&self) -> u32 {
        self.grants.values().map(|g| g.ps).sum()
    }
}

impl FromIterator<(JobId, Grant)> for Allocation {
    fn from_iter<I: IntoIterator<Item = (JobId, Grant)>>(iter: I) -> Self {
        let mut a = Allocation::new();
        for (j, g) in iter {
            a.add(j, g.workers, g.ps);
        }
        a
    }
}

/// Capacities, the current slot, the active jobs (arrival order) and their allocation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterState {
    pub capacity: ResourceVector,
    pub slot: u64,
    pub active_jobs: Vec<JobRecord>,
    pub allocation: Allocation,
}

impl ClusterState {
    pub fn new(capacity: ResourceVector) -> Self {
        Self { capacity, slot: 0, active_jobs: Vec::new(), allocation: Allocation::new() }
    }

    pub fn job(&self, id: JobId) -> Option<&JobRecord> {
        self.active_jobs.iter().find(|j| j.job_id == id)
    }
}

/// Componentwise sum of `w·worker_demand + u·ps_demand` over the allocation.
pub fn used_resources(alloc: &Allocation, jobs: &[JobRecord], catalog: &JobCatalog) -> Result<ResourceVector> {
    let mut used = ResourceVector::ZERO;
    for (id, grant) in alloc.iter() {
        let job = jobs.iter().find(|j| j.job_id == id).ok_or(Error::UnknownJob(id))?;
        used += catalog.get(job.type_id)?.demand(grant.workers, grant.ps);
    }
    Ok(used)
}

/// Shared capacity assertion: every scheduler output goes through this.
pub fn check_capacity(
    alloc: &Allocation,
    jobs: &[JobRecord],
    catalog: &JobCatalog,
    capacity: &ResourceVector,
) -> Result<ResourceVector> {
    let used = used_resources(alloc, jobs, catalog)?;
    if used.fits_within(capacity) {
        Ok(used)
    } else {
        Err(Error::CapacityViolation { used, capacity: *capacity })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn one_type() -> JobCatalog {
        JobCatalog::new(vec![JobTypeSpec {
            type_id: 0,
            name: "t".into(),
            samples_per_epoch: 100.0,
            speed: SpeedConstants { c0: 10.0, c1: 0.1, c2: 0.1 },
            worker_demand: ResourceVector::new(1.0, 4.0, 10.0),
            ps_demand: ResourceVector::new(0.0, 4.0, 10.0),
            global_batch: 512,
        }])
        .unwrap()
    }

    fn jobs(n: u32) -> Vec<JobRecord> {
        (0..n).map(|i| JobRecord::new(JobId(i), 0, 0, 10.0, 512)).collect()
    }

    #[test]
    fn used_resources_linear_sum() {
        let cat = one_type();
        let mut a = Allocation::new();
        a.set(JobId(0), Grant::new(2, 1));
        let used = used_resources(&a, &jobs(1), &cat).unwrap();
        assert_eq!(used, ResourceVector::new(2.0, 12.0, 30.0));
    }

    #[test]
    fn used_resources_empty_is_zero() {
        let used = used_resources(&Allocation::new(), &jobs(0), &one_type()).unwrap();
        assert_eq!(used, ResourceVector::ZERO);
    }

    #[test]
    fn used_resources_two_jobs() {
        let a: Allocation = [(JobId(0), Grant::new(1, 1)), (JobId(1), Grant::new(1, 1))].into_iter().collect();
        let used = used_resources(&a, &jobs(2), &one_type()).unwrap();
        assert_eq!(used, ResourceVector::new(2.0, 16.0, 40.0));
    }

    #[test]
    fn used_resources_unknown_job() {
        let mut a = Allocation::new();
        a.set(JobId(7), Grant::new(1, 0));
        assert!(matches!(used_resources(&a, &jobs(1), &one_type()), Err(Error::UnknownJob(JobId(7)))));
    }

    #[test]
    fn capacity_check_rejects_overflow() {
        let mut a = Allocation::new();
        a.set(JobId(0), Grant::new(3, 0));
        let cap = ResourceVector::new(2.0, 100.0, 100.0);
        assert!(matches!(check_capacity(&a, &jobs(1), &one_type(), &cap), Err(Error::CapacityViolation { .. })));
    }

    #[test]
    fn dominant_share_picks_largest_fraction() {
        let cap = ResourceVector::new(20.0, 80.0, 400.0);
        assert!((ResourceVector::new(2.0, 4.0, 10.0).dominant_share(&cap) - 0.1).abs() < 1e-12);
    }

    #[test]
    fn standard_catalog_is_valid() {
        JobCatalog::standard().validate().unwrap();
        assert_eq!(JobCatalog::standard().len(), 8);
    }

    #[test]
    fn zero_grants_are_dropped() {
        let mut a = Allocation::new();
        a.set(JobId(0), Grant::new(0, 0));
        assert!(a.is_empty());
    }

    proptest! {
        #[test]
        fn used_resources_additive(ws in proptest::collection::vec((0u32..5, 0u32..5), 1..6), split in 0usize..6) {
            let cat = one_type();
            let js = jobs(ws.len() as u32);
            let all: Allocation = ws.iter().enumerate().map(|(i, (w, u))| (JobId(i as u32), Grant::new(*w, *u))).collect();
            let k = split.min(ws.len());
            let left: Allocation = all.iter().filter(|(j, _)| (j.0 as usize) < k).collect();
            let right: Allocation = all.iter().filter(|(j, _)| (j.0 as usize) >= k).collect();
            let sum = used_resources(&left, &js, &cat).unwrap() + used_resources(&right, &js, &cat).unwrap();
            let whole = used_resources(&all, &js, &cat).unwrap();
            for (a, b) in sum.components().iter().zip(whole.components()) {
                prop_assert!((a - b).abs() < 1e-9);
            }
        }
    }
}
