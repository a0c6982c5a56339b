//! State matrix, action space and the per-slot inference loop.
//!
//! The state for a window of at most `J` jobs (arrival order) is a
//! `J × (L + 5)` matrix whose row `i` is
//! `[x_i (one-hot type, L) | d_i | e_i | r_i | w_i | u_i]`. Rows past the
//! last job are zero.
//!
//! Actions are indexed job-major: `3i` adds a worker to row `i`, `3i + 1`
//! a PS, `3i + 2` one of each, and `3J` is the void action.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{used_resources, Allocation, JobCatalog, JobRecord, ResourceVector};

/// Dimensions of the encoding: `J` job rows and `L` type columns.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Window {
    pub jobs: usize,
    pub types: usize,
}

impl Window {
    pub const fn new(jobs: usize, types: usize) -> Self {
        Self { jobs, types }
    }

    pub const fn row_len(&self) -> usize {
        self.types + 5
    }

    pub const fn input_dim(&self) -> usize {
        self.jobs * self.row_len()
    }

    pub const fn actions(&self) -> usize {
        3 * self.jobs + 1
    }

    pub const fn void_index(&self) -> usize {
        3 * self.jobs
    }
}

/// Divisors applied to the count features before they reach a network.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FeatureScale {
    pub slots: f64,
    pub epochs: f64,
    pub nodes: f64,
}

impl Default for FeatureScale {
    fn default() -> Self {
        Self { slots: 20.0, epochs: 100.0, nodes: 8.0 }
    }
}

impl FeatureScale {
    /// Per-input multipliers for a network reading flattened states of `window`.
    pub fn input_scale(&self, window: Window) -> Vec<f64> {
        let mut row = vec![1.0; window.types];
        row.extend([1.0 / self.slots, 1.0 / self.epochs, 1.0, 1.0 / self.nodes, 1.0 / self.nodes]);
        row.iter().copied().cycle().take(window.input_dim()).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncodedState {
    window: Window,
    data: Vec<f64>,
}

const D: usize = 0;
const E: usize = 1;
const R: usize = 2;
const W: usize = 3;
const U: usize = 4;

impl EncodedState {
    pub fn zeros(window: Window) -> Self {
        Self { window, data: vec![0.0; window.input_dim()] }
    }

    pub fn from_flat(window: Window, data: Vec<f64>) -> Result<Self> {
        if data.len() != window.input_dim() {
            return Err(Error::Shape(format!("state has {} values, expected {}", data.len(), window.input_dim())));
        }
        Ok(Self { window, data })
    }

    pub fn window(&self) -> Window {
        self.window
    }

    /// Row-major `J × (L + 5)` values.
    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    fn row(&self, i: usize) -> &[f64] {
        let n = self.window.row_len();
        &self.data[i * n..(i + 1) * n]
    }

    fn feature(&self, i: usize, k: usize) -> f64 {
        self.row(i)[self.window.types + k]
    }

    /// One-hot type row (all zero for an empty row).
    pub fn x(&self, i: usize) -> &[f64] {
        &self.row(i)[..self.window.types]
    }

    pub fn d(&self, i: usize) -> f64 {
        self.feature(i, D)
    }

    pub fn e(&self, i: usize) -> f64 {
        self.feature(i, E)
    }

    pub fn r(&self, i: usize) -> f64 {
        self.feature(i, R)
    }

    pub fn w(&self, i: usize) -> f64 {
        self.feature(i, W)
    }

    pub fn u(&self, i: usize) -> f64 {
        self.feature(i, U)
    }

    pub fn is_empty_row(&self, i: usize) -> bool {
        self.x(i).iter().all(|v| *v == 0.0)
    }
}

/// Builds the state matrix for `jobs` (at most `J`, arrival order) given the
/// allocation decided so far in this slot.
pub fn encode(
    jobs: &[JobRecord],
    partial: &Allocation,
    capacity: &ResourceVector,
    catalog: &JobCatalog,
    window: Window,
) -> Result<EncodedState> {
    if jobs.len() > window.jobs {
        return Err(Error::TooManyJobs { jobs: jobs.len(), window: window.jobs });
    }
    let mut s = EncodedState::zeros(window);
    let n = window.row_len();
    for (i, job) in jobs.iter().enumerate() {
        if job.type_id >= window.types {
            return Err(Error::TypeOutOfRange { type_id: job.type_id, types: window.types });
        }
        let spec = catalog.get(job.type_id)?;
        let grant = partial.get(job.job_id);
        let row = &mut s.data[i * n..(i + 1) * n];
        row[job.type_id] = 1.0;
        let f = &mut row[window.types..];
        f[D] = f64::from(job.slots_run);
        f[E] = job.remaining_epochs() as f64;
        f[R] = spec.demand(grant.workers, grant.ps).dominant_share(capacity).min(1.0);
        f[W] = f64::from(grant.workers);
        f[U] = f64::from(grant.ps);
    }
    Ok(s)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Action {
    AddWorker(usize),
    AddPs(usize),
    AddBoth(usize),
    Void,
}

impl Action {
    pub fn decode(index: usize, window: Window) -> Result<Action> {
        let j = window.jobs;
        if index > 3 * j {
            return Err(Error::ActionOutOfRange { index, window: j });
        }
        Ok(if index == 3 * j {
            Action::Void
        } else {
            match index % 3 {
                0 => Action::AddWorker(index / 3),
                1 => Action::AddPs(index / 3),
                _ => Action::AddBoth(index / 3),
            }
        })
    }

    pub fn index(&self, window: Window) -> usize {
        match *self {
            Action::AddWorker(i) => 3 * i,
            Action::AddPs(i) => 3 * i + 1,
            Action::AddBoth(i) => 3 * i + 2,
            Action::Void => 3 * window.jobs,
        }
    }

    /// Row the action targets, `None` for void.
    pub fn row(&self) -> Option<usize> {
        match *self {
            Action::AddWorker(i) | Action::AddPs(i) | Action::AddBoth(i) => Some(i),
            Action::Void => None,
        }
    }

    /// Workers and PSs the action adds.
    pub fn increment(&self) -> (u32, u32) {
        match self {
            Action::AddWorker(_) => (1, 0),
            Action::AddPs(_) => (0, 1),
            Action::AddBoth(_) => (1, 1),
            Action::Void => (0, 0),
        }
    }
}

/// Feasibility of every action: empty rows and increments that would exceed
/// capacity are masked out. Void is always allowed.
pub fn mask(
    jobs: &[JobRecord],
    partial: &Allocation,
    all_jobs: &[JobRecord],
    capacity: &ResourceVector,
    catalog: &JobCatalog,
    window: Window,
) -> Result<Vec<bool>> {
    let used = used_resources(partial, all_jobs, catalog)?;
    let mut m = vec![false; window.actions()];
    m[window.void_index()] = true;
    for (i, job) in jobs.iter().enumerate().take(window.jobs) {
        let spec = catalog.get(job.type_id)?;
        m[3 * i] = (used + spec.worker_demand).fits_within(capacity);
        m[3 * i + 1] = (used + spec.ps_demand).fits_within(capacity);
        m[3 * i + 2] = (used + spec.pair_demand()).fits_within(capacity);
    }
    Ok(m)
}

/// Masks `probs` and renormalizes; `None` if no unmasked mass remains.
pub fn renormalize(probs: &[f64], mask: &[bool]) -> Result<Option<Vec<f64>>> {
    if probs.iter().any(|p| !p.is_finite() || *p < 0.0) {
        return Err(Error::NonFiniteProbabilities);
    }
    let total: f64 = probs.iter().zip(mask).filter(|(_, m)| **m).map(|(p, _)| *p).sum();
    if !(total > 0.0) {
        return Ok(None);
    }
    Ok(Some(probs.iter().zip(mask).map(|(p, m)| if *m { p / total } else { 0.0 }).collect()))
}

/// Draws an index from a distribution; zero-probability entries are never chosen.
pub fn sample_index<R: Rng + ?Sized>(probs: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    let mut last = 0;
    for (i, p) in probs.iter().enumerate() {
        if *p <= 0.0 {
            continue;
        }
        acc += p;
        last = i;
        if u < acc {
            return i;
        }
    }
    last
}

pub fn argmax(probs: &[f64]) -> usize {
    probs
        .iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |best, (i, p)| if *p > best.1 { (i, *p) } else { best })
        .0
}

/// How the loop turns a distribution into an action.
pub enum Selection<'a, R: Rng + ?Sized> {
    Sample(&'a mut R),
    Greedy,
}

/// One inference inside a slot.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Decision {
    pub state: EncodedState,
    pub mask: Vec<bool>,
    pub action: usize,
    /// Masked, renormalized policy probability of `action`.
    pub behavior_prob: f64,
    /// The action came from the exploration hook, not the policy.
    pub explored: bool,
    /// Job the action targets, if any.
    pub job: Option<crate::model::JobId>,
}

/// What the exploration hook sees at each inference.
pub struct ExploreContext<'a> {
    pub window_jobs: &'a [JobRecord],
    pub partial: &'a Allocation,
    pub mask: &'a [bool],
    pub window: Window,
}

/// Static inputs of a rollout.
pub struct RolloutEnv<'a> {
    pub jobs: &'a [JobRecord],
    pub capacity: ResourceVector,
    pub catalog: &'a JobCatalog,
    pub window: Window,
}

/// Runs the multi-inference loop for one slot.
///
/// Jobs are processed in windows of `J` in arrival order. Within a window the
/// loop encodes the state, asks `policy` for a distribution, masks it, picks
/// an action (possibly replaced by `explore`) and applies the increment, until
/// void is chosen or nothing else is feasible.
pub fn rollout_slot<P, X, R>(
    env: &RolloutEnv<'_>,
    mut policy: P,
    mut explore: X,
    mut selection: Selection<'_, R>,
) -> Result<(Allocation, Vec<Decision>)>
where
    P: FnMut(&EncodedState) -> Result<Vec<f64>>,
    X: FnMut(&ExploreContext<'_>, usize) -> Option<usize>,
    R: Rng + ?Sized,
{
    let window = env.window;
    let mut partial = Allocation::new();
    let mut decisions = Vec::new();
    let windows: Vec<&[JobRecord]> =
        if env.jobs.is_empty() { vec![&[][..]] } else { env.jobs.chunks(window.jobs).collect() };
    for chunk in windows {
        loop {
            let state = encode(chunk, &partial, &env.capacity, env.catalog, window)?;
            let m = mask(chunk, &partial, env.jobs, &env.capacity, env.catalog, window)?;
            let probs = policy(&state)?;
            if probs.len() != window.actions() {
                return Err(Error::Shape(format!("policy returned {} probabilities, expected {}", probs.len(), window.actions())));
            }
            let masked = renormalize(&probs, &m)?;
            let void = window.void_index();
            let (chosen, masked) = match masked {
                Some(p) => {
                    let a = match &mut selection {
                        Selection::Sample(rng) => sample_index(&p, *rng),
                        Selection::Greedy => argmax(&p),
                    };
                    (a, p)
                }
                None => {
                    let mut p = vec![0.0; window.actions()];
                    p[void] = 1.0;
                    (void, p)
                }
            };
            let ctx = ExploreContext { window_jobs: chunk, partial: &partial, mask: &m, window };
            let (action, explored) = match explore(&ctx, chosen) {
                Some(a) if a != chosen && m.get(a).copied().unwrap_or(false) => (a, true),
                _ => (chosen, false),
            };
            let behavior_prob = masked[action].max(f64::MIN_POSITIVE);
            let act = Action::decode(action, window)?;
            let job = act.row().map(|i| chunk[i].job_id);
            decisions.push(Decision { state, mask: m, action, behavior_prob, explored, job });
            match (act, job) {
                (Action::Void, _) | (_, None) => break,
                (a, Some(id)) => {
                    let (w, u) = a.increment();
                    partial.add(id, w, u);
                }
            }
        }
    }
    Ok((partial, decisions))
}
