use std::collections::{BTreeMap, BTreeSet, VecDeque};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{HeuristicConfig, Scheduler};
use crate::error::Result;
use crate::model::{Allocation, ClusterState, Grant, JobCatalog, JobId, JobTypeSpec, ResourceVector};
use crate::sim::{throughput, SlotReport, SpeedSample};

/// `speed(w, u) = a·w / (1 + b·w/u + c·w)`, samples per slot.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SpeedModel {
    pub a: f64,
    pub b: f64,
    pub c: f64,
}

impl SpeedModel {
    pub fn speed(&self, w: u32, u: u32) -> f64 {
        if w == 0 || u == 0 {
            return 0.0;
        }
        let (w, u) = (f64::from(w), f64::from(u));
        self.a * w / (1.0 + self.b * w / u + self.c * w)
    }
}

/// Least squares on `w/speed = θ0 + θ1·(w/u) + θ2·w` over the given feature
/// subset. Returns the coefficients (zero for unused features) and the SSE.
fn least_squares(pts: &[(f64, f64, f64, f64)], use_ratio: bool, use_w: bool) -> Option<([f64; 3], f64)> {
    let feats = |p: &(f64, f64, f64, f64)| {
        let mut f = vec![1.0];
        if use_ratio {
            f.push(p.0);
        }
        if use_w {
            f.push(p.1);
        }
        f
    };
    let k = 1 + usize::from(use_ratio) + usize::from(use_w);
    if pts.len() < k {
        return None;
    }
    // normal equations, solved by Gaussian elimination with partial pivoting
    let mut m = vec![vec![0.0; k + 1]; k];
    for p in pts {
        let f = feats(p);
        for r in 0..k {
            for c in 0..k {
                m[r][c] += p.3 * f[r] * f[c];
            }
            m[r][k] += p.3 * f[r] * p.2;
        }
    }
    let scale = m.iter().map(|r| r[..k].iter().fold(0.0f64, |a, x| a.max(x.abs()))).fold(0.0f64, f64::max);
    for col in 0..k {
        let piv = (col..k).max_by(|&a, &b| m[a][col].abs().total_cmp(&m[b][col].abs()))?;
        if m[piv][col].abs() < 1e-9 * scale.max(1.0) {
            return None;
        }
        m.swap(col, piv);
        for r in 0..k {
            if r != col {
                let f = m[r][col] / m[col][col];
                for c in col..=k {
                    m[r][c] -= f * m[col][c];
                }
            }
        }
    }
    let sol: Vec<f64> = (0..k).map(|r| m[r][k] / m[r][r]).collect();
    let mut theta = [sol[0], 0.0, 0.0];
    let mut i = 1;
    if use_ratio {
        theta[1] = sol[i];
        i += 1;
    }
    if use_w {
        theta[2] = sol[i];
    }
    let sse = pts.iter().map(|p| p.3 * (theta[0] + theta[1] * p.0 + theta[2] * p.1 - p.2).powi(2)).sum();
    Some((theta, sse))
}

/// Fits the speed model through its linearization
/// `w/speed = 1/a + (b/a)·(w/u) + (c/a)·w`.
///
/// Feature subsets are tried when the full fit is singular or yields a negative
/// coefficient; the admissible fit with the lowest residual wins. `None` when
/// no fit that uses the `w/u` term is admissible.
pub fn fit_speed_model(samples: &[SpeedSample]) -> Option<SpeedModel> {
    let pts: Vec<(f64, f64, f64, f64)> = samples
        .iter()
        .filter(|s| s.workers > 0 && s.ps > 0 && s.speed > 0.0)
        .map(|s| {
            let w = f64::from(s.workers);
            (w / f64::from(s.ps), w, w / s.speed, (s.speed / w).powi(2))
        })
        .collect();
    [(true, true), (true, false)]
        .into_iter()
        .filter_map(|(r, w)| least_squares(&pts, r, w))
        .filter(|(t, _)| t[0] > 0.0 && t.iter().all(|x| x.is_finite() && *x >= 0.0))
        .min_by(|x, y| x.1.total_cmp(&y.1))
        .map(|(t, _)| SpeedModel { a: 1.0 / t[0], b: t[1] / t[0], c: t[2] / t[0] })
}

/// Performance-model-driven greedy allocator.
///
/// Every job whose first pair fits starts at one worker and one PS. Extra
/// workers or PSs then go, one at a time, wherever the model predicts the
/// largest relative cut in remaining time per unit of dominant resource.
/// Speed observations are pooled per job type.
#[derive(Debug, Clone)]
pub struct Optimus {
    samples: BTreeMap<usize, VecDeque<SpeedSample>>,
    models: BTreeMap<usize, SpeedModel>,
    job_types: BTreeMap<JobId, usize>,
    profiled: BTreeSet<usize>,
    prior_b: f64,
    window: usize,
    cap: u32,
    profile_steps: u32,
    profile_noise: Option<Normal<f64>>,
    rng: ChaCha8Rng,
}

/// Configurations measured when profiling a job type.
const PROFILE_GRID: [(u32, u32); 12] =
    [(1, 1), (2, 1), (4, 1), (8, 1), (1, 2), (2, 2), (4, 2), (8, 2), (2, 4), (4, 4), (8, 4), (8, 8)];
const PROFILE_NOISE_FLOOR: f64 = 0.1;

impl Optimus {
    pub fn new(cfg: &HeuristicConfig) -> Self {
        Self {
            samples: BTreeMap::new(),
            models: BTreeMap::new(),
            job_types: BTreeMap::new(),
            profiled: BTreeSet::new(),
            prior_b: cfg.optimus_prior_b,
            window: cfg.optimus_window.max(1),
            cap: cfg.task_cap,
            profile_steps: cfg.optimus_profile_steps,
            profile_noise: (cfg.optimus_profile_sigma > 0.0)
                .then(|| Normal::new(1.0, cfg.optimus_profile_sigma).ok())
                .flatten(),
            rng: ChaCha8Rng::seed_from_u64(cfg.optimus_seed),
        }
    }

    /// Records one averaged sample per grid configuration for `spec`, the
    /// first time its type is seen.
    pub fn profile(&mut self, spec: &JobTypeSpec) {
        if self.profile_steps == 0 || !self.profiled.insert(spec.type_id) {
            return;
        }
        for (w, u) in PROFILE_GRID {
            let mut sum = 0.0;
            for _ in 0..self.profile_steps {
                sum += match &self.profile_noise {
                    Some(n) => loop {
                        let x = n.sample(&mut self.rng);
                        if x >= PROFILE_NOISE_FLOOR {
                            break x;
                        }
                    },
                    None => 1.0,
                };
            }
            let speed = throughput(spec, w, u) * sum / f64::from(self.profile_steps);
            self.record(spec.type_id, SpeedSample { job: JobId(u32::MAX), workers: w, ps: u, speed });
        }
    }

    /// The model used for `type_id` this slot, refreshing the last good fit.
    /// `None` before anything of that type was observed.
    pub fn model(&mut self, type_id: usize) -> Option<SpeedModel> {
        let samples = self.samples.get(&type_id)?;
        if samples.is_empty() {
            return None;
        }
        let v: Vec<SpeedSample> = samples.iter().copied().collect();
        if let Some(m) = fit_speed_model(&v) {
            self.models.insert(type_id, m);
            return Some(m);
        }
        if let Some(m) = self.models.get(&type_id) {
            return Some(*m);
        }
        // No good fit yet: scale the prior shape to the observed speeds.
        let b = self.prior_b;
        let a = v
            .iter()
            .map(|s| {
                let (w, u) = (f64::from(s.workers), f64::from(s.ps));
                s.speed * (1.0 + b * w / u) / w
            })
            .sum::<f64>()
            / v.len() as f64;
        Some(SpeedModel { a, b, c: 0.0 })
    }

    pub fn record(&mut self, type_id: usize, sample: SpeedSample) {
        let q = self.samples.entry(type_id).or_default();
        q.push_back(sample);
        while q.len() > self.window {
            q.pop_front();
        }
    }
}

impl Scheduler for Optimus {
    fn name(&self) -> &str {
        "optimus"
    }

    fn allocate(&mut self, state: &ClusterState, catalog: &JobCatalog) -> Result<Allocation> {
        self.job_types = state.active_jobs.iter().map(|j| (j.job_id, j.type_id)).collect();
        let cap = state.capacity;
        let mut used = ResourceVector::ZERO;
        let mut grants = vec![Grant::default(); state.active_jobs.len()];
        let mut candidates = Vec::new();
        for (i, job) in state.active_jobs.iter().enumerate() {
            let spec = catalog.get(job.type_id)?;
            self.profile(spec);
            if !(used + spec.pair_demand()).fits_within(&cap) {
                continue;
            }
            used += spec.pair_demand();
            grants[i] = Grant::new(1, 1);
            if let Some(m) = self.model(job.type_id) {
                candidates.push((i, m, spec.worker_demand, spec.ps_demand));
            }
        }
        loop {
            let mut best: Option<(f64, usize, Grant, ResourceVector)> = None;
            for &(i, m, wd, pd) in &candidates {
                let g = grants[i];
                let now = m.speed(g.workers, g.ps);
                for (next, demand) in [(Grant::new(g.workers + 1, g.ps), wd), (Grant::new(g.workers, g.ps + 1), pd)] {
                    if next.workers.max(next.ps) > self.cap || !(used + demand).fits_within(&cap) {
                        continue;
                    }
                    // relative cut in remaining time: 1 − speed_now / speed_next
                    let gain = (1.0 - now / m.speed(next.workers, next.ps)) / demand.dominant_share(&cap).max(1e-12);
                    if gain > 1e-12 && best.as_ref().is_none_or(|b| gain > b.0) {
                        best = Some((gain, i, next, demand));
                    }
                }
            }
            let Some((_, i, next, demand)) = best else { break };
            grants[i] = next;
            used += demand;
        }
        Ok(state.active_jobs.iter().zip(grants).map(|(j, g)| (j.job_id, g)).collect())
    }

    fn observe(&mut self, report: &SlotReport) {
        for s in &report.speed_samples {
            if let Some(&t) = self.job_types.get(&s.job) {
                self.record(t, *s);
            }
        }
    }
}
