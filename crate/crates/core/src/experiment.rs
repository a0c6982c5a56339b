//! Seeded experiment pipelines: supervised bootstrap, online training,
//! evaluation on validation traces, and scheduler comparisons.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::agent::{Mode, PolicyScheduler};
use crate::baselines::{Heuristic, Scheduler};
use crate::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::eval::{run_to_completion, RunResult};
use crate::nn::Network;
use crate::rl::{Ablation, SlotMetrics, TrainReport, Trainer, Validation};
use crate::sl::{agreement, generate_teacher_dataset, train_supervised, SlReport};
use crate::trace::{generate, WorkloadTrace};

/// Anything the `--scheduler` flag can name.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SchedulerKind {
    /// Supervised bootstrap followed by online training.
    Dl2,
    /// Same pipeline, trained on a noise-free simulator.
    OfflineRl,
    Heuristic(Heuristic),
}

impl SchedulerKind {
    pub fn all() -> Vec<SchedulerKind> {
        let mut v = vec![SchedulerKind::Dl2, SchedulerKind::OfflineRl];
        v.extend(Heuristic::ALL.map(SchedulerKind::Heuristic));
        v
    }

    pub fn is_learned(&self) -> bool {
        !matches!(self, SchedulerKind::Heuristic(_))
    }
}

impl fmt::Display for SchedulerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SchedulerKind::Dl2 => f.write_str("dl2"),
            SchedulerKind::OfflineRl => f.write_str("offline-rl"),
            SchedulerKind::Heuristic(h) => f.write_str(h.as_str()),
        }
    }
}

impl FromStr for SchedulerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dl2" => Ok(SchedulerKind::Dl2),
            "offline-rl" => Ok(SchedulerKind::OfflineRl),
            _ => s.parse().map(SchedulerKind::Heuristic).map_err(|_| Error::Config(format!("unknown scheduler `{s}`"))),
        }
    }
}

fn trace_seeds(base: u64, seed: u64, n: usize) -> impl Iterator<Item = u64> {
    (0..n as u64).map(move |k| base.wrapping_add(seed.wrapping_mul(100)).wrapping_add(k))
}

/// Held-out traces on which run `seed` is validated and evaluated.
pub fn validation_traces(cfg: &ExperimentConfig, seed: u64) -> Result<Vec<WorkloadTrace>> {
    let catalog = cfg.setup().catalog;
    trace_seeds(cfg.eval.validation_seed, seed, cfg.eval.validation_traces).map(|s| generate(&cfg.trace, &catalog, s)).collect()
}

/// Traces the teacher is replayed on for run `seed`.
pub fn teacher_traces(cfg: &ExperimentConfig, seed: u64) -> Result<Vec<WorkloadTrace>> {
    let catalog = cfg.setup().catalog;
    trace_seeds(500_000, seed, cfg.training.teacher_traces).map(|s| generate(&cfg.trace, &catalog, s)).collect()
}

/// Base of the noise seeds used when evaluating run `seed` (trace `k` adds `k`).
pub fn eval_noise_seed(seed: u64) -> u64 {
    seed.wrapping_mul(100).wrapping_add(77)
}

/// Greedy policy scheduler for evaluation.
pub fn policy_scheduler(cfg: &ExperimentConfig, policy: Network<f64>, name: &str) -> PolicyScheduler {
    PolicyScheduler::new(policy, cfg.setup().window, Mode::Greedy, 0).named(name)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub scheduler: String,
    pub seed: u64,
    /// Mean over traces of each trace's average JCT.
    pub avg_jct: f64,
    pub runs: Vec<RunResult>,
}

impl Evaluation {
    pub fn slots(&self) -> u64 {
        self.runs.iter().map(|r| r.slots).sum()
    }

    pub fn checked_slots(&self) -> u64 {
        self.runs.iter().map(|r| r.checked_steps).sum()
    }
}

/// Runs `sched` over the validation traces of `seed`.
pub fn evaluate(cfg: &ExperimentConfig, sched: &mut dyn Scheduler, seed: u64) -> Result<Evaluation> {
    let setup = cfg.setup();
    let traces = validation_traces(cfg, seed)?;
    let base = eval_noise_seed(seed);
    let runs = traces
        .iter()
        .enumerate()
        .map(|(k, t)| run_to_completion(&setup, sched, t, base.wrapping_add(k as u64), cfg.eval.max_slots, |_| {}))
        .collect::<Result<Vec<_>>>()?;
    let avg_jct = runs.iter().map(|r| r.avg_jct).sum::<f64>() / runs.len().max(1) as f64;
    Ok(Evaluation { scheduler: sched.name().to_string(), seed, avg_jct, runs })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlOutcome {
    pub policy: Network<f64>,
    pub report: SlReport,
    pub samples: usize,
    /// Argmax agreement with the teacher over the training set.
    pub agreement: f64,
}

/// Supervised bootstrap from the configured teacher.
pub fn train_sl(cfg: &ExperimentConfig, seed: u64) -> Result<SlOutcome> {
    let setup = cfg.setup();
    let traces = teacher_traces(cfg, seed)?;
    let ds =
        generate_teacher_dataset(&setup, &traces, cfg.training.teacher, &cfg.heuristics, cfg.training.teacher_slots, seed)?;
    let mut policy = setup.policy_network(&cfg.rl.hidden, &mut ChaCha8Rng::seed_from_u64(seed));
    let report = train_supervised(&mut policy, &ds, &cfg.sl, seed)?;
    let agreement = agreement(&policy, &ds)?;
    Ok(SlOutcome { policy, report, samples: ds.len(), agreement })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RlOutcome {
    pub policy: Network<f64>,
    pub report: TrainReport,
}

/// Online training from `init`, validated on the traces of `seed`.
pub fn train_rl(
    cfg: &ExperimentConfig,
    seed: u64,
    init: Network<f64>,
    ablation: Option<Ablation>,
    sink: impl FnMut(&SlotMetrics) -> Result<()>,
) -> Result<RlOutcome> {
    let rl = ablation.map_or_else(|| cfg.rl.clone(), |a| a.apply(&cfg.rl));
    let mut trainer = Trainer::new(cfg.setup(), rl, init, seed)?;
    trainer.max_episode_slots = cfg.training.max_episode_slots;
    let traces = validation_traces(cfg, seed)?;
    let validation = Validation {
        traces: &traces,
        every: cfg.training.validate_every,
        seed: eval_noise_seed(seed),
        max_slots: cfg.eval.max_slots,
    };
    let report = trainer.train(&cfg.trace, cfg.training.rl_slots, &validation, sink)?;
    Ok(RlOutcome { policy: trainer.policy, report })
}

/// The config with interference noise removed, used to train the offline
/// variant against an exact speed model.
pub fn noise_free(cfg: &ExperimentConfig) -> ExperimentConfig {
    let mut c = cfg.clone();
    c.sim.interference_sigma = 0.0;
    c
}

/// Trains the learned scheduler `kind` for `seed` and returns its policy.
pub fn train_learned(
    cfg: &ExperimentConfig,
    kind: SchedulerKind,
    seed: u64,
    ablation: Option<Ablation>,
    sink: impl FnMut(&SlotMetrics) -> Result<()>,
) -> Result<Network<f64>> {
    let train_cfg = match kind {
        SchedulerKind::Dl2 => cfg.clone(),
        SchedulerKind::OfflineRl => noise_free(cfg),
        SchedulerKind::Heuristic(h) => return Err(Error::Config(format!("{h} is not a learned scheduler"))),
    };
    let sl = train_sl(&train_cfg, seed)?;
    Ok(train_rl(&train_cfg, seed, sl.policy, ablation, sink)?.policy)
}

/// Builds and evaluates `kind` for `seed`.
pub fn run_scheduler(cfg: &ExperimentConfig, kind: SchedulerKind, seed: u64) -> Result<Evaluation> {
    match kind {
        SchedulerKind::Heuristic(h) => evaluate(cfg, h.build(&cfg.heuristics).as_mut(), seed),
        learned => {
            let policy = train_learned(cfg, learned, seed, None, |_| Ok(()))?;
            evaluate(cfg, &mut policy_scheduler(cfg, policy, &learned.to_string()), seed)
        }
    }
}

/// Maps `f` over `items` on scoped threads, preserving order.
pub fn parallel_map<I: Sync, O: Send>(items: &[I], f: impl Fn(&I) -> Result<O> + Sync) -> Result<Vec<O>> {
    let threads = std::thread::available_parallelism().map_or(1, |n| n.get()).min(items.len().max(1));
    if threads <= 1 {
        return items.iter().map(&f).collect();
    }
    let chunk = items.len().div_ceil(threads);
    std::thread::scope(|s| {
        let handles: Vec<_> =
            items.chunks(chunk).map(|c| s.spawn(|| c.iter().map(&f).collect::<Result<Vec<O>>>())).collect();
        let mut out = Vec::with_capacity(items.len());
        for h in handles {
            out.extend(h.join().expect("worker thread panicked")?);
        }
        Ok(out)
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub name: String,
    pub jcts: Vec<f64>,
    pub mean: f64,
    pub std: f64,
}

impl SummaryRow {
    pub fn new(name: &str, jcts: Vec<f64>) -> Self {
        let n = jcts.len().max(1) as f64;
        let mean = jcts.iter().sum::<f64>() / n;
        let var = if jcts.len() > 1 { jcts.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0) } else { 0.0 };
        Self { name: name.to_string(), jcts, mean, std: var.sqrt() }
    }
}

/// Per-seed evaluation of several schedulers.
pub fn compare(cfg: &ExperimentConfig, kinds: &[SchedulerKind], seeds: &[u64]) -> Result<Vec<Evaluation>> {
    let jobs: Vec<(SchedulerKind, u64)> = kinds.iter().flat_map(|k| seeds.iter().map(move |s| (*k, *s))).collect();
    parallel_map(&jobs, |(k, s)| run_scheduler(cfg, *k, *s))
}

/// Per-seed evaluation of the full system and each ablation; the full
/// system comes first with `ablation = None`.
pub fn ablate(
    cfg: &ExperimentConfig,
    ablations: &[Ablation],
    seeds: &[u64],
) -> Result<Vec<(Option<Ablation>, Evaluation)>> {
    let variants: Vec<Option<Ablation>> = std::iter::once(None).chain(ablations.iter().copied().map(Some)).collect();
    let per_seed = parallel_map(seeds, |&seed| {
        let sl = train_sl(cfg, seed)?;
        variants
            .iter()
            .map(|&a| {
                let out = train_rl(cfg, seed, sl.policy.clone(), a, |_| Ok(()))?;
                let name = a.map_or("full", |a| a.as_str());
                Ok((a, evaluate(cfg, &mut policy_scheduler(cfg, out.policy, name), seed)?))
            })
            .collect::<Result<Vec<_>>>()
    })?;
    let mut out = Vec::new();
    for v in 0..variants.len() {
        out.extend(per_seed.iter().map(|row| row[v].clone()));
    }
    Ok(out)
}
