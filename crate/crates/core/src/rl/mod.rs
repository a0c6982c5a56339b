//! Online actor-critic training.
//!
//! Each slot the policy allocates resources through the multi-inference
//! loop, the simulator advances, the slot reward is attached to every
//! decision of that slot, and the decisions enter a replay buffer from which
//! one policy-gradient step and one value step are taken.

mod trainer;
mod update;

use std::collections::VecDeque;
use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

pub use trainer::{SlotMetrics, TrainReport, Trainer, Validation};
pub use update::{policy_gradient_update, value_update, Importance, PolicyStats, ValueStats};

use crate::encoding::{Action, ExploreContext};
use crate::error::{Error, Result};
use crate::model::{Allocation, JobRecord};
use crate::sim::SlotReport;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ReturnMode {
    /// `Q = r_t + γ·V(s_{t+1})` with a target value network.
    Td,
    /// Discounted return over at most `mc_horizon` slots.
    MonteCarlo,
    /// Decision-level bootstrap: a decision that is not the last of its slot
    /// targets `V(next decision's state)`; the last one targets
    /// `r_t + γ·V(s_{t+1})`.
    Stepwise,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Baseline {
    /// Learned state-value network (actor-critic).
    ValueNetwork,
    /// Exponential moving average of observed returns.
    Ema,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RewardMode {
    /// Every decision of a slot gets the slot reward `Σ t_i/E_i`.
    Slot,
    /// A decision gets `t_i/E_i` of the job it targeted; void gets 0.
    PerAction,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RlConfig {
    pub gamma: f64,
    pub epsilon: f64,
    pub beta: f64,
    pub policy_lr: f64,
    pub value_lr: f64,
    pub batch_size: usize,
    pub replay_capacity: usize,
    /// Updates start once the buffer holds this many transitions.
    pub min_buffer: usize,
    /// Sample from the buffer; otherwise train on the latest slot only.
    pub replay: bool,
    pub ratio_threshold: f64,
    /// Value updates between target-network refreshes.
    pub target_refresh: u64,
    pub returns: ReturnMode,
    pub mc_horizon: usize,
    pub baseline: Baseline,
    pub ema_decay: f64,
    pub reward: RewardMode,
    /// Divide advantages by their minibatch standard deviation.
    pub normalize_advantages: bool,
    /// Truncation level of the importance weights on replayed samples; 0
    /// disables the correction.
    pub importance_clip: f64,
    /// Leading slots in which only the value network is trained.
    pub critic_warmup: u64,
    /// Minibatch updates per slot.
    pub updates_per_slot: usize,
    pub hidden: Vec<usize>,
}

impl Default for RlConfig {
    fn default() -> Self {
        Self {
            gamma: 0.9,
            epsilon: 0.4,
            beta: 0.1,
            policy_lr: 1e-4,
            value_lr: 1e-4,
            batch_size: 256,
            replay_capacity: 8192,
            min_buffer: 256,
            replay: true,
            ratio_threshold: 10.0,
            target_refresh: 20,
            returns: ReturnMode::Td,
            mc_horizon: 50,
            baseline: Baseline::ValueNetwork,
            ema_decay: 0.95,
            reward: RewardMode::Slot,
            normalize_advantages: false,
            importance_clip: 0.0,
            critic_warmup: 0,
            updates_per_slot: 1,
            hidden: vec![256, 256],
        }
    }
}

impl RlConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("rl: {m}")));
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return bad("gamma must lie in (0, 1)");
        }
        if !(0.0..=1.0).contains(&self.epsilon) {
            return bad("epsilon must lie in [0, 1]");
        }
        if !(self.beta >= 0.0) {
            return bad("beta must be non-negative");
        }
        if self.batch_size == 0 || self.updates_per_slot == 0 || self.replay_capacity == 0 || self.target_refresh == 0 || self.mc_horizon == 0 {
            return bad("batch_size, updates_per_slot, replay_capacity, target_refresh and mc_horizon must be positive");
        }
        if !(0.0..1.0).contains(&self.ema_decay) {
            return bad("ema_decay must lie in [0, 1)");
        }
        Ok(())
    }
}

/// Training-technique toggles compared against the full system.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Ablation {
    NoCritic,
    NoExplore,
    NoReplay,
    AltReward,
}

impl Ablation {
    pub const ALL: [Ablation; 4] = [Ablation::NoCritic, Ablation::NoExplore, Ablation::NoReplay, Ablation::AltReward];

    pub fn as_str(&self) -> &'static str {
        match self {
            Ablation::NoCritic => "no-critic",
            Ablation::NoExplore => "no-explore",
            Ablation::NoReplay => "no-replay",
            Ablation::AltReward => "alt-reward",
        }
    }

    pub fn apply(&self, cfg: &RlConfig) -> RlConfig {
        let mut c = cfg.clone();
        match self {
            Ablation::NoCritic => {
                c.baseline = Baseline::Ema;
                c.returns = ReturnMode::MonteCarlo;
            }
            Ablation::NoExplore => c.epsilon = 0.0,
            Ablation::NoReplay => c.replay = false,
            Ablation::AltReward => c.reward = RewardMode::PerAction,
        }
        c
    }
}

impl fmt::Display for Ablation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Ablation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ablation::ALL
            .into_iter()
            .find(|a| a.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown ablation `{s}`")))
    }
}

/// One decision with its outcome.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    pub state: Vec<f64>,
    pub mask: Vec<bool>,
    pub action: usize,
    /// First state of the next slot.
    pub next_state: Vec<f64>,
    pub reward: f64,
    pub slot: u64,
    pub behavior_prob: f64,
    /// The episode ended after this slot; no bootstrap from `next_state`.
    pub done: bool,
    /// Monte-Carlo return, when computed.
    pub ret: Option<f64>,
    /// State before the next decision of the same slot; `None` for the
    /// slot's last decision.
    pub within_next: Option<Vec<f64>>,
}

/// Fixed-capacity ring buffer with oldest-first eviction.
#[derive(Debug, Clone)]
pub struct ReplayBuffer {
    items: VecDeque<Transition>,
    capacity: usize,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Self {
        assert!(capacity > 0, "replay capacity must be positive");
        Self { items: VecDeque::with_capacity(capacity.min(1 << 16)), capacity }
    }

    pub fn push(&mut self, t: Transition) {
        if self.items.len() == self.capacity {
            self.items.pop_front();
        }
        self.items.push_back(t);
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn iter(&self) -> impl Iterator<Item = &Transition> {
        self.items.iter()
    }

    /// `min(n, len)` distinct transitions, uniformly without replacement.
    pub fn sample<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Vec<&Transition> {
        let k = n.min(self.items.len());
        rand::seq::index::sample(rng, self.items.len(), k).into_iter().map(|i| &self.items[i]).collect()
    }
}

/// `Σ t_i / E_i` over the slot.
pub fn reward(report: &SlotReport) -> f64 {
    report.recomputed_reward()
}

/// First poor allocation among `jobs` (window rows, in order) and the action
/// that corrects it.
pub fn detect_poor_state(jobs: &[JobRecord], partial: &Allocation, threshold: f64) -> Option<Action> {
    for (i, job) in jobs.iter().enumerate() {
        let g = partial.get(job.job_id);
        let (w, u) = (f64::from(g.workers), f64::from(g.ps));
        if g.workers >= 2 && g.ps == 0 {
            return Some(Action::AddPs(i));
        }
        if g.ps >= 2 && g.workers == 0 {
            return Some(Action::AddWorker(i));
        }
        if g.ps > 0 && w / u > threshold {
            return Some(Action::AddPs(i));
        }
        if g.workers > 0 && u / w > threshold {
            return Some(Action::AddWorker(i));
        }
    }
    None
}

/// With probability `epsilon` take `correction` (if any), else `policy_action`.
/// Returns the action and whether it was overridden.
pub fn explore_or_exploit<R: Rng + ?Sized>(
    policy_action: usize,
    correction: Option<usize>,
    epsilon: f64,
    rng: &mut R,
) -> (usize, bool) {
    match correction {
        Some(c) if epsilon > 0.0 && rng.random::<f64>() < epsilon => (c, c != policy_action),
        _ => (policy_action, false),
    }
}

/// Exploration hook for [`crate::encoding::rollout_slot`].
pub fn job_aware_hook<'r, R: Rng + ?Sized>(
    epsilon: f64,
    threshold: f64,
    rng: &'r mut R,
) -> impl FnMut(&ExploreContext<'_>, usize) -> Option<usize> + 'r {
    move |ctx, chosen| {
        let fix = detect_poor_state(ctx.window_jobs, ctx.partial, threshold)
            .map(|a| a.index(ctx.window))
            .filter(|a| ctx.mask[*a]);
        fix?;
        Some(explore_or_exploit(chosen, fix, epsilon, rng).0)
    }
}

/// Discounted returns of `rewards`, each truncated after `horizon` terms.
pub fn discounted_returns(rewards: &[f64], gamma: f64, horizon: usize) -> Vec<f64> {
    (0..rewards.len())
        .map(|t| {
            rewards[t..rewards.len().min(t + horizon)]
                .iter()
                .enumerate()
                .map(|(k, r)| gamma.powi(k as i32) * r)
                .sum()
        })
        .collect()
}

/// `Q = r + γ·V(s')` (no bootstrap when `done`).
pub fn td_targets(rewards: &[f64], next_values: &[f64], done: &[bool], gamma: f64) -> Vec<f64> {
    rewards
        .iter()
        .zip(next_values)
        .zip(done)
        .map(|((r, v), d)| if *d { *r } else { r + gamma * v })
        .collect()
}

pub fn advantages(q: &[f64], v: &[f64]) -> Vec<f64> {
    q.iter().zip(v).map(|(q, v)| q - v).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoding::Window;
    use crate::model::{Grant, JobId};
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::collections::BTreeMap;

    fn t(slot: u64) -> Transition {
        Transition {
            state: vec![slot as f64],
            mask: vec![true],
            action: 0,
            next_state: vec![0.0],
            reward: 0.0,
            slot,
            behavior_prob: 1.0,
            done: false,
            ret: None,
            within_next: None,
        }
    }

    #[test]
    fn buffer_evicts_oldest_first() {
        let mut b = ReplayBuffer::new(3);
        for s in 0..5 {
            b.push(t(s));
            assert!(b.len() <= 3);
        }
        let slots: Vec<u64> = b.iter().map(|x| x.slot).collect();
        assert_eq!(slots, vec![2, 3, 4]);
    }

    #[test]
    fn sampling_is_without_replacement() {
        let mut b = ReplayBuffer::new(100);
        for s in 0..50 {
            b.push(t(s));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut got: Vec<u64> = b.sample(40, &mut rng).iter().map(|x| x.slot).collect();
        got.sort();
        got.dedup();
        assert_eq!(got.len(), 40);
        assert_eq!(b.sample(500, &mut rng).len(), 50);
    }

    fn report(gains: &[(u32, f64, f64)]) -> SlotReport {
        SlotReport {
            slot: 0,
            epochs_gained: gains.iter().map(|g| (JobId(g.0), g.1)).collect::<BTreeMap<_, _>>(),
            total_epochs: gains.iter().map(|g| (JobId(g.0), g.2)).collect::<BTreeMap<_, _>>(),
            reward: 0.0,
            completed: vec![],
            avg_jct_running: 0.0,
            speed_samples: vec![],
        }
    }

    #[test]
    fn reward_examples() {
        assert_eq!(reward(&report(&[])), 0.0);
        assert!((reward(&report(&[(0, 1.0, 10.0), (1, 2.0, 4.0)])) - 0.6).abs() < 1e-12);
        assert!((reward(&report(&[(0, 0.5, 5.0)])) - 0.1).abs() < 1e-12);
    }

    fn jobs(n: u32) -> Vec<JobRecord> {
        (0..n).map(|i| JobRecord::new(JobId(i), 0, 0, 10.0, 256)).collect()
    }

    fn alloc(grants: &[(u32, u32)]) -> Allocation {
        grants.iter().enumerate().map(|(i, (w, u))| (JobId(i as u32), Grant::new(*w, *u))).collect()
    }

    #[test]
    fn poor_state_cases() {
        let j = jobs(1);
        assert_eq!(detect_poor_state(&j, &alloc(&[(5, 0)]), 10.0), Some(Action::AddPs(0)));
        assert_eq!(detect_poor_state(&j, &alloc(&[(0, 3)]), 10.0), Some(Action::AddWorker(0)));
        assert_eq!(detect_poor_state(&j, &alloc(&[(21, 2)]), 10.0), Some(Action::AddPs(0)));
        assert_eq!(detect_poor_state(&j, &alloc(&[(1, 11)]), 10.0), Some(Action::AddWorker(0)));
        assert_eq!(detect_poor_state(&j, &alloc(&[(20, 2)]), 10.0), None);
        assert_eq!(detect_poor_state(&j, &alloc(&[(2, 2)]), 10.0), None);
        assert_eq!(detect_poor_state(&j, &alloc(&[(1, 0)]), 10.0), None);
        // first hit in row order wins
        let j = jobs(3);
        assert_eq!(detect_poor_state(&j, &alloc(&[(1, 1), (0, 4), (6, 0)]), 10.0), Some(Action::AddWorker(1)));
    }

    proptest! {
        #[test]
        fn balanced_allocations_never_flagged(grants in proptest::collection::vec((1u32..40, 1u32..40), 1..6)) {
            let j = jobs(grants.len() as u32);
            let balanced = grants.iter().all(|(w, u)| f64::from(*w.max(u)) / f64::from(*w.min(u)) <= 10.0);
            if balanced {
                prop_assert_eq!(detect_poor_state(&j, &alloc(&grants), 10.0), None);
            }
        }

        #[test]
        fn action_index_round_trip(jobs in 1usize..40, a in 0usize..200) {
            let w = Window::new(jobs, 3);
            let a = a % (3 * jobs + 1);
            prop_assert_eq!(Action::decode(a, w).unwrap().index(w), a);
        }
    }

    #[test]
    fn explore_or_exploit_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..100 {
            assert_eq!(explore_or_exploit(3, Some(1), 0.0, &mut rng), (3, false));
            assert_eq!(explore_or_exploit(3, Some(1), 1.0, &mut rng), (1, true));
            assert_eq!(explore_or_exploit(3, None, 1.0, &mut rng), (3, false));
        }
        let hits = (0..10_000).filter(|_| explore_or_exploit(3, Some(1), 0.4, &mut rng).1).count();
        assert!((hits as f64 / 1e4 - 0.4).abs() < 0.02);
    }

    #[test]
    fn returns_examples() {
        assert_eq!(discounted_returns(&[1.0, 1.0, 1.0], 0.5, 50), vec![1.75, 1.5, 1.0]);
        assert_eq!(discounted_returns(&[1.0, 1.0, 1.0], 0.5, 1), vec![1.0, 1.0, 1.0]);
        let g = discounted_returns(&[1.0, 1.0, 1.0], 0.5, 50);
        assert!(advantages(&g, &g).iter().all(|a| *a == 0.0));
        // constant reward at the TD fixed point
        let (r, gamma) = (0.7, 0.9);
        let v = r / (1.0 - gamma);
        let q = td_targets(&[r; 4], &[v; 4], &[false; 4], gamma);
        assert!(advantages(&q, &[v; 4]).iter().all(|a| a.abs() < 1e-12));
        assert_eq!(td_targets(&[r], &[v], &[true], gamma), vec![r]);
    }

    #[test]
    fn ablations_toggle_one_thing() {
        let base = RlConfig::default();
        assert_eq!(Ablation::NoExplore.apply(&base).epsilon, 0.0);
        assert!(!Ablation::NoReplay.apply(&base).replay);
        assert_eq!(Ablation::AltReward.apply(&base).reward, RewardMode::PerAction);
        assert_eq!(Ablation::NoCritic.apply(&base).baseline, Baseline::Ema);
        for a in Ablation::ALL {
            assert_eq!(a.as_str().parse::<Ablation>().unwrap(), a);
        }
        assert!(base.validate().is_ok());
        assert!(RlConfig { gamma: 1.0, ..RlConfig::default() }.validate().is_err());
    }
}
