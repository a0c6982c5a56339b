use std::collections::VecDeque;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::update::{policy_gradient_update, value_update, Importance};
use super::{
    discounted_returns, job_aware_hook, Baseline, ReplayBuffer, ReturnMode, RewardMode, RlConfig, Transition,
};
use crate::agent::{ClusterSetup, Mode, PolicyScheduler};
use crate::encoding::{encode, rollout_slot, EncodedState, RolloutEnv, Selection};
use crate::error::{Error, Result};
use crate::eval::mean_jct;
use crate::model::Allocation;
use crate::nn::{forward_policy, Adam, AdamConfig, ForwardCache, Network};
use crate::sim::Simulator;
use crate::trace::{generate, TraceConfig, WorkloadTrace};

/// One line of the training metrics stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlotMetrics {
    pub slot: u64,
    pub episode: u64,
    pub reward: f64,
    pub decisions: usize,
    pub explored: usize,
    pub buffer: usize,
    pub policy_loss: Option<f64>,
    pub entropy: Option<f64>,
    pub value_loss: Option<f64>,
    pub validation_jct: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// `(slot, mean validation JCT)`; slot 0 is measured before any update.
    pub validation: Vec<(u64, f64)>,
    pub episodes: u64,
    pub updates: u64,
    pub skipped_updates: u64,
}

/// Where and how often the greedy policy is evaluated during training.
#[derive(Debug, Clone, Copy)]
pub struct Validation<'a> {
    pub traces: &'a [WorkloadTrace],
    pub every: u64,
    pub seed: u64,
    pub max_slots: u64,
}

impl Validation<'_> {
    pub const NONE: Validation<'static> = Validation { traces: &[], every: 0, seed: 0, max_slots: 0 };
}

pub struct Trainer {
    setup: ClusterSetup,
    cfg: RlConfig,
    pub policy: Network<f64>,
    pub value: Network<f64>,
    target: Network<f64>,
    popt: Adam<f64>,
    vopt: Adam<f64>,
    buffer: ReplayBuffer,
    sample_rng: ChaCha8Rng,
    explore_rng: ChaCha8Rng,
    batch_rng: ChaCha8Rng,
    seed: u64,
    ema: Option<f64>,
    value_steps: u64,
    pending: VecDeque<(Vec<Transition>, f64)>,
    pcache: ForwardCache<f64>,
    vcache: ForwardCache<f64>,
    updates: u64,
    skipped: u64,
    /// Slots after which a still-running episode is cut and a new one starts.
    pub max_episode_slots: u64,
}

fn stream(seed: u64, k: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(k);
    r
}

impl Trainer {
    /// `policy` is typically the supervised bootstrap; the value network is
    /// freshly initialized from `seed`.
    pub fn new(setup: ClusterSetup, cfg: RlConfig, policy: Network<f64>, seed: u64) -> Result<Self> {
        cfg.validate()?;
        if policy.input_dim() != setup.window.input_dim() || policy.output_dim() != setup.window.actions() {
            return Err(Error::Shape("policy network does not match the encoding window".into()));
        }
        let value = setup.value_network(&cfg.hidden, &mut stream(seed, 7));
        let popt = Adam::new(&policy, AdamConfig::with_lr(cfg.policy_lr));
        let vopt = Adam::new(&value, AdamConfig::with_lr(cfg.value_lr));
        Ok(Self {
            buffer: ReplayBuffer::new(cfg.replay_capacity),
            target: value.clone(),
            setup,
            policy,
            value,
            popt,
            vopt,
            sample_rng: stream(seed, 1),
            explore_rng: stream(seed, 2),
            batch_rng: stream(seed, 3),
            seed,
            ema: None,
            value_steps: 0,
            pending: VecDeque::new(),
            pcache: ForwardCache::new(),
            vcache: ForwardCache::new(),
            updates: 0,
            skipped: 0,
            max_episode_slots: 1000,
            cfg,
        })
    }

    pub fn config(&self) -> &RlConfig {
        &self.cfg
    }

    pub fn buffer(&self) -> &ReplayBuffer {
        &self.buffer
    }

    /// Greedy frozen copy of the current policy.
    pub fn scheduler(&self) -> PolicyScheduler {
        PolicyScheduler::new(self.policy.clone(), self.setup.window, Mode::Greedy, self.seed)
    }

    fn first_state(&self, sim: &Simulator) -> Result<EncodedState> {
        let jobs = &sim.state().active_jobs;
        let n = jobs.len().min(self.setup.window.jobs);
        encode(&jobs[..n], &Allocation::new(), &sim.state().capacity, &self.setup.catalog, self.setup.window)
    }

    /// Runs one slot on `sim` and learns from it. `truncate` marks the last
    /// slot of an episode that is cut short (bootstrapped, not terminal).
    pub fn train_slot(&mut self, sim: &mut Simulator, slot: u64, episode: u64, truncate: bool) -> Result<SlotMetrics> {
        let env = RolloutEnv {
            jobs: &sim.state().active_jobs,
            capacity: sim.state().capacity,
            catalog: &self.setup.catalog,
            window: self.setup.window,
        };
        let policy = &self.policy;
        let infer = |s: &EncodedState| forward_policy(policy, s.as_slice());
        let hook = job_aware_hook(self.cfg.epsilon, self.cfg.ratio_threshold, &mut self.explore_rng);
        let (alloc, decisions) = rollout_slot(&env, infer, hook, Selection::Sample(&mut self.sample_rng))?;
        let report = sim.step(&alloc)?;
        let next = self.first_state(sim)?.into_vec();
        let done = sim.is_done();
        let explored = decisions.iter().filter(|d| d.explored).count();
        let n_decisions = decisions.len();
        let stepwise = self.cfg.returns == ReturnMode::Stepwise;
        let mut transitions: Vec<Transition> = Vec::with_capacity(n_decisions);
        for d in decisions {
            if stepwise {
                if let Some(prev) = transitions.last_mut() {
                    prev.within_next = Some(d.state.as_slice().to_vec());
                }
            }
            transitions.push(Transition {
                reward: match self.cfg.reward {
                    RewardMode::Slot => report.reward,
                    RewardMode::PerAction => d.job.map_or(0.0, |j| report.job_reward(j)),
                },
                state: d.state.into_vec(),
                mask: d.mask,
                action: d.action,
                next_state: next.clone(),
                slot,
                behavior_prob: d.behavior_prob,
                done,
                ret: None,
                within_next: None,
            });
        }

        let ready = match self.cfg.returns {
            ReturnMode::Td | ReturnMode::Stepwise => transitions,
            ReturnMode::MonteCarlo => self.settle_returns(transitions, report.reward, done || truncate),
        };
        if self.cfg.baseline == Baseline::Ema {
            for t in &ready {
                let g = t.ret.unwrap_or(t.reward);
                let lambda = self.cfg.ema_decay;
                self.ema = Some(self.ema.map_or(g, |e| lambda * e + (1.0 - lambda) * g));
            }
        }
        let mut metrics = SlotMetrics {
            slot,
            episode,
            reward: report.reward,
            decisions: n_decisions,
            explored,
            buffer: 0,
            policy_loss: None,
            entropy: None,
            value_loss: None,
            validation_jct: None,
        };
        if self.cfg.replay {
            for t in ready {
                self.buffer.push(t);
            }
            if self.buffer.len() >= self.cfg.min_buffer.max(1) {
                for _ in 0..self.cfg.updates_per_slot {
                    let batch: Vec<Transition> =
                        self.buffer.sample(self.cfg.batch_size, &mut self.batch_rng).into_iter().cloned().collect();
                    self.update(&batch, slot, &mut metrics)?;
                }
            }
        } else if !ready.is_empty() {
            for _ in 0..self.cfg.updates_per_slot {
                self.update(&ready, slot, &mut metrics)?;
            }
        }
        metrics.buffer = self.buffer.len();
        Ok(metrics)
    }

    /// Queues a slot for Monte-Carlo returns and releases every slot whose
    /// horizon is complete (all of them when the episode ends).
    fn settle_returns(&mut self, slot_transitions: Vec<Transition>, slot_reward: f64, end: bool) -> Vec<Transition> {
        self.pending.push_back((slot_transitions, slot_reward));
        let h = self.cfg.mc_horizon;
        let mut out = Vec::new();
        while self.pending.len() >= h || (end && !self.pending.is_empty()) {
            let rewards: Vec<f64> = self.pending.iter().take(h).map(|p| p.1).collect();
            let g = discounted_returns(&rewards, self.cfg.gamma, h)[0];
            let (ts, _) = self.pending.pop_front().expect("non-empty");
            out.extend(ts.into_iter().map(|mut t| {
                // per-action rewards replace the slot's own term
                t.ret = Some(g - rewards[0] + t.reward);
                t
            }));
        }
        out
    }

    fn update(&mut self, batch: &[Transition], slot: u64, metrics: &mut SlotMetrics) -> Result<()> {
        let n = batch.len();
        let states: Vec<f64> = batch.iter().flat_map(|t| t.state.iter().copied()).collect();
        let (q, values) = match self.cfg.baseline {
            Baseline::ValueNetwork => {
                let v = self.value.forward_batch(&states, n, &mut self.vcache)?.to_vec();
                let q = match self.cfg.returns {
                    ReturnMode::MonteCarlo => batch.iter().map(|t| t.ret.unwrap_or(t.reward)).collect(),
                    ReturnMode::Td | ReturnMode::Stepwise => {
                        let next: Vec<f64> = batch
                            .iter()
                            .flat_map(|t| t.within_next.as_ref().unwrap_or(&t.next_state).iter().copied())
                            .collect();
                        let nv = self.target.forward_batch(&next, n, &mut self.vcache)?.to_vec();
                        batch
                            .iter()
                            .zip(nv)
                            .map(|(t, v)| match t.within_next {
                                Some(_) => v,
                                None if t.done => t.reward,
                                None => t.reward + self.cfg.gamma * v,
                            })
                            .collect::<Vec<f64>>()
                    }
                };
                (q, v)
            }
            Baseline::Ema => {
                let q: Vec<f64> = batch.iter().map(|t| t.ret.unwrap_or(t.reward)).collect();
                (q, vec![self.ema.unwrap_or(0.0); n])
            }
        };
        let mut adv: Vec<f64> = q.iter().zip(&values).map(|(q, v)| q - v).collect();
        if self.cfg.normalize_advantages && n > 1 {
            let mean = adv.iter().sum::<f64>() / n as f64;
            let sd = (adv.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / n as f64).sqrt();
            if sd > 1e-8 {
                adv.iter_mut().for_each(|a| *a = (*a - mean) / sd);
            }
        }
        let warming = self.cfg.baseline == Baseline::ValueNetwork && slot < self.cfg.critic_warmup;
        let masks: Vec<&[bool]> = batch.iter().map(|t| t.mask.as_slice()).collect();
        let actions: Vec<usize> = batch.iter().map(|t| t.action).collect();
        let behavior: Vec<f64> = batch.iter().map(|t| t.behavior_prob).collect();
        let importance =
            (self.cfg.importance_clip > 0.0).then_some(Importance { behavior: &behavior, clip: self.cfg.importance_clip });
        self.updates += 1;
        if !warming {
            let ps = policy_gradient_update(
                &mut self.policy,
                &mut self.popt,
                &states,
                &masks,
                &actions,
                &adv,
                self.cfg.beta,
                importance,
                &mut self.pcache,
            )?;
            if ps.applied {
                metrics.policy_loss = Some(ps.loss);
                metrics.entropy = Some(ps.entropy);
            } else {
                self.skipped += 1;
            }
        }
        if self.cfg.baseline == Baseline::ValueNetwork {
            let vs = value_update(&mut self.value, &mut self.vopt, &states, &q, &mut self.vcache)?;
            if vs.applied {
                metrics.value_loss = Some(vs.loss);
            } else {
                self.skipped += 1;
            }
            self.value_steps += 1;
            if self.value_steps % self.cfg.target_refresh == 0 {
                self.target = self.value.clone();
            }
        }
        Ok(())
    }

    fn validate(&self, v: &Validation<'_>) -> Result<f64> {
        let mut sched = self.scheduler();
        mean_jct(&self.setup, &mut sched, v.traces, v.seed, v.max_slots)
    }

    /// Trains for `slots` slots on fresh episodes drawn from `workload`.
    /// `sink` receives every slot's metrics in order.
    pub fn train(
        &mut self,
        workload: &TraceConfig,
        slots: u64,
        validation: &Validation<'_>,
        mut sink: impl FnMut(&SlotMetrics) -> Result<()>,
    ) -> Result<TrainReport> {
        let mut report = TrainReport::default();
        let validating = validation.every > 0 && !validation.traces.is_empty();
        if validating {
            report.validation.push((0, self.validate(validation)?));
        }
        let mut episode = 0u64;
        let mut sim = self.episode(workload, episode)?;
        let mut episode_start = 0u64;
        for slot in 0..slots {
            let truncate = slot + 1 - episode_start >= self.max_episode_slots;
            let mut m = self.train_slot(&mut sim, slot, episode, truncate)?;
            if validating && (slot + 1) % validation.every == 0 {
                let jct = self.validate(validation)?;
                m.validation_jct = Some(jct);
                report.validation.push((slot + 1, jct));
            }
            sink(&m)?;
            if sim.is_done() || truncate {
                episode += 1;
                sim = self.episode(workload, episode)?;
                episode_start = slot + 1;
            }
        }
        report.episodes = episode + 1;
        report.updates = self.updates;
        report.skipped_updates = self.skipped;
        Ok(report)
    }

    fn episode(&self, workload: &TraceConfig, episode: u64) -> Result<Simulator> {
        let s = self.seed.wrapping_mul(0x1000_0000_01b3).wrapping_add(episode);
        let trace = generate(workload, &self.setup.catalog, s)?;
        self.setup.simulator(&trace, s ^ 0x5bd1_e995)
    }
}
