//! Cluster setup shared by training and evaluation, network construction,
//! and a [`Scheduler`] that runs a policy network.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::baselines::Scheduler;
use crate::encoding::{rollout_slot, FeatureScale, RolloutEnv, Selection, Window};
use crate::error::Result;
use crate::model::{Allocation, ClusterState, JobCatalog, ResourceVector};
use crate::nn::{forward_policy, Head, Network};
use crate::sim::{SimConfig, Simulator};
use crate::trace::WorkloadTrace;

/// Everything needed to instantiate a simulator and size the networks.
#[derive(Debug, Clone, PartialEq)]
pub struct ClusterSetup {
    pub catalog: JobCatalog,
    pub capacity: ResourceVector,
    pub sim: SimConfig,
    pub window: Window,
    pub features: FeatureScale,
}

impl ClusterSetup {
    pub fn simulator(&self, trace: &WorkloadTrace, seed: u64) -> Result<Simulator> {
        Simulator::new(self.catalog.clone(), self.capacity, trace, self.sim.clone(), seed)
    }

    pub fn with_sim(&self, sim: SimConfig) -> Self {
        Self { sim, ..self.clone() }
    }

    fn sizes(&self, hidden: &[usize], out: usize) -> Vec<usize> {
        let mut s = vec![self.window.input_dim()];
        s.extend_from_slice(hidden);
        s.push(out);
        s
    }

    /// Softmax policy over the `3J + 1` actions.
    pub fn policy_network<R: Rng + ?Sized>(&self, hidden: &[usize], rng: &mut R) -> Network<f64> {
        Network::new(&self.sizes(hidden, self.window.actions()), Head::Softmax, rng)
            .with_input_scale(self.features.input_scale(self.window))
    }

    /// Scalar state-value estimate.
    pub fn value_network<R: Rng + ?Sized>(&self, hidden: &[usize], rng: &mut R) -> Network<f64> {
        Network::new(&self.sizes(hidden, 1), Head::Linear, rng).with_input_scale(self.features.input_scale(self.window))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    /// Most probable feasible action.
    Greedy,
    /// Sample from the masked policy.
    Sample,
}

/// A frozen policy used as a scheduler (no exploration).
#[derive(Debug, Clone)]
pub struct PolicyScheduler {
    pub policy: Network<f64>,
    pub window: Window,
    pub mode: Mode,
    rng: ChaCha8Rng,
    name: String,
}

impl PolicyScheduler {
    pub fn new(policy: Network<f64>, window: Window, mode: Mode, seed: u64) -> Self {
        Self { policy, window, mode, rng: ChaCha8Rng::seed_from_u64(seed), name: "dl2".into() }
    }

    pub fn named(mut self, name: &str) -> Self {
        self.name = name.to_string();
        self
    }
}

impl Scheduler for PolicyScheduler {
    fn name(&self) -> &str {
        &self.name
    }

    fn allocate(&mut self, state: &ClusterState, catalog: &JobCatalog) -> Result<Allocation> {
        let env = RolloutEnv { jobs: &state.active_jobs, capacity: state.capacity, catalog, window: self.window };
        let policy = &self.policy;
        let infer = |s: &crate::encoding::EncodedState| forward_policy(policy, s.as_slice());
        let selection = match self.mode {
            Mode::Greedy => Selection::Greedy,
            Mode::Sample => Selection::Sample(&mut self.rng),
        };
        let (alloc, _) = rollout_slot(&env, infer, |_, _| None, selection)?;
        Ok(alloc)
    }
}
