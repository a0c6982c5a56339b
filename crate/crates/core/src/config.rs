//! Experiment configuration: one TOML file with a section per component.
//! Every field has a default, so an empty file is a valid config.

use std::collections::BTreeSet;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::agent::ClusterSetup;
use crate::baselines::{Heuristic, HeuristicConfig};
use crate::encoding::{FeatureScale, Window};
use crate::error::{Error, Result};
use crate::model::{JobCatalog, ResourceVector};
use crate::rl::RlConfig;
use crate::sim::SimConfig;
use crate::sl::SlConfig;
use crate::trace::TraceConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClusterConfig {
    pub gpus: f64,
    pub cpus: f64,
    pub memory_gb: f64,
    /// Concurrent jobs the policy can see (`J`).
    pub window_jobs: usize,
    pub features: FeatureScale,
}

impl Default for ClusterConfig {
    fn default() -> Self {
        Self { gpus: 20.0, cpus: 80.0, memory_gb: 480.0, window_jobs: 20, features: FeatureScale::default() }
    }
}

/// Supervised bootstrap and online training budget.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingConfig {
    pub teacher: Heuristic,
    /// Training traces replayed under the teacher.
    pub teacher_traces: usize,
    /// Slots recorded from each teacher trace.
    pub teacher_slots: u64,
    pub rl_slots: u64,
    /// Validation period in slots; 0 disables validation during training.
    pub validate_every: u64,
    /// Slots after which a training episode is cut.
    pub max_episode_slots: u64,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            teacher: Heuristic::Drf,
            teacher_traces: 10,
            teacher_slots: 300,
            rl_slots: 2000,
            validate_every: 250,
            max_episode_slots: 1000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub validation_traces: usize,
    /// Trace seeds of run seed `s` are `validation_seed + 100·s + k`.
    pub validation_seed: u64,
    /// Runs stop after this many slots; unfinished jobs are charged up to it.
    pub max_slots: u64,
    /// Seeds used by `compare` and `ablate`.
    pub seeds: Vec<u64>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { validation_traces: 5, validation_seed: 9000, max_slots: 2000, seeds: vec![1, 2, 3, 4, 5] }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub cluster: ClusterConfig,
    pub sim: SimConfig,
    pub trace: TraceConfig,
    pub heuristics: HeuristicConfig,
    pub sl: SlConfig,
    pub rl: RlConfig,
    pub training: TrainingConfig,
    pub eval: EvalConfig,
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        parse_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn setup(&self) -> ClusterSetup {
        let catalog = JobCatalog::standard();
        let types = catalog.len();
        ClusterSetup {
            catalog,
            capacity: ResourceVector::new(self.cluster.gpus, self.cluster.cpus, self.cluster.memory_gb),
            sim: self.sim.clone(),
            window: Window::new(self.cluster.window_jobs, types),
            features: self.cluster.features,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let c = &self.cluster;
        if !(c.gpus >= 0.0 && c.cpus >= 0.0 && c.memory_gb >= 0.0) {
            return Err(Error::Config("cluster: capacities must be non-negative".into()));
        }
        if c.window_jobs == 0 {
            return Err(Error::Config("cluster: window_jobs must be positive".into()));
        }
        if !(self.sim.interference_sigma >= 0.0) || !(0.0..1.0).contains(&self.sim.epoch_error) {
            return Err(Error::Config("sim: interference_sigma must be ≥ 0 and epoch_error in [0, 1)".into()));
        }
        if self.eval.validation_traces == 0 {
            return Err(Error::Config("eval: validation_traces must be positive".into()));
        }
        self.rl.validate()
    }
}

/// Parses `text` into `T`, reporting every key that `T` does not define.
///
/// Known keys are read off the serialized default. A table whose `kind` tag
/// differs from the default's is left to the deserializer.
pub fn parse_toml<T: Serialize + DeserializeOwned + Default>(text: &str) -> Result<T> {
    let given: toml::Table = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
    let known = toml::Table::try_from(T::default()).map_err(|e| Error::Config(e.to_string()))?;
    let mut unknown = BTreeSet::new();
    unknown_keys(&given, &known, "", &mut unknown);
    if !unknown.is_empty() {
        return Err(Error::UnknownConfigKeys(unknown.into_iter().collect()));
    }
    T::deserialize(given).map_err(|e| Error::Config(e.to_string()))
}

fn unknown_keys(given: &toml::Table, known: &toml::Table, prefix: &str, out: &mut BTreeSet<String>) {
    if given.get("kind").is_some_and(|k| Some(k) != known.get("kind")) {
        return;
    }
    for (k, v) in given {
        let path = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
        match (v, known.get(k)) {
            (_, None) => {
                out.insert(path);
            }
            (toml::Value::Table(g), Some(toml::Value::Table(d))) => unknown_keys(g, d, &path, out),
            _ => {}
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_is_the_default() {
        assert_eq!(parse_toml::<ExperimentConfig>("").unwrap(), ExperimentConfig::default());
    }

    #[test]
    fn default_round_trips() {
        let cfg = ExperimentConfig::default();
        assert_eq!(parse_toml::<ExperimentConfig>(&cfg.to_toml()).unwrap(), cfg);
    }

    #[test]
    fn overrides_are_applied() {
        let cfg: ExperimentConfig = parse_toml("[rl]\ngamma = 0.5\n[sim]\ninterference_sigma = 0.0\n").unwrap();
        assert_eq!(cfg.rl.gamma, 0.5);
        assert_eq!(cfg.sim.interference_sigma, 0.0);
        assert_eq!(cfg.rl.beta, 0.1);
    }

    #[test]
    fn every_unknown_key_is_listed() {
        let err = parse_toml::<ExperimentConfig>("seed = 3\n[rl]\ngama = 0.5\n[cluster.features]\nslot = 1.0\n[nope]\nx = 1\n")
            .unwrap_err();
        match err {
            Error::UnknownConfigKeys(keys) => assert_eq!(keys, ["cluster.features.slot", "nope", "rl.gama", "seed"]),
            e => panic!("{e}"),
        }
    }

    #[test]
    fn switching_arrival_pattern_is_allowed() {
        let cfg: ExperimentConfig = parse_toml("[trace.pattern]\nkind = \"poisson\"\nrate = 2.0\n").unwrap();
        assert_eq!(cfg.trace.pattern, crate::trace::ArrivalPattern::Poisson { rate: 2.0 });
        assert!(parse_toml::<ExperimentConfig>("[trace.pattern]\nkind = \"poisson\"\nrat = 2.0\n").is_err());
    }

    #[test]
    fn bad_values_are_rejected() {
        assert!(parse_toml::<ExperimentConfig>("[rl]\ngamma = \"high\"\n").is_err());
        let cfg: ExperimentConfig = parse_toml("[rl]\ngamma = 1.5\n").unwrap();
        assert!(cfg.validate().is_err());
    }
}
