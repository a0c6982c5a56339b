//! Executable model of hot PS/worker scaling for a parameter-server
//! training job: best-fit shard rebalancing, a version-counter scaling
//! clock, and message-driven coordinator/PS/worker state machines.

pub mod overhead;
pub mod protocol;
pub mod shards;

use serde::{Deserialize, Serialize};

pub use overhead::{linear_fit, sequential_addition_overhead, OverheadPoint};
pub use protocol::{suspensions, Change, ChangeOutcome, LogEvent, LogRecord, NodeId, OpId, ScalingSim, WorkerId};
pub use shards::{
    best_fit_assign, movement_lower_bound, moved_volume, target_loads, KeyRange, KeySet, Move, ParameterShard, PsId,
    ShardMap,
};

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("no parameter servers")]
    NoServers,

    #[error("partition violated: {0}")]
    Partition(String),

    #[error("request rejected: {0}")]
    Rejected(String),

    #[error("scaling did not finish: {0}")]
    Liveness(String),

    #[error("invalid scaling config: {0}")]
    Config(String),
}

/// Network, timing and fault parameters of the simulated job. Times are in
/// microseconds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScalingConfig {
    pub total_params: u64,
    pub global_batch: u32,
    /// Worker compute time per iteration.
    pub iteration_us: u64,
    /// Relative uniform jitter on the compute time.
    pub compute_jitter: f64,
    pub latency_min_us: u64,
    pub latency_max_us: u64,
    pub bandwidth_params_per_us: f64,
    pub clock_margin: u64,
    /// Loss probability of migration transfers, their acks, and notices to workers.
    pub drop_rate: f64,
    pub retry_timeout_us: u64,
    /// Resends of a lost transfer before the change is aborted.
    pub retry_budget: u32,
    /// A paused worker asks the coordinator for the outcome after this long.
    pub notice_timeout_us: u64,
    /// A change that has not settled after this long is a liveness failure.
    pub op_timeout_us: u64,
    /// Cost of scaling by checkpoint and restart, for comparison.
    pub checkpoint_restart_s: f64,
}

impl Default for ScalingConfig {
    fn default() -> Self {
        Self {
            total_params: 1_000_000,
            global_batch: 512,
            iteration_us: 50_000,
            compute_jitter: 0.1,
            latency_min_us: 200,
            latency_max_us: 2_000,
            bandwidth_params_per_us: 250.0,
            clock_margin: 2,
            drop_rate: 0.0,
            retry_timeout_us: 20_000,
            retry_budget: 3,
            notice_timeout_us: 20_000,
            op_timeout_us: 60_000_000,
            checkpoint_restart_s: 60.0,
        }
    }
}

impl ScalingConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.into()));
        if self.latency_min_us > self.latency_max_us {
            return bad("latency_min_us exceeds latency_max_us");
        }
        if !(self.bandwidth_params_per_us > 0.0) {
            return bad("bandwidth_params_per_us must be positive");
        }
        if !(0.0..1.0).contains(&self.drop_rate) || !(0.0..1.0).contains(&self.compute_jitter) {
            return bad("drop_rate and compute_jitter must lie in [0, 1)");
        }
        if self.iteration_us == 0 || self.retry_timeout_us == 0 || self.notice_timeout_us == 0 {
            return bad("iteration and timeout durations must be positive");
        }
        Ok(())
    }
}

/// Version at which every node switches to a new plan:
/// `max(versions) + ⌈rtt / iteration⌉ + margin`.
pub fn compute_scaling_clock(versions: &[u64], max_rtt_us: u64, iteration_us: u64, margin: u64) -> u64 {
    let latest = versions.iter().copied().max().unwrap_or(0);
    let rtt_iterations = if iteration_us == 0 { 0 } else { max_rtt_us.div_ceil(iteration_us) };
    latest + rtt_iterations + margin
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn clock_is_margin_ahead_with_instant_network() {
        assert_eq!(compute_scaling_clock(&[10, 10, 10], 0, 50_000, 2), 12);
    }

    #[test]
    fn clock_covers_the_round_trip() {
        assert_eq!(compute_scaling_clock(&[10, 12], 150_000, 50_000, 2), 17);
        assert_eq!(compute_scaling_clock(&[10, 12], 150_001, 50_000, 2), 18);
    }

    #[test]
    fn degenerate_clock_is_the_current_version() {
        assert_eq!(compute_scaling_clock(&[7, 7], 0, 50_000, 0), 7);
    }

    #[test]
    fn config_round_trips() {
        let c = ScalingConfig::default();
        let back: ScalingConfig = serde_json::from_str(&serde_json::to_string(&c).unwrap()).unwrap();
        assert_eq!(back, c);
        assert!(ScalingConfig { latency_min_us: 5, latency_max_us: 1, ..c }.validate().is_err());
    }
}
