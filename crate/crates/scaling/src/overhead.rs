//! Worker suspension when PSs are added one at a time.

use serde::{Deserialize, Serialize};

use crate::protocol::{Change, ScalingSim};
use crate::{Result, ScalingConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OverheadPoint {
    /// PSs added so far.
    pub added: u32,
    /// Suspension of the latest addition, averaged over workers and seeds.
    pub step_suspension_ms: f64,
    /// Sum of the step suspensions up to this point.
    pub cumulative_suspension_ms: f64,
    /// Longest single-worker suspension seen at this step.
    pub max_suspension_ms: f64,
}

/// Starts a job with one PS and `workers` workers, then adds `max_added`
/// PSs sequentially, averaging over `seeds`.
pub fn sequential_addition_overhead(
    cfg: &ScalingConfig,
    workers: u32,
    max_added: u32,
    seeds: &[u64],
) -> Result<Vec<OverheadPoint>> {
    let mut step = vec![0.0; max_added as usize];
    let mut max = vec![0.0f64; max_added as usize];
    for &seed in seeds {
        let mut sim = ScalingSim::new(cfg.clone(), 1, workers, seed)?;
        sim.run_for(2 * cfg.iteration_us);
        for k in 0..max_added {
            let out = sim.apply(Change::AddPs(k + 1))?;
            let s = &out.suspensions_us;
            step[k as usize] += s.iter().sum::<u64>() as f64 / s.len().max(1) as f64 / 1e3;
            max[k as usize] = max[k as usize].max(out.max_suspension_us() as f64 / 1e3);
            sim.run_for(2 * cfg.iteration_us);
        }
    }
    let n = seeds.len().max(1) as f64;
    let mut cumulative = 0.0;
    Ok((0..max_added as usize)
        .map(|k| {
            cumulative += step[k] / n;
            OverheadPoint {
                added: k as u32 + 1,
                step_suspension_ms: step[k] / n,
                cumulative_suspension_ms: cumulative,
                max_suspension_ms: max[k],
            }
        })
        .collect())
}

/// Least-squares line through the points: `(slope, intercept, r²)`.
pub fn linear_fit(xs: &[f64], ys: &[f64]) -> (f64, f64, f64) {
    let n = xs.len() as f64;
    let (mx, my) = (xs.iter().sum::<f64>() / n, ys.iter().sum::<f64>() / n);
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    let syy: f64 = ys.iter().map(|y| (y - my).powi(2)).sum();
    let slope = sxy / sxx;
    let r2 = if syy == 0.0 { 1.0 } else { sxy * sxy / (sxx * syy) };
    (slope, my - slope * mx, r2)
}
