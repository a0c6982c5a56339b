//! Synthetic workloads and the trace file format.
//!
//! A trace file is CSV with the header
//! `arrival_slot,type_id,total_epochs,global_batch` and one job per line,
//! sorted by arrival slot.

use std::f64::consts::PI;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, LogNormal, Poisson};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::JobCatalog;
use crate::sim::reference_epochs_per_slot;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceJob {
    pub arrival_slot: u64,
    pub type_id: usize,
    pub total_epochs: f64,
    pub global_batch: u32,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct WorkloadTrace {
    pub jobs: Vec<TraceJob>,
}

impl WorkloadTrace {
    pub fn len(&self) -> usize {
        self.jobs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.jobs.is_empty()
    }

    /// Last arrival slot, or 0 for an empty trace.
    pub fn span(&self) -> u64 {
        self.jobs.last().map_or(0, |j| j.arrival_slot)
    }
}

/// Job arrival process.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ArrivalPattern {
    /// A week compressed into `window_slots`: a diurnal sinusoid on each day,
    /// with weekend days scaled by `weekend_factor`. The template stands in
    /// for the production week; only its qualitative shape is modeled.
    Weekly { window_slots: u64, diurnal_amplitude: f64, weekend_factor: f64 },
    /// Independent Poisson(rate) arrivals per slot.
    Poisson { rate: f64 },
}

impl Default for ArrivalPattern {
    fn default() -> Self {
        ArrivalPattern::Weekly { window_slots: 70, diurnal_amplitude: 0.6, weekend_factor: 0.5 }
    }
}

impl ArrivalPattern {
    /// Relative arrival rate of slot `t` in the weekly template.
    fn weekly_rate(t: u64, window: u64, amplitude: f64, weekend: f64) -> f64 {
        let day_len = window as f64 / 7.0;
        let pos = t as f64 / day_len;
        let day = pos.floor() as u64 % 7;
        let phase = pos.fract();
        let diurnal = 1.0 + amplitude * (2.0 * PI * phase - PI / 2.0).sin();
        let day_factor = if day >= 5 { weekend } else { 1.0 };
        (diurnal * day_factor).max(0.0)
    }
}

/// Log-normal job duration in slots at the reference allocation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DurationDist {
    pub mean_slots: f64,
    /// Std-dev of the underlying normal.
    pub sigma: f64,
}

impl Default for DurationDist {
    fn default() -> Self {
        // 147 minutes at 20-minute slots; sigma 1 keeps the median (≈4.5 slots) above one hour.
        Self { mean_slots: 7.35, sigma: 1.0 }
    }
}

impl DurationDist {
    pub fn mu(&self) -> f64 {
        self.mean_slots.ln() - self.sigma * self.sigma / 2.0
    }

    pub fn median(&self) -> f64 {
        self.mu().exp()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TraceConfig {
    pub pattern: ArrivalPattern,
    pub duration: DurationDist,
    pub n_jobs: usize,
    /// Workers (and PSs) of the reference allocation used to turn durations into epochs.
    pub reference_workers: u32,
    /// Restrict job types to this subset of the catalogue (all types when empty).
    pub type_ids: Vec<usize>,
}

impl Default for TraceConfig {
    fn default() -> Self {
        Self {
            pattern: ArrivalPattern::default(),
            duration: DurationDist::default(),
            n_jobs: 60,
            reference_workers: 4,
            type_ids: Vec::new(),
        }
    }
}

fn arrival_slots(pattern: &ArrivalPattern, n_jobs: usize, rng: &mut ChaCha8Rng) -> Result<Vec<u64>> {
    let mut slots = Vec::with_capacity(n_jobs);
    match *pattern {
        ArrivalPattern::Weekly { window_slots, diurnal_amplitude, weekend_factor } => {
            if window_slots == 0 {
                return Err(Error::Config("weekly window_slots must be positive".into()));
            }
            let rates: Vec<f64> = (0..window_slots)
                .map(|t| ArrivalPattern::weekly_rate(t, window_slots, diurnal_amplitude, weekend_factor))
                .collect();
            let total: f64 = rates.iter().sum();
            if !(total > 0.0) {
                return Err(Error::Config("weekly template has zero total rate".into()));
            }
            let mut cdf = Vec::with_capacity(rates.len());
            let mut acc = 0.0;
            for r in &rates {
                acc += r / total;
                cdf.push(acc);
            }
            for _ in 0..n_jobs {
                let u: f64 = rng.random();
                let t = cdf.partition_point(|c| *c < u).min(cdf.len() - 1);
                slots.push(t as u64);
            }
            slots.sort_unstable();
        }
        ArrivalPattern::Poisson { rate } => {
            let dist = Poisson::new(rate).map_err(|e| Error::Config(format!("poisson rate: {e}")))?;
            let mut t = 0u64;
            while slots.len() < n_jobs {
                let k = dist.sample(rng) as usize;
                for _ in 0..k.min(n_jobs - slots.len()) {
                    slots.push(t);
                }
                t += 1;
            }
        }
    }
    Ok(slots)
}

/// Generates a seeded synthetic trace.
pub fn generate(config: &TraceConfig, catalog: &JobCatalog, seed: u64) -> Result<WorkloadTrace> {
    if config.n_jobs == 0 {
        return Ok(WorkloadTrace::default());
    }
    let types: Vec<usize> =
        if config.type_ids.is_empty() { (0..catalog.len()).collect() } else { config.type_ids.clone() };
    if types.is_empty() {
        return Err(Error::Empty("job type catalogue"));
    }
    for t in &types {
        catalog.get(*t)?;
    }
    let d = &config.duration;
    let durations = LogNormal::new(d.mu(), d.sigma).map_err(|e| Error::Config(format!("duration: {e}")))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let slots = arrival_slots(&config.pattern, config.n_jobs, &mut rng)?;
    let mut jobs = Vec::with_capacity(slots.len());
    for arrival_slot in slots {
        let type_id = types[rng.random_range(0..types.len())];
        let spec = catalog.get(type_id)?;
        let duration: f64 = durations.sample(&mut rng);
        let per_slot = reference_epochs_per_slot(spec, config.reference_workers);
        let total_epochs = (duration * per_slot).round().max(1.0);
        jobs.push(TraceJob { arrival_slot, type_id, total_epochs, global_batch: spec.global_batch });
    }
    Ok(WorkloadTrace { jobs })
}

pub fn write_trace<W: Write>(trace: &WorkloadTrace, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    if trace.jobs.is_empty() {
        w.write_record(["arrival_slot", "type_id", "total_epochs", "global_batch"]).map_err(csv_io)?;
    }
    for j in &trace.jobs {
        w.serialize(j).map_err(csv_io)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_trace<R: Read>(input: R, path: &Path) -> Result<WorkloadTrace> {
    let mut r = csv::ReaderBuilder::new().flexible(true).trim(csv::Trim::All).from_reader(input);
    let headers = r.headers().map_err(|e| parse_err(path, 1, e.to_string()))?.clone();
    let mut jobs = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let line = i + 2;
        let rec = rec.map_err(|e| parse_err(path, line, e.to_string()))?;
        if rec.len() < headers.len() {
            return Err(parse_err(path, line, format!("missing field `{}`", &headers[rec.len()])));
        }
        let job: TraceJob = rec.deserialize(Some(&headers)).map_err(|e| parse_err(path, line, describe(&e)))?;
        if job.total_epochs < 1.0 {
            return Err(parse_err(path, line, "total_epochs must be at least 1".into()));
        }
        if jobs.last().is_some_and(|p: &TraceJob| p.arrival_slot > job.arrival_slot) {
            return Err(parse_err(path, line, "arrival_slot decreases".into()));
        }
        jobs.push(job);
    }
    Ok(WorkloadTrace { jobs })
}

pub fn save_trace(trace: &WorkloadTrace, path: &Path) -> Result<()> {
    write_trace(trace, BufWriter::new(File::create(path)?))
}

pub fn load_trace(path: &Path) -> Result<WorkloadTrace> {
    read_trace(BufReader::new(File::open(path)?), path)
}

fn describe(e: &csv::Error) -> String {
    match e.kind() {
        csv::ErrorKind::Deserialize { err, .. } => match err.field() {
            Some(f) => format!("field {}: {}", f + 1, err.kind()),
            None => err.kind().to_string(),
        },
        _ => e.to_string(),
    }
}

fn parse_err(path: &Path, line: usize, message: String) -> Error {
    Error::Parse { path: path.to_path_buf(), line, message }
}

fn csv_io(e: csv::Error) -> Error {
    Error::Io(std::io::Error::other(e))
}
