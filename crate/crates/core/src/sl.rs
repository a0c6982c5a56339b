//! Supervised bootstrap: imitate a heuristic scheduler.
//!
//! A teacher runs the simulator over training traces; each slot's allocation
//! is replayed into (state, action) pairs, and the policy network is trained
//! with masked softmax cross-entropy against those labels.
//!
//! Dataset files are JSON lines: a header
//! `{"format":"dlsched-sl-dataset","version":1,"jobs":J,"types":L}` followed
//! by one `{"state":[..],"mask":[..],"action":a}` record per sample, with the
//! state flattened row-major as `J × (L + 5)` raw (unscaled) features.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::agent::ClusterSetup;
use crate::baselines::{teacher_replay, Heuristic, HeuristicConfig};
use crate::encoding::{argmax, Window};
use crate::error::{Error, Result};
use crate::nn::{cross_entropy, masked_softmax, Adam, AdamConfig, ForwardCache, Gradients, Network};
use crate::trace::WorkloadTrace;

pub const DATASET_FORMAT: &str = "dlsched-sl-dataset";
pub const DATASET_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub state: Vec<f64>,
    pub mask: Vec<bool>,
    pub action: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub window: Window,
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

/// Runs `teacher` on every trace for at most `slots` slots (stopping early
/// once a trace drains) and collects the replayed decisions, shuffled.
pub fn generate_teacher_dataset(
    setup: &ClusterSetup,
    traces: &[WorkloadTrace],
    teacher: Heuristic,
    heuristics: &HeuristicConfig,
    slots: u64,
    seed: u64,
) -> Result<Dataset> {
    if traces.iter().all(|t| t.is_empty()) {
        return Err(Error::Empty("teacher traces"));
    }
    let mut samples = Vec::new();
    for (k, trace) in traces.iter().enumerate() {
        let mut sim = setup.simulator(trace, seed.wrapping_add(k as u64))?;
        let mut sched = teacher.build(heuristics);
        for _ in 0..slots {
            if sim.is_done() {
                break;
            }
            let state = sim.state();
            let alloc = sched.allocate(state, &setup.catalog)?;
            let d = teacher_replay(&alloc, &state.active_jobs, &state.capacity, &setup.catalog, setup.window)?;
            samples.extend(d.steps.into_iter().map(|s| Sample { state: s.state.into_vec(), mask: s.mask, action: s.action }));
            let report = sim.step(&alloc)?;
            sched.observe(&report);
        }
    }
    samples.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    Ok(Dataset { window: setup.window, samples })
}

#[derive(Serialize, Deserialize)]
struct Header {
    format: String,
    version: u32,
    jobs: usize,
    types: usize,
}

pub fn write_dataset<W: Write>(ds: &Dataset, mut out: W) -> Result<()> {
    let h = Header { format: DATASET_FORMAT.into(), version: DATASET_VERSION, jobs: ds.window.jobs, types: ds.window.types };
    serde_json::to_writer(&mut out, &h)?;
    out.write_all(b"\n")?;
    for s in &ds.samples {
        serde_json::to_writer(&mut out, s)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

pub fn save_dataset(ds: &Dataset, path: &Path) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    write_dataset(ds, &mut out)?;
    out.flush()?;
    Ok(())
}

pub fn load_dataset(path: &Path) -> Result<Dataset> {
    let parse = |line: usize, e: serde_json::Error| Error::Parse { path: path.to_path_buf(), line, message: e.to_string() };
    let mut lines = BufReader::new(File::open(path)?).lines();
    let first = lines.next().ok_or(Error::Empty("dataset header"))??;
    let h: Header = serde_json::from_str(&first).map_err(|e| parse(1, e))?;
    if h.format != DATASET_FORMAT || h.version != DATASET_VERSION {
        return Err(Error::Parse {
            path: path.to_path_buf(),
            line: 1,
            message: format!("unsupported dataset {} v{}", h.format, h.version),
        });
    }
    let window = Window::new(h.jobs, h.types);
    let mut samples = Vec::new();
    for (i, line) in lines.enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let s: Sample = serde_json::from_str(&line).map_err(|e| parse(i + 2, e))?;
        if s.state.len() != window.input_dim() || s.mask.len() != window.actions() || s.action >= window.actions() {
            return Err(Error::Parse { path: path.to_path_buf(), line: i + 2, message: "sample does not match header dimensions".into() });
        }
        samples.push(s);
    }
    Ok(Dataset { window, samples })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SlConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub passes: usize,
    /// Stop once training agreement improved by less than `plateau_delta`
    /// over the last `plateau_window` passes.
    pub plateau_window: usize,
    pub plateau_delta: f64,
}

impl Default for SlConfig {
    fn default() -> Self {
        Self { learning_rate: 0.005, batch_size: 256, passes: 200, plateau_window: 10, plateau_delta: 0.001 }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SlReport {
    /// Mean cross-entropy per pass.
    pub loss: Vec<f64>,
    /// Fraction of samples whose argmax matched the label during each pass.
    pub agreement: Vec<f64>,
    pub plateaued: bool,
}

/// Fraction of samples where the masked argmax equals the label.
pub fn agreement(net: &Network<f64>, ds: &Dataset) -> Result<f64> {
    if ds.is_empty() {
        return Err(Error::Empty("dataset"));
    }
    let k = ds.window.actions();
    let mut cache = ForwardCache::new();
    let mut hits = 0usize;
    for chunk in ds.samples.chunks(512) {
        let input: Vec<f64> = chunk.iter().flat_map(|s| s.state.iter().copied()).collect();
        let out = net.forward_batch(&input, chunk.len(), &mut cache)?;
        for (s, logits) in chunk.iter().zip(out.chunks(k)) {
            let p = masked_softmax(logits, &s.mask).ok_or(Error::NonFiniteProbabilities)?;
            hits += usize::from(argmax(&p) == s.action);
        }
    }
    Ok(hits as f64 / ds.len() as f64)
}

/// Mini-batch Adam on masked cross-entropy.
///
/// If a pass produces a non-finite loss or gradient, the network is restored
/// to its state at the start of that pass and [`Error::Diverged`] is returned.
pub fn train_supervised(net: &mut Network<f64>, ds: &Dataset, cfg: &SlConfig, seed: u64) -> Result<SlReport> {
    if ds.is_empty() {
        return Err(Error::Empty("dataset"));
    }
    let k = ds.window.actions();
    if net.input_dim() != ds.window.input_dim() || net.output_dim() != k {
        return Err(Error::Shape(format!(
            "network is {}→{}, dataset needs {}→{}",
            net.input_dim(),
            net.output_dim(),
            ds.window.input_dim(),
            k
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut opt = Adam::new(net, AdamConfig::with_lr(cfg.learning_rate));
    let mut cache = ForwardCache::new();
    let mut grads = Gradients::zeros_like(net);
    let mut order: Vec<usize> = (0..ds.len()).collect();
    let mut report = SlReport::default();
    let batch = cfg.batch_size.max(1);
    let mut input = Vec::new();
    let mut d_out = Vec::new();
    for pass in 0..cfg.passes {
        let snapshot = net.clone();
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut hits = 0usize;
        let diverged = |net: &mut Network<f64>| {
            *net = snapshot.clone();
            Err(Error::Diverged { epoch: pass })
        };
        for idx in order.chunks(batch) {
            input.clear();
            input.extend(idx.iter().flat_map(|&i| ds.samples[i].state.iter().copied()));
            let out = match net.forward_batch(&input, idx.len(), &mut cache) {
                Ok(o) => o,
                Err(Error::Numerical { .. }) => return diverged(net),
                Err(e) => return Err(e),
            };
            d_out.clear();
            d_out.resize(idx.len() * k, 0.0);
            let scale = 1.0 / idx.len() as f64;
            for (r, &i) in idx.iter().enumerate() {
                let s = &ds.samples[i];
                let p = masked_softmax(&out[r * k..(r + 1) * k], &s.mask).ok_or(Error::NonFiniteProbabilities)?;
                loss_sum += cross_entropy(&p, s.action);
                hits += usize::from(argmax(&p) == s.action);
                let g = &mut d_out[r * k..(r + 1) * k];
                g.iter_mut().zip(&p).for_each(|(g, p)| *g = p * scale);
                g[s.action] -= scale;
            }
            match net.backward_batch(&mut cache, &d_out, &mut grads) {
                Ok(()) => {}
                Err(Error::Numerical { .. }) => return diverged(net),
                Err(e) => return Err(e),
            }
            if !opt.step(net, &grads) {
                return diverged(net);
            }
        }
        let loss = loss_sum / ds.len() as f64;
        if !loss.is_finite() {
            return diverged(net);
        }
        report.loss.push(loss);
        report.agreement.push(hits as f64 / ds.len() as f64);
        let w = cfg.plateau_window;
        let n = report.agreement.len();
        if w > 0 && n > w && report.agreement[n - 1] - report.agreement[n - 1 - w] < cfg.plateau_delta {
            report.plateaued = true;
            break;
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoding::FeatureScale;
    use crate::model::{JobCatalog, ResourceVector};
    use crate::nn::Head;
    use crate::sim::SimConfig;
    use crate::trace::{generate, TraceConfig, TraceJob};

    fn setup() -> ClusterSetup {
        ClusterSetup {
            catalog: JobCatalog::standard(),
            capacity: ResourceVector::new(8.0, 40.0, 200.0),
            sim: SimConfig::default(),
            window: Window::new(4, 8),
            features: FeatureScale::default(),
        }
    }

    fn one_job() -> WorkloadTrace {
        WorkloadTrace { jobs: vec![TraceJob { arrival_slot: 0, type_id: 0, total_epochs: 5.0, global_batch: 256 }] }
    }

    #[test]
    fn single_slot_ends_in_void() {
        let s = setup();
        let ds = generate_teacher_dataset(&s, &[one_job()], Heuristic::Drf, &HeuristicConfig::default(), 1, 0).unwrap();
        let voids: Vec<&Sample> = ds.samples.iter().filter(|x| x.action == s.window.void_index()).collect();
        assert_eq!(voids.len(), 1);
        assert!(ds.len() >= 2);
        assert!(ds.samples.iter().all(|x| x.mask[x.action]));
    }

    #[test]
    fn dataset_size_is_sum_of_decisions() {
        let s = setup();
        let trace = generate(&TraceConfig { n_jobs: 10, ..TraceConfig::default() }, &s.catalog, 1).unwrap();
        let ds = generate_teacher_dataset(&s, &[trace.clone()], Heuristic::Drf, &HeuristicConfig::default(), 20, 3).unwrap();
        let mut sim = s.simulator(&trace, 3).unwrap();
        let mut drf = Heuristic::Drf.build(&HeuristicConfig::default());
        let mut expected = 0;
        for _ in 0..20 {
            let st = sim.state();
            let a = drf.allocate(st, &s.catalog).unwrap();
            let d = teacher_replay(&a, &st.active_jobs, &st.capacity, &s.catalog, s.window).unwrap();
            expected += d.steps.len();
            sim.step(&a).unwrap();
        }
        assert_eq!(ds.len(), expected);
        let again = generate_teacher_dataset(&s, &[trace], Heuristic::Drf, &HeuristicConfig::default(), 20, 3).unwrap();
        assert_eq!(ds, again);
    }

    #[test]
    fn empty_trace_is_an_error() {
        let r = generate_teacher_dataset(&setup(), &[WorkloadTrace::default()], Heuristic::Drf, &HeuristicConfig::default(), 5, 0);
        assert!(matches!(r, Err(Error::Empty(_))));
    }

    #[test]
    fn memorizes_a_repeated_sample() {
        let w = Window::new(2, 2);
        let mut state = vec![0.0; w.input_dim()];
        state[0] = 1.0;
        state[3] = 4.0;
        let mut mask = vec![true; w.actions()];
        mask[3] = false;
        let ds = Dataset { window: w, samples: vec![Sample { state, mask, action: 2 }; 8] };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut net = Network::new(&[w.input_dim(), 16, 16, w.actions()], Head::Softmax, &mut rng);
        let cfg = SlConfig { passes: 300, batch_size: 4, plateau_window: 0, ..SlConfig::default() };
        let rep = train_supervised(&mut net, &ds, &cfg, 1).unwrap();
        assert_eq!(*rep.agreement.last().unwrap(), 1.0);
        assert!(*rep.loss.last().unwrap() < 1e-3, "{:?}", rep.loss.last());
        assert_eq!(agreement(&net, &ds).unwrap(), 1.0);
    }

    #[test]
    fn divergence_restores_last_finite_network() {
        let w = Window::new(1, 1);
        let ds = Dataset { window: w, samples: vec![Sample { state: vec![1e308, 0.0, 0.0, 0.0, 0.0, 0.0], mask: vec![true; 4], action: 0 }] };
        let mut net = Network::new(&[6, 4, 4], Head::Softmax, &mut ChaCha8Rng::seed_from_u64(2));
        net.layers_mut()[0].weights.iter_mut().for_each(|x| *x = 10.0);
        let before = net.clone();
        let r = train_supervised(&mut net, &ds, &SlConfig::default(), 0);
        assert!(matches!(r, Err(Error::Diverged { epoch: 0 })));
        assert_eq!(net, before);
    }

    #[test]
    fn dataset_file_round_trip() {
        let s = setup();
        let ds = generate_teacher_dataset(&s, &[one_job()], Heuristic::Fifo, &HeuristicConfig::default(), 3, 0).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("ds.jsonl");
        save_dataset(&ds, &p).unwrap();
        assert_eq!(load_dataset(&p).unwrap(), ds);
        std::fs::write(&p, "{\"format\":\"dlsched-sl-dataset\",\"version\":1,\"jobs\":1,\"types\":1}\n{\"state\":[1]}\n").unwrap();
        assert!(matches!(load_dataset(&p), Err(Error::Parse { line: 2, .. })));
    }

    #[test]
    fn loss_trends_down_on_teacher_data() {
        let s = setup();
        let trace = generate(&TraceConfig { n_jobs: 20, ..TraceConfig::default() }, &s.catalog, 5).unwrap();
        let ds = generate_teacher_dataset(&s, &[trace], Heuristic::Drf, &HeuristicConfig::default(), 40, 5).unwrap();
        let mut net = s.policy_network(&[32, 32], &mut ChaCha8Rng::seed_from_u64(6));
        let cfg = SlConfig { passes: 30, batch_size: 32, plateau_window: 0, ..SlConfig::default() };
        let rep = train_supervised(&mut net, &ds, &cfg, 7).unwrap();
        let ma = |i: usize| rep.loss[i..i + 10].iter().sum::<f64>() / 10.0;
        assert!(ma(20) < ma(0), "{:?}", rep.loss);
    }
}
