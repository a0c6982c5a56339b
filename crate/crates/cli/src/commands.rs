use std::path::Path;

use anyhow::{bail, Context, Result};
use serde::Serialize;

use dlsched_core::baselines::Scheduler;
use dlsched_core::config::{parse_toml, ExperimentConfig};
use dlsched_core::eval::run_to_completion;
use dlsched_core::experiment::{
    self, eval_noise_seed, policy_scheduler, Evaluation, SchedulerKind, SummaryRow,
};
use dlsched_core::nn::{load_network, save_network};
use dlsched_core::rl::{Ablation, SlotMetrics};
use dlsched_core::trace::{generate, load_trace, save_trace};
use dlsched_core::Net;
use dlsched_scaling::{linear_fit, sequential_addition_overhead, ScalingConfig};

use crate::output::Outputs;
use crate::{Cli, Command};

/// Everything a run depends on: the experiment sections at the top level,
/// plus `seed` and a `[scaling]` table.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunConfig {
    pub seed: u64,
    #[serde(flatten)]
    pub experiment: ExperimentConfig,
    pub scaling: ScalingConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self { seed: 1, experiment: ExperimentConfig::default(), scaling: ScalingConfig::default() }
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        use dlsched_core::error::Error;
        let mut table: toml::Table = toml::from_str(text)?;
        let mut cfg = RunConfig::default();
        if let Some(seed) = table.remove("seed") {
            cfg.seed = seed.try_into().context("seed must be a non-negative integer")?;
        }
        let scaling = match table.remove("scaling") {
            Some(s) => parse_toml(&toml::to_string(&s)?).map_err(|e| match e {
                Error::UnknownConfigKeys(keys) => Error::UnknownConfigKeys(keys.into_iter().map(|k| format!("scaling.{k}")).collect()),
                other => other,
            }),
            None => Ok(ScalingConfig::default()),
        };
        let experiment = parse_toml(&toml::to_string(&table)?);
        match (experiment, scaling) {
            (Ok(e), Ok(s)) => (cfg.experiment, cfg.scaling) = (e, s),
            (Err(Error::UnknownConfigKeys(mut a)), Err(Error::UnknownConfigKeys(b))) => {
                a.extend(b);
                a.sort();
                return Err(Error::UnknownConfigKeys(a).into());
            }
            (Err(e), _) | (_, Err(e)) => return Err(e.into()),
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        Self::parse(&text).with_context(|| format!("in {}", path.display()))
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }

    fn validate(&self) -> Result<()> {
        self.experiment.validate()?;
        self.scaling.validate()?;
        Ok(())
    }
}

/// Applies the config file and the global flags, writing nothing.
fn resolve(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
        cfg.experiment.eval.seeds = vec![seed];
    }
    let ex = &mut cfg.experiment;
    match &cli.command {
        Command::TrainSl { teacher, .. } | Command::TrainRl { teacher, .. } => {
            if let Some(t) = teacher {
                ex.training.teacher = *t;
            }
        }
        Command::GenTrace { jobs: Some(n) } => ex.trace.n_jobs = *n,
        _ => {}
    }
    if let Some(slots) = cli.slots {
        match cli.command {
            Command::Simulate { .. } => ex.eval.max_slots = slots,
            Command::TrainSl { .. } => ex.training.teacher_slots = slots,
            Command::TrainRl { .. } | Command::Compare { .. } | Command::Ablate { .. } => ex.training.rl_slots = slots,
            Command::ScaleDemo { .. } | Command::GenTrace { .. } => {}
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

pub fn run(cli: &Cli) -> Result<()> {
    let cfg = resolve(cli)?;
    let out = Outputs::create(&cli.out_dir)?;
    match &cli.command {
        Command::Simulate { scheduler, trace, policy } => simulate(&cfg, &out, *scheduler, trace.as_deref(), policy.as_deref()),
        Command::Compare { scheduler } => compare(&cfg, &out, scheduler),
        Command::TrainSl { .. } => train_sl(&cfg, &out),
        Command::TrainRl { policy, ablate, .. } => train_rl(&cfg, &out, policy.as_deref(), *ablate),
        Command::Ablate { ablate } => ablate_cmd(&cfg, &out, ablate),
        Command::ScaleDemo { max_added, workers, repeats } => scale_demo(&cfg, &out, *max_added, *workers, *repeats),
        Command::GenTrace { .. } => gen_trace(&cfg, &out),
    }
}

#[derive(Serialize)]
struct SlotRow {
    slot: u64,
    reward: f64,
    jobs_running: usize,
    completed: usize,
    avg_jct_running: f64,
}

fn simulate(cfg: &RunConfig, out: &Outputs, kind: SchedulerKind, trace: Option<&Path>, policy: Option<&Path>) -> Result<()> {
    let ex = &cfg.experiment;
    let setup = ex.setup();
    let trace = match trace {
        Some(p) => load_trace(p)?,
        None => generate(&ex.trace, &setup.catalog, cfg.seed)?,
    };
    let mut sched: Box<dyn Scheduler> = match kind {
        SchedulerKind::Heuristic(h) => h.build(&ex.heuristics),
        learned => {
            if policy.is_none() && learned.is_learned() {
                eprintln!("no --policy given; training {learned} for seed {}", cfg.seed);
            }
            let net: Net = match policy {
                Some(p) => load_network(p)?,
                None => experiment::train_learned(ex, learned, cfg.seed, None, |_| Ok(()))?,
            };
            Box::new(policy_scheduler(ex, net, &learned.to_string()))
        }
    };
    let mut rows = Vec::new();
    let result = run_to_completion(&setup, sched.as_mut(), &trace, eval_noise_seed(cfg.seed), ex.eval.max_slots, |r| {
        rows.push(SlotRow {
            slot: r.slot,
            reward: r.reward,
            jobs_running: r.epochs_gained.len(),
            completed: r.completed.len(),
            avg_jct_running: r.avg_jct_running,
        })
    })?;
    out.csv("slots.csv", rows)?;
    out.summary("simulate", cfg, &result)?;
    println!(
        "{}: avg JCT {:.3} slots, {} finished, {} unfinished, {} slots",
        result.scheduler, result.avg_jct, result.finished, result.unfinished, result.slots
    );
    Ok(())
}

#[derive(Serialize)]
struct EvalRow<'a> {
    scheduler: &'a str,
    seed: u64,
    avg_jct: f64,
    slots: u64,
    unfinished: usize,
}

fn eval_rows(evals: &[Evaluation]) -> impl Iterator<Item = EvalRow<'_>> {
    evals.iter().map(|e| EvalRow {
        scheduler: &e.scheduler,
        seed: e.seed,
        avg_jct: e.avg_jct,
        slots: e.slots(),
        unfinished: e.runs.iter().map(|r| r.unfinished).sum(),
    })
}

fn summarize(evals: &[Evaluation]) -> Vec<SummaryRow> {
    let mut names: Vec<&str> = Vec::new();
    for e in evals {
        if !names.contains(&e.scheduler.as_str()) {
            names.push(&e.scheduler);
        }
    }
    names
        .into_iter()
        .map(|n| SummaryRow::new(n, evals.iter().filter(|e| e.scheduler == n).map(|e| e.avg_jct).collect()))
        .collect()
}

fn print_table(rows: &[SummaryRow], reference: &str) {
    let base = rows.iter().find(|r| r.name == reference).map(|r| r.mean);
    println!("{:<12} {:>10} {:>8} {:>10}", "scheduler", "avg JCT", "std", format!("/ {reference}"));
    for r in rows {
        let ratio = base.map_or("-".to_string(), |b| format!("{:.3}", r.mean / b));
        println!("{:<12} {:>10.3} {:>8.3} {:>10}", r.name, r.mean, r.std, ratio);
    }
}

fn compare(cfg: &RunConfig, out: &Outputs, kinds: &[SchedulerKind]) -> Result<()> {
    if kinds.is_empty() {
        bail!("no schedulers to compare");
    }
    let evals = experiment::compare(&cfg.experiment, kinds, &cfg.experiment.eval.seeds)?;
    out.csv("compare.csv", eval_rows(&evals))?;
    let rows = summarize(&evals);
    out.summary("compare", cfg, &rows)?;
    print_table(&rows, "drf");
    Ok(())
}

#[derive(Serialize)]
struct SlRow {
    pass: usize,
    loss: f64,
    agreement: f64,
}

fn train_sl(cfg: &RunConfig, out: &Outputs) -> Result<()> {
    let sl = experiment::train_sl(&cfg.experiment, cfg.seed)?;
    save_network(&sl.policy, &out.path("policy.json"))?;
    let r = &sl.report;
    out.csv("sl.csv", r.loss.iter().zip(&r.agreement).enumerate().map(|(pass, (l, a))| SlRow { pass: pass + 1, loss: *l, agreement: *a }))?;
    let mut sched = policy_scheduler(&cfg.experiment, sl.policy.clone(), "sl");
    let ev = experiment::evaluate(&cfg.experiment, &mut sched, cfg.seed)?;

    #[derive(Serialize)]
    struct Result<'a> {
        samples: usize,
        agreement: f64,
        plateaued: bool,
        validation_jct: f64,
        loss: &'a [f64],
    }
    let result = Result { samples: sl.samples, agreement: sl.agreement, plateaued: r.plateaued, validation_jct: ev.avg_jct, loss: &r.loss };
    out.summary("train-sl", cfg, &result)?;
    println!(
        "{} samples from {}, agreement {:.3}, validation JCT {:.3}",
        sl.samples, cfg.experiment.training.teacher.as_str(), sl.agreement, ev.avg_jct
    );
    Ok(())
}

fn train_rl(cfg: &RunConfig, out: &Outputs, init: Option<&Path>, ablation: Option<Ablation>) -> Result<()> {
    let ex = &cfg.experiment;
    let init: Net = match init {
        Some(p) => load_network(p)?,
        None => experiment::train_sl(ex, cfg.seed)?.policy,
    };
    let mut metrics = out.jsonl::<SlotMetrics>("metrics.jsonl")?;
    let rl = experiment::train_rl(ex, cfg.seed, init, ablation, |m| metrics.write(m))?;
    metrics.finish()?;
    save_network(&rl.policy, &out.path("policy.json"))?;

    #[derive(Serialize)]
    struct ValidationRow {
        slot: u64,
        avg_jct: f64,
    }
    let v = &rl.report.validation;
    out.csv("validation.csv", v.iter().map(|&(slot, avg_jct)| ValidationRow { slot, avg_jct }))?;
    out.summary("train-rl", cfg, &rl.report)?;
    if let (Some(first), Some(last)) = (v.first(), v.last()) {
        println!("validation JCT {:.3} at slot {} -> {:.3} at slot {}", first.1, first.0, last.1, last.0);
    }
    Ok(())
}

fn ablate_cmd(cfg: &RunConfig, out: &Outputs, ablations: &[Ablation]) -> Result<()> {
    let results = experiment::ablate(&cfg.experiment, ablations, &cfg.experiment.eval.seeds)?;
    let evals: Vec<Evaluation> = results.into_iter().map(|(_, e)| e).collect();
    out.csv("ablate.csv", eval_rows(&evals))?;
    let rows = summarize(&evals);
    out.summary("ablate", cfg, &rows)?;
    print_table(&rows, "full");
    Ok(())
}

fn scale_demo(cfg: &RunConfig, out: &Outputs, max_added: u32, workers: u32, repeats: u64) -> Result<()> {
    if max_added < 2 {
        bail!("--max-added must be at least 2 to fit a line");
    }
    let seeds: Vec<u64> = (0..repeats.max(1)).map(|k| cfg.seed.wrapping_add(k)).collect();
    let points = sequential_addition_overhead(&cfg.scaling, workers, max_added, &seeds)?;
    out.csv("scaling.csv", &points)?;
    let xs: Vec<f64> = points.iter().map(|p| p.added as f64).collect();
    let ys: Vec<f64> = points.iter().map(|p| p.cumulative_suspension_ms).collect();
    let (slope, intercept, r2) = linear_fit(&xs, &ys);
    let worst_ms = points.iter().map(|p| p.max_suspension_ms).fold(0.0, f64::max);
    let checkpoint_ms = cfg.scaling.checkpoint_restart_s * 1e3;

    #[derive(Serialize)]
    struct Result<'a> {
        slope_ms_per_ps: f64,
        intercept_ms: f64,
        r2: f64,
        max_suspension_ms: f64,
        checkpoint_restart_ms: f64,
        points: &'a [dlsched_scaling::OverheadPoint],
    }
    let result =
        Result { slope_ms_per_ps: slope, intercept_ms: intercept, r2, max_suspension_ms: worst_ms, checkpoint_restart_ms: checkpoint_ms, points: &points };
    out.summary("scale-demo", cfg, &result)?;
    println!("cumulative suspension: {slope:.3} ms per added PS (R² {r2:.4})");
    println!(
        "worst single pause {worst_ms:.3} ms vs {checkpoint_ms:.0} ms for checkpoint and restart ({:.0}x)",
        checkpoint_ms / worst_ms.max(f64::MIN_POSITIVE)
    );
    Ok(())
}

fn gen_trace(cfg: &RunConfig, out: &Outputs) -> Result<()> {
    let ex = &cfg.experiment;
    let trace = generate(&ex.trace, &ex.setup().catalog, cfg.seed)?;
    save_trace(&trace, &out.path("trace.csv"))?;
    out.summary("gen-trace", cfg, &serde_json::json!({ "jobs": trace.len(), "span_slots": trace.span() }))?;
    println!("{} jobs over {} slots", trace.len(), trace.span());
    Ok(())
}
