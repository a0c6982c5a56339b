//! Message-driven coordinator, PS and worker state machines over a
//! simulated network, running synchronous data-parallel training while
//! membership changes.
//!
//! A change goes through four steps. The requester asks the coordinator.
//! The coordinator reads the PS version counters, fixes a scaling clock and
//! broadcasts the plan. Every PS hands off its moved ranges once its version
//! reaches the clock. Every worker pauses at the clock until the coordinator
//! confirms that all PSs are done, then switches to the new mapping.
//!
//! Migration transfers and the notices to workers may be dropped. Lost
//! transfers are retried; when the retry budget runs out the change is
//! aborted and every node restores its pre-plan state. Coordinator/PS
//! control messages and training traffic are reliable.

use std::cmp::Reverse;
use std::collections::{BTreeMap, BTreeSet, BinaryHeap};
use std::rc::Rc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use dlsched_core::sim::synchronous_batch_adjust;

use crate::shards::{best_fit_assign, movement_lower_bound, moved_volume, KeyRange, KeySet, Move, PsId, ShardMap};
use crate::{compute_scaling_clock, Error, Result, ScalingConfig};

pub type WorkerId = u32;
pub type OpId = u64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum NodeId {
    Coordinator,
    /// External client requesting removals.
    Scheduler,
    Ps(PsId),
    Worker(WorkerId),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Change {
    AddPs(PsId),
    RemovePs(PsId),
    AddWorker(WorkerId),
    RemoveWorker(WorkerId),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum LogEvent {
    Requested(Change),
    PlanSent { op: OpId, clock: u64, moves: usize },
    PlanReceived { op: OpId, clock: u64 },
    MigrationStarted { op: OpId },
    RangeSent { op: OpId, to: PsId, range: KeyRange, attempt: u32 },
    RangeReceived { op: OpId, from: PsId, range: KeyRange },
    MigrationDone { op: OpId },
    Committed { op: OpId },
    Aborted { op: OpId },
    Paused { op: OpId },
    Resumed { op: OpId },
    RolledBack { op: OpId },
    Joined { op: OpId },
    Departed { op: OpId },
    Rejected(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LogRecord {
    pub time_us: u64,
    pub node: NodeId,
    pub event: LogEvent,
}

/// Pause-to-resume time of every worker that was training when `op` hit
/// its clock, from the log.
pub fn suspensions(log: &[LogRecord], op: OpId) -> Vec<(WorkerId, u64)> {
    let mut paused = BTreeMap::new();
    let mut out = Vec::new();
    for r in log {
        let NodeId::Worker(w) = r.node else { continue };
        match r.event {
            LogEvent::Paused { op: o } if o == op => {
                paused.insert(w, r.time_us);
            }
            LogEvent::Resumed { op: o } if o == op => {
                if let Some(t) = paused.remove(&w) {
                    out.push((w, r.time_us - t));
                }
            }
            _ => {}
        }
    }
    out
}

#[derive(Debug)]
struct Plan {
    op: OpId,
    clock: u64,
    moves: Vec<Move>,
    old_ps: BTreeSet<PsId>,
    new_ps: BTreeSet<PsId>,
    old_workers: BTreeSet<WorkerId>,
    new_workers: BTreeSet<WorkerId>,
    new_map: ShardMap,
}

#[derive(Debug, Clone)]
enum Msg {
    Push { iteration: u64, ranges: Rc<[KeyRange]> },
    Pull { version: u64 },
    Request(Change),
    Accepted,
    Rejected(String),
    VersionQuery { op: OpId },
    VersionReply { op: OpId, version: u64 },
    Plan(Rc<Plan>),
    Migrate { op: OpId, range: KeyRange },
    MigrateAck { op: OpId, range: KeyRange },
    MigrationDone { op: OpId },
    MigrationFailed { op: OpId },
    Commit { op: OpId },
    Rollback { op: OpId },
    StatusQuery { op: OpId },
    ComputeDone,
    MigrateTimeout { op: OpId, range: KeyRange, attempt: u32 },
    NoticeTimeout { op: OpId },
}

impl Msg {
    fn droppable(&self, to: NodeId) -> bool {
        matches!(self, Msg::Migrate { .. } | Msg::MigrateAck { .. } | Msg::StatusQuery { .. })
            || (matches!(self, Msg::Commit { .. } | Msg::Rollback { .. }) && matches!(to, NodeId::Worker(_)))
    }
}

enum Out {
    Send(NodeId, Msg),
    /// Like `Send`, plus transfer time for `params` parameters.
    Transfer(NodeId, Msg, u64),
    Timer(u64, Msg),
    Compute,
    Log(LogEvent),
}

#[derive(Debug)]
enum Phase {
    Querying { sent_at: u64, waiting: BTreeSet<PsId>, versions: Vec<u64>, max_rtt: u64 },
    Migrating { plan: Rc<Plan>, waiting: BTreeSet<PsId> },
}

#[derive(Debug)]
struct ActiveOp {
    op: OpId,
    change: Change,
    requester: NodeId,
    phase: Phase,
}

#[derive(Debug)]
struct Coordinator {
    ps: BTreeSet<PsId>,
    workers: BTreeSet<WorkerId>,
    map: ShardMap,
    next_op: OpId,
    queue: Vec<(NodeId, Change)>,
    active: Option<ActiveOp>,
    /// Outcome of every finished change: true when committed.
    finished: BTreeMap<OpId, bool>,
}

impl Coordinator {
    fn handle(&mut self, from: NodeId, msg: Msg, now: u64, cfg: &ScalingConfig, out: &mut Vec<Out>) {
        match msg {
            Msg::Request(change) => {
                self.queue.push((from, change));
                self.start_next(now, out);
            }
            Msg::VersionReply { op, version } => {
                let Some(a) = self.active.as_mut().filter(|a| a.op == op) else { return };
                let Phase::Querying { sent_at, waiting, versions, max_rtt } = &mut a.phase else { return };
                let NodeId::Ps(p) = from else { return };
                if waiting.remove(&p) {
                    versions.push(version);
                    *max_rtt = (*max_rtt).max(now - *sent_at);
                }
                if waiting.is_empty() {
                    let clock = compute_scaling_clock(versions, *max_rtt, cfg.iteration_us, cfg.clock_margin);
                    self.broadcast_plan(clock, out);
                }
            }
            Msg::MigrationDone { op } => {
                let Some(a) = self.active.as_mut().filter(|a| a.op == op) else { return };
                let Phase::Migrating { plan, waiting } = &mut a.phase else { return };
                if let NodeId::Ps(p) = from {
                    waiting.remove(&p);
                }
                if waiting.is_empty() {
                    let plan = plan.clone();
                    self.map = plan.new_map.clone();
                    self.ps = plan.new_ps.clone();
                    self.workers = plan.new_workers.clone();
                    self.finish(&plan, true, out);
                    self.start_next(now, out);
                }
            }
            Msg::MigrationFailed { op } => {
                let Some(a) = self.active.as_ref().filter(|a| a.op == op) else { return };
                let Phase::Migrating { plan, .. } = &a.phase else { return };
                let plan = plan.clone();
                self.finish(&plan, false, out);
                self.start_next(now, out);
            }
            Msg::StatusQuery { op } => match self.finished.get(&op) {
                Some(true) => out.push(Out::Send(from, Msg::Commit { op })),
                Some(false) => out.push(Out::Send(from, Msg::Rollback { op })),
                None => {}
            },
            _ => {}
        }
    }

    fn finish(&mut self, plan: &Plan, committed: bool, out: &mut Vec<Out>) {
        let op = plan.op;
        self.finished.insert(op, committed);
        self.active = None;
        out.push(Out::Log(if committed { LogEvent::Committed { op } } else { LogEvent::Aborted { op } }));
        let msg = || if committed { Msg::Commit { op } } else { Msg::Rollback { op } };
        for p in plan.old_ps.union(&plan.new_ps) {
            out.push(Out::Send(NodeId::Ps(*p), msg()));
        }
        for w in plan.old_workers.union(&plan.new_workers) {
            out.push(Out::Send(NodeId::Worker(*w), msg()));
        }
    }

    /// Checks a request against the current membership: `Ok(true)` starts a
    /// change, `Ok(false)` is an idempotent repeat.
    fn admit(&self, change: Change) -> std::result::Result<bool, String> {
        match change {
            Change::AddPs(p) => Ok(!self.ps.contains(&p)),
            Change::AddWorker(w) => Ok(!self.workers.contains(&w)),
            Change::RemovePs(p) if !self.ps.contains(&p) => Err(format!("PS {p} is not registered")),
            Change::RemovePs(_) if self.ps.len() == 1 => Err("cannot remove the last PS".into()),
            Change::RemoveWorker(w) if !self.workers.contains(&w) => Err(format!("worker {w} is not registered")),
            Change::RemoveWorker(_) if self.workers.len() == 1 => Err("cannot remove the last worker".into()),
            _ => Ok(true),
        }
    }

    fn start_next(&mut self, now: u64, out: &mut Vec<Out>) {
        while self.active.is_none() && !self.queue.is_empty() {
            let (requester, change) = self.queue.remove(0);
            match self.admit(change) {
                Err(reason) => {
                    out.push(Out::Log(LogEvent::Rejected(reason.clone())));
                    out.push(Out::Send(requester, Msg::Rejected(reason)));
                }
                Ok(false) => out.push(Out::Send(requester, Msg::Accepted)),
                Ok(true) => {
                    let op = self.next_op;
                    self.next_op += 1;
                    for p in &self.ps {
                        out.push(Out::Send(NodeId::Ps(*p), Msg::VersionQuery { op }));
                    }
                    let phase = Phase::Querying { sent_at: now, waiting: self.ps.clone(), versions: Vec::new(), max_rtt: 0 };
                    self.active = Some(ActiveOp { op, change, requester, phase });
                }
            }
        }
        // a repeated registration for the change in progress is answered at once
        if let Some(a) = &self.active {
            let repeats: Vec<usize> =
                self.queue.iter().enumerate().filter(|(_, (_, c))| *c == a.change).map(|(i, _)| i).collect();
            for i in repeats.into_iter().rev() {
                let (who, _) = self.queue.remove(i);
                out.push(Out::Send(who, Msg::Accepted));
            }
        }
    }

    fn broadcast_plan(&mut self, clock: u64, out: &mut Vec<Out>) {
        let a = self.active.as_mut().expect("active change");
        let (mut new_ps, mut new_workers) = (self.ps.clone(), self.workers.clone());
        match a.change {
            Change::AddPs(p) => {
                new_ps.insert(p);
            }
            Change::RemovePs(p) => {
                new_ps.remove(&p);
            }
            Change::AddWorker(w) => {
                new_workers.insert(w);
            }
            Change::RemoveWorker(w) => {
                new_workers.remove(&w);
            }
        }
        let moves = best_fit_assign(&self.map, &new_ps).expect("PS set is never empty");
        let new_map = self.map.apply(&moves).expect("plans apply to the map they were computed on");
        let plan = Rc::new(Plan {
            op: a.op,
            clock,
            moves,
            old_ps: self.ps.clone(),
            new_ps,
            old_workers: self.workers.clone(),
            new_workers,
            new_map,
        });
        out.push(Out::Log(LogEvent::PlanSent { op: a.op, clock, moves: plan.moves.len() }));
        for p in plan.old_ps.union(&plan.new_ps) {
            out.push(Out::Send(NodeId::Ps(*p), Msg::Plan(plan.clone())));
        }
        for w in plan.old_workers.union(&plan.new_workers) {
            out.push(Out::Send(NodeId::Worker(*w), Msg::Plan(plan.clone())));
        }
        out.push(Out::Send(a.requester, Msg::Accepted));
        let waiting = plan.old_ps.union(&plan.new_ps).copied().collect();
        a.phase = Phase::Migrating { plan, waiting };
    }
}

#[derive(Debug)]
struct Migration {
    op: OpId,
    /// Unacknowledged outgoing ranges with their attempt number.
    outgoing: BTreeMap<KeyRange, (PsId, u32)>,
    incoming: BTreeSet<KeyRange>,
    done: bool,
}

#[derive(Debug)]
struct PsNode {
    id: PsId,
    version: u64,
    owned: KeySet,
    workers: BTreeSet<WorkerId>,
    pushes: BTreeMap<u64, BTreeSet<WorkerId>>,
    plan: Option<Rc<Plan>>,
    migration: Option<Migration>,
    /// Pre-plan ownership and worker set, taken before the first change.
    snapshot: Option<(OpId, KeySet, BTreeSet<WorkerId>)>,
    received: BTreeSet<(OpId, KeyRange)>,
    aborted: BTreeSet<OpId>,
    member: bool,
    departed: bool,
    misdirected: u64,
    late_plans: u64,
    double_owned: u64,
}

impl PsNode {
    fn new(id: PsId, owned: KeySet, workers: BTreeSet<WorkerId>, member: bool) -> Self {
        Self {
            id,
            version: 0,
            owned,
            workers,
            pushes: BTreeMap::new(),
            plan: None,
            migration: None,
            snapshot: None,
            received: BTreeSet::new(),
            aborted: BTreeSet::new(),
            member,
            departed: false,
            misdirected: 0,
            late_plans: 0,
            double_owned: 0,
        }
    }

    fn take_snapshot(&mut self, op: OpId) {
        if self.snapshot.as_ref().is_none_or(|s| s.0 != op) {
            self.snapshot = Some((op, self.owned.clone(), self.workers.clone()));
        }
    }

    fn handle(&mut self, from: NodeId, msg: Msg, cfg: &ScalingConfig, out: &mut Vec<Out>) {
        match msg {
            Msg::Push { iteration, ranges } => {
                let NodeId::Worker(w) = from else { return };
                if self.departed || !self.workers.contains(&w) || iteration != self.version {
                    self.misdirected += 1;
                    return;
                }
                self.misdirected += ranges.iter().filter(|r| !self.owned.contains(**r)).count() as u64;
                let got = self.pushes.entry(iteration).or_default();
                got.insert(w);
                if got.is_superset(&self.workers) {
                    self.pushes.remove(&iteration);
                    self.version += 1;
                    for w in &self.workers {
                        out.push(Out::Send(NodeId::Worker(*w), Msg::Pull { version: self.version }));
                    }
                    self.maybe_migrate(cfg, out);
                }
            }
            Msg::VersionQuery { op } => out.push(Out::Send(from, Msg::VersionReply { op, version: self.version })),
            Msg::Plan(plan) => {
                if self.aborted.contains(&plan.op) {
                    return;
                }
                out.push(Out::Log(LogEvent::PlanReceived { op: plan.op, clock: plan.clock }));
                if !self.member {
                    // joins at the clock with nothing to hand off
                    self.take_snapshot(plan.op);
                    self.version = plan.clock;
                    out.push(Out::Log(LogEvent::Joined { op: plan.op }));
                } else if self.version > plan.clock {
                    self.late_plans += 1;
                }
                self.plan = Some(plan);
                self.maybe_migrate(cfg, out);
            }
            Msg::Migrate { op, range } => {
                if self.aborted.contains(&op) {
                    return;
                }
                let NodeId::Ps(src) = from else { return };
                out.push(Out::Send(from, Msg::MigrateAck { op, range }));
                if !self.received.insert((op, range)) {
                    return;
                }
                self.take_snapshot(op);
                if !self.owned.insert(range) {
                    self.double_owned += 1;
                }
                out.push(Out::Log(LogEvent::RangeReceived { op, from: src, range }));
                if let Some(m) = self.migration.as_mut().filter(|m| m.op == op) {
                    m.incoming.remove(&range);
                }
                self.check_done(out);
            }
            Msg::MigrateAck { op, range } => {
                if let Some(m) = self.migration.as_mut().filter(|m| m.op == op) {
                    m.outgoing.remove(&range);
                }
                self.check_done(out);
            }
            Msg::MigrateTimeout { op, range, attempt } => {
                let Some(m) = self.migration.as_mut().filter(|m| m.op == op) else { return };
                let Some((to, a)) = m.outgoing.get_mut(&range) else { return };
                if *a != attempt {
                    return;
                }
                if attempt >= cfg.retry_budget {
                    out.push(Out::Send(NodeId::Coordinator, Msg::MigrationFailed { op }));
                    return;
                }
                *a += 1;
                let to = *to;
                out.push(Out::Log(LogEvent::RangeSent { op, to, range, attempt: attempt + 1 }));
                out.push(Out::Transfer(NodeId::Ps(to), Msg::Migrate { op, range }, range.len()));
                out.push(Out::Timer(cfg.retry_timeout_us, Msg::MigrateTimeout { op, range, attempt: attempt + 1 }));
            }
            Msg::Commit { op } => {
                if self.plan.as_ref().is_some_and(|p| p.op == op) {
                    let plan = self.plan.take().expect("plan");
                    self.member = plan.new_ps.contains(&self.id);
                    if !self.member {
                        self.departed = true;
                        out.push(Out::Log(LogEvent::Departed { op }));
                    }
                }
                self.migration = None;
                self.snapshot = None;
            }
            Msg::Rollback { op } => {
                self.aborted.insert(op);
                if let Some((_, owned, workers)) = self.snapshot.take().filter(|s| s.0 == op) {
                    self.owned = owned;
                    self.workers = workers;
                    out.push(Out::Log(LogEvent::RolledBack { op }));
                }
                if self.plan.as_ref().is_some_and(|p| p.op == op) {
                    self.plan = None;
                    if !self.member {
                        self.departed = true;
                        out.push(Out::Log(LogEvent::Departed { op }));
                    }
                }
                self.migration = None;
            }
            _ => {}
        }
    }

    fn maybe_migrate(&mut self, cfg: &ScalingConfig, out: &mut Vec<Out>) {
        let Some(plan) = self.plan.clone() else { return };
        if self.migration.is_some() || self.version != plan.clock {
            return;
        }
        let op = plan.op;
        self.take_snapshot(op);
        self.workers = plan.new_workers.clone();
        out.push(Out::Log(LogEvent::MigrationStarted { op }));
        let mut outgoing = BTreeMap::new();
        for m in plan.moves.iter().filter(|m| m.from == self.id) {
            self.owned.remove(m.range);
            outgoing.insert(m.range, (m.to, 0));
            out.push(Out::Log(LogEvent::RangeSent { op, to: m.to, range: m.range, attempt: 0 }));
            out.push(Out::Transfer(NodeId::Ps(m.to), Msg::Migrate { op, range: m.range }, m.range.len()));
            out.push(Out::Timer(cfg.retry_timeout_us, Msg::MigrateTimeout { op, range: m.range, attempt: 0 }));
        }
        let incoming =
            plan.moves.iter().filter(|m| m.to == self.id && !self.received.contains(&(op, m.range))).map(|m| m.range).collect();
        self.migration = Some(Migration { op, outgoing, incoming, done: false });
        self.check_done(out);
    }

    fn check_done(&mut self, out: &mut Vec<Out>) {
        let Some(m) = self.migration.as_mut() else { return };
        if !m.done && m.outgoing.is_empty() && m.incoming.is_empty() {
            m.done = true;
            out.push(Out::Log(LogEvent::MigrationDone { op: m.op }));
            out.push(Out::Send(NodeId::Coordinator, Msg::MigrationDone { op: m.op }));
        }
    }
}

#[derive(Debug)]
struct WorkerNode {
    id: WorkerId,
    version: u64,
    ps: BTreeSet<PsId>,
    routes: BTreeMap<PsId, Rc<[KeyRange]>>,
    pulls: BTreeSet<PsId>,
    plan: Option<Rc<Plan>>,
    /// Commit (true) or rollback received for the pending plan.
    notice: Option<bool>,
    paused_at: Option<u64>,
    joining: bool,
    departed: bool,
    batch: u32,
    late_plans: u64,
}

impl WorkerNode {
    fn new(id: WorkerId, map: &ShardMap, ps: BTreeSet<PsId>, batch: u32, joining: bool) -> Self {
        let mut w = Self {
            id,
            version: 0,
            ps: BTreeSet::new(),
            routes: BTreeMap::new(),
            pulls: BTreeSet::new(),
            plan: None,
            notice: None,
            paused_at: None,
            joining,
            departed: false,
            batch,
            late_plans: 0,
        };
        w.set_routes(map, ps);
        w
    }

    fn set_routes(&mut self, map: &ShardMap, ps: BTreeSet<PsId>) {
        self.routes = ps.iter().map(|p| (*p, Rc::from(map.ranges_of(*p)))).collect();
        self.ps = ps;
    }

    fn handle(&mut self, from: NodeId, msg: Msg, now: u64, cfg: &ScalingConfig, out: &mut Vec<Out>) {
        if self.departed {
            return;
        }
        match msg {
            Msg::ComputeDone => {
                self.pulls.clear();
                for (p, ranges) in &self.routes {
                    out.push(Out::Send(NodeId::Ps(*p), Msg::Push { iteration: self.version, ranges: ranges.clone() }));
                }
            }
            Msg::Pull { version } => {
                let NodeId::Ps(p) = from else { return };
                if version != self.version + 1 || !self.ps.contains(&p) {
                    return;
                }
                self.pulls.insert(p);
                if self.pulls.len() == self.ps.len() {
                    self.version = version;
                    self.after_iteration(now, cfg, out);
                }
            }
            Msg::Plan(plan) => {
                out.push(Out::Log(LogEvent::PlanReceived { op: plan.op, clock: plan.clock }));
                if self.joining {
                    self.version = plan.clock;
                    self.paused_at = Some(now);
                    self.plan = Some(plan);
                    self.apply_notice(now, cfg, out);
                    return;
                }
                if self.version > plan.clock || (self.version == plan.clock && self.paused_at.is_none()) {
                    self.late_plans += 1;
                }
                self.plan = Some(plan);
            }
            Msg::Commit { op } | Msg::Rollback { op } => {
                let commit = matches!(msg, Msg::Commit { .. });
                let Some(plan) = self.plan.as_ref().filter(|p| p.op == op) else { return };
                if !commit && self.version < plan.clock && self.paused_at.is_none() {
                    // never reached the clock: nothing to undo
                    self.plan = None;
                    return;
                }
                self.notice = Some(commit);
                self.apply_notice(now, cfg, out);
            }
            Msg::NoticeTimeout { op } => {
                if self.paused_at.is_some() && self.plan.as_ref().is_some_and(|p| p.op == op) && self.notice.is_none() {
                    out.push(Out::Send(NodeId::Coordinator, Msg::StatusQuery { op }));
                    out.push(Out::Timer(cfg.notice_timeout_us, Msg::NoticeTimeout { op }));
                }
            }
            _ => {}
        }
    }

    fn after_iteration(&mut self, now: u64, cfg: &ScalingConfig, out: &mut Vec<Out>) {
        match &self.plan {
            Some(plan) if plan.clock == self.version => {
                let op = plan.op;
                self.paused_at = Some(now);
                out.push(Out::Log(LogEvent::Paused { op }));
                if self.notice.is_some() {
                    self.apply_notice(now, cfg, out);
                } else {
                    out.push(Out::Timer(cfg.notice_timeout_us, Msg::NoticeTimeout { op }));
                }
            }
            _ => out.push(Out::Compute),
        }
    }

    /// Acts on a received commit/rollback once paused at the clock.
    fn apply_notice(&mut self, _now: u64, cfg: &ScalingConfig, out: &mut Vec<Out>) {
        let (Some(plan), Some(commit)) = (self.plan.clone(), self.notice) else { return };
        if self.paused_at.is_none() {
            return;
        }
        let op = plan.op;
        self.plan = None;
        self.notice = None;
        self.paused_at = None;
        let stays = if commit { plan.new_workers.contains(&self.id) } else { !self.joining };
        if !stays {
            self.departed = true;
            out.push(Out::Log(LogEvent::Departed { op }));
            return;
        }
        if commit {
            self.set_routes(&plan.new_map, plan.new_ps.clone());
            self.batch = synchronous_batch_adjust(cfg.global_batch, plan.new_workers.len() as u32);
        }
        if self.joining {
            self.joining = false;
            out.push(Out::Log(LogEvent::Joined { op }));
        } else {
            out.push(Out::Log(LogEvent::Resumed { op }));
        }
        out.push(Out::Compute);
    }
}

#[derive(Debug, PartialEq, Eq)]
struct Event {
    time: u64,
    seq: u64,
    to: NodeId,
    from: NodeId,
}

impl Ord for Event {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        (self.time, self.seq).cmp(&(other.time, other.seq))
    }
}

impl PartialOrd for Event {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

/// Result of one membership change.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChangeOutcome {
    pub change: Change,
    /// `None` for idempotent repeats, which start no change.
    pub op: Option<OpId>,
    pub committed: bool,
    pub clock: u64,
    pub moves: Vec<Move>,
    pub moved_params: u64,
    /// Analytic minimum for the same membership change.
    pub movement_lower_bound: u64,
    /// PSs after the change, in id order.
    pub peers: Vec<PsId>,
    pub suspensions_us: Vec<u64>,
    pub elapsed_us: u64,
}

impl ChangeOutcome {
    pub fn max_suspension_us(&self) -> u64 {
        self.suspensions_us.iter().copied().max().unwrap_or(0)
    }
}

/// A training job whose PSs and workers can be added and removed while it runs.
pub struct ScalingSim {
    cfg: ScalingConfig,
    now: u64,
    seq: u64,
    queue: BinaryHeap<Reverse<Event>>,
    payloads: BTreeMap<u64, Msg>,
    links: BTreeMap<(NodeId, NodeId), u64>,
    rng: ChaCha8Rng,
    coordinator: Coordinator,
    ps: BTreeMap<PsId, PsNode>,
    workers: BTreeMap<WorkerId, WorkerNode>,
    replies: Vec<(NodeId, Msg)>,
    log: Vec<LogRecord>,
    dropped: u64,
}

impl ScalingSim {
    /// `n_ps` PSs (ids `0..n_ps`) holding an even split and `n_workers`
    /// workers (ids `0..n_workers`), all at version 0 and starting an
    /// iteration.
    pub fn new(cfg: ScalingConfig, n_ps: u32, n_workers: u32, seed: u64) -> Result<Self> {
        cfg.validate()?;
        if n_workers == 0 {
            return Err(Error::Rejected("a job needs at least one worker".into()));
        }
        let ps_ids: BTreeSet<PsId> = (0..n_ps).collect();
        let map = ShardMap::even(cfg.total_params, &ps_ids)?;
        let worker_ids: BTreeSet<WorkerId> = (0..n_workers).collect();
        let batch = synchronous_batch_adjust(cfg.global_batch, n_workers);
        let ps = ps_ids.iter().map(|p| (*p, PsNode::new(*p, map.keys_of(*p), worker_ids.clone(), true))).collect();
        let workers =
            worker_ids.iter().map(|w| (*w, WorkerNode::new(*w, &map, ps_ids.clone(), batch, false))).collect();
        let mut sim = Self {
            coordinator: Coordinator {
                ps: ps_ids,
                workers: worker_ids.clone(),
                map,
                next_op: 0,
                queue: Vec::new(),
                active: None,
                finished: BTreeMap::new(),
            },
            cfg,
            now: 0,
            seq: 0,
            queue: BinaryHeap::new(),
            payloads: BTreeMap::new(),
            links: BTreeMap::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
            ps,
            workers,
            replies: Vec::new(),
            log: Vec::new(),
            dropped: 0,
        };
        for w in worker_ids {
            sim.dispatch(NodeId::Worker(w), vec![Out::Compute]);
        }
        Ok(sim)
    }

    pub fn config(&self) -> &ScalingConfig {
        &self.cfg
    }

    pub fn now_us(&self) -> u64 {
        self.now
    }

    pub fn log(&self) -> &[LogRecord] {
        &self.log
    }

    /// The coordinator's committed ownership map.
    pub fn shard_map(&self) -> &ShardMap {
        &self.coordinator.map
    }

    pub fn ps_ids(&self) -> Vec<PsId> {
        self.coordinator.ps.iter().copied().collect()
    }

    pub fn worker_ids(&self) -> Vec<WorkerId> {
        self.coordinator.workers.iter().copied().collect()
    }

    /// Updates that reached a PS not owning their keys, or out of step.
    pub fn misdirected_updates(&self) -> u64 {
        self.ps.values().map(|p| p.misdirected).sum()
    }

    /// Plans that reached a node after it had passed the scaling clock.
    pub fn late_plans(&self) -> u64 {
        self.ps.values().map(|p| p.late_plans).sum::<u64>() + self.workers.values().map(|w| w.late_plans).sum::<u64>()
    }

    pub fn dropped_messages(&self) -> u64 {
        self.dropped
    }

    /// Per-worker mini-batch size of the live workers.
    pub fn batch_sizes(&self) -> BTreeMap<WorkerId, u32> {
        self.workers.iter().filter(|(_, w)| !w.departed).map(|(id, w)| (*id, w.batch)).collect()
    }

    pub fn ps_version(&self, ps: PsId) -> Option<u64> {
        self.ps.get(&ps).map(|p| p.version)
    }

    /// Checks that the live PSs' key sets partition the key space and agree
    /// with the coordinator's map.
    pub fn check_ownership(&self) -> Result<()> {
        let mut all = KeySet::new();
        for (id, p) in self.ps.iter().filter(|(_, p)| !p.departed) {
            if p.double_owned > 0 {
                return Err(Error::Partition(format!("PS {id} received a range it already held")));
            }
            for r in p.owned.ranges() {
                if !all.insert(r) {
                    return Err(Error::Partition(format!("range {r} is held twice")));
                }
            }
            if p.owned != self.coordinator.map.keys_of(*id) {
                return Err(Error::Partition(format!("PS {id} disagrees with the coordinator's map")));
            }
        }
        if all.len() != self.cfg.total_params || !all.contains(KeyRange::new(0, self.cfg.total_params)) {
            return Err(Error::Partition("live PSs do not cover the key space".into()));
        }
        Ok(())
    }

    fn latency(&mut self) -> u64 {
        self.rng.random_range(self.cfg.latency_min_us..=self.cfg.latency_max_us)
    }

    fn enqueue(&mut self, time: u64, to: NodeId, from: NodeId, msg: Msg) {
        self.seq += 1;
        self.payloads.insert(self.seq, msg);
        self.queue.push(Reverse(Event { time, seq: self.seq, to, from }));
    }

    fn send(&mut self, from: NodeId, to: NodeId, msg: Msg, params: u64) {
        if msg.droppable(to) && self.cfg.drop_rate > 0.0 && self.rng.random_bool(self.cfg.drop_rate) {
            self.dropped += 1;
            return;
        }
        let transfer = (params as f64 / self.cfg.bandwidth_params_per_us).ceil() as u64;
        let at = self.now + self.latency() + transfer;
        // FIFO per link
        let last = self.links.entry((from, to)).or_insert(0);
        let at = at.max(*last);
        *last = at;
        self.enqueue(at, to, from, msg);
    }

    fn dispatch(&mut self, node: NodeId, outs: Vec<Out>) {
        for o in outs {
            match o {
                Out::Send(to, msg) => self.send(node, to, msg, 0),
                Out::Transfer(to, msg, params) => self.send(node, to, msg, params),
                Out::Timer(after, msg) => self.enqueue(self.now + after, node, node, msg),
                Out::Compute => {
                    let j = self.cfg.compute_jitter;
                    let f = if j > 0.0 { self.rng.random_range(1.0 - j..=1.0 + j) } else { 1.0 };
                    let t = (self.cfg.iteration_us as f64 * f).round() as u64;
                    self.enqueue(self.now + t, node, node, Msg::ComputeDone);
                }
                Out::Log(event) => self.log.push(LogRecord { time_us: self.now, node, event }),
            }
        }
    }

    /// Processes the next event; false when nothing is left.
    fn step(&mut self) -> bool {
        let Some(Reverse(ev)) = self.queue.pop() else { return false };
        let msg = self.payloads.remove(&ev.seq).expect("payload");
        self.now = ev.time;
        if matches!(msg, Msg::Accepted | Msg::Rejected(_)) {
            self.replies.push((ev.to, msg));
            return true;
        }
        let mut out = Vec::new();
        match ev.to {
            NodeId::Coordinator => self.coordinator.handle(ev.from, msg, self.now, &self.cfg, &mut out),
            NodeId::Ps(p) => match self.ps.get_mut(&p) {
                Some(node) => node.handle(ev.from, msg, &self.cfg, &mut out),
                None => return true,
            },
            NodeId::Worker(w) => match self.workers.get_mut(&w) {
                Some(node) => node.handle(ev.from, msg, self.now, &self.cfg, &mut out),
                None => return true,
            },
            NodeId::Scheduler => return true,
        }
        self.dispatch(ev.to, out);
        true
    }

    /// Keeps training for `duration_us`.
    pub fn run_for(&mut self, duration_us: u64) {
        let end = self.now + duration_us;
        while self.queue.peek().is_some_and(|Reverse(e)| e.time <= end) {
            self.step();
        }
        self.now = self.now.max(end);
    }

    fn settled(&self, op: OpId) -> bool {
        self.coordinator.finished.contains_key(&op)
            && self.ps.values().all(|p| p.plan.as_ref().is_none_or(|x| x.op != op))
            && self.workers.values().all(|w| w.departed || (w.plan.as_ref().is_none_or(|x| x.op != op) && w.paused_at.is_none()))
    }

    /// Requests `change` and runs until it has been committed or rolled
    /// back everywhere.
    pub fn apply(&mut self, change: Change) -> Result<ChangeOutcome> {
        let start = self.now;
        let requester = match change {
            Change::AddPs(p) => {
                if !self.ps.contains_key(&p) {
                    let workers = self.coordinator.workers.clone();
                    self.ps.insert(p, PsNode::new(p, KeySet::new(), workers, false));
                } else if self.ps[&p].departed {
                    return Err(Error::Rejected(format!("PS id {p} was used by a departed PS")));
                }
                NodeId::Ps(p)
            }
            Change::AddWorker(w) => {
                if !self.workers.contains_key(&w) {
                    let map = self.coordinator.map.clone();
                    let node = WorkerNode::new(w, &map, self.coordinator.ps.clone(), 0, true);
                    self.workers.insert(w, node);
                } else if self.workers[&w].departed {
                    return Err(Error::Rejected(format!("worker id {w} was used by a departed worker")));
                }
                NodeId::Worker(w)
            }
            Change::RemovePs(_) | Change::RemoveWorker(_) => NodeId::Scheduler,
        };
        let peers_before = self.ps_ids();
        let map_before = self.coordinator.map.clone();
        let op = self.coordinator.next_op;
        let replies_before = self.replies.len();
        self.log.push(LogRecord { time_us: self.now, node: requester, event: LogEvent::Requested(change) });
        self.send(requester, NodeId::Coordinator, Msg::Request(change), 0);
        let deadline = self.now + self.cfg.op_timeout_us;
        loop {
            if self.coordinator.next_op > op && self.settled(op) {
                break;
            }
            let reply = self.replies[replies_before..].iter().find(|(to, _)| *to == requester).map(|(_, m)| m.clone());
            match reply {
                Some(Msg::Rejected(reason)) => return Err(Error::Rejected(reason)),
                Some(Msg::Accepted) if self.coordinator.next_op == op => {
                    return Ok(ChangeOutcome {
                        change,
                        op: None,
                        committed: true,
                        clock: 0,
                        moves: Vec::new(),
                        moved_params: 0,
                        movement_lower_bound: 0,
                        peers: peers_before,
                        suspensions_us: Vec::new(),
                        elapsed_us: self.now - start,
                    });
                }
                _ => {}
            }
            if self.now > deadline || !self.step() {
                return Err(Error::Liveness(format!("{change:?} did not complete")));
            }
        }
        let committed = self.coordinator.finished[&op];
        let plan_event = self.log.iter().rev().find_map(|r| match r.event {
            LogEvent::PlanSent { op: o, clock, .. } if o == op => Some(clock),
            _ => None,
        });
        let new_ps: BTreeSet<PsId> = self.coordinator.ps.clone();
        let moves = if committed { best_fit_assign(&map_before, &new_ps)? } else { Vec::new() };
        Ok(ChangeOutcome {
            change,
            op: Some(op),
            committed,
            clock: plan_event.unwrap_or(0),
            moved_params: moved_volume(&moves),
            movement_lower_bound: if committed { movement_lower_bound(&map_before, &new_ps)? } else { 0 },
            moves,
            peers: self.ps_ids(),
            suspensions_us: suspensions(&self.log, op).into_iter().map(|(_, t)| t).collect(),
            elapsed_us: self.now - start,
        })
    }
}
