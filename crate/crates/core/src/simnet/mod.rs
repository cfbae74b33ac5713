//! Deterministic discrete-event network under partial synchrony.
//!
//! Events are ordered by `(tick, sequence)`. After GST every message
//! between replicas arrives within `delta` ticks; before GST the configured
//! policy decides. All randomness comes from one seeded generator.

pub mod adversary;
pub mod byzantine;

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::crypto::{Digest, ReplicaId};
use crate::replica::{Ctx, Output, Replica, Tick, Timer, TraceKind, TraceRecord};
use crate::types::{Message, Node, Params, View};

pub use adversary::{Adversary, Chaos, Constant, Liveless};
pub use byzantine::{Behavior, Byzantine, ScriptStep, VotePattern, GENESIS_LABEL};

#[derive(Clone, Copy, PartialEq, Eq, Debug, Serialize, Deserialize)]
#[serde(tag = "policy", rename_all = "kebab-case")]
pub enum PreGst {
    /// Messages sent before GST are lost.
    Drop,
    /// Delayed by up to `max` ticks, but delivered by `gst + delta` at the latest.
    Delay { max: Tick },
    /// Routed by the run's adversary.
    Adversary,
}

#[derive(Clone, Copy, PartialEq, Eq, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct NetConfig {
    pub delta: Tick,
    pub gst: Tick,
    pub pre_gst: PreGst,
}

impl Default for NetConfig {
    fn default() -> Self {
        NetConfig {
            delta: 10,
            gst: 0,
            pre_gst: PreGst::Delay { max: 10 },
        }
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum SimError {
    #[error("n = {n} cannot tolerate f = {f}")]
    BadParams { n: usize, f: usize },
    #[error("{have} Byzantine replicas exceed f = {f}")]
    TooManyByzantine { have: usize, f: usize },
    #[error("expected {n} replicas, got {got}")]
    ReplicaCount { n: usize, got: usize },
    #[error("delta must be positive")]
    ZeroDelta,
    #[error("pre-GST adversary policy requires an adversary")]
    MissingAdversary,
}

/// When to stop. The tick budget always applies.
#[derive(Clone, Copy, PartialEq, Eq, Debug, Default, Serialize, Deserialize)]
pub struct StopAt {
    /// Every correct replica has executed at least this many commands.
    pub decisions: Option<usize>,
    /// Every correct replica has moved past this view.
    pub views: Option<View>,
    pub ticks: Tick,
}

#[derive(Clone, Copy, PartialEq, Eq, Debug, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StopReason {
    Decisions,
    Views,
    /// The budget ran out first; expected for liveless runs.
    TickBudgetExhausted,
    /// Nothing left to deliver.
    Quiescent,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunTrace {
    pub params: Params,
    pub net: NetConfig,
    pub seed: u64,
    pub byzantine: BTreeSet<ReplicaId>,
    pub records: Vec<TraceRecord>,
    pub stop: StopReason,
    pub end_tick: Tick,
}

impl RunTrace {
    pub fn is_correct(&self, r: ReplicaId) -> bool {
        !self.byzantine.contains(&r)
    }

    pub fn correct(&self) -> impl Iterator<Item = ReplicaId> + '_ {
        (0..self.params.n).filter(|r| self.is_correct(*r))
    }

    /// Executed commands per replica, in execution order.
    pub fn executed(&self, r: ReplicaId) -> Vec<&TraceRecord> {
        self.records
            .iter()
            .filter(|t| t.replica == r && matches!(t.kind, TraceKind::Commit { .. }))
            .collect()
    }

    /// Longest executed log among correct replicas.
    pub fn decisions(&self) -> usize {
        self.correct().map(|r| self.executed(r).len()).max().unwrap_or(0)
    }
}

enum Payload {
    Deliver { from: ReplicaId, msg: Message },
    Timer(Timer),
}

struct Event {
    dest: ReplicaId,
    payload: Payload,
}

pub struct Simulation {
    params: Params,
    net: NetConfig,
    seed: u64,
    rng: ChaCha8Rng,
    replicas: Vec<Box<dyn Replica>>,
    byzantine: BTreeSet<ReplicaId>,
    adversary: Option<Box<dyn Adversary>>,
    queue: BTreeMap<(Tick, u64), Event>,
    seq: u64,
    now: Tick,
    store: HashMap<Digest, Arc<Node>>,
    records: Vec<TraceRecord>,
    executed: Vec<usize>,
    views: Vec<View>,
}

impl Simulation {
    pub fn new(
        params: Params,
        net: NetConfig,
        seed: u64,
        replicas: Vec<Box<dyn Replica>>,
        byzantine: BTreeSet<ReplicaId>,
        adversary: Option<Box<dyn Adversary>>,
    ) -> Result<Self, SimError> {
        if !params.is_valid() {
            return Err(SimError::BadParams { n: params.n, f: params.f });
        }
        if byzantine.len() > params.f {
            return Err(SimError::TooManyByzantine {
                have: byzantine.len(),
                f: params.f,
            });
        }
        if replicas.len() != params.n {
            return Err(SimError::ReplicaCount {
                n: params.n,
                got: replicas.len(),
            });
        }
        if net.delta == 0 {
            return Err(SimError::ZeroDelta);
        }
        if net.pre_gst == PreGst::Adversary && adversary.is_none() {
            return Err(SimError::MissingAdversary);
        }
        let n = params.n;
        Ok(Simulation {
            params,
            net,
            seed,
            rng: ChaCha8Rng::seed_from_u64(seed),
            replicas,
            byzantine,
            adversary,
            queue: BTreeMap::new(),
            seq: 0,
            now: 0,
            store: HashMap::new(),
            records: Vec::new(),
            executed: vec![0; n],
            views: vec![0; n],
        })
    }

    fn push(&mut self, at: Tick, dest: ReplicaId, payload: Payload) {
        self.queue.insert((at, self.seq), Event { dest, payload });
        self.seq += 1;
    }

    fn record(&mut self, replica: ReplicaId, kind: TraceKind) {
        match &kind {
            TraceKind::Commit { .. } => self.executed[replica] += 1,
            TraceKind::ViewEnter { view, .. } => self.views[replica] = self.views[replica].max(*view),
            _ => {}
        }
        self.records.push(TraceRecord {
            at: self.now,
            replica,
            kind,
        });
    }

    /// Delivery delay for one message, or `None` if it is lost.
    fn route(&mut self, from: ReplicaId, to: ReplicaId, msg: &Message) -> Option<Tick> {
        if self.net.pre_gst == PreGst::Adversary {
            if let Some(adv) = self.adversary.as_mut() {
                if self.now < self.net.gst {
                    return adv.route(self.now, from, to, msg, &mut self.rng);
                }
            }
        }
        if from == to {
            return Some(0);
        }
        if self.now >= self.net.gst {
            return Some(self.rng.gen_range(1..=self.net.delta));
        }
        match self.net.pre_gst {
            PreGst::Drop => None,
            PreGst::Delay { max } => {
                let d = self.rng.gen_range(1..=max.max(1));
                let latest = self.net.gst + self.net.delta;
                Some(d.min(latest.saturating_sub(self.now)).max(1))
            }
            PreGst::Adversary => Some(self.rng.gen_range(1..=self.net.delta)),
        }
    }

    fn send(&mut self, from: ReplicaId, to: ReplicaId, msg: Message) {
        for node in msg.ancestry.iter().chain(msg.node.iter()) {
            if !node.is_genesis() && !self.store.contains_key(&node.id) {
                self.store.insert(node.id, node.clone());
                let kind = TraceKind::NodeSeen {
                    node: node.id,
                    parent: node.parent.expect("non-genesis node has a parent"),
                    height: node.height,
                    justify: node.justify.as_ref().map(|q| q.node),
                    cmd: String::from_utf8_lossy(&node.cmd).into_owned(),
                };
                self.record(from, kind);
            }
        }
        let auth = msg.authenticators();
        self.record(
            from,
            TraceKind::Send {
                to,
                kind: msg.kind,
                view: msg.view,
                node: msg.node.as_ref().map(|n| n.id),
                auth,
            },
        );
        if let Some(delay) = self.route(from, to, &msg) {
            self.push(self.now + delay, to, Payload::Deliver { from, msg });
        }
    }

    fn apply(&mut self, me: ReplicaId, out: Vec<Output>) {
        for o in out {
            match o {
                Output::Send { to, msg } => {
                    if to < self.params.n {
                        self.send(me, to, msg);
                    }
                }
                Output::Broadcast { msg } => {
                    for to in 0..self.params.n {
                        self.send(me, to, msg.clone());
                    }
                }
                Output::SetTimer { after, timer } => self.push(self.now + after, me, Payload::Timer(timer)),
                Output::Trace(kind) => self.record(me, kind),
            }
        }
    }

    fn step(&mut self, dest: ReplicaId, payload: Payload) {
        let out = {
            let store = &self.store;
            let fetch = |d: &Digest| store.get(d).cloned();
            let mut ctx = Ctx::with_fetch(self.now, &fetch);
            let replica = &mut self.replicas[dest];
            match &payload {
                Payload::Deliver { from, msg } => replica.on_message(*from, msg, &mut ctx),
                Payload::Timer(t) => replica.on_timer(*t, &mut ctx),
            }
            ctx.out
        };
        if let Payload::Deliver { from, msg } = &payload {
            self.record(
                dest,
                TraceKind::Deliver {
                    from: *from,
                    kind: msg.kind,
                    view: msg.view,
                    node: msg.node.as_ref().map(|n| n.id),
                    auth: msg.authenticators(),
                },
            );
        }
        self.apply(dest, out);
    }

    fn satisfied(&self, stop: &StopAt) -> Option<StopReason> {
        let correct = || (0..self.params.n).filter(|r| !self.byzantine.contains(r));
        if let Some(k) = stop.decisions {
            if correct().all(|r| self.executed[r] >= k) {
                return Some(StopReason::Decisions);
            }
        }
        if let Some(v) = stop.views {
            if correct().all(|r| self.views[r] > v) {
                return Some(StopReason::Views);
            }
        }
        None
    }

    fn drive(&mut self, stop: StopAt) -> StopReason {
        for r in 0..self.params.n {
            let mut ctx = Ctx::new(0);
            self.replicas[r].start(&mut ctx);
            self.apply(r, ctx.out);
        }
        loop {
            if let Some(reason) = self.satisfied(&stop) {
                return reason;
            }
            let Some((&(at, seq), _)) = self.queue.iter().next() else {
                return StopReason::Quiescent;
            };
            if at > stop.ticks {
                return StopReason::TickBudgetExhausted;
            }
            let ev = self.queue.remove(&(at, seq)).expect("key just observed");
            self.now = at;
            self.step(ev.dest, ev.payload);
        }
    }

    pub fn run(self, stop: StopAt) -> RunTrace {
        self.run_keep(stop).0
    }

    /// Runs and also hands back the final replica states.
    pub fn run_keep(mut self, stop: StopAt) -> (RunTrace, Vec<Box<dyn Replica>>) {
        let reason = self.drive(stop);
        let trace = RunTrace {
            params: self.params,
            net: self.net,
            seed: self.seed,
            byzantine: self.byzantine,
            records: self.records,
            stop: reason,
            end_tick: self.now,
        };
        (trace, self.replicas)
    }
}
