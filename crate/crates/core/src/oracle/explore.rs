//! Exhaustive small-model exploration.
//!
//! Model: the faulty replica is the standing leader for every height (a
//! legal, if hostile, pacemaker) and the correct replicas talk only to it.
//! Every interleaving is therefore a sequence of choices by the faulty
//! leader: which proposal to build next, and which correct replica to
//! hand an existing proposal to. Votes reach the leader instantly; it
//! certifies a node as soon as it holds n−f−1 correct votes plus its own.
//! Timers never fire, so views advance only through proposals.
//! States are deduplicated by the replicas' fingerprints plus the
//! leader's knowledge, and the audit runs on every terminal state.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::chained::Chained;
use crate::crypto::{hash, CryptoProvider, Digest, MockProvider, PartialSig, ReplicaId};
use crate::event_driven::{EventDriven, Mode, Variant};
use crate::oracle::audit::{audit, AuditReport};
use crate::pacemaker::{LeaderElection, PacemakerConfig};
use crate::replica::{Ctx, Output, Replica, ReplicaConfig, TraceKind, TraceRecord};
use crate::simnet::{NetConfig, RunTrace, StopReason};
use crate::tree::Tree;
use crate::types::{vote_payload, Height, Message, MsgKind, Params, Phase, QuorumCert};

#[derive(Clone, Copy, PartialEq, Eq, Debug, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExploreProtocol {
    Event,
    TwoPhase,
    Chained,
    /// Event-driven with the vote-once-per-height rule instead of
    /// strictly increasing vote heights.
    VheightNegative,
    /// Event-driven whose commit rule accepts any ancestor chain.
    DirectParentNegative,
}

impl ExploreProtocol {
    fn make(self, cfg: ReplicaConfig) -> Box<dyn Replica> {
        match self {
            ExploreProtocol::Event => Box::new(EventDriven::new(cfg, Mode::ThreePhase, Variant::Conformant)),
            ExploreProtocol::TwoPhase => Box::new(EventDriven::new(cfg, Mode::TwoPhase, Variant::Conformant)),
            ExploreProtocol::Chained => Box::new(Chained::new(cfg)),
            ExploreProtocol::VheightNegative => Box::new(EventDriven::new(cfg, Mode::ThreePhase, Variant::OncePerHeight)),
            ExploreProtocol::DirectParentNegative => {
                Box::new(EventDriven::new(cfg, Mode::ThreePhase, Variant::AncestorCommit))
            }
        }
    }

    pub fn is_negative(self) -> bool {
        matches!(self, ExploreProtocol::VheightNegative | ExploreProtocol::DirectParentNegative)
    }

    pub fn default_views(self) -> Height {
        match self {
            ExploreProtocol::TwoPhase => 3,
            _ => 4,
        }
    }
}

/// A proposal the faulty leader may build: `height` on top of the node
/// labelled `parent`, justified by a certificate over `justify`.
#[derive(Clone, PartialEq, Eq, Debug, Serialize, Deserialize)]
pub struct Template {
    pub label: String,
    pub height: Height,
    pub parent: String,
    pub justify: String,
}

#[derive(Clone, PartialEq, Eq, Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Alphabet {
    /// Any proposal extending any certified node, up to `width`
    /// conflicting proposals per height.
    Equivocation { width: usize },
    /// Only the listed proposals, in any order and to any recipients.
    Catalogue { templates: Vec<Template> },
}

#[derive(Clone, PartialEq, Eq, Debug, Serialize, Deserialize)]
pub struct ExploreBound {
    pub n: usize,
    pub f: usize,
    pub max_views: Height,
    pub protocol: ExploreProtocol,
    pub alphabet: Alphabet,
    pub max_states: usize,
    /// End the search at the first conflicting commit instead of
    /// enumerating the whole space.
    #[serde(default)]
    pub stop_on_violation: bool,
}

impl ExploreBound {
    pub fn new(protocol: ExploreProtocol) -> Self {
        ExploreBound {
            n: 4,
            f: 1,
            max_views: protocol.default_views(),
            protocol,
            alphabet: Alphabet::Equivocation { width: 2 },
            max_states: 1_000_000,
            stop_on_violation: false,
        }
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ExploreError {
    #[error("bound too large: {0}")]
    BoundTooLarge(String),
}

#[derive(Clone, PartialEq, Eq, Debug, Serialize, Deserialize)]
pub struct ExhaustiveReport {
    pub bound: ExploreBound,
    pub states: usize,
    /// States with no unexplored successor.
    pub terminal_states: usize,
    pub audited_states: usize,
    /// Audited states whose trace shows conflicting commits.
    pub safety_violations: usize,
    /// Audited states failing any audit check.
    pub audit_failures: usize,
    pub failed_checks: BTreeSet<String>,
    /// Action sequence reaching the first conflicting commit.
    pub first_violation: Option<Vec<String>>,
}

impl ExhaustiveReport {
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        s.push_str(&format!("protocol: {:?}\n", self.bound.protocol));
        s.push_str(&format!("max_views: {}\n", self.bound.max_views));
        s.push_str(&format!("alphabet: {}\n", serde_json::to_string(&self.bound.alphabet).unwrap_or_default()));
        s.push_str(&format!("states: {}\n", self.states));
        s.push_str(&format!("terminal_states: {}\n", self.terminal_states));
        s.push_str(&format!("audited_states: {}\n", self.audited_states));
        s.push_str(&format!("safety_violations: {}\n", self.safety_violations));
        s.push_str(&format!("audit_failures: {}\n", self.audit_failures));
        let checks: Vec<_> = self.failed_checks.iter().cloned().collect();
        s.push_str(&format!("failed_checks: [{}]\n", checks.join(", ")));
        if let Some(path) = &self.first_violation {
            s.push_str("first_violation:\n");
            for step in path {
                s.push_str(&format!("  - {}\n", step));
            }
        }
        s
    }
}

#[derive(Clone)]
struct Proposal {
    label: String,
    height: Height,
    base: Digest,
    msg: Message,
}

#[derive(Clone)]
struct Model {
    replicas: BTreeMap<ReplicaId, Box<dyn Replica>>,
    tree: Tree,
    proposals: Vec<Proposal>,
    /// Left out of the state key: receiving a proposal twice is a no-op,
    /// so skipping redeliveries loses no reachable state.
    delivered: BTreeSet<(usize, ReplicaId)>,
    votes: BTreeMap<Digest, BTreeMap<ReplicaId, PartialSig>>,
    certs: BTreeMap<Digest, QuorumCert>,
    labels: BTreeMap<String, Digest>,
}

enum Action {
    Deliver(usize, ReplicaId),
    Build { label: String, height: Height, parent: Digest, justify: Digest, to: ReplicaId },
}

struct Explorer {
    bound: ExploreBound,
    faulty: ReplicaId,
    crypto: Arc<dyn CryptoProvider>,
    seen: HashSet<Digest>,
    records: Vec<TraceRecord>,
    path: Vec<String>,
    report: ExhaustiveReport,
    overflow: bool,
    done: bool,
}

pub fn explore(bound: ExploreBound) -> Result<ExhaustiveReport, ExploreError> {
    let params = Params::new(bound.n, bound.f);
    if !params.is_valid() || bound.n > 4 {
        return Err(ExploreError::BoundTooLarge(format!(
            "only n = 3f+1 <= 4 is enumerable, got n={} f={}",
            bound.n, bound.f
        )));
    }
    if bound.max_views > 8 {
        return Err(ExploreError::BoundTooLarge(format!("max_views {} > 8", bound.max_views)));
    }
    if let Alphabet::Equivocation { width } = bound.alphabet {
        if width == 0 || width > 3 {
            return Err(ExploreError::BoundTooLarge(format!("equivocation width {width} not in 1..=3")));
        }
    }

    let crypto: Arc<dyn CryptoProvider> = Arc::new(MockProvider::new(bound.n, bound.f, 0));
    let faulty = bound.n - 1;
    let pacemaker = PacemakerConfig {
        election: LeaderElection::Fixed { leader: faulty },
        ..PacemakerConfig::default()
    };
    let mut ex = Explorer {
        bound: bound.clone(),
        faulty,
        crypto: crypto.clone(),
        seen: HashSet::new(),
        records: Vec::new(),
        path: Vec::new(),
        report: ExhaustiveReport {
            bound: bound.clone(),
            states: 0,
            terminal_states: 0,
            audited_states: 0,
            safety_violations: 0,
            audit_failures: 0,
            failed_checks: BTreeSet::new(),
            first_violation: None,
        },
        overflow: false,
        done: false,
    };

    let mut model = Model {
        replicas: BTreeMap::new(),
        tree: Tree::new(),
        proposals: Vec::new(),
        delivered: BTreeSet::new(),
        votes: BTreeMap::new(),
        certs: BTreeMap::new(),
        labels: BTreeMap::new(),
    };
    let genesis = model.tree.genesis().id;
    model.certs.insert(genesis, model.tree.genesis_qc());
    model.labels.insert(crate::simnet::GENESIS_LABEL.to_string(), genesis);
    for me in (0..bound.n).filter(|r| *r != faulty) {
        let cfg = ReplicaConfig {
            me,
            params,
            crypto: crypto.clone(),
            pacemaker: pacemaker.clone(),
            ancestry_depth: usize::MAX,
        };
        let mut replica = bound.protocol.make(cfg);
        let mut ctx = Ctx::new(0);
        replica.start(&mut ctx);
        ex.absorb(&mut model, me, ctx.out);
        model.replicas.insert(me, replica);
    }
    ex.visit(model);
    if ex.overflow {
        return Err(ExploreError::BoundTooLarge(format!(
            "more than {} states",
            bound.max_states
        )));
    }
    Ok(ex.report)
}

impl Explorer {
    fn key(&self, m: &Model) -> Digest {
        let mut buf = Vec::new();
        // Correct replicas are interchangeable under a fixed faulty
        // leader, so their states form a multiset.
        let mut prints: Vec<Digest> = m.replicas.values().map(|r| r.fingerprint()).collect();
        prints.sort();
        for p in prints {
            buf.extend_from_slice(&p.0);
        }
        for (node, tally) in &m.votes {
            buf.extend_from_slice(&node.0);
            buf.push(tally.len() as u8);
        }
        let mut built: Vec<Digest> = m.proposals.iter().map(|p| p.msg.node.as_ref().expect("proposal has a node").id).collect();
        built.sort();
        for id in built {
            buf.extend_from_slice(&id.0);
        }
        for c in m.certs.keys() {
            buf.extend_from_slice(&c.0);
        }
        hash(&buf)
    }

    /// Returns whether `m` was a new state.
    fn visit(&mut self, m: Model) -> bool {
        if self.overflow || self.done || !self.seen.insert(self.key(&m)) {
            return false;
        }
        self.report.states += 1;
        if self.report.states > self.bound.max_states {
            self.overflow = true;
            return true;
        }
        let mut fresh = false;
        for action in self.actions(&m) {
            let mark = (self.records.len(), self.path.len());
            let mut next = m.clone();
            self.apply(&mut next, action);
            let committed = self.records[mark.0..]
                .iter()
                .any(|r| matches!(r.kind, TraceKind::Commit { .. }));
            if self.visit(next) {
                fresh = true;
                if committed && !self.done {
                    self.check(false);
                }
            }
            self.records.truncate(mark.0);
            self.path.truncate(mark.1);
            if self.overflow || self.done {
                return true;
            }
        }
        if !fresh && !self.done {
            self.check(true);
        }
        true
    }

    /// Audits the trace leading to the current state. Conflicting commits
    /// are permanent, so auditing after every commit and at every state
    /// without new successors covers all reachable states.
    fn check(&mut self, terminal: bool) {
        if terminal {
            self.report.terminal_states += 1;
        }
        self.report.audited_states += 1;
        let trace = RunTrace {
            params: Params::new(self.bound.n, self.bound.f),
            net: NetConfig::default(),
            seed: 0,
            byzantine: [self.faulty].into_iter().collect(),
            records: self.records.clone(),
            stop: StopReason::Quiescent,
            end_tick: self.path.len() as u64,
        };
        let rep: AuditReport = audit(&trace);
        if !rep.passed() {
            self.report.audit_failures += 1;
            for c in rep.failures() {
                self.report.failed_checks.insert(c.to_string());
            }
        }
        if !rep.safety_ok {
            self.report.safety_violations += 1;
            if self.report.first_violation.is_none() {
                self.report.first_violation = Some(self.path.clone());
            }
            self.done = self.bound.stop_on_violation;
        }
    }

    fn correct(&self) -> impl Iterator<Item = ReplicaId> + '_ {
        (0..self.bound.n).filter(move |r| *r != self.faulty)
    }

    fn actions(&self, m: &Model) -> Vec<Action> {
        let mut out = Vec::new();
        for i in 0..m.proposals.len() {
            for r in self.correct() {
                if !m.delivered.contains(&(i, r)) {
                    out.push(Action::Deliver(i, r));
                }
            }
        }
        match &self.bound.alphabet {
            Alphabet::Equivocation { width } => {
                for h in 1..=self.bound.max_views {
                    if m.proposals.iter().filter(|p| p.height == h).count() >= *width {
                        continue;
                    }
                    for (node, _) in m.certs.iter() {
                        let Some(base) = m.tree.get(node) else { continue };
                        if base.height >= h {
                            continue;
                        }
                        // Numbered per (height, base) so creation order does
                        // not produce distinct but equivalent nodes.
                        let twins = m.proposals.iter().filter(|p| p.height == h && p.base == *node).count();
                        let label = format!("h{}.{}#{}", h, &node.to_string()[..6], twins);
                        for to in self.correct() {
                            out.push(Action::Build {
                                label: label.clone(),
                                height: h,
                                parent: *node,
                                justify: *node,
                                to,
                            });
                        }
                    }
                }
            }
            Alphabet::Catalogue { templates } => {
                for t in templates {
                    if m.labels.contains_key(&t.label) || t.height > self.bound.max_views {
                        continue;
                    }
                    let (Some(parent), Some(justify)) = (m.labels.get(&t.parent), m.labels.get(&t.justify)) else {
                        continue;
                    };
                    if !m.certs.contains_key(justify) {
                        continue;
                    }
                    for to in self.correct() {
                        out.push(Action::Build {
                            label: t.label.clone(),
                            height: t.height,
                            parent: *parent,
                            justify: *justify,
                            to,
                        });
                    }
                }
            }
        }
        out
    }

    fn apply(&mut self, m: &mut Model, action: Action) {
        let step = self.path.len() as u64;
        let (idx, to) = match action {
            Action::Deliver(i, to) => (i, to),
            Action::Build { label, height, parent, justify, to } => {
                let qc = m.certs[&justify].clone();
                let made = m
                    .tree
                    .create_leaf(&parent, label.clone().into_bytes(), Some(qc.clone()), height)
                    .expect("templates place above their parent");
                for node in &made {
                    self.records.push(TraceRecord {
                        at: step,
                        replica: self.faulty,
                        kind: TraceKind::NodeSeen {
                            node: node.id,
                            parent: node.parent.expect("built nodes have parents"),
                            height: node.height,
                            justify: node.justify.as_ref().map(|q| q.node),
                            cmd: String::from_utf8_lossy(&node.cmd).into_owned(),
                        },
                    });
                }
                let leaf = made.last().expect("create_leaf returns the leaf").clone();
                m.labels.insert(label.clone(), leaf.id);
                let msg = Message::new(MsgKind::Generic, height)
                    .with_justify(Some(qc))
                    .with_ancestry(m.tree.suffix(&leaf.parent.expect("leaf has a parent"), usize::MAX))
                    .with_node(leaf);
                m.proposals.push(Proposal { label, height, base: justify, msg });
                (m.proposals.len() - 1, to)
            }
        };
        m.delivered.insert((idx, to));
        let p = &m.proposals[idx];
        self.path.push(format!("{} (height {}) -> replica {}", p.label, p.height, to));
        let msg = p.msg.clone();
        let mut ctx = Ctx::new(step);
        m.replicas
            .get_mut(&to)
            .expect("recipient is a correct replica")
            .on_message(self.faulty, &msg, &mut ctx);
        self.absorb(m, to, ctx.out);
    }

    /// Records traces and routes votes addressed to the faulty leader.
    fn absorb(&mut self, m: &mut Model, from: ReplicaId, out: Vec<Output>) {
        let step = self.path.len() as u64;
        for o in out {
            match o {
                Output::Trace(kind) => self.records.push(TraceRecord {
                    at: step,
                    replica: from,
                    kind,
                }),
                Output::Send { to, msg } if to == self.faulty => self.collect_vote(m, from, &msg, step),
                _ => {}
            }
        }
    }

    fn collect_vote(&mut self, m: &mut Model, from: ReplicaId, msg: &Message, step: u64) {
        let (Some(part), Some(node)) = (&msg.partial, &msg.node) else {
            return;
        };
        let payload = vote_payload(Phase::Generic, node.height, &node.id);
        if part.signer != from || !self.crypto.verify_partial(&payload, part) {
            return;
        }
        let tally = m.votes.entry(node.id).or_default();
        tally.insert(from, part.clone());
        let needed = self.bound.n - self.bound.f - 1;
        if tally.len() < needed || m.certs.contains_key(&node.id) {
            return;
        }
        let mut parts: Vec<PartialSig> = tally.values().cloned().collect();
        parts.push(self.crypto.tsign(self.faulty, &payload).expect("faulty replica signs"));
        let sig = self.crypto.tcombine(&payload, &parts).expect("quorum of valid partials");
        let signers: Vec<ReplicaId> = sig.signers().collect();
        m.certs.insert(
            node.id,
            QuorumCert {
                qtype: Phase::Generic,
                view: node.height,
                node: node.id,
                sig: Some(sig),
            },
        );
        self.records.push(TraceRecord {
            at: step,
            replica: self.faulty,
            kind: TraceKind::QcFormed {
                phase: Phase::Generic,
                view: node.height,
                node: node.id,
                signers,
            },
        });
    }
}

/// The proposal skeleton of the monotonic-vote-height counterexample:
/// a replica is first shown a high branch, then a lower conflicting one.
pub fn vheight_templates() -> Vec<Template> {
    let t = |label: &str, height, parent: &str, justify: &str| Template {
        label: label.into(),
        height,
        parent: parent.into(),
        justify: justify.into(),
    };
    vec![
        t("b", 4, "genesis", "genesis"),
        t("w", 1, "genesis", "genesis"),
        t("w1", 2, "w", "w"),
        t("w2", 3, "w1", "w1"),
        t("w3", 4, "w2", "w2"),
        t("b1", 5, "b", "b"),
        t("b2", 6, "b1", "b1"),
        t("b3", 7, "b2", "b2"),
    ]
}

/// The proposal skeleton of the direct-parent counterexample: two
/// interleaved branches with blank gaps inside their three-chains.
pub fn direct_parent_templates() -> Vec<Template> {
    let t = |label: &str, height, parent: &str, justify: &str| Template {
        label: label.into(),
        height,
        parent: parent.into(),
        justify: justify.into(),
    };
    vec![
        t("w", 1, "genesis", "genesis"),
        t("w1", 2, "w", "w"),
        t("b", 3, "genesis", "genesis"),
        t("b1", 4, "b", "b"),
        t("w2", 5, "w1", "w1"),
        t("b2", 6, "b1", "b1"),
        t("w3", 6, "w2", "w2"),
        t("b3", 7, "b2", "b2"),
    ]
}
