//! Byzantine behaviours as wrappers around an honest replica: they filter,
//! rewrite or replace its outputs.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::crypto::{hash, CryptoProvider, Digest, PartialSig, ReplicaId};
use crate::replica::{Ctx, Output, Replica, Tick, Timer, TraceKind};
use crate::tree::Tree;
use crate::types::{vote_payload, Height, Message, MsgKind, Node, Params, Phase, QuorumCert};

#[derive(Clone, PartialEq, Eq, Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum VotePattern {
    /// Never vote.
    All,
    /// Withhold every second vote.
    Alternate,
    /// Withhold votes of these phases only.
    Phases { phases: Vec<Phase> },
}

/// One scripted proposal: a node labelled `label` at `height`, on top of
/// the node labelled `parent` (blank-padded), certified by a QC over the
/// node labelled `justify`, sent at tick `at` to `to`.
#[derive(Clone, PartialEq, Eq, Debug, Serialize, Deserialize)]
pub struct ScriptStep {
    pub label: String,
    pub height: Height,
    pub parent: String,
    pub justify: String,
    pub to: Vec<ReplicaId>,
    pub at: Tick,
}

pub const GENESIS_LABEL: &str = "genesis";

#[derive(Clone, PartialEq, Eq, Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Behavior {
    /// Sends nothing.
    Silent,
    /// Sends one proposal to the lower half of the replicas and a
    /// conflicting one to the upper half; never votes on either.
    Equivocate,
    WithholdVotes { pattern: VotePattern },
    /// Ignores the protocol and follows a list of scripted proposals,
    /// certifying them from the votes it collects.
    Transcript { steps: Vec<ScriptStep> },
    /// Votes after `delay` ticks and advertises only the genesis
    /// certificate in NEW-VIEW messages.
    LateVoter { delay: Tick },
}

impl Behavior {
    pub fn name(&self) -> &'static str {
        match self {
            Behavior::Silent => "silent",
            Behavior::Equivocate => "equivocate",
            Behavior::WithholdVotes { .. } => "withhold-votes",
            Behavior::Transcript { .. } => "transcript",
            Behavior::LateVoter { .. } => "late-voter",
        }
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ByzantineError {
    #[error("replica {0} is not in the Byzantine set")]
    NotByzantine(ReplicaId),
}

/// Assigns equivocation to `leader`, which must be faulty.
pub fn inject_equivocation(
    plan: &mut BTreeMap<ReplicaId, Behavior>,
    leader: ReplicaId,
    faulty: &BTreeSet<ReplicaId>,
) -> Result<(), ByzantineError> {
    if !faulty.contains(&leader) {
        return Err(ByzantineError::NotByzantine(leader));
    }
    plan.insert(leader, Behavior::Equivocate);
    Ok(())
}

#[derive(Clone)]
pub struct Byzantine {
    me: ReplicaId,
    params: Params,
    crypto: Arc<dyn CryptoProvider>,
    inner: Box<dyn Replica>,
    behavior: Behavior,
    equivocated: BTreeSet<Digest>,
    vote_counter: u64,
    held: BTreeMap<u64, (ReplicaId, Message)>,
    next_aux: u64,
    tree: Tree,
    built: BTreeMap<String, Arc<Node>>,
    votes: BTreeMap<Digest, BTreeMap<ReplicaId, PartialSig>>,
}

impl Byzantine {
    pub fn new(inner: Box<dyn Replica>, params: Params, crypto: Arc<dyn CryptoProvider>, behavior: Behavior) -> Self {
        Byzantine {
            me: inner.id(),
            params,
            crypto,
            inner,
            behavior,
            equivocated: BTreeSet::new(),
            vote_counter: 0,
            held: BTreeMap::new(),
            next_aux: 0,
            tree: Tree::new(),
            built: BTreeMap::new(),
            votes: BTreeMap::new(),
        }
    }

    pub fn behavior(&self) -> &Behavior {
        &self.behavior
    }

    fn filter(&mut self, out: Vec<Output>, ctx: &mut Ctx) {
        for o in out {
            match (&self.behavior, o) {
                (_, Output::Trace(t)) => ctx.trace(t),
                (_, Output::SetTimer { after, timer }) => ctx.set_timer(after, timer),
                (Behavior::Silent, _) => {}
                (Behavior::Equivocate, Output::Broadcast { msg }) if is_proposal(&msg) => self.split(msg, ctx),
                (Behavior::Equivocate, Output::Send { to, msg }) => {
                    let own = msg.node.as_ref().is_some_and(|n| self.equivocated.contains(&n.id));
                    if !(msg.is_vote() && own) {
                        ctx.send(to, msg);
                    }
                }
                (Behavior::WithholdVotes { pattern }, Output::Send { to, msg }) if msg.is_vote() => {
                    let withhold = match pattern {
                        VotePattern::All => true,
                        VotePattern::Alternate => {
                            self.vote_counter += 1;
                            self.vote_counter % 2 == 0
                        }
                        VotePattern::Phases { phases } => msg.kind.phase().is_some_and(|p| phases.contains(&p)),
                    };
                    if !withhold {
                        ctx.send(to, msg);
                    }
                }
                (Behavior::LateVoter { delay }, Output::Send { to, msg }) if msg.is_vote() => {
                    let token = self.next_aux;
                    self.next_aux += 1;
                    self.held.insert(token, (to, msg));
                    ctx.set_timer(*delay, Timer::Aux(token));
                }
                (Behavior::LateVoter { .. }, Output::Send { to, mut msg }) if msg.kind == MsgKind::NewView => {
                    msg.justify = Some(QuorumCert::genesis(self.tree.genesis().id));
                    msg.node = None;
                    msg.ancestry.clear();
                    ctx.send(to, msg);
                }
                (_, Output::Send { to, msg }) => ctx.send(to, msg),
                (_, Output::Broadcast { msg }) => ctx.broadcast(msg),
            }
        }
    }

    /// Sends `msg` to the lower half and a twin with a different command to
    /// the upper half.
    fn split(&mut self, msg: Message, ctx: &mut Ctx) {
        let a = msg.node.clone().expect("proposal carries a node");
        let mut cmd = a.cmd.clone();
        cmd.extend_from_slice(b"~twin");
        let parent = a.parent.expect("proposals are never genesis");
        let b = Arc::new(Node::new(parent, cmd, a.justify.clone(), a.height));
        self.equivocated.insert(a.id);
        self.equivocated.insert(b.id);
        let mut twin = msg.clone();
        twin.node = Some(b);
        let half = self.params.n / 2;
        for to in 0..self.params.n {
            ctx.send(to, if to < half { msg.clone() } else { twin.clone() });
        }
    }

    fn script_steps(&self) -> &[ScriptStep] {
        match &self.behavior {
            Behavior::Transcript { steps } => steps,
            _ => &[],
        }
    }

    fn labelled(&self, label: &str) -> Option<Arc<Node>> {
        if label == GENESIS_LABEL {
            Some(self.tree.genesis().clone())
        } else {
            self.built.get(label).cloned()
        }
    }

    /// Certificate over the node labelled `label`, from collected votes and
    /// this replica's own partial signature.
    fn certificate(&self, label: &str) -> Option<QuorumCert> {
        if label == GENESIS_LABEL {
            return Some(self.tree.genesis_qc());
        }
        let node = self.built.get(label)?;
        let payload = vote_payload(Phase::Generic, node.height, &node.id);
        let mut parts: Vec<PartialSig> = self.votes.get(&node.id).map(|m| m.values().cloned().collect()).unwrap_or_default();
        parts.push(self.crypto.tsign(self.me, &payload).ok()?);
        let sig = self.crypto.tcombine(&payload, &parts).ok()?;
        Some(QuorumCert {
            qtype: Phase::Generic,
            view: node.height,
            node: node.id,
            sig: Some(sig),
        })
    }

    fn run_step(&mut self, idx: usize, ctx: &mut Ctx) {
        let Some(step) = self.script_steps().get(idx).cloned() else {
            return;
        };
        let (Some(parent), Some(qc)) = (self.labelled(&step.parent), self.certificate(&step.justify)) else {
            ctx.trace(TraceKind::ScenarioDiverged {
                reason: format!("step {} ({}): no certificate for {}", idx, step.label, step.justify),
            });
            return;
        };
        let Ok(made) = self.tree.create_leaf(&parent.id, step.label.clone().into_bytes(), Some(qc.clone()), step.height) else {
            ctx.trace(TraceKind::ScenarioDiverged {
                reason: format!("step {} ({}): cannot place at height {}", idx, step.label, step.height),
            });
            return;
        };
        let node = made.last().expect("create_leaf returns the leaf").clone();
        self.built.insert(step.label.clone(), node.clone());
        ctx.trace(TraceKind::Propose {
            view: node.height,
            node: node.id,
            height: node.height,
        });
        let msg = Message::new(MsgKind::Generic, node.height)
            .with_justify(Some(qc))
            .with_ancestry(self.tree.suffix(&node.parent.expect("leaf has a parent"), usize::MAX))
            .with_node(node);
        for to in step.to {
            ctx.send(to, msg.clone());
        }
    }
}

fn is_proposal(msg: &Message) -> bool {
    !msg.is_vote() && msg.node.is_some() && matches!(msg.kind, MsgKind::Prepare | MsgKind::Generic)
}

impl Replica for Byzantine {
    fn id(&self) -> ReplicaId {
        self.me
    }

    fn start(&mut self, ctx: &mut Ctx) {
        if let Behavior::Transcript { steps } = &self.behavior {
            for (i, s) in steps.iter().enumerate() {
                ctx.set_timer(s.at, Timer::Aux(i as u64));
            }
            return;
        }
        let mut inner = Ctx {
            now: ctx.now,
            out: Vec::new(),
            fetch: ctx.fetch,
        };
        self.inner.start(&mut inner);
        self.filter(inner.out, ctx);
    }

    fn on_message(&mut self, from: ReplicaId, msg: &Message, ctx: &mut Ctx) {
        if let Behavior::Transcript { .. } = self.behavior {
            if let (Some(part), Some(node)) = (&msg.partial, &msg.node) {
                let payload = vote_payload(Phase::Generic, node.height, &node.id);
                if part.signer == from && self.crypto.verify_partial(&payload, part) {
                    self.votes.entry(node.id).or_default().insert(from, part.clone());
                }
            }
            return;
        }
        let mut inner = Ctx {
            now: ctx.now,
            out: Vec::new(),
            fetch: ctx.fetch,
        };
        self.inner.on_message(from, msg, &mut inner);
        self.filter(inner.out, ctx);
    }

    fn on_timer(&mut self, timer: Timer, ctx: &mut Ctx) {
        if let Timer::Aux(token) = timer {
            if let Behavior::Transcript { .. } = self.behavior {
                self.run_step(token as usize, ctx);
            } else if let Some((to, msg)) = self.held.remove(&token) {
                ctx.send(to, msg);
            }
            return;
        }
        if let Behavior::Transcript { .. } = self.behavior {
            return;
        }
        let mut inner = Ctx {
            now: ctx.now,
            out: Vec::new(),
            fetch: ctx.fetch,
        };
        self.inner.on_timer(timer, &mut inner);
        self.filter(inner.out, ctx);
    }

    fn tree(&self) -> &Tree {
        match self.behavior {
            Behavior::Transcript { .. } => &self.tree,
            _ => self.inner.tree(),
        }
    }

    fn executed(&self) -> Digest {
        self.inner.executed()
    }

    fn clone_box(&self) -> Box<dyn Replica> {
        Box::new(self.clone())
    }

    fn fingerprint(&self) -> Digest {
        let mut buf = self.inner.fingerprint().0.to_vec();
        for (node, tally) in &self.votes {
            buf.extend_from_slice(&node.0);
            buf.extend(tally.keys().map(|k| *k as u8));
        }
        for label in self.built.keys() {
            buf.extend_from_slice(label.as_bytes());
        }
        hash(&buf)
    }
}
