//! Four-phase replica: NEW-VIEW, PREPARE, PRE-COMMIT, COMMIT, DECIDE.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use thiserror::Error;

use crate::crypto::{hash, Digest, PartialSig, ReplicaId};
use crate::pacemaker::Backoff;
use crate::replica::{ancestry_of, execute_branch, ingest, Ctx, Replica, ReplicaConfig, Timer, TraceKind};
use crate::tree::Tree;
use crate::types::{vote_payload, Message, MsgKind, Node, Phase, QuorumCert, View};

#[derive(Debug, Error, PartialEq, Eq)]
pub enum BasicError {
    #[error("replica {me} does not lead view {view}")]
    NotLeader { me: ReplicaId, view: View },
    #[error("have {have} matching messages, need {need}")]
    QuorumNotReached { have: usize, need: usize },
    #[error("message for view {got} while in view {current}")]
    WrongView { got: View, current: View },
    #[error("sender {0} is not the leader")]
    NotFromLeader(ReplicaId),
    #[error("certificate missing, malformed or unverifiable")]
    InvalidQc,
    #[error("proposal fails the safety predicate")]
    UnsafeNode,
    #[error("proposal node missing or not attached")]
    MissingNode,
    #[error("already voted in this view and phase")]
    AlreadyVoted,
}

fn next_kind(phase: Phase) -> Option<MsgKind> {
    match phase {
        Phase::Prepare => Some(MsgKind::PreCommit),
        Phase::PreCommit => Some(MsgKind::Commit),
        Phase::Commit => Some(MsgKind::Decide),
        _ => None,
    }
}

/// Rank of an optional certificate; the empty one ranks as view 0.
fn rank(qc: &Option<QuorumCert>) -> View {
    qc.as_ref().map_or(0, |q| q.view)
}

#[derive(Clone)]
pub struct Basic {
    cfg: ReplicaConfig,
    tree: Tree,
    view: View,
    prepare_qc: Option<QuorumCert>,
    locked_qc: Option<QuorumCert>,
    cur_proposal: Option<Digest>,
    vote_log: BTreeSet<(View, Phase)>,
    votes: BTreeMap<(Phase, View, Digest), BTreeMap<ReplicaId, PartialSig>>,
    new_views: BTreeMap<View, BTreeMap<ReplicaId, Option<QuorumCert>>>,
    /// Views this replica has already proposed in.
    proposed: BTreeSet<View>,
    /// `(view, phase)` pairs whose votes were already combined.
    led: BTreeSet<(View, Phase)>,
    b_exec: Digest,
    backoff: Backoff,
}

impl Basic {
    pub fn new(cfg: ReplicaConfig) -> Self {
        let tree = Tree::new();
        let b_exec = tree.genesis().id;
        let backoff = cfg.pacemaker.backoff();
        Basic {
            cfg,
            tree,
            view: 0,
            prepare_qc: None,
            locked_qc: None,
            cur_proposal: None,
            vote_log: BTreeSet::new(),
            votes: BTreeMap::new(),
            new_views: BTreeMap::new(),
            proposed: BTreeSet::new(),
            led: BTreeSet::new(),
            b_exec,
            backoff,
        }
    }

    pub fn view(&self) -> View {
        self.view
    }

    pub fn prepare_qc(&self) -> Option<&QuorumCert> {
        self.prepare_qc.as_ref()
    }

    pub fn locked_qc(&self) -> Option<&QuorumCert> {
        self.locked_qc.as_ref()
    }

    pub fn current_proposal(&self) -> Option<Digest> {
        self.cur_proposal
    }

    pub fn tree_mut(&mut self) -> &mut Tree {
        &mut self.tree
    }

    /// Extends the locked node, or is justified by a certificate from a
    /// later view than the lock. An empty lock admits everything.
    pub fn safe_node(&self, node: &Digest, qc: &QuorumCert) -> bool {
        match &self.locked_qc {
            None => true,
            Some(lock) => self.tree.extends(node, &lock.node) || qc.view > lock.view,
        }
    }

    fn enter_view(&mut self, view: View, announce: bool, ctx: &mut Ctx) {
        if view <= self.view {
            return;
        }
        self.view = view;
        let interval = self.backoff.current();
        ctx.set_timer(interval, Timer::View(view));
        ctx.trace(TraceKind::ViewEnter { view, interval });
        if announce {
            let mut msg = Message::new(MsgKind::NewView, view).with_justify(self.prepare_qc.clone());
            if let Some(node) = self.prepare_qc.as_ref().and_then(|q| self.tree.get(&q.node)) {
                msg.ancestry = ancestry_of(&self.tree, node, self.cfg.ancestry_depth);
                msg.node = Some(node.clone());
            }
            ctx.send(self.cfg.leader(view), msg);
        }
        let _ = self.leader_on_new_view(ctx);
    }

    /// Proposes once n−f NEW-VIEW messages for the current view are in.
    pub fn leader_on_new_view(&mut self, ctx: &mut Ctx) -> Result<Arc<Node>, BasicError> {
        let view = self.view;
        if self.cfg.leader(view) != self.cfg.me {
            return Err(BasicError::NotLeader { me: self.cfg.me, view });
        }
        let collected = self.new_views.get(&view);
        let have = collected.map_or(0, |m| m.len());
        let need = self.cfg.params.quorum();
        if have < need || self.proposed.contains(&view) {
            return Err(BasicError::QuorumNotReached { have, need });
        }
        let high_qc = collected
            .into_iter()
            .flat_map(|m| m.values())
            .flatten()
            .max_by_key(|q| q.view)
            .cloned();
        let justify = high_qc.unwrap_or_else(|| self.tree.genesis_qc());
        let parent = self.tree.get(&justify.node).ok_or(BasicError::MissingNode)?.clone();
        let made = self
            .tree
            .create_leaf(&parent.id, self.cfg.command(view), None, parent.height + 1)
            .map_err(|_| BasicError::MissingNode)?;
        let node = made.last().expect("create_leaf returns the leaf").clone();
        self.proposed.insert(view);
        ctx.trace(TraceKind::Propose {
            view,
            node: node.id,
            height: node.height,
        });
        let msg = Message::new(MsgKind::Prepare, view)
            .with_justify(Some(justify))
            .with_ancestry(ancestry_of(&self.tree, &node, self.cfg.ancestry_depth))
            .with_node(node.clone());
        ctx.broadcast(msg);
        Ok(node)
    }

    /// Combines votes for `(phase, view, node)` once n−f are in and
    /// broadcasts the next phase.
    pub fn leader_on_votes(&mut self, phase: Phase, view: View, node: Digest, ctx: &mut Ctx) -> Result<QuorumCert, BasicError> {
        let need = self.cfg.params.quorum();
        let parts: Vec<PartialSig> = self
            .votes
            .get(&(phase, view, node))
            .map(|m| m.values().cloned().collect())
            .unwrap_or_default();
        if parts.len() < need || self.led.contains(&(view, phase)) {
            return Err(BasicError::QuorumNotReached { have: parts.len(), need });
        }
        let payload = vote_payload(phase, view, &node);
        let sig = self
            .cfg
            .crypto
            .tcombine(&payload, &parts)
            .map_err(|_| BasicError::QuorumNotReached { have: parts.len(), need })?;
        let qc = QuorumCert {
            qtype: phase,
            view,
            node,
            sig: Some(sig),
        };
        self.led.insert((view, phase));
        ctx.trace(TraceKind::QcFormed {
            phase,
            view,
            node,
            signers: qc.signers(),
        });
        let kind = next_kind(phase).expect("only phase votes are tallied");
        let mut msg = Message::new(kind, view).with_justify(Some(qc.clone()));
        if let Some(n) = self.tree.get(&node) {
            msg.node = Some(n.clone());
        }
        ctx.broadcast(msg);
        Ok(qc)
    }

    fn vote(&mut self, phase: Phase, view: View, node: &Arc<Node>, ctx: &mut Ctx) -> Result<(), BasicError> {
        if !self.vote_log.insert((view, phase)) {
            return Err(BasicError::AlreadyVoted);
        }
        let payload = vote_payload(phase, view, &node.id);
        let part = self.cfg.crypto.tsign(self.cfg.me, &payload).map_err(|_| BasicError::InvalidQc)?;
        ctx.trace(TraceKind::Vote {
            phase,
            view,
            node: node.id,
            height: node.height,
        });
        let kind = match phase {
            Phase::Prepare => MsgKind::Prepare,
            Phase::PreCommit => MsgKind::PreCommit,
            Phase::Commit => MsgKind::Commit,
            _ => MsgKind::Decide,
        };
        let msg = Message::new(kind, view).with_node(node.clone()).with_partial(part);
        ctx.send(self.cfg.leader(view), msg);
        Ok(())
    }

    /// Handles a broadcast from the leader of `msg.view`.
    pub fn on_leader_msg(&mut self, from: ReplicaId, msg: &Message, ctx: &mut Ctx) -> Result<(), BasicError> {
        let w = msg.view;
        if from != self.cfg.leader(w) {
            return Err(BasicError::NotFromLeader(from));
        }
        if w < self.view {
            return Err(BasicError::WrongView { got: w, current: self.view });
        }
        let qc = msg.justify.as_ref().ok_or(BasicError::InvalidQc)?;
        if !qc.verify(self.cfg.crypto.as_ref()) {
            return Err(BasicError::InvalidQc);
        }
        let expected = match msg.kind {
            MsgKind::Prepare => None,
            MsgKind::PreCommit => Some(Phase::Prepare),
            MsgKind::Commit => Some(Phase::PreCommit),
            MsgKind::Decide => Some(Phase::Commit),
            _ => return Err(BasicError::InvalidQc),
        };
        match expected {
            None => {
                if !(qc.is_genesis() || qc.qtype == Phase::Prepare) {
                    return Err(BasicError::InvalidQc);
                }
                let node = msg.node.as_ref().ok_or(BasicError::MissingNode)?;
                if !self.tree.contains(&node.id) || node.parent != Some(qc.node) {
                    return Err(BasicError::MissingNode);
                }
                self.enter_view(w, false, ctx);
                if !self.safe_node(&node.id, qc) {
                    return Err(BasicError::UnsafeNode);
                }
                self.vote(Phase::Prepare, w, node, ctx)?;
                self.cur_proposal = Some(node.id);
            }
            Some(phase) => {
                if qc.qtype != phase || qc.view != w || qc.is_genesis() {
                    return Err(BasicError::InvalidQc);
                }
                let node = self.tree.get(&qc.node).ok_or(BasicError::MissingNode)?.clone();
                self.enter_view(w, false, ctx);
                match phase {
                    Phase::Prepare => {
                        if w > rank(&self.prepare_qc) {
                            self.prepare_qc = Some(qc.clone());
                            ctx.trace(TraceKind::QcHigh {
                                view: w,
                                node: node.id,
                                height: node.height,
                            });
                        }
                        self.vote(Phase::PreCommit, w, &node, ctx)?;
                    }
                    Phase::PreCommit => {
                        if w > rank(&self.locked_qc) {
                            self.locked_qc = Some(qc.clone());
                            ctx.trace(TraceKind::Lock {
                                view: w,
                                node: node.id,
                                height: node.height,
                            });
                        }
                        self.vote(Phase::Commit, w, &node, ctx)?;
                    }
                    _ => {
                        let before = self.b_exec;
                        self.b_exec = execute_branch(&self.tree, self.b_exec, &node.id, w, ctx);
                        if self.b_exec != before {
                            self.backoff.reset();
                        }
                        self.enter_view(w + 1, true, ctx);
                    }
                }
            }
        }
        Ok(())
    }

    fn on_vote(&mut self, from: ReplicaId, msg: &Message, ctx: &mut Ctx) {
        let (Some(part), Some(node), Some(phase)) = (&msg.partial, &msg.node, msg.kind.phase()) else {
            return;
        };
        let w = msg.view;
        if self.cfg.leader(w) != self.cfg.me || w < self.view || self.led.contains(&(w, phase)) {
            return;
        }
        let payload = vote_payload(phase, w, &node.id);
        if part.signer != from || !self.cfg.crypto.verify_partial(&payload, part) {
            return;
        }
        self.votes.entry((phase, w, node.id)).or_default().insert(from, part.clone());
        let _ = self.leader_on_votes(phase, w, node.id, ctx);
    }

    fn on_new_view(&mut self, from: ReplicaId, msg: &Message, ctx: &mut Ctx) {
        let w = msg.view;
        if self.cfg.leader(w) != self.cfg.me || w < self.view {
            return;
        }
        if let Some(qc) = &msg.justify {
            if !qc.verify(self.cfg.crypto.as_ref()) || !(qc.is_genesis() || qc.qtype == Phase::Prepare) {
                return;
            }
        }
        // The genesis certificate stands in for an empty prepareQC.
        let qc = msg.justify.clone().filter(|q| !q.is_genesis());
        let count = {
            let m = self.new_views.entry(w).or_default();
            m.insert(from, qc);
            m.len()
        };
        if w > self.view && count >= self.cfg.params.quorum() {
            self.enter_view(w, false, ctx);
        } else if w == self.view {
            let _ = self.leader_on_new_view(ctx);
        }
    }
}

impl Replica for Basic {
    fn id(&self) -> ReplicaId {
        self.cfg.me
    }

    fn start(&mut self, ctx: &mut Ctx) {
        self.enter_view(1, true, ctx);
    }

    fn on_message(&mut self, from: ReplicaId, msg: &Message, ctx: &mut Ctx) {
        if !ingest(&mut self.tree, msg, ctx) {
            return;
        }
        match msg.kind {
            MsgKind::NewView => self.on_new_view(from, msg, ctx),
            MsgKind::Generic => {}
            _ if msg.is_vote() => self.on_vote(from, msg, ctx),
            _ => {
                let _ = self.on_leader_msg(from, msg, ctx);
            }
        }
    }

    fn on_timer(&mut self, timer: Timer, ctx: &mut Ctx) {
        if let Timer::View(v) = timer {
            if v == self.view {
                ctx.trace(TraceKind::Timeout { view: v });
                self.backoff.on_timeout();
                self.enter_view(v + 1, true, ctx);
            }
        }
    }

    fn tree(&self) -> &Tree {
        &self.tree
    }

    fn executed(&self) -> Digest {
        self.b_exec
    }

    fn clone_box(&self) -> Box<dyn Replica> {
        Box::new(self.clone())
    }

    fn fingerprint(&self) -> Digest {
        let mut buf = Vec::new();
        buf.extend_from_slice(&self.view.to_le_bytes());
        for qc in [&self.prepare_qc, &self.locked_qc].into_iter().flatten() {
            buf.extend_from_slice(&qc.digest().0);
        }
        for (v, p) in &self.vote_log {
            buf.extend_from_slice(&v.to_le_bytes());
            buf.push(*p as u8);
        }
        buf.extend_from_slice(&self.b_exec.0);
        hash(&buf)
    }
}
