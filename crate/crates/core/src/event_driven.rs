//! The event-driven replica: generic proposals, a per-height vote rule,
//! relaxed lock and `qc_high` updates, direct-parent commits, and the
//! embedded pacemaker. The two-phase commit rule and two deliberately
//! weakened rules (for negative tests) are selectable.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::crypto::{hash, Digest, PartialSig, ReplicaId};
use crate::pacemaker::{Backoff, BeatPolicy};
use crate::replica::{
    ancestry_of, execute_branch, ingest, qc_message, Ctx, Replica, ReplicaConfig, Timer, TraceKind,
};
use crate::tree::Tree;
use crate::types::{vote_payload, Height, Message, MsgKind, Node, Phase, QuorumCert, View};

#[derive(Clone, Copy, PartialEq, Eq, Debug, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    ThreePhase,
    TwoPhase,
}

/// Rule set. Anything but `Conformant` is unsafe and exists only so tests
/// can show why the conformant rules are needed.
#[derive(Clone, Copy, PartialEq, Eq, Debug, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    Conformant,
    /// Vote at most once per height instead of at strictly increasing heights.
    OncePerHeight,
    /// Commit on ancestor chains instead of direct-parent chains.
    AncestorCommit,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ProposeError {
    #[error("replica {me} is not the leader of view {view}")]
    NotLeader { me: ReplicaId, view: View },
    #[error("leaf at height {leaf} is not below view {view}")]
    LeafTooHigh { leaf: Height, view: View },
}

#[derive(Clone)]
pub struct EventDriven {
    cfg: ReplicaConfig,
    mode: Mode,
    variant: Variant,
    tree: Tree,
    vheight: Height,
    voted_heights: BTreeSet<Height>,
    b_lock: Digest,
    b_exec: Digest,
    b_leaf: Digest,
    qc_high: QuorumCert,
    votes: BTreeMap<Digest, BTreeMap<ReplicaId, PartialSig>>,
    certified: BTreeSet<Digest>,
    cur_view: View,
    backoff: Backoff,
    new_views: BTreeMap<View, BTreeSet<ReplicaId>>,
    last_proposed: View,
    beats: BTreeSet<View>,
}

impl EventDriven {
    pub fn new(cfg: ReplicaConfig, mode: Mode, variant: Variant) -> Self {
        let tree = Tree::new();
        let g = tree.genesis().id;
        let qc_high = tree.genesis_qc();
        let backoff = cfg.pacemaker.backoff();
        EventDriven {
            cfg,
            mode,
            variant,
            tree,
            vheight: 0,
            voted_heights: BTreeSet::new(),
            b_lock: g,
            b_exec: g,
            b_leaf: g,
            qc_high,
            votes: BTreeMap::new(),
            certified: BTreeSet::new(),
            cur_view: 0,
            backoff,
            new_views: BTreeMap::new(),
            last_proposed: 0,
            beats: BTreeSet::new(),
        }
    }

    pub fn vheight(&self) -> Height {
        self.vheight
    }

    pub fn locked(&self) -> Digest {
        self.b_lock
    }

    pub fn leaf(&self) -> Digest {
        self.b_leaf
    }

    pub fn qc_high(&self) -> &QuorumCert {
        &self.qc_high
    }

    pub fn current_view(&self) -> View {
        self.cur_view
    }

    pub fn tree_mut(&mut self) -> &mut Tree {
        &mut self.tree
    }

    fn height_of(&self, id: &Digest) -> Height {
        self.tree.get(id).map(|n| n.height).unwrap_or(0)
    }

    /// Voting predicate for a node already in the tree.
    pub fn would_vote(&self, b_new: &Node) -> bool {
        let fresh = match self.variant {
            Variant::OncePerHeight => !self.voted_heights.contains(&b_new.height),
            _ => b_new.height > self.vheight,
        };
        let Some(justified) = self.tree.justify_node(b_new) else {
            return false;
        };
        let safe = self.tree.extends(&b_new.id, &self.b_lock) || justified.height > self.height_of(&self.b_lock);
        fresh && safe
    }

    pub fn on_receive_proposal(&mut self, b_new: &Arc<Node>, ctx: &mut Ctx) {
        if self.would_vote(b_new) {
            self.vheight = self.vheight.max(b_new.height);
            self.voted_heights.insert(b_new.height);
            let payload = vote_payload(Phase::Generic, b_new.height, &b_new.id);
            if let Ok(part) = self.cfg.crypto.tsign(self.cfg.me, &payload) {
                ctx.trace(TraceKind::Vote {
                    phase: Phase::Generic,
                    view: b_new.height,
                    node: b_new.id,
                    height: b_new.height,
                });
                let vote = Message::new(MsgKind::Generic, b_new.height)
                    .with_node(b_new.clone())
                    .with_partial(part);
                ctx.send(self.cfg.leader(b_new.height + 1), vote);
            }
        }
        self.update(b_new, ctx);
        if b_new.height >= self.cur_view {
            self.enter_view(b_new.height + 1, ctx);
        }
    }

    /// Applies the lock and commit rules for the chain ending at `b_star`.
    pub fn update(&mut self, b_star: &Node, ctx: &mut Ctx) {
        let Some(qc) = b_star.justify.clone() else {
            return;
        };
        let Some(b2) = self.tree.get(&qc.node).cloned() else {
            return;
        };
        self.update_qc_high(&qc, ctx);
        match self.mode {
            Mode::ThreePhase => {
                let Some(b1) = self.tree.justify_node(&b2).cloned() else {
                    return;
                };
                self.raise_lock(&b1, ctx);
                let Some(b0) = self.tree.justify_node(&b1).cloned() else {
                    return;
                };
                if self.chain_link(&b2, &b1) && self.chain_link(&b1, &b0) {
                    self.on_commit(&b0, b_star.height, ctx);
                }
            }
            Mode::TwoPhase => {
                self.raise_lock(&b2, ctx);
                let Some(b1) = self.tree.justify_node(&b2).cloned() else {
                    return;
                };
                if self.chain_link(&b2, &b1) {
                    self.on_commit(&b1, b_star.height, ctx);
                }
            }
        }
    }

    fn chain_link(&self, child: &Node, parent: &Node) -> bool {
        match self.variant {
            Variant::AncestorCommit => self.tree.extends(&child.id, &parent.id),
            _ => child.parent == Some(parent.id),
        }
    }

    fn raise_lock(&mut self, node: &Node, ctx: &mut Ctx) {
        if node.height > self.height_of(&self.b_lock) {
            self.b_lock = node.id;
            ctx.trace(TraceKind::Lock {
                view: node.height,
                node: node.id,
                height: node.height,
            });
        }
    }

    pub fn on_commit(&mut self, b: &Node, view: View, ctx: &mut Ctx) {
        let before = self.b_exec;
        self.b_exec = execute_branch(&self.tree, self.b_exec, &b.id, view, ctx);
        if self.b_exec != before {
            self.backoff.reset();
        }
    }

    /// Returns true if `qc` became the new highest certificate.
    pub fn update_qc_high(&mut self, qc: &QuorumCert, ctx: &mut Ctx) -> bool {
        let Some(node) = self.tree.get(&qc.node) else {
            return false;
        };
        let h = node.height;
        if h <= self.height_of(&self.qc_high.node) {
            return false;
        }
        self.qc_high = qc.clone();
        self.b_leaf = qc.node;
        ctx.trace(TraceKind::QcHigh {
            view: qc.view,
            node: qc.node,
            height: h,
        });
        if h >= self.cur_view {
            self.enter_view(h + 1, ctx);
        } else {
            self.try_beat(ctx);
        }
        true
    }

    pub fn on_receive_vote(&mut self, from: ReplicaId, part: &PartialSig, node: &Node, ctx: &mut Ctx) {
        if self.certified.contains(&node.id) {
            return;
        }
        let payload = vote_payload(Phase::Generic, node.height, &node.id);
        if part.signer != from || !self.cfg.crypto.verify_partial(&payload, part) {
            return;
        }
        let tally = self.votes.entry(node.id).or_default();
        tally.insert(from, part.clone());
        if tally.len() < self.cfg.params.quorum() {
            return;
        }
        let parts: Vec<PartialSig> = tally.values().cloned().collect();
        let Ok(sig) = self.cfg.crypto.tcombine(&payload, &parts) else {
            return;
        };
        self.certified.insert(node.id);
        let qc = QuorumCert {
            qtype: Phase::Generic,
            view: node.height,
            node: node.id,
            sig: Some(sig),
        };
        ctx.trace(TraceKind::QcFormed {
            phase: Phase::Generic,
            view: qc.view,
            node: qc.node,
            signers: qc.signers(),
        });
        self.votes.remove(&node.id);
        self.update_qc_high(&qc, ctx);
    }

    /// Proposes `cmd` at the current view on top of the leaf.
    pub fn on_propose(&mut self, cmd: Vec<u8>, ctx: &mut Ctx) -> Result<Arc<Node>, ProposeError> {
        let view = self.cur_view;
        if self.cfg.leader(view) != self.cfg.me {
            return Err(ProposeError::NotLeader { me: self.cfg.me, view });
        }
        let leaf_h = self.height_of(&self.b_leaf);
        if leaf_h >= view {
            return Err(ProposeError::LeafTooHigh { leaf: leaf_h, view });
        }
        let made = self
            .tree
            .create_leaf(&self.b_leaf, cmd, Some(self.qc_high.clone()), view)
            .expect("leaf is in the tree and below the view");
        let node = made.last().expect("create_leaf returns the leaf").clone();
        self.b_leaf = node.id;
        self.last_proposed = view;
        ctx.trace(TraceKind::Propose {
            view,
            node: node.id,
            height: node.height,
        });
        let msg = Message::new(MsgKind::Generic, view)
            .with_justify(node.justify.clone())
            .with_ancestry(ancestry_of(&self.tree, &node, self.cfg.ancestry_depth))
            .with_node(node.clone());
        ctx.broadcast(msg);
        Ok(node)
    }

    fn enter_view(&mut self, view: View, ctx: &mut Ctx) {
        if view <= self.cur_view {
            return;
        }
        self.cur_view = view;
        let interval = self.backoff.current();
        ctx.set_timer(interval, Timer::View(view));
        ctx.trace(TraceKind::ViewEnter { view, interval });
        if let BeatPolicy::FixedInterval { ticks } = self.cfg.pacemaker.beat_policy {
            if self.cfg.leader(view) == self.cfg.me {
                ctx.set_timer(ticks, Timer::Beat(view));
            }
        }
        self.try_beat(ctx);
    }

    fn try_beat(&mut self, ctx: &mut Ctx) {
        let view = self.cur_view;
        if self.cfg.leader(view) != self.cfg.me || self.last_proposed >= view {
            return;
        }
        let ready = match self.cfg.pacemaker.beat_policy {
            BeatPolicy::OnQc => {
                self.height_of(&self.qc_high.node) + 1 == view
                    || self.new_views.get(&view).map_or(0, |s| s.len()) >= self.cfg.params.quorum()
            }
            BeatPolicy::FixedInterval { .. } => self.beats.contains(&view),
        };
        if ready {
            let cmd = self.cfg.command(view);
            let _ = self.on_propose(cmd, ctx);
        }
    }

    fn on_timeout(&mut self, view: View, ctx: &mut Ctx) {
        ctx.trace(TraceKind::Timeout { view });
        self.backoff.on_timeout();
        let next = view + 1;
        let msg = qc_message(&self.tree, MsgKind::NewView, next, &self.qc_high, self.cfg.ancestry_depth);
        ctx.send(self.cfg.leader(next), msg);
        self.enter_view(next, ctx);
    }

    fn on_new_view(&mut self, from: ReplicaId, msg: &Message, ctx: &mut Ctx) {
        let Some(qc) = &msg.justify else {
            return;
        };
        if !qc.verify(self.cfg.crypto.as_ref()) {
            return;
        }
        self.update_qc_high(qc, ctx);
        let view = msg.view;
        if self.cfg.leader(view) != self.cfg.me || view < self.cur_view {
            return;
        }
        let have = {
            let set = self.new_views.entry(view).or_default();
            set.insert(from);
            set.len()
        };
        if view > self.cur_view && have >= self.cfg.params.quorum() {
            self.enter_view(view, ctx);
        } else {
            self.try_beat(ctx);
        }
    }

    fn valid_proposal(&self, from: ReplicaId, node: &Node) -> bool {
        let Some(qc) = &node.justify else {
            return false;
        };
        from == self.cfg.leader(node.height)
            && qc.verify(self.cfg.crypto.as_ref())
            && (qc.is_genesis() || qc.view == self.height_of(&qc.node))
            && self.tree.contains(&node.id)
    }
}

impl Replica for EventDriven {
    fn id(&self) -> ReplicaId {
        self.cfg.me
    }

    fn start(&mut self, ctx: &mut Ctx) {
        self.enter_view(1, ctx);
    }

    fn on_message(&mut self, from: ReplicaId, msg: &Message, ctx: &mut Ctx) {
        if !ingest(&mut self.tree, msg, ctx) {
            return;
        }
        match msg.kind {
            MsgKind::Generic => {
                let Some(node) = &msg.node else {
                    return;
                };
                match &msg.partial {
                    Some(part) => self.on_receive_vote(from, part, node, ctx),
                    None => {
                        if self.valid_proposal(from, node) {
                            self.on_receive_proposal(node, ctx);
                        }
                    }
                }
            }
            MsgKind::NewView => self.on_new_view(from, msg, ctx),
            _ => {}
        }
    }

    fn on_timer(&mut self, timer: Timer, ctx: &mut Ctx) {
        match timer {
            Timer::View(v) if v == self.cur_view => self.on_timeout(v, ctx),
            Timer::Beat(v) if v == self.cur_view => {
                self.beats.insert(v);
                self.try_beat(ctx);
            }
            _ => {}
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
        buf.extend_from_slice(&self.vheight.to_le_bytes());
        for h in &self.voted_heights {
            buf.extend_from_slice(&h.to_le_bytes());
        }
        for d in [self.b_lock, self.b_exec] {
            buf.extend_from_slice(&d.0);
        }
        for (node, tally) in &self.votes {
            buf.extend_from_slice(&node.0);
            for s in tally.keys() {
                buf.push(*s as u8);
            }
        }
        for c in &self.certified {
            buf.extend_from_slice(&c.0);
        }
        hash(&buf)
    }
}
