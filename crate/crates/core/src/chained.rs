//! Pipelined replica: one GENERIC phase per view, votes relayed to the
//! next leader, and One/Two/Three-Chain detection over direct parents.

use std::collections::{BTreeMap, BTreeSet};

use crate::crypto::{hash, Digest, PartialSig, ReplicaId};
use crate::pacemaker::Backoff;
use crate::replica::{
    ancestry_of, execute_branch, ingest, qc_message, Ctx, Replica, ReplicaConfig, Timer, TraceKind,
};
use crate::tree::Tree;
use crate::types::{vote_payload, Message, MsgKind, Node, Phase, QuorumCert, View};

/// Which links below a node form direct chains.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ChainReport {
    pub one_chain: Option<Digest>,
    pub two_chain: Option<Digest>,
    pub three_chain: Option<Digest>,
}

/// `b'' = b*.justify.node` is a One-Chain iff it is `b*`'s parent, and so
/// on down: each deeper link also has to be a direct parent.
pub fn classify_chain(tree: &Tree, b_star: &Node) -> ChainReport {
    let mut report = ChainReport::default();
    let Some(b2) = tree.justify_node(b_star) else {
        return report;
    };
    if b_star.parent != Some(b2.id) {
        return report;
    }
    report.one_chain = Some(b2.id);
    let Some(b1) = tree.justify_node(b2) else {
        return report;
    };
    if b2.parent != Some(b1.id) {
        return report;
    }
    report.two_chain = Some(b1.id);
    let Some(b0) = tree.justify_node(b1) else {
        return report;
    };
    if b1.parent == Some(b0.id) {
        report.three_chain = Some(b0.id);
    }
    report
}

#[derive(Clone)]
pub struct Chained {
    cfg: ReplicaConfig,
    tree: Tree,
    view: View,
    generic_qc: QuorumCert,
    locked_qc: QuorumCert,
    vote_log: BTreeSet<View>,
    votes: BTreeMap<(View, Digest), BTreeMap<ReplicaId, PartialSig>>,
    new_views: BTreeMap<View, BTreeMap<ReplicaId, QuorumCert>>,
    proposed: BTreeSet<View>,
    b_exec: Digest,
    backoff: Backoff,
}

impl Chained {
    pub fn new(cfg: ReplicaConfig) -> Self {
        let tree = Tree::new();
        let g = tree.genesis_qc();
        let b_exec = tree.genesis().id;
        let backoff = cfg.pacemaker.backoff();
        Chained {
            cfg,
            tree,
            view: 0,
            generic_qc: g.clone(),
            locked_qc: g,
            vote_log: BTreeSet::new(),
            votes: BTreeMap::new(),
            new_views: BTreeMap::new(),
            proposed: BTreeSet::new(),
            b_exec,
            backoff,
        }
    }

    pub fn view(&self) -> View {
        self.view
    }

    pub fn generic_qc(&self) -> &QuorumCert {
        &self.generic_qc
    }

    pub fn locked_qc(&self) -> &QuorumCert {
        &self.locked_qc
    }

    pub fn tree_mut(&mut self) -> &mut Tree {
        &mut self.tree
    }

    pub fn safe_node(&self, node: &Digest, qc: &QuorumCert) -> bool {
        self.tree.extends(node, &self.locked_qc.node) || qc.view > self.locked_qc.view
    }

    fn raise_generic(&mut self, qc: &QuorumCert, ctx: &mut Ctx) {
        if qc.view > self.generic_qc.view {
            self.generic_qc = qc.clone();
            let height = self.tree.get(&qc.node).map_or(0, |n| n.height);
            ctx.trace(TraceKind::QcHigh {
                view: qc.view,
                node: qc.node,
                height,
            });
        }
    }

    fn enter_view(&mut self, view: View, ctx: &mut Ctx) {
        if view <= self.view {
            return;
        }
        self.view = view;
        let interval = self.backoff.current();
        ctx.set_timer(interval, Timer::View(view));
        ctx.trace(TraceKind::ViewEnter { view, interval });
    }

    /// Proposes at `view` on top of the highest generic certificate.
    fn propose(&mut self, view: View, ctx: &mut Ctx) {
        if self.cfg.leader(view) != self.cfg.me || !self.proposed.insert(view) {
            return;
        }
        self.enter_view(view, ctx);
        let qc = self.generic_qc.clone();
        let Some(parent) = self.tree.get(&qc.node).cloned() else {
            return;
        };
        let Ok(made) = self.tree.create_leaf(&parent.id, self.cfg.command(view), Some(qc.clone()), view) else {
            return;
        };
        let node = made.last().expect("create_leaf returns the leaf").clone();
        ctx.trace(TraceKind::Propose {
            view,
            node: node.id,
            height: node.height,
        });
        let msg = Message::new(MsgKind::Generic, view)
            .with_justify(Some(qc))
            .with_ancestry(ancestry_of(&self.tree, &node, self.cfg.ancestry_depth))
            .with_node(node);
        ctx.broadcast(msg);
    }

    pub fn on_generic(&mut self, from: ReplicaId, msg: &Message, ctx: &mut Ctx) {
        let w = msg.view;
        let (Some(b_star), Some(qc)) = (&msg.node, &msg.justify) else {
            return;
        };
        if from != self.cfg.leader(w)
            || w < self.view
            || b_star.height != w
            || b_star.justify.as_ref() != Some(qc)
            || !qc.verify(self.cfg.crypto.as_ref())
            || !self.tree.contains(&b_star.id)
        {
            return;
        }
        self.enter_view(w, ctx);
        if self.safe_node(&b_star.id, qc) && self.vote_log.insert(w) {
            let payload = vote_payload(Phase::Generic, w, &b_star.id);
            if let Ok(part) = self.cfg.crypto.tsign(self.cfg.me, &payload) {
                ctx.trace(TraceKind::Vote {
                    phase: Phase::Generic,
                    view: w,
                    node: b_star.id,
                    height: b_star.height,
                });
                let vote = Message::new(MsgKind::Generic, w)
                    .with_node(b_star.clone())
                    .with_partial(part);
                ctx.send(self.cfg.leader(w + 1), vote);
            }
        }
        // The generic certificate may rise even over an indirect link.
        self.raise_generic(qc, ctx);
        let chain = classify_chain(&self.tree, b_star);
        if let (Some(b2), Some(_)) = (chain.one_chain, chain.two_chain) {
            let lock = self.tree.get(&b2).and_then(|n| n.justify.clone());
            if let Some(lock) = lock {
                if lock.view > self.locked_qc.view {
                    let height = self.tree.get(&lock.node).map_or(0, |n| n.height);
                    ctx.trace(TraceKind::Lock {
                        view: lock.view,
                        node: lock.node,
                        height,
                    });
                    self.locked_qc = lock;
                }
            }
        }
        if let Some(b) = chain.three_chain {
            let before = self.b_exec;
            self.b_exec = execute_branch(&self.tree, self.b_exec, &b, w, ctx);
            if self.b_exec != before {
                self.backoff.reset();
            }
        }
        self.enter_view(w + 1, ctx);
    }

    fn on_vote(&mut self, from: ReplicaId, msg: &Message, ctx: &mut Ctx) {
        let (Some(part), Some(node)) = (&msg.partial, &msg.node) else {
            return;
        };
        let w = msg.view;
        let next = w + 1;
        if self.cfg.leader(next) != self.cfg.me || self.proposed.contains(&next) || next < self.view {
            return;
        }
        let payload = vote_payload(Phase::Generic, w, &node.id);
        if part.signer != from || node.height != w || !self.cfg.crypto.verify_partial(&payload, part) {
            return;
        }
        let tally = self.votes.entry((w, node.id)).or_default();
        tally.insert(from, part.clone());
        if tally.len() < self.cfg.params.quorum() {
            // A voter has moved on to `next` just as if it had sent NEW-VIEW,
            // holding at least the certificate its vote built on.
            if let Some(qc) = node.justify.as_ref().filter(|q| q.verify(self.cfg.crypto.as_ref())) {
                self.join_next(from, next, qc.clone(), ctx);
            }
            return;
        }
        let parts: Vec<PartialSig> = tally.values().cloned().collect();
        let Ok(sig) = self.cfg.crypto.tcombine(&payload, &parts) else {
            return;
        };
        let qc = QuorumCert {
            qtype: Phase::Generic,
            view: w,
            node: node.id,
            sig: Some(sig),
        };
        ctx.trace(TraceKind::QcFormed {
            phase: Phase::Generic,
            view: w,
            node: node.id,
            signers: qc.signers(),
        });
        self.raise_generic(&qc, ctx);
        self.propose(next, ctx);
    }

    fn on_new_view(&mut self, from: ReplicaId, msg: &Message, ctx: &mut Ctx) {
        let w = msg.view;
        let Some(qc) = &msg.justify else {
            return;
        };
        if self.cfg.leader(w) != self.cfg.me || w < self.view || !qc.verify(self.cfg.crypto.as_ref()) {
            return;
        }
        self.join_next(from, w, qc.clone(), ctx);
    }

    /// Records `from` as present in view `w`; with n−f present the leader
    /// proposes on the highest certificate among them.
    fn join_next(&mut self, from: ReplicaId, w: View, qc: QuorumCert, ctx: &mut Ctx) {
        let m = self.new_views.entry(w).or_default();
        if m.get(&from).is_none_or(|q| q.view < qc.view) {
            m.insert(from, qc);
        }
        if m.len() >= self.cfg.params.quorum() {
            let high = m.values().max_by_key(|q| q.view).cloned();
            if let Some(high) = high {
                self.raise_generic(&high, ctx);
            }
            self.propose(w, ctx);
        }
    }
}

impl Replica for Chained {
    fn id(&self) -> ReplicaId {
        self.cfg.me
    }

    fn start(&mut self, ctx: &mut Ctx) {
        self.enter_view(1, ctx);
        self.propose(1, ctx);
    }

    fn on_message(&mut self, from: ReplicaId, msg: &Message, ctx: &mut Ctx) {
        if !ingest(&mut self.tree, msg, ctx) {
            return;
        }
        match msg.kind {
            MsgKind::Generic if msg.is_vote() => self.on_vote(from, msg, ctx),
            MsgKind::Generic => self.on_generic(from, msg, ctx),
            MsgKind::NewView => self.on_new_view(from, msg, ctx),
            _ => {}
        }
    }

    fn on_timer(&mut self, timer: Timer, ctx: &mut Ctx) {
        if let Timer::View(v) = timer {
            if v == self.view {
                ctx.trace(TraceKind::Timeout { view: v });
                self.backoff.on_timeout();
                let next = v + 1;
                let msg = qc_message(&self.tree, MsgKind::NewView, next, &self.generic_qc, self.cfg.ancestry_depth);
                ctx.send(self.cfg.leader(next), msg);
                self.enter_view(next, ctx);
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
        buf.extend_from_slice(&self.locked_qc.node.0);
        for v in &self.vote_log {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        buf.extend_from_slice(&self.b_exec.0);
        hash(&buf)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::crypto::{CryptoProvider, MockProvider};
    use crate::types::Params;
    use std::sync::Arc;

    fn certify(crypto: &MockProvider, node: &Node) -> QuorumCert {
        let payload = vote_payload(Phase::Generic, node.height, &node.id);
        let parts: Vec<_> = (0..3).map(|i| crypto.tsign(i, &payload).unwrap()).collect();
        QuorumCert {
            qtype: Phase::Generic,
            view: node.height,
            node: node.id,
            sig: Some(crypto.tcombine(&payload, &parts).unwrap()),
        }
    }

    fn grow(t: &mut Tree, crypto: &MockProvider, parent: &Arc<Node>, justify: &Arc<Node>, h: u64) -> Arc<Node> {
        let qc = if justify.is_genesis() {
            t.genesis_qc()
        } else {
            certify(crypto, justify)
        };
        t.create_leaf(&parent.id, format!("c{h}").into_bytes(), Some(qc), h)
            .unwrap()
            .last()
            .unwrap()
            .clone()
    }

    #[test]
    fn direct_links_form_three_chain() {
        let crypto = MockProvider::new(4, 1, 0);
        let mut t = Tree::new();
        let g = t.genesis().clone();
        let v1 = grow(&mut t, &crypto, &g, &g, 1);
        let v2 = grow(&mut t, &crypto, &v1, &v1, 2);
        let v3 = grow(&mut t, &crypto, &v2, &v2, 3);
        let v4 = grow(&mut t, &crypto, &v3, &v3, 4);
        let r = classify_chain(&t, &v4);
        assert_eq!(r.one_chain, Some(v3.id));
        assert_eq!(r.two_chain, Some(v2.id));
        assert_eq!(r.three_chain, Some(v1.id));
    }

    #[test]
    fn genesis_justify_is_a_one_chain_only() {
        let crypto = MockProvider::new(4, 1, 0);
        let mut t = Tree::new();
        let g = t.genesis().clone();
        let v1 = grow(&mut t, &crypto, &g, &g, 1);
        let r = classify_chain(&t, &v1);
        assert_eq!(r.one_chain, Some(g.id));
        assert_eq!(r.two_chain, None);
    }

    #[test]
    fn blank_gap_breaks_the_chain() {
        let crypto = MockProvider::new(4, 1, 0);
        let mut t = Tree::new();
        let g = t.genesis().clone();
        let v1 = grow(&mut t, &crypto, &g, &g, 1);
        let v2 = grow(&mut t, &crypto, &v1, &v1, 2);
        // v4 justifies v2 over a blank at height 3.
        let v4 = grow(&mut t, &crypto, &v2, &v2, 4);
        let v5 = grow(&mut t, &crypto, &v4, &v4, 5);
        let r = classify_chain(&t, &v5);
        assert_eq!(r.one_chain, Some(v4.id));
        assert_eq!(r.two_chain, None);
        assert_eq!(classify_chain(&t, &v4), ChainReport::default());
    }

    #[test]
    fn pipeline_commits_first_command_in_fourth_view() {
        let crypto = Arc::new(MockProvider::new(4, 1, 0));
        let cfg = ReplicaConfig {
            me: 0,
            params: Params::new(4, 1),
            crypto: crypto.clone(),
            pacemaker: Default::default(),
            ancestry_depth: 8,
        };
        let mut r = Chained::new(cfg.clone());
        let mut t = Tree::new();
        let g = t.genesis().clone();
        let mut nodes = vec![grow(&mut t, &crypto, &g, &g, 1)];
        for h in 2..=4 {
            let p = nodes.last().unwrap().clone();
            nodes.push(grow(&mut t, &crypto, &p, &p, h));
        }
        let mut ctx = Ctx::new(0);
        r.start(&mut ctx);
        let mut commit_views = Vec::new();
        for n in &nodes {
            let msg = Message::new(MsgKind::Generic, n.height)
                .with_justify(n.justify.clone())
                .with_node(n.clone());
            let mut ctx = Ctx::new(0);
            r.on_message(cfg.leader(n.height), &msg, &mut ctx);
            for o in ctx.out {
                if let crate::replica::Output::Trace(TraceKind::Commit { view, cmd, .. }) = o {
                    commit_views.push((cmd, view));
                }
            }
        }
        assert_eq!(commit_views, vec![("c1".to_string(), 4)]);
        assert_eq!(r.locked_qc().node, nodes[1].id);
        assert_eq!(r.generic_qc().node, nodes[2].id);
        assert_eq!(r.view(), 5);
    }
}
