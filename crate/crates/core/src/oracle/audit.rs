//! Safety audit computed from a run trace alone. It never consults replica
//! state: ancestry comes from the simulator's record of every node that
//! crossed the wire.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use crate::crypto::{Digest, ReplicaId};
use crate::replica::{TraceKind, TraceRecord};
use crate::simnet::RunTrace;
use crate::types::{genesis_id, Phase, View};

#[derive(Clone, PartialEq, Eq, Debug, Serialize, Deserialize)]
pub struct Violation {
    pub first: (ReplicaId, Digest),
    pub second: (ReplicaId, Digest),
}

#[derive(Clone, PartialEq, Eq, Debug, Default, Serialize, Deserialize)]
pub struct AuditReport {
    /// No two conflicting nodes were committed by correct replicas.
    pub safety_ok: bool,
    pub violations: Vec<Violation>,
    /// No two same-phase, same-view certificates over conflicting nodes.
    pub lemma_basic_ok: bool,
    /// Executed command logs are pairwise prefix-comparable.
    pub prefix_order_ok: bool,
    /// At most one vote per replica, view and phase.
    pub per_view_vote_uniqueness_ok: bool,
    /// Votes, locks and highest certificates never move backwards.
    pub monotonic_ok: bool,
    /// Every lock is backed by votes from at least f+1 correct replicas.
    pub lock_support_ok: bool,
    /// Any two certificate signer sets share f+1 members, one correct.
    pub quorum_intersection_ok: bool,
    /// Replicas that reported committing across branches.
    pub conflicting_commit_signals: usize,
    pub diverged: Vec<String>,
}

impl AuditReport {
    pub fn passed(&self) -> bool {
        self.safety_ok
            && self.lemma_basic_ok
            && self.prefix_order_ok
            && self.per_view_vote_uniqueness_ok
            && self.monotonic_ok
            && self.lock_support_ok
            && self.quorum_intersection_ok
    }

    pub fn failures(&self) -> Vec<&'static str> {
        let checks = [
            (self.safety_ok, "safety"),
            (self.lemma_basic_ok, "same-view-certificates"),
            (self.prefix_order_ok, "prefix-order"),
            (self.per_view_vote_uniqueness_ok, "vote-uniqueness"),
            (self.monotonic_ok, "monotonicity"),
            (self.lock_support_ok, "lock-support"),
            (self.quorum_intersection_ok, "quorum-intersection"),
        ];
        checks.iter().filter(|(ok, _)| !ok).map(|(_, name)| *name).collect()
    }
}

/// Ancestry reconstructed from `NodeSeen` records.
pub struct Lineage {
    parent: HashMap<Digest, (Digest, u64)>,
    genesis: Digest,
}

impl Lineage {
    pub fn from_records(records: &[TraceRecord]) -> Self {
        let mut parent = HashMap::new();
        for r in records {
            if let TraceKind::NodeSeen { node, parent: p, height, .. } = &r.kind {
                parent.insert(*node, (*p, *height));
            }
        }
        Lineage {
            parent,
            genesis: genesis_id(),
        }
    }

    pub fn height(&self, id: &Digest) -> Option<u64> {
        if *id == self.genesis {
            return Some(0);
        }
        self.parent.get(id).map(|(_, h)| *h)
    }

    /// `desc` equals or descends from `anc`.
    pub fn extends(&self, desc: &Digest, anc: &Digest) -> bool {
        let Some(target) = self.height(anc) else {
            return false;
        };
        let mut cur = *desc;
        loop {
            if cur == *anc {
                return true;
            }
            match self.parent.get(&cur) {
                Some((p, h)) if *h > target => cur = *p,
                _ => return false,
            }
        }
    }

    pub fn conflicts(&self, a: &Digest, b: &Digest) -> bool {
        !self.extends(a, b) && !self.extends(b, a)
    }
}

pub fn audit(trace: &RunTrace) -> AuditReport {
    let lineage = Lineage::from_records(&trace.records);
    let f = trace.params.f;
    let correct: BTreeSet<ReplicaId> = trace.correct().collect();
    let is_correct = |r: &ReplicaId| correct.contains(r);
    let mut report = AuditReport::default();

    // Executed logs and commit signals.
    let mut logs: BTreeMap<ReplicaId, Vec<Digest>> = BTreeMap::new();
    let mut committers: BTreeMap<Digest, ReplicaId> = BTreeMap::new();
    for r in trace.records.iter().filter(|r| is_correct(&r.replica)) {
        match &r.kind {
            TraceKind::Commit { node, .. } => {
                logs.entry(r.replica).or_default().push(*node);
                committers.entry(*node).or_insert(r.replica);
            }
            TraceKind::ConflictingCommit { .. } => report.conflicting_commit_signals += 1,
            _ => {}
        }
    }
    for r in &trace.records {
        if let TraceKind::ScenarioDiverged { reason } = &r.kind {
            report.diverged.push(reason.clone());
        }
    }

    // (a) all committed nodes lie on one branch.
    if let Some((&top, _)) = committers.iter().max_by_key(|(id, _)| (lineage.height(id).unwrap_or(0), **id)) {
        for (&node, &who) in &committers {
            if !lineage.extends(&top, &node) {
                report.violations.push(Violation {
                    first: (committers[&top], top),
                    second: (who, node),
                });
            }
        }
    }
    report.safety_ok = report.violations.is_empty() && report.conflicting_commit_signals == 0;

    // (b) same-phase, same-view certificates agree.
    let mut qcs: BTreeMap<(Phase, View), BTreeSet<Digest>> = BTreeMap::new();
    let mut signer_sets: BTreeSet<Vec<ReplicaId>> = BTreeSet::new();
    for r in &trace.records {
        if let TraceKind::QcFormed { phase, view, node, signers } = &r.kind {
            qcs.entry((*phase, *view)).or_default().insert(*node);
            let mut s = signers.clone();
            s.sort();
            s.dedup();
            signer_sets.insert(s);
        }
    }
    report.lemma_basic_ok = qcs.values().all(|nodes| {
        let v: Vec<_> = nodes.iter().collect();
        v.iter()
            .enumerate()
            .all(|(i, a)| v[i + 1..].iter().all(|b| !lineage.conflicts(a, b)))
    });

    // (c) prefix order.
    let all: Vec<&Vec<Digest>> = logs.values().collect();
    report.prefix_order_ok = all.iter().enumerate().all(|(i, a)| {
        all[i + 1..].iter().all(|b| {
            let k = a.len().min(b.len());
            a[..k] == b[..k]
        })
    });

    // (d) and (e): per-replica vote, lock and certificate histories.
    let mut unique = true;
    let mut monotonic = true;
    let mut seen_votes: BTreeSet<(ReplicaId, Phase, View)> = BTreeSet::new();
    let mut last_vote: BTreeMap<(ReplicaId, Phase), View> = BTreeMap::new();
    let mut last_lock: BTreeMap<ReplicaId, View> = BTreeMap::new();
    let mut last_high: BTreeMap<ReplicaId, View> = BTreeMap::new();
    let mut voters: BTreeMap<(View, Digest), BTreeSet<ReplicaId>> = BTreeMap::new();
    let mut lock_support = true;
    for r in trace.records.iter().filter(|r| is_correct(&r.replica)) {
        match &r.kind {
            TraceKind::Vote { phase, view, node, .. } => {
                if !seen_votes.insert((r.replica, *phase, *view)) {
                    unique = false;
                }
                if let Some(prev) = last_vote.insert((r.replica, *phase), *view) {
                    if prev >= *view {
                        monotonic = false;
                    }
                }
                if matches!(phase, Phase::Prepare | Phase::Generic) {
                    voters.entry((*view, *node)).or_default().insert(r.replica);
                }
            }
            TraceKind::Lock { view, node, .. } => {
                if let Some(prev) = last_lock.insert(r.replica, *view) {
                    if prev > *view {
                        monotonic = false;
                    }
                }
                if voters.get(&(*view, *node)).map_or(0, |s| s.len()) < f + 1 {
                    lock_support = false;
                }
            }
            TraceKind::QcHigh { view, .. } => {
                if let Some(prev) = last_high.insert(r.replica, *view) {
                    if prev > *view {
                        monotonic = false;
                    }
                }
            }
            _ => {}
        }
    }
    report.per_view_vote_uniqueness_ok = unique;
    report.monotonic_ok = monotonic;
    report.lock_support_ok = lock_support;

    let sets: Vec<&Vec<ReplicaId>> = signer_sets.iter().collect();
    report.quorum_intersection_ok = sets.iter().enumerate().all(|(i, a)| {
        sets[i + 1..].iter().all(|b| {
            let common: Vec<_> = a.iter().filter(|x| b.contains(x)).collect();
            common.len() > f && common.iter().any(|x| is_correct(x))
        })
    });
    report
}
