//! Wire and tree data shared by every protocol variant.

use std::fmt;
use std::sync::{Arc, OnceLock};

use serde::{Deserialize, Serialize};

use crate::crypto::{hash, CryptoProvider, Digest, PartialSig, ReplicaId, ThresholdSig};

pub type View = u64;
pub type Height = u64;

/// Phase tag carried by votes and quorum certificates.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Debug, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Phase {
    Prepare,
    PreCommit,
    Commit,
    Decide,
    Generic,
}

impl Phase {
    fn tag(self) -> u8 {
        match self {
            Phase::Prepare => 1,
            Phase::PreCommit => 2,
            Phase::Commit => 3,
            Phase::Decide => 4,
            Phase::Generic => 5,
        }
    }
}

/// Bytes signed by a vote and certified by a QC over `<type, view, node>`.
pub fn vote_payload(phase: Phase, view: View, node: &Digest) -> Vec<u8> {
    let mut out = Vec::with_capacity(48);
    out.extend_from_slice(b"vote");
    out.push(phase.tag());
    out.extend_from_slice(&view.to_le_bytes());
    out.extend_from_slice(&node.0);
    out
}

/// Protocol parameters: `n` replicas tolerating `f` Byzantine ones.
#[derive(Clone, Copy, PartialEq, Eq, Debug, Serialize, Deserialize)]
pub struct Params {
    pub n: usize,
    pub f: usize,
}

impl Params {
    pub fn new(n: usize, f: usize) -> Self {
        Params { n, f }
    }

    /// `n = 3f + 1` at minimum.
    pub fn is_valid(&self) -> bool {
        self.n >= 3 * self.f + 1 && self.n > 0
    }

    pub fn quorum(&self) -> usize {
        self.n - self.f
    }

    /// Largest `f` tolerated by `n` replicas.
    pub fn max_faults(n: usize) -> usize {
        n.saturating_sub(1) / 3
    }
}

#[derive(Clone, PartialEq, Eq, Hash, Debug)]
pub struct QuorumCert {
    pub qtype: Phase,
    pub view: View,
    pub node: Digest,
    /// `None` only for the hard-coded genesis certificate.
    pub sig: Option<ThresholdSig>,
}

impl QuorumCert {
    pub fn genesis(genesis: Digest) -> Self {
        QuorumCert {
            qtype: Phase::Generic,
            view: 0,
            node: genesis,
            sig: None,
        }
    }

    pub fn is_genesis(&self) -> bool {
        self.sig.is_none()
    }

    pub fn payload(&self) -> Vec<u8> {
        vote_payload(self.qtype, self.view, &self.node)
    }

    pub fn verify(&self, crypto: &dyn CryptoProvider) -> bool {
        match &self.sig {
            None => self.view == 0 && self.node == genesis_id(),
            Some(sig) => crypto.tverify(&self.payload(), sig),
        }
    }

    pub fn signers(&self) -> Vec<ReplicaId> {
        self.sig
            .as_ref()
            .map(|s| s.signers().collect())
            .unwrap_or_default()
    }

    /// Identity used when the certificate is embedded in a node.
    pub fn digest(&self) -> Digest {
        let mut buf = self.payload();
        if let Some(sig) = &self.sig {
            for p in &sig.parts {
                buf.extend_from_slice(&(p.signer as u64).to_le_bytes());
                buf.extend_from_slice(&p.tag.0);
            }
        }
        hash(&buf)
    }
}

/// A tree node. Its id is the hash of `(parent, cmd, justify, height)`.
#[derive(Clone, PartialEq, Eq, Hash)]
pub struct Node {
    pub id: Digest,
    pub parent: Option<Digest>,
    pub cmd: Vec<u8>,
    pub justify: Option<QuorumCert>,
    pub height: Height,
}

impl fmt::Debug for Node {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "Node({:?} h{} parent={:?} justify={:?} cmd={})",
            self.id,
            self.height,
            self.parent,
            self.justify.as_ref().map(|q| (q.view, q.node)),
            String::from_utf8_lossy(&self.cmd)
        )
    }
}

const GENESIS_CMD: &[u8] = b"genesis";

pub fn genesis_id() -> Digest {
    static ID: OnceLock<Digest> = OnceLock::new();
    *ID.get_or_init(|| node_id(None, GENESIS_CMD, None, 0))
}

fn node_id(parent: Option<&Digest>, cmd: &[u8], justify: Option<&QuorumCert>, height: Height) -> Digest {
    let mut buf = Vec::with_capacity(112 + cmd.len());
    buf.extend_from_slice(b"node");
    match parent {
        Some(p) => {
            buf.push(1);
            buf.extend_from_slice(&p.0);
        }
        None => buf.push(0),
    }
    buf.extend_from_slice(&(cmd.len() as u64).to_le_bytes());
    buf.extend_from_slice(cmd);
    match justify {
        Some(q) => {
            buf.push(1);
            buf.extend_from_slice(&q.digest().0);
        }
        None => buf.push(0),
    }
    buf.extend_from_slice(&height.to_le_bytes());
    hash(&buf)
}

impl Node {
    pub fn new(parent: Digest, cmd: Vec<u8>, justify: Option<QuorumCert>, height: Height) -> Self {
        let id = node_id(Some(&parent), &cmd, justify.as_ref(), height);
        Node {
            id,
            parent: Some(parent),
            cmd,
            justify,
            height,
        }
    }

    pub fn genesis() -> Self {
        Node {
            id: genesis_id(),
            parent: None,
            cmd: GENESIS_CMD.to_vec(),
            justify: None,
            height: 0,
        }
    }

    pub fn is_genesis(&self) -> bool {
        self.parent.is_none()
    }

    /// Blank padding node: no command and no certificate.
    pub fn is_dummy(&self) -> bool {
        self.parent.is_some() && self.justify.is_none() && self.cmd.is_empty()
    }

    /// Recomputes the id from the contents.
    pub fn id_matches(&self) -> bool {
        self.id == node_id(self.parent.as_ref(), &self.cmd, self.justify.as_ref(), self.height)
    }
}

#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Debug, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MsgKind {
    NewView,
    Prepare,
    PreCommit,
    Commit,
    Decide,
    Generic,
}

impl MsgKind {
    pub fn phase(self) -> Option<Phase> {
        match self {
            MsgKind::NewView => None,
            MsgKind::Prepare => Some(Phase::Prepare),
            MsgKind::PreCommit => Some(Phase::PreCommit),
            MsgKind::Commit => Some(Phase::Commit),
            MsgKind::Decide => Some(Phase::Decide),
            MsgKind::Generic => Some(Phase::Generic),
        }
    }
}

/// A protocol message. Votes carry `partial`; leader broadcasts and
/// NEW-VIEW carry `justify`. `ancestry` ships the sender's uncommitted
/// branch suffix (oldest first) so a lagging receiver can attach `node`.
#[derive(Clone, Debug)]
pub struct Message {
    pub kind: MsgKind,
    pub view: View,
    pub node: Option<Arc<Node>>,
    pub justify: Option<QuorumCert>,
    pub partial: Option<PartialSig>,
    pub ancestry: Vec<Arc<Node>>,
}

impl Message {
    pub fn new(kind: MsgKind, view: View) -> Self {
        Message {
            kind,
            view,
            node: None,
            justify: None,
            partial: None,
            ancestry: Vec::new(),
        }
    }

    pub fn with_node(mut self, node: Arc<Node>) -> Self {
        self.node = Some(node);
        self
    }

    pub fn with_justify(mut self, qc: Option<QuorumCert>) -> Self {
        self.justify = qc;
        self
    }

    pub fn with_partial(mut self, part: PartialSig) -> Self {
        self.partial = Some(part);
        self
    }

    pub fn with_ancestry(mut self, ancestry: Vec<Arc<Node>>) -> Self {
        self.ancestry = ancestry;
        self
    }

    pub fn is_vote(&self) -> bool {
        self.partial.is_some()
    }

    /// Partial signatures plus combined signatures carried. The hard-coded
    /// genesis certificate carries no signature and counts zero.
    pub fn authenticators(&self) -> u64 {
        let partial = self.partial.is_some() as u64;
        let qc = self.justify.as_ref().is_some_and(|q| !q.is_genesis()) as u64;
        partial + qc
    }
}
