//! The step-function contract every replica implements, plus the trace
//! records replicas and the simulator emit.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::crypto::{CryptoProvider, Digest, ReplicaId};
use crate::pacemaker::PacemakerConfig;
use crate::tree::{Fetch, Tree};
use crate::types::{Height, Message, MsgKind, Node, Params, Phase, QuorumCert, View};

pub type Tick = u64;

/// Timers a replica can arm. Stale timers are ignored by their owner.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Debug, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Timer {
    /// Progress deadline for a view.
    View(View),
    /// Fixed-interval proposal beat for a view.
    Beat(View),
    /// Reserved for wrappers around a replica; replicas ignore it.
    Aux(u64),
}

#[derive(Clone, Debug)]
pub enum Output {
    Send { to: ReplicaId, msg: Message },
    Broadcast { msg: Message },
    SetTimer { after: Tick, timer: Timer },
    Trace(TraceKind),
}

/// One observable event. Replica-emitted kinds describe protocol decisions;
/// `Send`, `Deliver` and `NodeSeen` are recorded by the simulator.
#[derive(Clone, PartialEq, Eq, Debug, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "kebab-case")]
pub enum TraceKind {
    Send {
        to: ReplicaId,
        kind: MsgKind,
        view: View,
        node: Option<Digest>,
        auth: u64,
    },
    Deliver {
        from: ReplicaId,
        kind: MsgKind,
        view: View,
        node: Option<Digest>,
        auth: u64,
    },
    NodeSeen {
        node: Digest,
        parent: Digest,
        height: Height,
        justify: Option<Digest>,
        cmd: String,
    },
    Vote {
        phase: Phase,
        view: View,
        node: Digest,
        height: Height,
    },
    QcFormed {
        phase: Phase,
        view: View,
        node: Digest,
        signers: Vec<ReplicaId>,
    },
    Lock {
        view: View,
        node: Digest,
        height: Height,
    },
    QcHigh {
        view: View,
        node: Digest,
        height: Height,
    },
    Propose {
        view: View,
        node: Digest,
        height: Height,
    },
    /// A command executed, in execution order. `view` is the view whose
    /// message triggered the commit.
    Commit {
        node: Digest,
        height: Height,
        cmd: String,
        view: View,
    },
    ViewEnter {
        view: View,
        interval: Tick,
    },
    Timeout {
        view: View,
    },
    /// A commit that does not extend what was already executed.
    ConflictingCommit {
        node: Digest,
        executed: Digest,
    },
    /// A scripted adversary could not follow its script.
    ScenarioDiverged {
        reason: String,
    },
}

#[derive(Clone, PartialEq, Eq, Debug, Serialize, Deserialize)]
pub struct TraceRecord {
    pub at: Tick,
    pub replica: ReplicaId,
    #[serde(flatten)]
    pub kind: TraceKind,
}

/// Per-step context handed to a replica: current time, an output buffer,
/// and an optional lookup for nodes the replica has not received.
pub struct Ctx<'a> {
    pub now: Tick,
    pub out: Vec<Output>,
    pub fetch: Option<Fetch<'a>>,
}

impl<'a> Ctx<'a> {
    pub fn new(now: Tick) -> Self {
        Ctx {
            now,
            out: Vec::new(),
            fetch: None,
        }
    }

    pub fn with_fetch(now: Tick, fetch: Fetch<'a>) -> Self {
        Ctx {
            now,
            out: Vec::new(),
            fetch: Some(fetch),
        }
    }

    pub fn send(&mut self, to: ReplicaId, msg: Message) {
        self.out.push(Output::Send { to, msg });
    }

    pub fn broadcast(&mut self, msg: Message) {
        self.out.push(Output::Broadcast { msg });
    }

    pub fn set_timer(&mut self, after: Tick, timer: Timer) {
        self.out.push(Output::SetTimer { after, timer });
    }

    pub fn trace(&mut self, kind: TraceKind) {
        self.out.push(Output::Trace(kind));
    }
}

/// Static configuration shared by all protocol variants.
#[derive(Clone, Debug)]
pub struct ReplicaConfig {
    pub me: ReplicaId,
    pub params: Params,
    pub crypto: Arc<dyn CryptoProvider>,
    pub pacemaker: PacemakerConfig,
    /// How many ancestors a proposal ships for lagging receivers.
    pub ancestry_depth: usize,
}

impl ReplicaConfig {
    pub fn leader(&self, view: View) -> ReplicaId {
        self.pacemaker.leader(view, self.params.n)
    }

    /// Command a leader proposes; client handling is out of scope, so
    /// commands are synthesized from the proposer and view.
    pub fn command(&self, view: View) -> Vec<u8> {
        format!("r{}v{}", self.me, view).into_bytes()
    }
}

/// The pure step-function contract. The simulator owns time and delivery.
pub trait Replica: Send {
    fn id(&self) -> ReplicaId;
    fn start(&mut self, ctx: &mut Ctx);
    fn on_message(&mut self, from: ReplicaId, msg: &Message, ctx: &mut Ctx);
    fn on_timer(&mut self, timer: Timer, ctx: &mut Ctx);
    fn tree(&self) -> &Tree;
    /// Highest executed node.
    fn executed(&self) -> Digest;
    fn clone_box(&self) -> Box<dyn Replica>;
    /// Digest of the state that decides this replica's future votes, locks
    /// and commits, for state-space deduplication. Identity, tree contents
    /// and proposer-side bookkeeping are excluded: proposals ship their
    /// ancestry, and a replica that never leads never uses the rest.
    fn fingerprint(&self) -> Digest;
}

impl Clone for Box<dyn Replica> {
    fn clone(&self) -> Self {
        self.clone_box()
    }
}

/// Adds a message's node (with its shipped ancestry) and its certificate's
/// node to `tree`. Returns false if either cannot be attached.
pub fn ingest(tree: &mut Tree, msg: &Message, ctx: &Ctx) -> bool {
    if let Some(node) = &msg.node {
        if tree.attach(node, &msg.ancestry, ctx.fetch).is_err() {
            return false;
        }
    }
    if let Some(qc) = &msg.justify {
        if !ensure_node(tree, &qc.node, ctx) {
            return false;
        }
    }
    true
}

/// Makes `id` present in the tree, by fetching if needed.
pub fn ensure_node(tree: &mut Tree, id: &Digest, ctx: &Ctx) -> bool {
    if tree.contains(id) {
        return true;
    }
    let Some(fetched) = ctx.fetch.and_then(|f| f(id)) else {
        return false;
    };
    tree.attach(&fetched, &[], ctx.fetch).is_ok()
}

/// Ancestry shipped with `node`: up to `depth` of its ancestors.
pub fn ancestry_of(tree: &Tree, node: &Node, depth: usize) -> Vec<Arc<Node>> {
    match node.parent {
        Some(p) => tree.suffix(&p, depth),
        None => Vec::new(),
    }
}

/// Executes the not-yet-executed part of `target`'s branch above
/// `executed`, emitting one `Commit` per non-blank node. Returns the new
/// executed tip.
pub fn execute_branch(tree: &Tree, executed: Digest, target: &Digest, view: View, ctx: &mut Ctx) -> Digest {
    let exec_height = tree.get(&executed).map(|n| n.height).unwrap_or(0);
    let Some(t) = tree.get(target) else {
        return executed;
    };
    if tree.conflicts(target, &executed) {
        ctx.trace(TraceKind::ConflictingCommit {
            node: *target,
            executed,
        });
    }
    if t.height <= exec_height {
        return executed;
    }
    for n in tree.branch(target) {
        if n.height <= exec_height || n.is_dummy() || n.is_genesis() {
            continue;
        }
        ctx.trace(TraceKind::Commit {
            node: n.id,
            height: n.height,
            cmd: String::from_utf8_lossy(&n.cmd).into_owned(),
            view,
        });
    }
    *target
}

/// Convenience for QC-carrying messages: attaches the certified node and
/// its ancestry so a receiver can resolve it.
pub fn qc_message(tree: &Tree, kind: MsgKind, view: View, qc: &QuorumCert, depth: usize) -> Message {
    let mut msg = Message::new(kind, view).with_justify(Some(qc.clone()));
    if let Some(node) = tree.get(&qc.node) {
        if !node.is_genesis() {
            msg.ancestry = ancestry_of(tree, node, depth);
            msg.node = Some(node.clone());
        }
    }
    msg
}
