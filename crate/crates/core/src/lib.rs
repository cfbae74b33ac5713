//! HotStuff BFT state-machine replication in its basic, chained,
//! event-driven and two-phase forms, driven by a deterministic
//! partial-synchrony network simulator with Byzantine fault injection
//! and an independent safety oracle.

pub mod basic;
pub mod chained;
pub mod crypto;
pub mod event_driven;
pub mod harness;
pub mod oracle;
pub mod pacemaker;
pub mod replica;
pub mod simnet;
pub mod tree;
pub mod types;

pub use crypto::{CryptoProvider, Digest, MockProvider, ReplicaId};
pub use replica::{Replica, ReplicaConfig, TraceKind, TraceRecord};
pub use tree::{Tree, TreeError};
pub use types::{Message, MsgKind, Node, Params, Phase, QuorumCert};
