//! Pre-GST message scheduling policies beyond plain drop/delay.

use std::collections::{BTreeMap, BTreeSet};

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::crypto::{Digest, ReplicaId};
use crate::pacemaker::PacemakerConfig;
use crate::replica::Tick;
use crate::types::{Message, Params};

/// Decides the fate of each message sent before GST: a delivery delay, or
/// `None` to lose it. Self-addressed messages are routed here too.
pub trait Adversary: Send {
    fn route(&mut self, now: Tick, from: ReplicaId, to: ReplicaId, msg: &Message, rng: &mut ChaCha8Rng) -> Option<Tick>;
}

/// Drops a percentage of messages and delays the rest uniformly, which
/// reorders freely. Self-delivery is immediate.
#[derive(Clone, Copy, Debug)]
pub struct Chaos {
    pub drop_percent: u32,
    pub max_delay: Tick,
}

impl Adversary for Chaos {
    fn route(&mut self, _now: Tick, from: ReplicaId, to: ReplicaId, _msg: &Message, rng: &mut ChaCha8Rng) -> Option<Tick> {
        if from == to {
            return Some(0);
        }
        if rng.gen_range(0..100) < self.drop_percent {
            return None;
        }
        Some(rng.gen_range(1..=self.max_delay.max(1)))
    }
}

/// Fixed delay for every message; self-delivery is immediate.
#[derive(Clone, Copy, Debug)]
pub struct Constant(pub Tick);

impl Adversary for Constant {
    fn route(&mut self, _now: Tick, from: ReplicaId, to: ReplicaId, _msg: &Message, _rng: &mut ChaCha8Rng) -> Option<Tick> {
        Some(if from == to { 0 } else { self.0 })
    }
}

/// Scheduler for the two-phase non-deciding transcript.
///
/// Until it fires, votes from `silenced` are lost. Whenever `faulty`
/// casts the vote that completes a certificate (fewer than n−f correct
/// votes seen for that node), the certificate becomes the secret:
/// every message carrying it is delivered to a single correct replica,
/// the victim, and lost for everyone else. The victim is the first
/// correct sender of such a message, or, for a faulty sender, the first
/// correct recipient that does not lead the next view. Everything else
/// arrives after `delay` ticks.
#[derive(Clone, Debug)]
pub struct Liveless {
    pub params: Params,
    pub pacemaker: PacemakerConfig,
    pub faulty: ReplicaId,
    pub silenced: ReplicaId,
    pub delay: Tick,
    votes: BTreeMap<Digest, BTreeSet<ReplicaId>>,
    secret: Option<Digest>,
    victim: Option<ReplicaId>,
}

impl Liveless {
    pub fn new(params: Params, pacemaker: PacemakerConfig, faulty: ReplicaId, silenced: ReplicaId, delay: Tick) -> Self {
        Liveless {
            params,
            pacemaker,
            faulty,
            silenced,
            delay: delay.max(1),
            votes: BTreeMap::new(),
            secret: None,
            victim: None,
        }
    }

    pub fn secret(&self) -> Option<Digest> {
        self.secret
    }

    fn carries(&self, msg: &Message, secret: &Digest) -> bool {
        let direct = msg.justify.as_ref().is_some_and(|q| q.node == *secret);
        let inside = msg
            .node
            .as_ref()
            .and_then(|n| n.justify.as_ref())
            .is_some_and(|q| q.node == *secret);
        direct || inside
    }
}

impl Adversary for Liveless {
    fn route(&mut self, _now: Tick, from: ReplicaId, to: ReplicaId, msg: &Message, _rng: &mut ChaCha8Rng) -> Option<Tick> {
        let local = if from == to { 0 } else { self.delay };
        if let (Some(part), Some(node)) = (&msg.partial, &msg.node) {
            if part.signer == self.faulty {
                let correct = self.votes.get(&node.id).map_or(0, |s| s.len());
                if correct < self.params.quorum() && self.secret != Some(node.id) {
                    self.secret = Some(node.id);
                    self.victim = None;
                }
            } else {
                if self.secret.is_none() && part.signer == self.silenced {
                    return None;
                }
                self.votes.entry(node.id).or_default().insert(part.signer);
            }
        }
        let Some(secret) = self.secret else {
            return Some(local);
        };
        if !self.carries(msg, &secret) {
            return Some(local);
        }
        let victim = *self.victim.get_or_insert_with(|| {
            if from != self.faulty {
                from
            } else {
                let next = self.pacemaker.leader(msg.view + 1, self.params.n);
                (0..self.params.n)
                    .find(|r| *r != self.faulty && *r != next)
                    .expect("n >= 4 leaves a correct non-leader")
            }
        });
        (to == victim).then_some(local)
    }
}
