//! Leader election, timeout backoff and proposal pacing.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::crypto::{hash, ReplicaId};
use crate::replica::Tick;
use crate::types::View;

#[derive(Clone, Copy, PartialEq, Eq, Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum LeaderElection {
    /// `(view / period) mod n`; period 1 rotates every view.
    RoundRobin { period: u64 },
    /// Seeded pseudorandom mapping, identical at every replica.
    Chaos { seed: u64 },
    /// One replica leads every view. Used for scripted adversarial runs.
    Fixed { leader: ReplicaId },
}

impl Default for LeaderElection {
    fn default() -> Self {
        LeaderElection::RoundRobin { period: 1 }
    }
}

impl LeaderElection {
    pub fn leader(&self, view: View, n: usize) -> ReplicaId {
        match *self {
            LeaderElection::RoundRobin { period } => ((view / period.max(1)) % n as u64) as usize,
            LeaderElection::Chaos { seed } => {
                let mut buf = [0u8; 16];
                buf[..8].copy_from_slice(&seed.to_le_bytes());
                buf[8..].copy_from_slice(&view.to_le_bytes());
                let d = hash(&buf);
                let x = u64::from_le_bytes(d.0[..8].try_into().expect("8 bytes"));
                (x % n as u64) as usize
            }
            LeaderElection::Fixed { leader } => leader,
        }
    }
}

#[derive(Clone, Copy, PartialEq, Eq, Debug, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BeatPolicy {
    /// Propose as soon as the previous proposal is certified.
    #[default]
    OnQc,
    /// Propose a fixed number of ticks after entering a led view.
    FixedInterval { ticks: Tick },
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum PacemakerError {
    #[error("base timeout must be positive")]
    ZeroTimeout,
    #[error("backoff factor must be at least 1")]
    BadBackoff,
}

#[derive(Clone, Copy, PartialEq, Eq, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct PacemakerConfig {
    pub election: LeaderElection,
    pub base_timeout: Tick,
    pub backoff_factor: u64,
    pub beat_policy: BeatPolicy,
}

impl Default for PacemakerConfig {
    fn default() -> Self {
        PacemakerConfig {
            election: LeaderElection::default(),
            base_timeout: 40,
            backoff_factor: 2,
            beat_policy: BeatPolicy::OnQc,
        }
    }
}

impl PacemakerConfig {
    pub fn validate(&self) -> Result<(), PacemakerError> {
        if self.base_timeout == 0 {
            return Err(PacemakerError::ZeroTimeout);
        }
        if self.backoff_factor == 0 {
            return Err(PacemakerError::BadBackoff);
        }
        Ok(())
    }

    pub fn leader(&self, view: View, n: usize) -> ReplicaId {
        self.election.leader(view, n)
    }

    pub fn backoff(&self) -> Backoff {
        Backoff::new(self.base_timeout, self.backoff_factor)
    }
}

/// Timeout interval: multiplied on every timeout, reset after a commit.
#[derive(Clone, Copy, PartialEq, Eq, Debug, Hash)]
pub struct Backoff {
    base: Tick,
    factor: u64,
    current: Tick,
}

/// Upper bound on an interval so repeated doubling cannot overflow.
const MAX_INTERVAL: Tick = 1 << 40;

impl Backoff {
    pub fn new(base: Tick, factor: u64) -> Self {
        Backoff {
            base,
            factor,
            current: base,
        }
    }

    pub fn current(&self) -> Tick {
        self.current
    }

    pub fn on_timeout(&mut self) {
        self.current = self.current.saturating_mul(self.factor).min(MAX_INTERVAL);
    }

    pub fn reset(&mut self) {
        self.current = self.base;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_robin_rotates() {
        let e = LeaderElection::RoundRobin { period: 1 };
        let got: Vec<_> = (1..=4).map(|h| e.leader(h, 4)).collect();
        assert_eq!(got, vec![1, 2, 3, 0]);
        let slow = LeaderElection::RoundRobin { period: 3 };
        assert_eq!((0..6).map(|h| slow.leader(h, 4)).collect::<Vec<_>>(), vec![0, 0, 0, 1, 1, 1]);
    }

    #[test]
    fn chaos_is_deterministic_and_in_range() {
        let e = LeaderElection::Chaos { seed: 9 };
        for h in 0..200 {
            let l = e.leader(h, 7);
            assert!(l < 7);
            assert_eq!(l, e.leader(h, 7));
        }
        let distinct: std::collections::BTreeSet<_> = (0..200).map(|h| e.leader(h, 7)).collect();
        assert_eq!(distinct.len(), 7);
    }

    #[test]
    fn backoff_doubles_and_resets() {
        let mut b = Backoff::new(40, 2);
        b.on_timeout();
        assert_eq!(b.current(), 80);
        b.on_timeout();
        b.on_timeout();
        assert_eq!(b.current(), 320);
        b.reset();
        assert_eq!(b.current(), 40);
        for _ in 0..100 {
            b.on_timeout();
        }
        assert_eq!(b.current(), MAX_INTERVAL);
    }

    #[test]
    fn config_validation() {
        let mut c = PacemakerConfig::default();
        assert!(c.validate().is_ok());
        c.base_timeout = 0;
        assert_eq!(c.validate(), Err(PacemakerError::ZeroTimeout));
    }

    proptest::proptest! {
        #[test]
        fn every_replica_leads_within_n_views(n in 1usize..40, start in 0u64..1000) {
            let e = LeaderElection::RoundRobin { period: 1 };
            let seen: std::collections::BTreeSet<_> = (start..start + n as u64).map(|h| e.leader(h, n)).collect();
            proptest::prop_assert_eq!(seen.len(), n);
        }
    }
}
