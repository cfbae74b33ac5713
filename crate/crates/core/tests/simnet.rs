use std::collections::{BTreeMap, BTreeSet};

use hotstuff::crypto::Digest;
use hotstuff::harness::{run_scenario, ByzantineSpec, Protocol, Scenario, StopSpec};
use hotstuff::replica::TraceKind;
use hotstuff::simnet::{Behavior, NetConfig, PreGst, RunTrace};

fn scenario(protocol: Protocol, seed: u64) -> Scenario {
    Scenario {
        protocol,
        seed,
        stop: StopSpec {
            decisions: None,
            views: Some(12),
            ticks: 200_000,
        },
        ..Scenario::default()
    }
}

fn trace(s: &Scenario) -> RunTrace {
    run_scenario(s).expect("scenario runs").trace
}

const ALL: [Protocol; 4] = [Protocol::Basic, Protocol::Chained, Protocol::Event, Protocol::TwoPhase];

#[test]
fn same_seed_same_trace() {
    for p in ALL {
        let mut s = scenario(p, 42);
        s.net = NetConfig {
            delta: 10,
            gst: 150,
            pre_gst: PreGst::Delay { max: 60 },
        };
        let a = serde_json::to_string(&trace(&s)).unwrap();
        let b = serde_json::to_string(&trace(&s)).unwrap();
        assert_eq!(a, b, "{} is not deterministic", p.name());
    }
}

#[test]
fn different_seeds_differ_under_random_delays() {
    let a = scenario(Protocol::Event, 1);
    let b = scenario(Protocol::Event, 2);
    assert_ne!(
        serde_json::to_string(&trace(&a).records).unwrap(),
        serde_json::to_string(&trace(&b).records).unwrap()
    );
}

#[test]
fn drop_policy_loses_everything_before_gst() {
    for p in ALL {
        let mut s = scenario(p, 3);
        s.net = NetConfig {
            delta: 10,
            gst: 300,
            pre_gst: PreGst::Drop,
        };
        let t = trace(&s);
        for r in &t.records {
            if let TraceKind::Deliver { from, .. } = r.kind {
                if from != r.replica {
                    assert!(r.at >= s.net.gst, "{}: delivery at {} before GST", p.name(), r.at);
                }
            }
        }
        assert!(t.decisions() > 0, "{} never recovers after GST", p.name());
    }
}

#[test]
fn deliveries_after_gst_respect_delta() {
    for p in ALL {
        let mut s = scenario(p, 11);
        s.net = NetConfig {
            delta: 7,
            gst: 100,
            pre_gst: PreGst::Delay { max: 80 },
        };
        let t = trace(&s);
        type Key = (usize, usize, String, u64, Option<Digest>);
        let mut sends: BTreeMap<Key, Vec<u64>> = BTreeMap::new();
        for r in &t.records {
            if let TraceKind::Send { to, kind, view, node, .. } = &r.kind {
                sends.entry((r.replica, *to, format!("{kind:?}"), *view, *node)).or_default().push(r.at);
            }
        }
        for r in &t.records {
            if let TraceKind::Deliver { from, kind, view, node, .. } = &r.kind {
                // Anything sent before GST may land as late as gst + delta.
                if r.at <= s.net.gst + s.net.delta {
                    continue;
                }
                let key = (*from, r.replica, format!("{kind:?}"), *view, *node);
                let ok = sends
                    .get(&key)
                    .is_some_and(|ts| ts.iter().any(|&at| at <= r.at && r.at - at <= s.net.delta));
                assert!(ok, "{}: delivery at {} has no send within delta", p.name(), r.at);
            }
        }
    }
}

/// Nodes first shipped by `who` that share a parent and height with
/// another node it shipped.
fn twins(t: &RunTrace, who: usize) -> BTreeSet<Digest> {
    let mut groups: BTreeMap<(Digest, u64), BTreeSet<Digest>> = BTreeMap::new();
    for r in &t.records {
        if let TraceKind::NodeSeen { node, parent, height, .. } = &r.kind {
            if r.replica == who {
                groups.entry((*parent, *height)).or_default().insert(*node);
            }
        }
    }
    groups.into_values().filter(|g| g.len() > 1).flatten().collect()
}

#[test]
fn equivocated_proposals_never_certify() {
    for p in ALL {
        for seed in 0..5 {
            let mut s = scenario(p, seed);
            s.byzantine = vec![ByzantineSpec {
                replica: 1,
                behavior: Behavior::Equivocate,
            }];
            let out = run_scenario(&s).unwrap();
            let t = &out.trace;
            let split = twins(t, 1);
            assert!(!split.is_empty(), "{}: leader 1 never equivocated", p.name());
            for r in &t.records {
                if let TraceKind::QcFormed { node, .. } = &r.kind {
                    if t.is_correct(r.replica) {
                        assert!(!split.contains(node), "{}: equivocated node certified", p.name());
                    }
                }
            }
            assert!(out.audit.passed(), "{}: {:?}", p.name(), out.audit.failures());
        }
    }
}

#[test]
fn byzantine_budget_is_enforced() {
    let mut s = scenario(Protocol::Event, 0);
    s.byzantine = vec![
        ByzantineSpec {
            replica: 0,
            behavior: Behavior::Silent,
        },
        ByzantineSpec {
            replica: 1,
            behavior: Behavior::Silent,
        },
    ];
    assert!(run_scenario(&s).is_err());
}
