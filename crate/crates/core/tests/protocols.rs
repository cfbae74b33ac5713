use hotstuff::harness::{run_scenario, ByzantineSpec, Protocol, Scenario, StopSpec};
use hotstuff::simnet::{Behavior, NetConfig, PreGst, VotePattern};
use hotstuff::TraceKind;
use proptest::prelude::*;

const ALL: [Protocol; 4] = [Protocol::Basic, Protocol::Chained, Protocol::Event, Protocol::TwoPhase];

fn ideal(protocol: Protocol, views: u64) -> Scenario {
    Scenario {
        protocol,
        seed: 7,
        net: NetConfig {
            delta: 10,
            gst: 0,
            pre_gst: PreGst::Drop,
        },
        stop: StopSpec {
            decisions: None,
            views: Some(views),
            ticks: 1_000_000,
        },
        ..Scenario::default()
    }
}

#[test]
fn every_protocol_decides_on_an_ideal_network() {
    for p in ALL {
        let out = run_scenario(&ideal(p, 20)).unwrap();
        assert!(out.audit.passed(), "{}: {:?}", p.name(), out.audit.failures());
        assert!(out.metrics.decisions >= 15, "{}: {} decisions", p.name(), out.metrics.decisions);
    }
}

#[test]
fn pipelined_protocols_commit_three_views_after_proposal() {
    for p in [Protocol::Chained, Protocol::Event] {
        let out = run_scenario(&ideal(p, 20)).unwrap();
        let lat = &out.metrics.commit_latency_views;
        assert_eq!(lat.len(), 1, "{}: {lat:?}", p.name());
        assert_eq!(lat[0].views, 3);
    }
}

#[test]
fn two_phase_commits_one_view_sooner() {
    let out = run_scenario(&ideal(Protocol::TwoPhase, 20)).unwrap();
    assert!(out.metrics.commit_latency_views.iter().all(|b| b.views == 2));
}

#[test]
fn correct_replicas_execute_the_same_log() {
    for p in ALL {
        let out = run_scenario(&ideal(p, 16)).unwrap();
        let logs: Vec<Vec<_>> = out
            .trace
            .correct()
            .map(|r| {
                out.trace
                    .executed(r)
                    .iter()
                    .filter_map(|t| match &t.kind {
                        TraceKind::Commit { node, .. } => Some(*node),
                        _ => None,
                    })
                    .collect()
            })
            .collect();
        for a in &logs {
            for b in &logs {
                let k = a.len().min(b.len());
                assert_eq!(a[..k], b[..k], "{}", p.name());
            }
        }
    }
}

#[test]
fn event_driven_rotation_adds_no_viewchange_authenticators() {
    for n in [4, 7] {
        let mut s = ideal(Protocol::Event, 16);
        s.replicas = n;
        s.faults = (n - 1) / 3;
        assert_eq!(run_scenario(&s).unwrap().metrics.extra_viewchange_authenticators, 0);
    }
}

#[test]
fn basic_pays_for_new_view_messages() {
    let out = run_scenario(&ideal(Protocol::Basic, 12)).unwrap();
    let m = &out.metrics;
    assert!(m.extra_viewchange_authenticators > 0);
    // At most one certificate per NEW-VIEW, n of them per view change.
    assert!(m.extra_viewchange_authenticators <= (m.n as u64) * m.views_elapsed);
}

fn behavior(i: u8) -> Behavior {
    match i % 3 {
        0 => Behavior::Silent,
        1 => Behavior::Equivocate,
        _ => Behavior::WithholdVotes {
            pattern: VotePattern::Alternate,
        },
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn audit_passes_with_one_byzantine_replica(
        p in 0usize..4,
        seed in any::<u64>(),
        who in 0usize..4,
        b in any::<u8>(),
        gst in 0u64..400,
    ) {
        let mut s = ideal(ALL[p], 14);
        s.seed = seed;
        s.net = NetConfig { delta: 10, gst, pre_gst: PreGst::Delay { max: 120 } };
        s.byzantine = vec![ByzantineSpec { replica: who, behavior: behavior(b) }];
        let out = run_scenario(&s).unwrap();
        prop_assert!(out.audit.passed(), "{:?}", out.audit.failures());
    }

    #[test]
    fn seven_replicas_stay_safe_under_chaos(seed in any::<u64>(), p in 0usize..4) {
        let mut s = ideal(ALL[p], 10);
        s.replicas = 7;
        s.faults = 2;
        s.seed = seed;
        s.net = NetConfig { delta: 10, gst: 200, pre_gst: PreGst::Delay { max: 150 } };
        s.byzantine = vec![
            ByzantineSpec { replica: 1, behavior: Behavior::Equivocate },
            ByzantineSpec { replica: 4, behavior: Behavior::Silent },
        ];
        let out = run_scenario(&s).unwrap();
        prop_assert!(out.audit.passed(), "{:?}", out.audit.failures());
    }
}
