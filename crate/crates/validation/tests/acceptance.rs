//! End-to-end acceptance checks. Prints one PASS/FAIL line per criterion
//! and exits non-zero if any fails.

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::time::Instant;

use hotstuff::harness::{
    linearity_report, liveless_scenario, run_scenario, AdversarySpec, ByzantineSpec, Protocol, Scenario, StopSpec,
};
use hotstuff::oracle::{explore, ExploreBound, ExploreProtocol};
use hotstuff::pacemaker::{LeaderElection, PacemakerConfig};
use hotstuff::simnet::{Behavior, NetConfig, PreGst, RunTrace, VotePattern};
use hotstuff::TraceKind;
use rayon::prelude::*;

const PROTOCOLS: [Protocol; 4] = [Protocol::Basic, Protocol::Chained, Protocol::Event, Protocol::TwoPhase];
const THREE_PHASE: [Protocol; 3] = [Protocol::Basic, Protocol::Chained, Protocol::Event];

const SAFETY_SEEDS: u64 = 10_000;
const EXPLORE_VIEWS: u64 = 4;
const GST: u64 = 100;
const DELTA: u64 = 10;
const TICKS: u64 = 1_000_000;
/// Four phases of two hops each.
const T_F: u64 = 8 * DELTA;
const LIVENESS_SEEDS: u64 = 300;
const LIVELESS_VIEWS: u64 = 20;
const PIPELINE_LATENCY: u64 = 3;
const FIRST_COMMANDS: usize = 10;
const LINEAR_NS: [usize; 4] = [4, 7, 16, 31];
const MAX_RESIDUAL: f64 = 0.10;
const REPEATS: usize = 3;

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: String) -> Verdict {
    Verdict { pass, detail }
}

fn main() {
    let criteria: [(&str, fn() -> Verdict); 7] = [
        ("randomized safety", randomized_safety),
        ("exhaustive safety", exhaustive_safety),
        ("liveness after GST", liveness_after_gst),
        ("two-phase livelessness", two_phase_livelessness),
        ("pipelining latency", pipelining_latency),
        ("linear communication", linear_communication),
        ("determinism", determinism),
    ];
    // Numeric arguments pick a subset, e.g. `-- 3 5`; anything else is ignored.
    let only: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut passed = 0;
    let mut ran = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        if !only.is_empty() && !only.contains(&(i + 1)) {
            continue;
        }
        ran += 1;
        let start = Instant::now();
        let v = check();
        passed += v.pass as usize;
        println!(
            "criterion {} {} {}: {} ({:.1}s)",
            i + 1,
            if v.pass { "PASS" } else { "FAIL" },
            name,
            v.detail,
            start.elapsed().as_secs_f64()
        );
    }
    println!("acceptance: {passed}/{ran} criteria passed");
    if passed != ran {
        std::process::exit(1);
    }
}

fn stop(views: u64) -> StopSpec {
    StopSpec {
        decisions: None,
        views: Some(views),
        ticks: TICKS,
    }
}

fn ideal(protocol: Protocol, n: usize, seed: u64, views: u64) -> Scenario {
    Scenario {
        protocol,
        replicas: n,
        faults: (n - 1) / 3,
        seed,
        // Every message takes exactly delta, so no proposal overtakes another.
        net: NetConfig {
            delta: DELTA,
            gst: TICKS,
            pre_gst: PreGst::Adversary,
        },
        adversary: Some(AdversarySpec::Constant { delay: DELTA }),
        pacemaker: PacemakerConfig {
            election: LeaderElection::RoundRobin { period: 1 },
            ..PacemakerConfig::default()
        },
        stop: stop(views),
        ..Scenario::default()
    }
}

fn chaos_before_gst(protocol: Protocol, seed: u64, gst: u64, drop_percent: u32, max_delay: u64) -> Scenario {
    Scenario {
        net: NetConfig {
            delta: DELTA,
            gst,
            pre_gst: PreGst::Adversary,
        },
        adversary: Some(AdversarySpec::Chaos { drop_percent, max_delay }),
        ..ideal(protocol, 4, seed, 16)
    }
}

fn randomized_safety() -> Verdict {
    let behaviors = [
        Behavior::Silent,
        Behavior::Equivocate,
        Behavior::WithholdVotes {
            pattern: VotePattern::Alternate,
        },
    ];
    let jobs: Vec<(Protocol, u64)> = PROTOCOLS
        .iter()
        .flat_map(|&p| (0..SAFETY_SEEDS).map(move |s| (p, s)))
        .collect();
    let results: Vec<(Protocol, u64, Result<Vec<&'static str>, String>)> = jobs
        .par_iter()
        .map(|&(p, seed)| {
            let mut s = chaos_before_gst(p, seed, 150 + seed % 200, 25, 120);
            s.byzantine = vec![ByzantineSpec {
                replica: (seed % 4) as usize,
                behavior: behaviors[(seed % 3) as usize].clone(),
            }];
            let r = run_scenario(&s).map(|o| o.audit.failures()).map_err(|e| e.to_string());
            (p, seed, r)
        })
        .collect();
    let clean = results.iter().filter(|r| matches!(&r.2, Ok(f) if f.is_empty())).count();
    let total = results.len();
    let mut detail = format!(
        "{clean}/{total} audits clean ({} protocols x {SAFETY_SEEDS} seeds, one Byzantine replica)",
        PROTOCOLS.len()
    );
    if let Some((p, seed, r)) = results.iter().find(|r| !matches!(&r.2, Ok(f) if f.is_empty())) {
        detail.push_str(&format!("; first failure {} seed {seed}: {r:?}", p.name()));
    }
    verdict(clean == total, detail)
}

fn exhaustive_safety() -> Verdict {
    let protocols = [
        ExploreProtocol::Event,
        ExploreProtocol::TwoPhase,
        ExploreProtocol::Chained,
        ExploreProtocol::VheightNegative,
        ExploreProtocol::DirectParentNegative,
    ];
    let reports: Vec<_> = protocols
        .par_iter()
        .map(|&p| {
            let bound = ExploreBound {
                max_views: EXPLORE_VIEWS,
                ..ExploreBound::new(p)
            };
            (p, explore(bound))
        })
        .collect();
    let mut pass = true;
    let mut parts = Vec::new();
    for (p, r) in reports {
        match r {
            Ok(r) => {
                let ok = if p.is_negative() {
                    r.safety_violations > 0
                } else {
                    r.safety_violations == 0 && r.audit_failures == 0
                };
                pass &= ok;
                parts.push(format!(
                    "{p:?} {} violations over {} states{}",
                    r.safety_violations,
                    r.states,
                    if ok { "" } else if p.is_negative() { " (expected >= 1)" } else { " (expected 0)" }
                ));
            }
            Err(e) => {
                pass = false;
                parts.push(format!("{p:?} error: {e}"));
            }
        }
    }
    verdict(pass, format!("max_views={EXPLORE_VIEWS}, width 2: {}", parts.join("; ")))
}

/// Post-GST timer windows per view: replica -> (entered, expires).
fn windows(trace: &RunTrace) -> BTreeMap<u64, BTreeMap<usize, (u64, u64)>> {
    let mut out: BTreeMap<u64, BTreeMap<usize, (u64, u64)>> = BTreeMap::new();
    for r in &trace.records {
        if let TraceKind::ViewEnter { view, interval } = r.kind {
            if trace.is_correct(r.replica) {
                out.entry(view).or_default().insert(r.replica, (r.at, r.at + interval));
            }
        }
    }
    out
}

/// Start of the first post-GST stretch of at least `T_F` ticks during
/// which every correct replica's timer for the same view is running.
fn synchronized_at(trace: &RunTrace, gst: u64) -> Option<u64> {
    let correct = trace.correct().count();
    windows(trace).values().find_map(|m| {
        if m.len() < correct {
            return None;
        }
        let start = m.values().map(|w| w.0).max()?.max(gst);
        let end = m.values().map(|w| w.1).min()?;
        (end >= start + T_F).then_some(start)
    })
}

fn liveness_after_gst() -> Verdict {
    let jobs: Vec<(Protocol, u64)> = THREE_PHASE
        .iter()
        .flat_map(|&p| (0..LIVENESS_SEEDS).map(move |s| (p, s)))
        .collect();
    let results: Vec<_> = jobs
        .par_iter()
        .map(|&(p, seed)| {
            let mut s = chaos_before_gst(p, seed, GST, 30, 100);
            s.stop = stop(30);
            let out = run_scenario(&s).expect("scenario is valid");
            let first = out.trace.records.iter().find_map(|r| match r.kind {
                TraceKind::Commit { .. } if r.at >= GST && out.trace.is_correct(r.replica) => Some(r.at),
                _ => None,
            });
            (p, seed, first, synchronized_at(&out.trace, GST))
        })
        .collect();
    let mut pass = true;
    let mut parts = Vec::new();
    for p in THREE_PHASE {
        let mine: Vec<_> = results.iter().filter(|r| r.0 == p).collect();
        let undecided = mine.iter().filter(|r| r.2.is_none()).count();
        let synced: Vec<_> = mine.iter().filter_map(|r| Some((r.2?, r.3?))).collect();
        let late = synced.iter().filter(|(d, s)| *d > s + T_F).count();
        let worst = synced.iter().map(|(d, s)| *d as i64 - *s as i64).max();
        let ok = undecided == 0 && late == 0 && !synced.is_empty();
        pass &= ok;
        parts.push(format!(
            "{} {} runs, {} with overlap >= T_f, {late} late, {undecided} undecided, worst {}",
            p.name(),
            mine.len(),
            synced.len(),
            worst.map_or("n/a".into(), |w| format!("{w:+} ticks"))
        ));
    }
    verdict(pass, format!("gst={GST} delta={DELTA} T_f={T_F}: {}", parts.join("; ")))
}

fn two_phase_livelessness() -> Verdict {
    let views = LIVELESS_VIEWS + 2;
    let two = run_scenario(&liveless_scenario(Protocol::TwoPhase, views)).expect("valid");
    let three = run_scenario(&liveless_scenario(Protocol::Event, views)).expect("valid");
    let m2 = &two.metrics;
    let m3 = &three.metrics;
    let pass = m2.decisions == 0
        && m2.views_elapsed >= LIVELESS_VIEWS
        && m3.decisions >= 1
        && two.audit.passed()
        && three.audit.passed();
    verdict(
        pass,
        format!(
            "two-phase {} decisions over {} views; three-phase {} decisions over {} views",
            m2.decisions, m2.views_elapsed, m3.decisions, m3.views_elapsed
        ),
    )
}

fn pipelining_latency() -> Verdict {
    let mut pass = true;
    let mut parts = Vec::new();
    for p in [Protocol::Chained, Protocol::Event] {
        let mut checked = 0;
        let mut off = 0;
        for seed in 0..20 {
            let out = run_scenario(&ideal(p, 4, seed, 20)).expect("valid");
            let proposed: BTreeMap<_, _> = out
                .trace
                .records
                .iter()
                .filter_map(|r| match r.kind {
                    TraceKind::Propose { node, view, .. } => Some((node, view)),
                    _ => None,
                })
                .collect();
            for r in out.trace.correct() {
                let log = out.trace.executed(r);
                if log.len() < FIRST_COMMANDS {
                    off += 1;
                }
                for c in log.iter().take(FIRST_COMMANDS) {
                    if let TraceKind::Commit { node, view, .. } = c.kind {
                        checked += 1;
                        if proposed.get(&node).map(|v| view - v) != Some(PIPELINE_LATENCY) {
                            off += 1;
                        }
                    }
                }
            }
        }
        pass &= off == 0 && checked > 0;
        parts.push(format!("{} {checked} commits checked, {off} off", p.name()));
    }
    verdict(
        pass,
        format!("first {FIRST_COMMANDS} commands commit {PIPELINE_LATENCY} views after proposal: {}", parts.join("; ")),
    )
}

fn linear_communication() -> Verdict {
    let runs: Vec<_> = LINEAR_NS
        .par_iter()
        .map(|&n| {
            let m = run_scenario(&ideal(Protocol::Event, n, 1, 20)).expect("valid").metrics;
            (n, m.mean_authenticators_per_view, m.extra_viewchange_authenticators)
        })
        .collect();
    let points: Vec<_> = runs.iter().map(|r| (r.0, r.1)).collect();
    let extras: u64 = runs.iter().map(|r| r.2).sum();
    match linearity_report(&points) {
        Ok(fit) => {
            let per_n: Vec<_> = points.iter().map(|(n, a)| format!("n={n}: {a:.1}")).collect();
            verdict(
                fit.is_linear(MAX_RESIDUAL) && extras == 0,
                format!(
                    "per-view authenticators {}; slope {:.3}, max residual {:.2}% (limit {:.0}%); extra view-change authenticators {extras}",
                    per_n.join(", "),
                    fit.slope,
                    fit.max_residual_ratio * 100.0,
                    MAX_RESIDUAL * 100.0
                ),
            )
        }
        Err(e) => verdict(false, e.to_string()),
    }
}

fn determinism() -> Verdict {
    let dir = tempfile::tempdir().expect("temp dir");
    let fixture = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../scenarios/pre-gst-chaos.json");
    let invocations: Vec<Vec<String>> = vec![
        vec!["--protocol", "event", "--replicas", "4", "--views", "20", "--seed", "7"],
        vec!["--protocol", "basic", "--seed", "3", "--output", "csv"],
        vec!["--scenario", fixture.to_str().expect("utf-8 path"), "--protocol", "chained"],
    ]
    .into_iter()
    .map(|v| v.into_iter().map(String::from).collect())
    .collect();
    let mut identical = 0;
    let mut problems = Vec::new();
    for (i, flags) in invocations.iter().enumerate() {
        let mut outputs = Vec::new();
        for k in 0..REPEATS {
            let report = dir.path().join(format!("{i}-{k}.out"));
            let trace = dir.path().join(format!("{i}-{k}.trace"));
            let mut args = vec!["hotstuff-sim".to_string()];
            args.extend(flags.iter().cloned());
            args.extend(["--out".into(), report.display().to_string()]);
            args.extend(["--trace".into(), trace.display().to_string()]);
            let code = hotstuff_cli::run_cli(args);
            if code != 0 {
                problems.push(format!("{flags:?} exited {code}"));
            }
            outputs.push((std::fs::read(&report).unwrap_or_default(), std::fs::read(&trace).unwrap_or_default()));
        }
        if outputs.windows(2).all(|w| w[0] == w[1]) && !outputs[0].0.is_empty() && !outputs[0].1.is_empty() {
            identical += 1;
        } else {
            problems.push(format!("{flags:?} output differs"));
        }
    }
    let mut detail = format!(
        "{identical}/{} flag sets byte-identical across {REPEATS} invocations (report and trace)",
        invocations.len()
    );
    if !problems.is_empty() {
        detail.push_str(&format!("; {}", problems.join("; ")));
    }
    verdict(identical == invocations.len() && problems.is_empty(), detail)
}
