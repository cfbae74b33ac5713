//! Scenario loading and run orchestration.

pub mod metrics;

use std::collections::BTreeSet;
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::basic::Basic;
use crate::chained::Chained;
use crate::crypto::{CryptoProvider, MockProvider, ReplicaId};
use crate::event_driven::{EventDriven, Mode, Variant as EventVariant};
use crate::oracle::{audit, AuditReport};
use crate::pacemaker::{LeaderElection, PacemakerConfig, PacemakerError};
use crate::replica::{Replica, ReplicaConfig, Tick, TraceKind};
use crate::simnet::{
    Adversary, Behavior, Byzantine, Chaos, Constant, Liveless, NetConfig, PreGst, RunTrace, ScriptStep, SimError,
    Simulation, StopAt, GENESIS_LABEL,
};
use crate::types::{Params, View};

pub use metrics::{count_viewchange_extras, linearity_report, LinearFit, Metrics};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Copy, PartialEq, Eq, Debug, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Protocol {
    Basic,
    Chained,
    Event,
    TwoPhase,
}

impl Protocol {
    pub fn name(self) -> &'static str {
        match self {
            Protocol::Basic => "basic",
            Protocol::Chained => "chained",
            Protocol::Event => "event",
            Protocol::TwoPhase => "two-phase",
        }
    }
}

#[derive(Clone, Copy, PartialEq, Eq, Debug, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    #[default]
    Conformant,
    /// Votes once per height instead of at strictly increasing heights.
    Vheight,
    /// Commits on any ancestor chain instead of direct parents.
    DirectParent,
}

#[derive(Clone, Copy, PartialEq, Eq, Debug, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CryptoKind {
    #[default]
    Mock,
}

#[derive(Clone, Copy, PartialEq, Eq, Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum AdversarySpec {
    Chaos { drop_percent: u32, max_delay: Tick },
    Constant { delay: Tick },
    /// The two-phase non-deciding schedule.
    Liveless { faulty: ReplicaId, silenced: ReplicaId, delay: Tick },
}

#[derive(Clone, PartialEq, Eq, Debug, Serialize, Deserialize)]
pub struct ByzantineSpec {
    pub replica: ReplicaId,
    pub behavior: Behavior,
}

#[derive(Clone, Copy, PartialEq, Eq, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct StopSpec {
    pub decisions: Option<usize>,
    pub views: Option<View>,
    pub ticks: Tick,
}

impl Default for StopSpec {
    fn default() -> Self {
        StopSpec {
            decisions: None,
            views: Some(20),
            ticks: 1_000_000,
        }
    }
}

#[derive(Clone, Copy, PartialEq, Eq, Debug, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct Expect {
    pub min_decisions: Option<usize>,
    pub max_decisions: Option<usize>,
    /// The run is meant to break safety; a clean audit is then a failure.
    pub violation: bool,
}

#[derive(Clone, PartialEq, Eq, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Scenario {
    pub name: String,
    pub protocol: Protocol,
    pub variant: Variant,
    pub replicas: usize,
    pub faults: usize,
    pub seed: u64,
    pub crypto: CryptoKind,
    pub net: NetConfig,
    pub adversary: Option<AdversarySpec>,
    pub pacemaker: PacemakerConfig,
    pub byzantine: Vec<ByzantineSpec>,
    pub stop: StopSpec,
    pub ancestry_depth: usize,
    pub expect: Expect,
}

impl Default for Scenario {
    fn default() -> Self {
        Scenario {
            name: "adhoc".into(),
            protocol: Protocol::Event,
            variant: Variant::Conformant,
            replicas: 4,
            faults: 1,
            seed: 0,
            crypto: CryptoKind::Mock,
            net: NetConfig::default(),
            adversary: None,
            pacemaker: PacemakerConfig::default(),
            byzantine: Vec::new(),
            stop: StopSpec::default(),
            ancestry_depth: 8,
            expect: Expect::default(),
        }
    }
}

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("invalid scenario: {0}")]
    Config(String),
    #[error("scenario parse error: {0}")]
    Parse(#[from] serde_json::Error),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Pacemaker(#[from] PacemakerError),
    #[error("linear fit needs at least 4 distinct replica counts, got {got}")]
    InsufficientPoints { got: usize },
}

impl Scenario {
    pub fn from_json(text: &str) -> Result<Self, HarnessError> {
        let s: Scenario = serde_json::from_str(text)?;
        s.validate()?;
        Ok(s)
    }

    pub fn params(&self) -> Params {
        Params::new(self.replicas, self.faults)
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        let params = self.params();
        if !params.is_valid() {
            return Err(HarnessError::Config(format!(
                "need n >= 3f+1 and f >= 1, got n={} f={}",
                self.replicas, self.faults
            )));
        }
        self.pacemaker.validate()?;
        if self.variant != Variant::Conformant && !matches!(self.protocol, Protocol::Event | Protocol::TwoPhase) {
            return Err(HarnessError::Config(format!(
                "variant {:?} only applies to event-driven protocols",
                self.variant
            )));
        }
        let mut seen = BTreeSet::new();
        for b in &self.byzantine {
            if b.replica >= self.replicas || !seen.insert(b.replica) {
                return Err(HarnessError::Config(format!("bad Byzantine replica {}", b.replica)));
            }
        }
        if self.byzantine.len() > self.faults {
            return Err(HarnessError::Config(format!(
                "{} Byzantine replicas exceed f={}",
                self.byzantine.len(),
                self.faults
            )));
        }
        if self.net.pre_gst == PreGst::Adversary && self.adversary.is_none() {
            return Err(HarnessError::Config("pre-GST policy `adversary` needs an adversary".into()));
        }
        if self.net.delta == 0 {
            return Err(HarnessError::Config("delta must be positive".into()));
        }
        if self.stop.ticks == 0 {
            return Err(HarnessError::Config("tick budget must be positive".into()));
        }
        Ok(())
    }

    fn make_replica(&self, cfg: ReplicaConfig) -> Box<dyn Replica> {
        let variant = match self.variant {
            Variant::Conformant => EventVariant::Conformant,
            Variant::Vheight => EventVariant::OncePerHeight,
            Variant::DirectParent => EventVariant::AncestorCommit,
        };
        match self.protocol {
            Protocol::Basic => Box::new(Basic::new(cfg)),
            Protocol::Chained => Box::new(Chained::new(cfg)),
            Protocol::Event => Box::new(EventDriven::new(cfg, Mode::ThreePhase, variant)),
            Protocol::TwoPhase => Box::new(EventDriven::new(cfg, Mode::TwoPhase, variant)),
        }
    }

    fn make_adversary(&self) -> Option<Box<dyn Adversary>> {
        self.adversary.map(|a| -> Box<dyn Adversary> {
            match a {
                AdversarySpec::Chaos { drop_percent, max_delay } => Box::new(Chaos { drop_percent, max_delay }),
                AdversarySpec::Constant { delay } => Box::new(Constant(delay)),
                AdversarySpec::Liveless { faulty, silenced, delay } => {
                    Box::new(Liveless::new(self.params(), self.pacemaker, faulty, silenced, delay))
                }
            }
        })
    }

    pub fn simulation(&self) -> Result<Simulation, HarnessError> {
        self.validate()?;
        let params = self.params();
        let crypto: Arc<dyn CryptoProvider> = Arc::new(MockProvider::new(self.replicas, self.faults, self.seed));
        let mut replicas: Vec<Box<dyn Replica>> = Vec::with_capacity(self.replicas);
        for me in 0..self.replicas {
            let cfg = ReplicaConfig {
                me,
                params,
                crypto: crypto.clone(),
                pacemaker: self.pacemaker,
                ancestry_depth: self.ancestry_depth,
            };
            let honest = self.make_replica(cfg);
            let replica: Box<dyn Replica> = match self.byzantine.iter().find(|b| b.replica == me) {
                Some(b) => Box::new(Byzantine::new(honest, params, crypto.clone(), b.behavior.clone())),
                None => honest,
            };
            replicas.push(replica);
        }
        let byzantine = self.byzantine.iter().map(|b| b.replica).collect();
        Ok(Simulation::new(
            params,
            self.net,
            self.seed,
            replicas,
            byzantine,
            self.make_adversary(),
        )?)
    }

    pub fn stop_at(&self) -> StopAt {
        StopAt {
            decisions: self.stop.decisions,
            views: self.stop.views,
            ticks: self.stop.ticks,
        }
    }
}

#[derive(Clone, Debug)]
pub struct RunOutcome {
    pub scenario: Scenario,
    pub trace: RunTrace,
    pub audit: AuditReport,
    pub metrics: Metrics,
    /// Unmet expectations, empty on success.
    pub unmet: Vec<String>,
}

impl RunOutcome {
    /// Audit and expectations agree with what the scenario promises.
    pub fn passed(&self) -> bool {
        self.unmet.is_empty()
    }

    pub fn report(&self) -> Report<'_> {
        Report {
            schema_version: SCHEMA_VERSION,
            scenario: &self.scenario.name,
            protocol: self.scenario.protocol.name(),
            seed: self.scenario.seed,
            stop: self.trace.stop,
            end_tick: self.trace.end_tick,
            metrics: &self.metrics,
            audit: &self.audit,
            passed: self.passed(),
            unmet: &self.unmet,
        }
    }
}

/// Canonical JSON output of one run.
#[derive(Serialize)]
pub struct Report<'a> {
    pub schema_version: u32,
    pub scenario: &'a str,
    pub protocol: &'a str,
    pub seed: u64,
    pub stop: crate::simnet::StopReason,
    pub end_tick: Tick,
    pub metrics: &'a Metrics,
    pub audit: &'a AuditReport,
    pub passed: bool,
    pub unmet: &'a [String],
}

pub fn run_scenario(scenario: &Scenario) -> Result<RunOutcome, HarnessError> {
    let trace = scenario.simulation()?.run(scenario.stop_at());
    Ok(evaluate(scenario, trace))
}

/// Like [`run_scenario`], also rendering the block tree of the lowest
/// correct replica as DOT, with its executed nodes highlighted.
pub fn run_scenario_with_tree(scenario: &Scenario) -> Result<(RunOutcome, String), HarnessError> {
    let (trace, replicas) = scenario.simulation()?.run_keep(scenario.stop_at());
    let me = trace.correct().next().unwrap_or(0);
    let committed = trace
        .executed(me)
        .iter()
        .filter_map(|r| match &r.kind {
            TraceKind::Commit { node, .. } => Some(*node),
            _ => None,
        })
        .collect();
    let dot = replicas[me].tree().to_dot(&committed);
    Ok((evaluate(scenario, trace), dot))
}

fn evaluate(scenario: &Scenario, trace: RunTrace) -> RunOutcome {
    let audit = audit(&trace);
    let metrics = Metrics::from_trace(&trace, &scenario.pacemaker);
    let mut unmet = Vec::new();
    if scenario.expect.violation {
        if audit.safety_ok {
            unmet.push("expected a safety violation, audit is clean".into());
        }
    } else if !audit.passed() {
        unmet.push(format!("audit failed: {}", audit.failures().join(", ")));
    }
    if let Some(min) = scenario.expect.min_decisions {
        if metrics.decisions < min {
            unmet.push(format!("{} decisions, expected at least {}", metrics.decisions, min));
        }
    }
    if let Some(max) = scenario.expect.max_decisions {
        if metrics.decisions > max {
            unmet.push(format!("{} decisions, expected at most {}", metrics.decisions, max));
        }
    }
    RunOutcome {
        scenario: scenario.clone(),
        trace,
        audit,
        metrics,
        unmet,
    }
}

/// Runs independent scenarios in parallel; results keep the input order.
pub fn run_many(scenarios: &[Scenario]) -> Vec<Result<RunOutcome, HarnessError>> {
    scenarios.par_iter().map(run_scenario).collect()
}

fn step(label: &str, height: u64, parent: &str, justify: &str, to: &[ReplicaId], at: Tick) -> ScriptStep {
    ScriptStep {
        label: label.into(),
        height,
        parent: parent.into(),
        justify: justify.into(),
        to: to.to_vec(),
        at,
    }
}

/// Shared frame of the scripted counterexample runs: replica 3 leads
/// every height and follows `steps`; links take one tick.
fn scripted(name: &str, variant: Variant, steps: Vec<ScriptStep>) -> Scenario {
    Scenario {
        name: name.into(),
        protocol: Protocol::Event,
        variant,
        net: NetConfig {
            delta: 1,
            gst: 0,
            pre_gst: PreGst::Drop,
        },
        pacemaker: PacemakerConfig {
            election: LeaderElection::Fixed { leader: 3 },
            base_timeout: 100_000,
            ..PacemakerConfig::default()
        },
        byzantine: vec![ByzantineSpec {
            replica: 3,
            behavior: Behavior::Transcript { steps },
        }],
        stop: StopSpec {
            decisions: None,
            views: None,
            ticks: 1_000,
        },
        expect: Expect {
            violation: variant != Variant::Conformant,
            ..Expect::default()
        },
        ..Scenario::default()
    }
}

/// Replica 0 votes for a high node `b` before the lower conflicting `w`;
/// both branches then gather three-chains.
pub fn vheight_scenario(variant: Variant) -> Scenario {
    let g = GENESIS_LABEL;
    scripted(
        "vheight-negative",
        variant,
        vec![
            step("b", 4, g, g, &[0, 2], 10),
            step("w", 1, g, g, &[0, 1], 20),
            step("w1", 2, "w", "w", &[0, 1], 30),
            step("w2", 3, "w1", "w1", &[0, 1], 40),
            step("w3", 4, "w2", "w2", &[1], 50),
            step("b1", 5, "b", "b", &[0, 2], 60),
            step("b2", 6, "b1", "b1", &[0, 2], 70),
            step("b3", 7, "b2", "b2", &[0, 2], 80),
        ],
    )
}

/// Two interleaved branches whose chains have blank gaps; replica 0 is
/// the only replica voting on both.
pub fn direct_parent_scenario(variant: Variant) -> Scenario {
    let g = GENESIS_LABEL;
    scripted(
        "direct-parent-negative",
        variant,
        vec![
            step("w", 1, g, g, &[0, 1], 10),
            step("w1", 2, "w", "w", &[0, 1], 20),
            step("b", 3, g, g, &[0, 2], 30),
            step("b1", 4, "b", "b", &[0, 2], 40),
            step("w2", 5, "w1", "w1", &[0, 1], 50),
            step("b2", 6, "b1", "b1", &[0, 2], 60),
            step("w3", 6, "w2", "w2", &[1], 70),
            step("b3", 7, "b2", "b2", &[2], 80),
        ],
    )
}

/// The two-phase non-deciding schedule: replica 3 votes late and hides
/// its certificates, the network hands each late certificate to a single
/// victim. `protocol` selects the variant under the identical scheduler.
pub fn liveless_scenario(protocol: Protocol, views: View) -> Scenario {
    Scenario {
        name: "liveless-two-phase".into(),
        protocol,
        net: NetConfig {
            delta: 10,
            gst: u64::MAX,
            pre_gst: PreGst::Adversary,
        },
        adversary: Some(AdversarySpec::Liveless {
            faulty: 3,
            silenced: 0,
            delay: 1,
        }),
        byzantine: vec![ByzantineSpec {
            replica: 3,
            behavior: Behavior::LateVoter { delay: 20 },
        }],
        stop: StopSpec {
            decisions: None,
            views: Some(views),
            ticks: u64::MAX / 2,
        },
        ..Scenario::default()
    }
}
