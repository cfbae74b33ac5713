//! Front end of `hotstuff-sim`: run a simulated HotStuff deployment,
//! audit it, and print metrics; or exhaustively explore a small instance.
//!
//! Exit status: 0 when the audit and the scenario's expectations hold,
//! 1 when they do not, 2 on bad flags or configuration.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, ValueEnum};
use hotstuff::harness::{
    direct_parent_scenario, run_scenario, run_scenario_with_tree, vheight_scenario, Protocol, Scenario, Variant,
};
use hotstuff::oracle::{explore, ExploreBound, ExploreProtocol};

#[derive(Parser, Debug)]
#[command(name = "hotstuff-sim", version, about = "Simulate and audit HotStuff replicas")]
struct Args {
    #[arg(long, value_enum)]
    protocol: Option<ProtocolArg>,
    #[arg(long)]
    replicas: Option<usize>,
    /// Defaults to the largest f with n >= 3f+1.
    #[arg(long)]
    faults: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Scenario JSON; other flags override its fields.
    #[arg(long, value_name = "PATH")]
    scenario: Option<PathBuf>,
    /// Stop once every correct replica is past this view.
    #[arg(long)]
    views: Option<u64>,
    /// Tick budget.
    #[arg(long)]
    ticks: Option<u64>,
    /// Report format; JSON by default. Exploration prints plain text
    /// unless JSON is requested.
    #[arg(long, value_enum)]
    output: Option<Format>,
    /// Write the report here instead of stdout.
    #[arg(long, value_name = "PATH")]
    out: Option<PathBuf>,
    /// Explore every schedule of a small instance. Takes an optional JSON
    /// file whose fields override the default bound.
    #[arg(long, value_name = "BOUND", num_args = 0..=1)]
    explore: Option<Option<PathBuf>>,
    /// Run a deliberately broken event-driven variant; a violation is the
    /// expected outcome.
    #[arg(long, value_enum)]
    negative_variant: Option<Negative>,
    /// Write the block tree of the first correct replica as DOT.
    #[arg(long, value_name = "PATH")]
    dump_tree: Option<PathBuf>,
    /// Write the full event trace as JSON.
    #[arg(long, value_name = "PATH")]
    trace: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ProtocolArg {
    Basic,
    Chained,
    Event,
    TwoPhase,
}

impl From<ProtocolArg> for Protocol {
    fn from(p: ProtocolArg) -> Self {
        match p {
            ProtocolArg::Basic => Protocol::Basic,
            ProtocolArg::Chained => Protocol::Chained,
            ProtocolArg::Event => Protocol::Event,
            ProtocolArg::TwoPhase => Protocol::TwoPhase,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum Format {
    Json,
    Csv,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Negative {
    Vheight,
    DirectParent,
}

impl Negative {
    fn variant(self) -> Variant {
        match self {
            Negative::Vheight => Variant::Vheight,
            Negative::DirectParent => Variant::DirectParent,
        }
    }
}

/// Parses `args` (program name first) and runs; returns the exit status.
pub fn run_cli<I, T>(args: I) -> u8
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let args = match Args::try_parse_from(args) {
        Ok(a) => a,
        Err(e) => {
            let _ = e.print();
            return e.exit_code().clamp(0, 2) as u8;
        }
    };
    match run(&args) {
        Ok(true) => 0,
        Ok(false) => 1,
        Err(e) => {
            eprintln!("error: {e:#}");
            2
        }
    }
}

/// `Ok(passed)` on a completed run; `Err` for configuration problems.
fn run(args: &Args) -> Result<bool> {
    if let Some(bound) = &args.explore {
        return run_explore(args, bound.as_deref());
    }
    let scenario = build_scenario(args)?;
    let outcome = if let Some(path) = &args.dump_tree {
        let (outcome, dot) = run_scenario_with_tree(&scenario)?;
        write(path, &dot)?;
        outcome
    } else {
        run_scenario(&scenario)?
    };
    if let Some(path) = &args.trace {
        write(path, &(serde_json::to_string_pretty(&outcome.trace)? + "\n"))?;
    }
    let text = match args.output.unwrap_or(Format::Json) {
        Format::Json => serde_json::to_string_pretty(&outcome.report())? + "\n",
        Format::Csv => outcome.metrics.to_csv(),
    };
    emit(args, &text)?;
    for u in &outcome.unmet {
        eprintln!("unmet: {u}");
    }
    Ok(outcome.passed())
}

fn build_scenario(args: &Args) -> Result<Scenario> {
    let mut s = match (&args.scenario, args.negative_variant) {
        (Some(path), neg) => {
            let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            let mut s = Scenario::from_json(&text)?;
            if let Some(neg) = neg {
                s.variant = neg.variant();
                s.expect.violation = true;
            }
            s
        }
        (None, Some(Negative::Vheight)) => vheight_scenario(Variant::Vheight),
        (None, Some(Negative::DirectParent)) => direct_parent_scenario(Variant::DirectParent),
        (None, None) => Scenario {
            name: "cli".into(),
            ..Scenario::default()
        },
    };
    if let Some(p) = args.protocol {
        s.protocol = p.into();
    }
    if let Some(n) = args.replicas {
        s.replicas = n;
        s.faults = n.saturating_sub(1) / 3;
    }
    if let Some(f) = args.faults {
        s.faults = f;
    }
    if let Some(seed) = args.seed {
        s.seed = seed;
    }
    if let Some(v) = args.views {
        s.stop.views = Some(v);
    }
    if let Some(t) = args.ticks {
        s.stop.ticks = t;
    }
    s.validate()?;
    Ok(s)
}

fn explore_protocol(args: &Args) -> Result<ExploreProtocol> {
    Ok(match (args.negative_variant, args.protocol) {
        (Some(Negative::Vheight), _) => ExploreProtocol::VheightNegative,
        (Some(Negative::DirectParent), _) => ExploreProtocol::DirectParentNegative,
        (None, None | Some(ProtocolArg::Event)) => ExploreProtocol::Event,
        (None, Some(ProtocolArg::TwoPhase)) => ExploreProtocol::TwoPhase,
        (None, Some(ProtocolArg::Chained)) => ExploreProtocol::Chained,
        (None, Some(ProtocolArg::Basic)) => bail!("exploration supports chained, event and two-phase"),
    })
}

fn run_explore(args: &Args, overrides: Option<&Path>) -> Result<bool> {
    let protocol = explore_protocol(args)?;
    let mut bound = ExploreBound::new(protocol);
    if let Some(path) = overrides {
        let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let patch: serde_json::Value = serde_json::from_str(&text).context("parsing bound")?;
        let serde_json::Value::Object(patch) = patch else {
            bail!("bound file must hold a JSON object");
        };
        let mut merged = serde_json::to_value(&bound)?;
        for (k, v) in patch {
            merged[k] = v;
        }
        bound = serde_json::from_value(merged).context("parsing bound")?;
    }
    if let Some(v) = args.views {
        bound.max_views = v;
    }
    let negative = bound.protocol.is_negative();
    let report = explore(bound)?;
    let text = match args.output {
        None => report.to_text(),
        Some(Format::Json) => serde_json::to_string_pretty(&report)? + "\n",
        Some(Format::Csv) => bail!("exploration reports are text or JSON"),
    };
    emit(args, &text)?;
    Ok(if negative {
        report.safety_violations > 0
    } else {
        report.safety_violations == 0 && report.audit_failures == 0
    })
}

fn emit(args: &Args, text: &str) -> Result<()> {
    match &args.out {
        Some(path) => write(path, text),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}
