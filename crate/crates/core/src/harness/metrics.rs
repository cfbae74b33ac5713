//! Run metrics derived from traces: authenticator accounting, decisions,
//! view counts and commit latency.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use super::HarnessError;
use crate::crypto::Digest;
use crate::pacemaker::PacemakerConfig;
use crate::replica::TraceKind;
use crate::simnet::RunTrace;
use crate::types::{MsgKind, View};

#[derive(Clone, Copy, PartialEq, Eq, Debug, Serialize, Deserialize)]
pub struct ViewTotal {
    pub view: View,
    pub authenticators: u64,
}

#[derive(Clone, Copy, PartialEq, Eq, Debug, Serialize, Deserialize)]
pub struct LatencyBucket {
    pub views: u64,
    pub commands: usize,
}

#[derive(Clone, PartialEq, Debug, Serialize, Deserialize)]
pub struct Metrics {
    pub n: usize,
    pub f: usize,
    /// Authenticators received by each replica, summed over deliveries.
    pub per_replica_authenticators_received: Vec<u64>,
    pub total_authenticators: u64,
    /// Received authenticators grouped by the view tag of the message.
    pub total_authenticators_per_view: Vec<ViewTotal>,
    pub mean_authenticators_per_view: f64,
    pub extra_viewchange_authenticators: u64,
    pub decisions: usize,
    pub views_elapsed: View,
    /// Commit view minus proposal view, per committed command.
    pub commit_latency_views: Vec<LatencyBucket>,
}

impl Metrics {
    pub fn from_trace(trace: &RunTrace, pacemaker: &PacemakerConfig) -> Self {
        let n = trace.params.n;
        let mut per_replica = vec![0u64; n];
        let mut per_view: BTreeMap<View, u64> = BTreeMap::new();
        let mut views_elapsed = 0;
        let mut proposed: BTreeMap<Digest, View> = BTreeMap::new();
        let mut committed: BTreeMap<Digest, View> = BTreeMap::new();
        for r in &trace.records {
            match &r.kind {
                TraceKind::Deliver { view, auth, .. } => {
                    per_replica[r.replica] += *auth as u64;
                    *per_view.entry(*view).or_default() += *auth as u64;
                }
                TraceKind::ViewEnter { view, .. } if trace.is_correct(r.replica) => {
                    views_elapsed = views_elapsed.max(*view);
                }
                TraceKind::Propose { view, node, .. } => {
                    proposed.entry(*node).or_insert(*view);
                }
                TraceKind::Commit { node, view, .. } if trace.is_correct(r.replica) => {
                    committed.entry(*node).or_insert(*view);
                }
                _ => {}
            }
        }
        let mut latency: BTreeMap<u64, usize> = BTreeMap::new();
        for (node, at) in &committed {
            if let Some(p) = proposed.get(node) {
                *latency.entry(at.saturating_sub(*p)).or_default() += 1;
            }
        }
        let total: u64 = per_replica.iter().sum();
        Metrics {
            n,
            f: trace.params.f,
            per_replica_authenticators_received: per_replica,
            total_authenticators: total,
            total_authenticators_per_view: per_view
                .into_iter()
                .map(|(view, authenticators)| ViewTotal { view, authenticators })
                .collect(),
            mean_authenticators_per_view: if views_elapsed == 0 {
                0.0
            } else {
                total as f64 / views_elapsed as f64
            },
            extra_viewchange_authenticators: count_viewchange_extras(trace, pacemaker),
            decisions: trace.decisions(),
            views_elapsed,
            commit_latency_views: latency
                .into_iter()
                .map(|(views, commands)| LatencyBucket { views, commands })
                .collect(),
        }
    }

    /// Flat `field,value` projection; list fields expand to `field.i`.
    pub fn to_csv(&self) -> String {
        let mut rows: Vec<(String, String)> = vec![
            ("n".into(), self.n.to_string()),
            ("f".into(), self.f.to_string()),
            ("total_authenticators".into(), self.total_authenticators.to_string()),
            (
                "mean_authenticators_per_view".into(),
                format!("{:.6}", self.mean_authenticators_per_view),
            ),
            (
                "extra_viewchange_authenticators".into(),
                self.extra_viewchange_authenticators.to_string(),
            ),
            ("decisions".into(), self.decisions.to_string()),
            ("views_elapsed".into(), self.views_elapsed.to_string()),
        ];
        for (i, a) in self.per_replica_authenticators_received.iter().enumerate() {
            rows.push((format!("per_replica_authenticators_received.{i}"), a.to_string()));
        }
        for v in &self.total_authenticators_per_view {
            rows.push((format!("total_authenticators_per_view.{}", v.view), v.authenticators.to_string()));
        }
        for b in &self.commit_latency_views {
            rows.push((format!("commit_latency_views.{}", b.views), b.commands.to_string()));
        }
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["field", "value"]).expect("in-memory write");
        for (k, v) in rows {
            w.write_record([k, v]).expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("in-memory flush")).expect("csv output is utf-8")
    }
}

/// Authenticators received in NEW-VIEW messages for views whose leader
/// differs from the previous view's. A stable leader never causes any;
/// protocols that forward votes to the next leader send NEW-VIEW only
/// on timeout, so an uninterrupted rotating run counts zero.
pub fn count_viewchange_extras(trace: &RunTrace, pacemaker: &PacemakerConfig) -> u64 {
    let n = trace.params.n;
    let rotates = |v: View| v > 0 && pacemaker.leader(v, n) != pacemaker.leader(v - 1, n);
    trace
        .records
        .iter()
        .filter_map(|r| match &r.kind {
            TraceKind::Deliver {
                kind: MsgKind::NewView,
                view,
                auth,
                ..
            } if rotates(*view) => Some(*auth as u64),
            _ => None,
        })
        .sum()
}

#[derive(Clone, PartialEq, Debug, Serialize, Deserialize)]
pub struct LinearFit {
    pub slope: f64,
    pub intercept: f64,
    /// Largest `|observed - fitted| / fitted` over the points.
    pub max_residual_ratio: f64,
    pub points: Vec<(usize, f64)>,
}

impl LinearFit {
    pub fn is_linear(&self, tolerance: f64) -> bool {
        self.max_residual_ratio <= tolerance
    }
}

/// Least-squares line through `(n, authenticators per view)`.
pub fn linearity_report(points: &[(usize, f64)]) -> Result<LinearFit, HarnessError> {
    let distinct: BTreeSet<usize> = points.iter().map(|p| p.0).collect();
    if distinct.len() < 4 {
        return Err(HarnessError::InsufficientPoints { got: distinct.len() });
    }
    let k = points.len() as f64;
    let mx = points.iter().map(|p| p.0 as f64).sum::<f64>() / k;
    let my = points.iter().map(|p| p.1).sum::<f64>() / k;
    let sxy: f64 = points.iter().map(|p| (p.0 as f64 - mx) * (p.1 - my)).sum();
    let sxx: f64 = points.iter().map(|p| (p.0 as f64 - mx).powi(2)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let max_residual_ratio = points
        .iter()
        .map(|p| {
            let fitted = slope * p.0 as f64 + intercept;
            (p.1 - fitted).abs() / fitted.abs().max(f64::EPSILON)
        })
        .fold(0.0, f64::max);
    Ok(LinearFit {
        slope,
        intercept,
        max_residual_ratio,
        points: points.to_vec(),
    })
}
