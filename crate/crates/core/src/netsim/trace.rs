//! Deterministic run output: a line-oriented event log plus a
//! machine-readable metrics summary.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

/// One logged simulator event. Times are integer microseconds, so the
/// rendered log is bit-stable across runs and platforms.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TraceEvent {
    Send { t_us: u64, from: u16, to: u16, class: &'static str, bytes: u64 },
    /// `sent_us` is the send call, `arrived_us` the link arrival (ingress
    /// enqueue), `t_us` the delivery after ingress queueing.
    Deliver { t_us: u64, from: u16, to: u16, class: &'static str, bytes: u64, sent_us: u64, arrived_us: u64 },
    TimerSet { t_us: u64, node: u16, timer: String, at_us: u64 },
    TimerFired { t_us: u64, node: u16, timer: String },
    GateOpen { t_us: u64, node: u16 },
    ViewEntered { t_us: u64, node: u16, view: u64 },
    Decided { t_us: u64, node: u16, view: u64, value: String },
    Finalized { t_us: u64, node: u16, digest: String, signatures: usize },
}

impl TraceEvent {
    pub fn t_us(&self) -> u64 {
        match self {
            TraceEvent::Send { t_us, .. }
            | TraceEvent::Deliver { t_us, .. }
            | TraceEvent::TimerSet { t_us, .. }
            | TraceEvent::TimerFired { t_us, .. }
            | TraceEvent::GateOpen { t_us, .. }
            | TraceEvent::ViewEntered { t_us, .. }
            | TraceEvent::Decided { t_us, .. }
            | TraceEvent::Finalized { t_us, .. } => *t_us,
        }
    }

    pub fn render(&self, out: &mut String) {
        match self {
            TraceEvent::Send { t_us, from, to, class, bytes } => {
                let _ = writeln!(out, "{t_us} send {from}->{to} {class} {bytes}");
            }
            TraceEvent::Deliver { t_us, from, to, class, bytes, sent_us, arrived_us } => {
                let _ = writeln!(
                    out,
                    "{t_us} deliver {from}->{to} {class} {bytes} sent={sent_us} arrived={arrived_us}"
                );
            }
            TraceEvent::TimerSet { t_us, node, timer, at_us } => {
                let _ = writeln!(out, "{t_us} timer-set {node} {timer} at={at_us}");
            }
            TraceEvent::TimerFired { t_us, node, timer } => {
                let _ = writeln!(out, "{t_us} timer-fired {node} {timer}");
            }
            TraceEvent::GateOpen { t_us, node } => {
                let _ = writeln!(out, "{t_us} gate-open {node}");
            }
            TraceEvent::ViewEntered { t_us, node, view } => {
                let _ = writeln!(out, "{t_us} view {node} {view}");
            }
            TraceEvent::Decided { t_us, node, view, value } => {
                let _ = writeln!(out, "{t_us} decided {node} view={view} value={value}");
            }
            TraceEvent::Finalized { t_us, node, digest, signatures } => {
                let _ = writeln!(out, "{t_us} finalized {node} doc={digest} sigs={signatures}");
            }
        }
    }
}

/// Per-node outcome of a run.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct NodeOutcome {
    pub node: u16,
    pub correct: bool,
    pub decided_view: Option<u64>,
    pub decided_value: Option<String>,
    pub decide_time_s: Option<f64>,
    pub finalized_digest: Option<String>,
    pub finalize_time_s: Option<f64>,
    pub legacy_votes_held: Option<usize>,
    pub legacy_matching_sigs: Option<usize>,
}

/// Round usage per sub-protocol, counted as distinct message classes sent
/// by correct nodes.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RoundCounts {
    pub dissemination: u32,
    pub agreement: u32,
    pub aggregation_fetch: u32,
    pub aggregation_sig: u32,
}

/// Machine-readable run summary.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    /// Protocol success: all correct nodes finalized (icps) or a quorum of
    /// authorities holds a quorum of matching signatures (legacy).
    pub decided: bool,
    /// Time of the last correct node's finalization, seconds.
    pub latency_s: Option<f64>,
    pub decided_view: Option<u64>,
    /// First decided vector's entries, hex digests or null for ⊥.
    pub decided_entries: Option<Vec<Option<String>>>,
    pub rounds: RoundCounts,
    pub bytes_sent_total: u64,
    pub bytes_per_class: BTreeMap<String, u64>,
    pub sends_per_class: BTreeMap<String, u64>,
    pub dropped_invalid: u64,
    pub divergence: u64,
    pub horizon_reached: bool,
    pub per_node: Vec<NodeOutcome>,
}

impl Metrics {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("metrics serialize")
    }
}

/// Full deterministic run output.
#[derive(Debug, Clone, Default)]
pub struct Trace {
    pub events: Vec<TraceEvent>,
    pub metrics: Metrics,
}

impl Trace {
    /// Line-oriented rendering: events, then the metrics summary as one
    /// JSON line. Byte-identical for identical (scenario, seed).
    pub fn render(&self) -> String {
        let mut out = String::new();
        for ev in &self.events {
            ev.render(&mut out);
        }
        let _ = writeln!(
            out,
            "metrics {}",
            serde_json::to_string(&self.metrics).expect("metrics serialize")
        );
        out
    }
}
