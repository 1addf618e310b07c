//! Deterministic discrete-event network simulator.
//!
//! Every node has an egress pipe and an ingress pipe, each a FIFO server
//! whose rate follows the node's bandwidth segments (attack windows
//! throttle both directions, matching a DDoS saturating the victim's
//! link). A frame is served by the sender's egress, crosses the link
//! latency, then queues on the receiver's ingress. Before GST the
//! scheduler adds seeded arbitrary link delays; after GST every message
//! between correct nodes reaches the receiver's queue within Δ plus the
//! transmission backlog. The trace is a pure function of (scenario, seed).

pub mod scenario;
pub mod trace;

use std::cmp::Reverse;
use std::collections::{BinaryHeap, BTreeMap, BTreeSet};
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

use crate::crypto::KeyStore;
use crate::legacy::LegacyNode;
use crate::node::IcpsNode;
use crate::types::{AuthorityId, Digest};
use crate::wire::{Frame, Host, NodeNote, NodeProgram, Timer};

pub use scenario::{secs_to_us, us_to_secs, Behavior, Protocol, Scenario, ScenarioError};
pub use trace::{Metrics, NodeOutcome, RoundCounts, Trace, TraceEvent};

/// Store-and-forward time for one frame on an uncontended pipe, seconds.
///
/// The event loop uses the same arithmetic in integer microseconds with
/// piecewise-constant rates; this closed form is the calibration surface.
pub fn transmission_time(bytes: u64, bandwidth_mbps: f64, latency_ms: f64) -> f64 {
    latency_ms / 1000.0 + bytes as f64 * 8.0 / (bandwidth_mbps * 1e6)
}

/// Completion time of serving `bytes` starting at `start_us` under the
/// node's piecewise-constant rate segments (1 Mbit/s = 1 bit/µs). Zero
/// rate parks the transfer until a segment with bandwidth; returns
/// `u64::MAX` if capacity never arrives.
pub fn service_end(segments: &[(u64, u64, f64)], start_us: u64, bytes: u64) -> u64 {
    let mut remaining_bits = (bytes as f64) * 8.0;
    let mut t = start_us;
    for (seg_start, seg_end, rate) in segments {
        if *seg_end <= t {
            continue;
        }
        let begin = t.max(*seg_start);
        if *rate <= 0.0 {
            t = *seg_end;
            continue;
        }
        if remaining_bits <= 0.0 {
            return begin;
        }
        let span = seg_end.saturating_sub(begin);
        let capacity = *rate * span as f64;
        if capacity >= remaining_bits {
            return begin.saturating_add((remaining_bits / *rate).ceil() as u64);
        }
        remaining_bits -= capacity;
        t = *seg_end;
    }
    u64::MAX
}

#[derive(Debug)]
enum Event {
    /// Frame reached the receiver's ingress queue.
    Arrive { to: AuthorityId, from: AuthorityId, frame: Frame, bytes: u64, sent_us: u64 },
    /// Frame finished ingress service; hand to the program.
    Deliver {
        to: AuthorityId,
        from: AuthorityId,
        frame: Frame,
        bytes: u64,
        sent_us: u64,
        arrived_us: u64,
    },
    Timer { node: AuthorityId, timer: Timer },
}

struct Queued {
    at_us: u64,
    seq: u64,
    event: Event,
}

impl PartialEq for Queued {
    fn eq(&self, other: &Self) -> bool {
        self.at_us == other.at_us && self.seq == other.seq
    }
}
impl Eq for Queued {}
impl PartialOrd for Queued {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Queued {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        (self.at_us, self.seq).cmp(&(other.at_us, other.seq))
    }
}

/// Buffered outputs of one program callback.
#[derive(Default)]
struct Outbox {
    sends: Vec<(AuthorityId, Frame)>,
    timers: Vec<(Timer, u64)>,
    notes: Vec<NodeNote>,
}

struct SimHost<'a> {
    now_us: u64,
    me: AuthorityId,
    n: u16,
    outbox: &'a mut Outbox,
}

impl Host for SimHost<'_> {
    fn now_us(&self) -> u64 {
        self.now_us
    }

    fn send(&mut self, to: AuthorityId, frame: Frame) {
        self.outbox.sends.push((to, frame));
    }

    fn broadcast(&mut self, frame: Frame) {
        for peer in AuthorityId::all(self.n) {
            if peer != self.me {
                self.outbox.sends.push((peer, frame.clone()));
            }
        }
    }

    fn set_timer(&mut self, timer: Timer, delay_us: u64) {
        self.outbox.timers.push((timer, delay_us));
    }

    fn note(&mut self, note: NodeNote) {
        self.outbox.notes.push(note);
    }
}

/// The simulator; drive with [`Sim::run`] or use [`run_scenario`].
pub struct Sim {
    scenario: Scenario,
    keys: Arc<KeyStore>,
    queue: BinaryHeap<Reverse<Queued>>,
    seq: u64,
    now_us: u64,
    egress_busy: Vec<u64>,
    ingress_busy: Vec<u64>,
    segments: Vec<Vec<(u64, u64, f64)>>,
    adversary_rng: ChaCha20Rng,
    record_events: bool,
    events: Vec<TraceEvent>,
    bytes_per_class: BTreeMap<String, u64>,
    sends_per_class: BTreeMap<String, u64>,
    classes_by_correct: BTreeSet<&'static str>,
    outcomes: Vec<NodeOutcome>,
    decided_entries: Option<Vec<Option<String>>>,
    decided_view: Option<u64>,
    bytes_sent_total: u64,
}

impl Sim {
    pub fn new(scenario: Scenario, record_events: bool) -> Self {
        let n = scenario.n;
        let keys = Arc::new(KeyStore::generate(n, scenario.sig_scheme.into(), scenario.seed));
        let segments = AuthorityId::all(n).map(|a| scenario.bandwidth_segments(a)).collect();
        let adversary_rng = ChaCha20Rng::seed_from_u64(scenario.seed ^ 0xad5e_55a9);
        let outcomes = AuthorityId::all(n)
            .map(|a| NodeOutcome {
                node: a.0,
                correct: scenario.correct(a),
                ..NodeOutcome::default()
            })
            .collect();
        Sim {
            scenario,
            keys,
            queue: BinaryHeap::new(),
            seq: 0,
            now_us: 0,
            egress_busy: vec![0; n as usize],
            ingress_busy: vec![0; n as usize],
            segments,
            adversary_rng,
            record_events,
            events: Vec::new(),
            bytes_per_class: BTreeMap::new(),
            sends_per_class: BTreeMap::new(),
            classes_by_correct: BTreeSet::new(),
            outcomes,
            decided_entries: None,
            decided_view: None,
            bytes_sent_total: 0,
        }
    }

    pub fn keys(&self) -> Arc<KeyStore> {
        self.keys.clone()
    }

    fn push(&mut self, at_us: u64, event: Event) {
        self.seq += 1;
        self.queue.push(Reverse(Queued { at_us, seq: self.seq, event }));
    }

    fn record(&mut self, ev: TraceEvent) {
        if self.record_events {
            self.events.push(ev);
        }
    }

    fn process_send(&mut self, from: AuthorityId, to: AuthorityId, frame: Frame) {
        let bytes = frame.wire_size(self.scenario.per_relay_bytes);
        let class = frame.class();
        self.bytes_sent_total += bytes;
        *self.bytes_per_class.entry(class.to_string()).or_default() += bytes;
        *self.sends_per_class.entry(class.to_string()).or_default() += 1;
        if self.scenario.correct(from) {
            self.classes_by_correct.insert(class);
        }
        self.record(TraceEvent::Send { t_us: self.now_us, from: from.0, to: to.0, class, bytes });

        // egress stage: FIFO against everything this node queued before
        let start = self.now_us.max(self.egress_busy[from.index()]);
        let egress_done = service_end(&self.segments[from.index()], start, bytes);
        self.egress_busy[from.index()] = egress_done;
        if egress_done == u64::MAX {
            return; // parked forever: bandwidth never returns
        }

        // link stage: latency plus the pre-GST adversary
        let natural = egress_done.saturating_add(self.scenario.latency_us(from, to));
        let gst_us = secs_to_us(self.scenario.gst_s);
        let delta_us = secs_to_us(self.scenario.delta_s);
        let mut arrive = natural;
        for hold in &self.scenario.holds {
            if hold.from == from.0 && hold.to == to.0 {
                arrive = arrive.max(secs_to_us(hold.until_s));
            }
        }
        if self.now_us < gst_us {
            let cap = secs_to_us(self.scenario.pre_gst_delay_cap_s);
            arrive = arrive.saturating_add(self.adversary_rng.gen_range(0..=cap));
        }
        // partial synchrony bound: the link releases the frame to the
        // receiver's queue no later than max(natural, GST + Δ)
        arrive = arrive.min(natural.max(gst_us.saturating_add(delta_us)));
        debug_assert!(arrive >= natural || arrive >= gst_us);
        self.push(arrive, Event::Arrive { to, from, frame, bytes, sent_us: self.now_us });
    }

    fn apply_outbox(&mut self, node: AuthorityId, outbox: Outbox) {
        for (timer, delay_us) in outbox.timers {
            let at = self.now_us.saturating_add(delay_us);
            self.record(TraceEvent::TimerSet {
                t_us: self.now_us,
                node: node.0,
                timer: format!("{timer:?}"),
                at_us: at,
            });
            self.push(at, Event::Timer { node, timer });
        }
        for (to, frame) in outbox.sends {
            self.process_send(node, to, frame);
        }
        for note in outbox.notes {
            self.apply_note(node, note);
        }
    }

    fn apply_note(&mut self, node: AuthorityId, note: NodeNote) {
        let t_us = self.now_us;
        let out = &mut self.outcomes[node.index()];
        match note {
            NodeNote::GateOpen => self.record(TraceEvent::GateOpen { t_us, node: node.0 }),
            NodeNote::ViewEntered(view) => {
                self.record(TraceEvent::ViewEntered { t_us, node: node.0, view })
            }
            NodeNote::Decided { view, value, entries } => {
                out.decided_view = Some(view);
                out.decided_value = Some(value.to_hex());
                out.decide_time_s = Some(us_to_secs(t_us));
                if self.scenario.correct(node) {
                    if self.decided_entries.is_none() {
                        self.decided_entries =
                            Some(entries.iter().map(|e| e.map(|d| d.to_hex())).collect());
                    }
                    if self.decided_view.is_none() {
                        self.decided_view = Some(view);
                    }
                }
                self.record(TraceEvent::Decided {
                    t_us,
                    node: node.0,
                    view,
                    value: value.to_hex(),
                });
            }
            NodeNote::Finalized { digest, signatures } => {
                out.finalized_digest = Some(digest.to_hex());
                out.finalize_time_s = Some(us_to_secs(t_us));
                self.record(TraceEvent::Finalized {
                    t_us,
                    node: node.0,
                    digest: digest.to_hex(),
                    signatures,
                });
            }
            NodeNote::LegacyOutcome { produced, votes_held, matching_sigs } => {
                let _ = produced;
                out.legacy_votes_held = Some(votes_held);
                out.legacy_matching_sigs = Some(matching_sigs);
            }
        }
    }

    /// Run the given programs (index == authority id) to completion,
    /// horizon exhaustion, or queue exhaustion.
    pub fn run(mut self, mut programs: Vec<Box<dyn NodeProgram>>) -> Trace {
        assert_eq!(programs.len(), self.scenario.n as usize);
        let horizon_us = secs_to_us(self.scenario.horizon_s);
        let correct: Vec<AuthorityId> = self.scenario.correct_nodes();

        for (i, program) in programs.iter_mut().enumerate() {
            let mut outbox = Outbox::default();
            let me = AuthorityId(i as u16);
            let mut host =
                SimHost { now_us: 0, me, n: self.scenario.n, outbox: &mut outbox };
            program.on_init(&mut host);
            self.apply_outbox(me, outbox);
        }

        let mut horizon_reached = false;
        while let Some(Reverse(next)) = self.queue.pop() {
            if next.at_us > horizon_us {
                horizon_reached = true;
                break;
            }
            self.now_us = next.at_us;
            match next.event {
                Event::Arrive { to, from, frame, bytes, sent_us } => {
                    let start = self.now_us.max(self.ingress_busy[to.index()]);
                    let done = service_end(&self.segments[to.index()], start, bytes);
                    if done == u64::MAX {
                        continue;
                    }
                    self.ingress_busy[to.index()] = done;
                    self.push(
                        done,
                        Event::Deliver { to, from, frame, bytes, sent_us, arrived_us: self.now_us },
                    );
                }
                Event::Deliver { to, from, frame, bytes, sent_us, arrived_us } => {
                    self.record(TraceEvent::Deliver {
                        t_us: self.now_us,
                        from: from.0,
                        to: to.0,
                        class: frame.class(),
                        bytes,
                        sent_us,
                        arrived_us,
                    });
                    let mut outbox = Outbox::default();
                    let mut host = SimHost {
                        now_us: self.now_us,
                        me: to,
                        n: self.scenario.n,
                        outbox: &mut outbox,
                    };
                    programs[to.index()].on_frame(&mut host, from, frame);
                    self.apply_outbox(to, outbox);
                }
                Event::Timer { node, timer } => {
                    self.record(TraceEvent::TimerFired {
                        t_us: self.now_us,
                        node: node.0,
                        timer: format!("{timer:?}"),
                    });
                    let mut outbox = Outbox::default();
                    let mut host = SimHost {
                        now_us: self.now_us,
                        me: node,
                        n: self.scenario.n,
                        outbox: &mut outbox,
                    };
                    programs[node.index()].on_timer(&mut host, timer);
                    self.apply_outbox(node, outbox);
                }
            }
            if correct.iter().all(|a| programs[a.index()].done()) {
                break;
            }
        }

        self.summarize(&programs, horizon_reached)
    }

    fn summarize(self, programs: &[Box<dyn NodeProgram>], horizon_reached: bool) -> Trace {
        let scenario = &self.scenario;
        let mut metrics = Metrics {
            decided: false,
            latency_s: None,
            decided_view: self.decided_view,
            decided_entries: self.decided_entries,
            rounds: RoundCounts::default(),
            bytes_sent_total: self.bytes_sent_total,
            bytes_per_class: self.bytes_per_class,
            sends_per_class: self.sends_per_class,
            dropped_invalid: programs.iter().map(|p| p.invalid_dropped()).sum(),
            divergence: programs.iter().map(|p| p.divergence()).sum(),
            horizon_reached,
            per_node: self.outcomes,
        };
        for class in &self.classes_by_correct {
            match *class {
                "document" | "proposal" => metrics.rounds.dissemination += 1,
                "agree_propose" | "agree_prepare" | "agree_commit" | "agree_new_view" => {
                    metrics.rounds.agreement += 1
                }
                "fetch_request" | "fetch_response" => metrics.rounds.aggregation_fetch += 1,
                "consensus_sig" => metrics.rounds.aggregation_sig += 1,
                _ => {}
            }
        }
        match scenario.protocol {
            Protocol::Icps => {
                let correct = scenario.correct_nodes();
                let finalized: Vec<&NodeOutcome> = correct
                    .iter()
                    .map(|a| &metrics.per_node[a.index()])
                    .filter(|o| o.finalized_digest.is_some())
                    .collect();
                if finalized.len() == correct.len() && !correct.is_empty() {
                    metrics.decided = true;
                    metrics.latency_s = finalized
                        .iter()
                        .filter_map(|o| o.finalize_time_s)
                        .fold(None, |acc: Option<f64>, t| Some(acc.map_or(t, |a| a.max(t))));
                }
            }
            Protocol::Legacy => {
                let quorum = scenario.effective_quorum();
                let mut by_digest: BTreeMap<&String, Vec<&NodeOutcome>> = BTreeMap::new();
                for out in &metrics.per_node {
                    if let Some(d) = &out.finalized_digest {
                        by_digest.entry(d).or_default().push(out);
                    }
                }
                if let Some(winners) =
                    by_digest.values().find(|outs| outs.len() >= quorum)
                {
                    metrics.decided = true;
                    metrics.latency_s = winners
                        .iter()
                        .filter_map(|o| o.finalize_time_s)
                        .fold(None, |acc: Option<f64>, t| Some(acc.map_or(t, |a| a.max(t))));
                }
            }
        }
        Trace { events: self.events, metrics }
    }
}

/// Build the per-node programs a scenario calls for.
pub fn build_programs(scenario: &Scenario, keys: Arc<KeyStore>) -> Vec<Box<dyn NodeProgram>> {
    let docs = scenario.documents();
    AuthorityId::all(scenario.n)
        .map(|a| -> Box<dyn NodeProgram> {
            match scenario.protocol {
                Protocol::Icps => {
                    Box::new(IcpsNode::new(scenario, keys.clone(), a, docs[a.index()].clone()))
                }
                Protocol::Legacy => {
                    Box::new(LegacyNode::new(scenario, keys.clone(), a, docs[a.index()].clone()))
                }
            }
        })
        .collect()
}

/// Run a scenario, recording the full event log.
pub fn run_scenario(scenario: &Scenario) -> Trace {
    let sim = Sim::new(scenario.clone(), true);
    let keys = sim.keys();
    sim.run(build_programs(scenario, keys))
}

/// Run a scenario for its metrics only (no event log).
pub fn run_scenario_metrics(scenario: &Scenario) -> Metrics {
    let sim = Sim::new(scenario.clone(), false);
    let keys = sim.keys();
    sim.run(build_programs(scenario, keys)).metrics
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn transmission_time_matches_the_store_and_forward_model() {
        // zero payload: latency only
        assert!((transmission_time(0, 10.0, 50.0) - 0.050).abs() < 1e-12);
        // 1.25 MB at 10 Mbit/s: exactly one second
        assert!((transmission_time(1_250_000, 10.0, 0.0) - 1.0).abs() < 1e-12);
        // 1.25 MB at DDoS bandwidth: twenty seconds
        assert!((transmission_time(1_250_000, 0.5, 0.0) - 20.0).abs() < 1e-12);
    }

    #[test]
    fn service_end_integrates_across_segments() {
        // 10 Mbit/s for 1 s, then 0, then 250 Mbit/s
        let segments = vec![
            (0, 1_000_000, 10.0),
            (1_000_000, 2_000_000, 0.0),
            (2_000_000, u64::MAX, 250.0),
        ];
        // 1.25 MB = 10 Mbit: exactly the first segment
        assert_eq!(service_end(&segments, 0, 1_250_000), 1_000_000);
        // 2.5 MB: 10 Mbit in the first second, parked, 10 Mbit at 250 → +40 ms
        assert_eq!(service_end(&segments, 0, 2_500_000), 2_040_000);
        // parked forever when no capacity remains
        let dead = vec![(0, u64::MAX, 0.0)];
        assert_eq!(service_end(&dead, 0, 1), u64::MAX);
    }

    #[test]
    fn zero_bandwidth_parks_until_a_window_opens() {
        let segments = vec![(0, 5_000_000, 0.0), (5_000_000, u64::MAX, 1.0)];
        // 1 byte = 8 bits at 1 Mbit/s = 8 µs after the window opens
        assert_eq!(service_end(&segments, 0, 1), 5_000_008);
    }
}
