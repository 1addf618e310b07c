//! Scenario definition: topology, bandwidths, attack windows, partial
//! synchrony parameters, Byzantine behaviors, and the synthetic document
//! generator. Scenarios load from structured key-value text (TOML).

use std::collections::BTreeMap;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::crypto::SchemeKind;
use crate::types::{AuthorityId, Fingerprint, RelayDescriptor, StatusDocument};

/// Configured misbehavior of one node. Behaviors are deterministic
/// functions of (state, seed).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Behavior {
    Honest,
    /// Sends nothing, ever.
    Silent,
    /// Sends one document variant to the first half of the peers and a
    /// different one to the rest.
    Equivocate,
    /// Proposes an invalid digest vector when leader.
    BogusPropose,
    /// Answers document fetches with wrong bytes.
    WrongFetch,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Protocol {
    Icps,
    Legacy,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SigScheme {
    Mac,
    Ed25519,
}

impl From<SigScheme> for SchemeKind {
    fn from(s: SigScheme) -> SchemeKind {
        match s {
            SigScheme::Mac => SchemeKind::Mac,
            SigScheme::Ed25519 => SchemeKind::Ed25519,
        }
    }
}

/// A DDoS throttling window: the node's usable bandwidth (both
/// directions) drops to `throttled_bandwidth_mbps` during `[start_s,
/// end_s)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackWindow {
    pub node: u16,
    pub start_s: f64,
    pub end_s: f64,
    pub throttled_bandwidth_mbps: f64,
}

/// A targeted pre-GST hold: messages from `from` to `to` are withheld
/// until `until_s` (still subject to the GST+Δ delivery bound).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetedHold {
    pub from: u16,
    pub to: u16,
    pub until_s: f64,
}

fn default_n() -> u16 {
    9
}
fn default_f() -> u16 {
    2
}
fn default_relays() -> u64 {
    1000
}
fn default_per_relay_bytes() -> u64 {
    500
}
fn default_epoch() -> u64 {
    1
}
fn default_latency_ms() -> f64 {
    50.0
}
fn default_bandwidth_mbps() -> f64 {
    250.0
}
fn default_delta_s() -> f64 {
    30.0
}
fn default_view_timeout_s() -> f64 {
    10.0
}
fn default_fetch_retry_s() -> f64 {
    15.0
}
fn default_horizon_s() -> f64 {
    3600.0
}
fn default_seed() -> u64 {
    1
}
fn default_protocol() -> Protocol {
    Protocol::Icps
}
fn default_sig_scheme() -> SigScheme {
    SigScheme::Mac
}
fn default_pre_gst_delay_cap_s() -> f64 {
    30.0
}
fn default_legacy_round_s() -> f64 {
    150.0
}

/// Simulator input. Identical `(Scenario, seed)` pairs produce identical
/// traces. Defaults are the desk-scale setting: nine authorities, two
/// tolerated faults, hourly epoch.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    #[serde(default = "default_n")]
    pub n: u16,
    #[serde(default = "default_f")]
    pub f: u16,
    /// Synthetic relay population size (per-authority document length).
    #[serde(default = "default_relays")]
    pub relays: u64,
    /// Modeled encoded size of one relay entry inside a document.
    #[serde(default = "default_per_relay_bytes")]
    pub per_relay_bytes: u64,
    #[serde(default = "default_epoch")]
    pub epoch: u64,
    /// Uniform link latency, unless a full n×n matrix is given.
    #[serde(default = "default_latency_ms")]
    pub link_latency_ms: f64,
    #[serde(default)]
    pub link_latency_ms_matrix: Option<Vec<Vec<f64>>>,
    /// Nominal per-node bandwidth, unless a per-node list is given.
    #[serde(default = "default_bandwidth_mbps")]
    pub node_bandwidth_mbps: f64,
    #[serde(default)]
    pub node_bandwidth_mbps_per_node: Option<Vec<f64>>,
    #[serde(default)]
    pub attack_windows: Vec<AttackWindow>,
    #[serde(default)]
    pub holds: Vec<TargetedHold>,
    /// Global stabilization time; before it the scheduler may delay and
    /// reorder messages arbitrarily (seeded).
    #[serde(default)]
    pub gst_s: f64,
    /// Post-GST delivery bound Δ, also the document-wait timeout.
    #[serde(default = "default_delta_s")]
    pub delta_s: f64,
    /// Initial view timer; doubles on every view change.
    #[serde(default = "default_view_timeout_s")]
    pub view_timeout_s: f64,
    #[serde(default = "default_fetch_retry_s")]
    pub fetch_retry_s: f64,
    #[serde(default = "default_horizon_s")]
    pub horizon_s: f64,
    #[serde(default = "default_pre_gst_delay_cap_s")]
    pub pre_gst_delay_cap_s: f64,
    /// Node index → behavior; omitted nodes are honest.
    #[serde(default)]
    pub byzantine: BTreeMap<String, Behavior>,
    #[serde(default = "default_seed")]
    pub seed: u64,
    #[serde(default = "default_protocol")]
    pub protocol: Protocol,
    #[serde(default = "default_sig_scheme")]
    pub sig_scheme: SigScheme,
    /// Legacy protocol round length (four rounds total).
    #[serde(default = "default_legacy_round_s")]
    pub legacy_round_s: f64,
    /// Signature quorum; 0 selects the default ⌊n/2⌋+1.
    #[serde(default)]
    pub quorum: u16,
}

impl Default for Scenario {
    fn default() -> Self {
        toml::from_str("").expect("empty scenario uses defaults")
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ScenarioError {
    #[error("scenario parse error: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("scenario field `{field}`: {reason}")]
    Invalid { field: &'static str, reason: String },
}

fn invalid(field: &'static str, reason: impl Into<String>) -> ScenarioError {
    ScenarioError::Invalid { field, reason: reason.into() }
}

impl Scenario {
    pub fn from_toml(text: &str) -> Result<Self, ScenarioError> {
        let s: Scenario = toml::from_str(text)?;
        s.validate()?;
        Ok(s)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("scenario serializes")
    }

    pub fn validate(&self) -> Result<(), ScenarioError> {
        if self.n == 0 {
            return Err(invalid("n", "must be positive"));
        }
        if self.protocol == Protocol::Icps && 3 * self.f + 1 > self.n {
            return Err(invalid("f", format!("requires f < n/3, got n={} f={}", self.n, self.f)));
        }
        if self.relays == 0 {
            return Err(invalid("relays", "must be positive"));
        }
        for (i, w) in self.attack_windows.iter().enumerate() {
            if w.node >= self.n {
                return Err(invalid("attack_windows", format!("window {i}: node {} out of range", w.node)));
            }
            if w.start_s < 0.0 || w.end_s < w.start_s {
                return Err(invalid("attack_windows", format!("window {i}: bad interval")));
            }
            if w.throttled_bandwidth_mbps < 0.0 {
                return Err(invalid("attack_windows", format!("window {i}: negative bandwidth")));
            }
        }
        let mut by_node: BTreeMap<u16, Vec<(f64, f64)>> = BTreeMap::new();
        for w in &self.attack_windows {
            by_node.entry(w.node).or_default().push((w.start_s, w.end_s));
        }
        for (node, mut spans) in by_node {
            spans.sort_by(|a, b| a.partial_cmp(b).unwrap());
            for pair in spans.windows(2) {
                if pair[1].0 < pair[0].1 {
                    return Err(invalid(
                        "attack_windows",
                        format!("overlapping windows for node {node}"),
                    ));
                }
            }
        }
        for key in self.byzantine.keys() {
            let idx: u16 = key
                .parse()
                .map_err(|_| invalid("byzantine", format!("key `{key}` is not a node index")))?;
            if idx >= self.n {
                return Err(invalid("byzantine", format!("node {idx} out of range")));
            }
        }
        if let Some(m) = &self.link_latency_ms_matrix {
            if m.len() != self.n as usize || m.iter().any(|row| row.len() != self.n as usize) {
                return Err(invalid("link_latency_ms_matrix", "must be n × n"));
            }
        }
        if let Some(b) = &self.node_bandwidth_mbps_per_node {
            if b.len() != self.n as usize {
                return Err(invalid("node_bandwidth_mbps_per_node", "must have n entries"));
            }
            if b.iter().any(|x| *x < 0.0) {
                return Err(invalid("node_bandwidth_mbps_per_node", "negative bandwidth"));
            }
        }
        if self.node_bandwidth_mbps < 0.0 {
            return Err(invalid("node_bandwidth_mbps", "negative bandwidth"));
        }
        if self.gst_s < 0.0 {
            return Err(invalid("gst_s", "must be non-negative"));
        }
        if self.delta_s <= 0.0 {
            return Err(invalid("delta_s", "must be positive"));
        }
        if self.view_timeout_s <= 0.0 {
            return Err(invalid("view_timeout_s", "must be positive"));
        }
        if self.horizon_s <= 0.0 {
            return Err(invalid("horizon_s", "must be positive"));
        }
        if self.quorum > self.n {
            return Err(invalid("quorum", "exceeds n"));
        }
        Ok(())
    }

    pub fn behavior(&self, node: AuthorityId) -> Behavior {
        self.byzantine
            .get(&node.0.to_string())
            .copied()
            .unwrap_or(Behavior::Honest)
    }

    pub fn correct(&self, node: AuthorityId) -> bool {
        self.behavior(node) == Behavior::Honest
    }

    pub fn correct_nodes(&self) -> Vec<AuthorityId> {
        AuthorityId::all(self.n).filter(|a| self.correct(*a)).collect()
    }

    /// Effective signature quorum for the legacy protocol and the
    /// aggregation inclusion threshold: ⌊n/2⌋+1 unless overridden.
    pub fn effective_quorum(&self) -> usize {
        if self.quorum == 0 {
            crate::aggregation::default_threshold(self.n)
        } else {
            self.quorum as usize
        }
    }

    pub fn latency_us(&self, from: AuthorityId, to: AuthorityId) -> u64 {
        let ms = match &self.link_latency_ms_matrix {
            Some(m) => m[from.index()][to.index()],
            None => self.link_latency_ms,
        };
        (ms * 1000.0).round() as u64
    }

    pub fn nominal_bandwidth_mbps(&self, node: AuthorityId) -> f64 {
        match &self.node_bandwidth_mbps_per_node {
            Some(b) => b[node.index()],
            None => self.node_bandwidth_mbps,
        }
    }

    /// Piecewise-constant bandwidth segments for a node over the run:
    /// `(start_us, end_us, mbps)`, gap-free from 0 to u64::MAX.
    pub fn bandwidth_segments(&self, node: AuthorityId) -> Vec<(u64, u64, f64)> {
        let nominal = self.nominal_bandwidth_mbps(node);
        let mut windows: Vec<(u64, u64, f64)> = self
            .attack_windows
            .iter()
            .filter(|w| w.node == node.0)
            .map(|w| (secs_to_us(w.start_s), secs_to_us(w.end_s), w.throttled_bandwidth_mbps))
            .collect();
        windows.sort_by_key(|w| w.0);
        let mut segments = Vec::with_capacity(windows.len() * 2 + 1);
        let mut cursor = 0u64;
        for (start, end, mbps) in windows {
            if start > cursor {
                segments.push((cursor, start, nominal));
            }
            segments.push((start, end, mbps));
            cursor = end;
        }
        segments.push((cursor, u64::MAX, nominal));
        segments
    }

    /// Synthesize the per-authority input documents: a shared relay
    /// universe with per-authority measurement jitter, so different vote
    /// subsets aggregate to different documents.
    pub fn documents(&self) -> Vec<Arc<StatusDocument>> {
        AuthorityId::all(self.n)
            .map(|a| Arc::new(synth_document(self, a, 0)))
            .collect()
    }
}

pub fn secs_to_us(s: f64) -> u64 {
    (s * 1e6).round() as u64
}

pub fn us_to_secs(us: u64) -> f64 {
    us as f64 / 1e6
}

/// splitmix64; platform-independent deterministic mixing.
fn mix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

fn mix3(seed: u64, a: u64, b: u64) -> u64 {
    mix(seed ^ mix(a ^ mix(b)))
}

const FLAG_POOL: [&str; 6] = ["Exit", "Fast", "Guard", "Running", "Stable", "Valid"];

/// Deterministic synthetic document for one authority. `variant` selects
/// an alternative digest for equivocation behavior.
pub fn synth_document(scenario: &Scenario, author: AuthorityId, variant: u64) -> StatusDocument {
    let seed = scenario.seed;
    let mut relays = Vec::with_capacity(scenario.relays as usize);
    for r in 0..scenario.relays {
        let base = mix3(seed, r, 0xf1);
        let fp_hash = crate::codec::hash(&base.to_be_bytes());
        let mut flags = std::collections::BTreeSet::new();
        for (k, flag) in FLAG_POOL.iter().enumerate() {
            let baseline = base >> k & 1 == 1;
            // small per-author disagreement on flags
            let flipped = mix3(seed, r ^ base, author.0 as u64 ^ (k as u64) << 8) % 11 == 0;
            if baseline != flipped {
                flags.insert(flag.to_string());
            }
        }
        flags.insert("Running".to_string());
        let measured = mix3(seed, r, author.0 as u64 ^ 0xbeef) % 5 != 0;
        let jitter = mix3(seed, r ^ 0xba5e, author.0 as u64) % 997;
        let bandwidth = 1000 + base % 20_000 + jitter + variant * 7919;
        relays.push(RelayDescriptor {
            fingerprint: Fingerprint(fp_hash.0[..20].to_vec()),
            nickname: format!("relay{r}"),
            flags,
            version: format!("0.4.{}.{}", base % 3 + 6, base >> 2 & 7),
            protocols: format!("Link=1-{}", base % 2 + 4),
            exit_policy_summary: if base >> 5 & 1 == 1 {
                "accept 80,443".to_string()
            } else {
                "reject 1-65535".to_string()
            },
            bandwidth: Some(bandwidth),
            measured,
        });
    }
    StatusDocument::new(author, scenario.epoch, relays).expect("synthetic documents are canonical")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_parse_from_empty_text() {
        let s = Scenario::from_toml("").unwrap();
        assert_eq!(s.n, 9);
        assert_eq!(s.f, 2);
        assert_eq!(s.relays, 1000);
        assert_eq!(s.per_relay_bytes, 500);
        assert_eq!(s.protocol, Protocol::Icps);
        assert_eq!(s.effective_quorum(), 5);
    }

    #[test]
    fn rejects_bad_fault_bound() {
        let err = Scenario::from_toml("n = 9\nf = 3\n").unwrap_err();
        assert!(err.to_string().contains("`f`"), "{err}");
    }

    #[test]
    fn rejects_unknown_field_with_its_name() {
        let err = Scenario::from_toml("bogus_field = 1\n").unwrap_err();
        assert!(err.to_string().contains("bogus_field"), "{err}");
    }

    #[test]
    fn rejects_overlapping_windows() {
        let text = r#"
[[attack_windows]]
node = 0
start_s = 0.0
end_s = 100.0
throttled_bandwidth_mbps = 0.5

[[attack_windows]]
node = 0
start_s = 50.0
end_s = 150.0
throttled_bandwidth_mbps = 0.5
"#;
        let err = Scenario::from_toml(text).unwrap_err();
        assert!(err.to_string().contains("overlapping"), "{err}");
    }

    #[test]
    fn byzantine_map_parses() {
        let s = Scenario::from_toml("[byzantine]\n3 = \"equivocate\"\n7 = \"silent\"\n").unwrap();
        assert_eq!(s.behavior(AuthorityId(3)), Behavior::Equivocate);
        assert_eq!(s.behavior(AuthorityId(7)), Behavior::Silent);
        assert_eq!(s.behavior(AuthorityId(0)), Behavior::Honest);
        assert_eq!(s.correct_nodes().len(), 7);
    }

    #[test]
    fn bandwidth_segments_cover_the_timeline() {
        let text = r#"
[[attack_windows]]
node = 1
start_s = 10.0
end_s = 20.0
throttled_bandwidth_mbps = 0.5
"#;
        let s = Scenario::from_toml(text).unwrap();
        let segs = s.bandwidth_segments(AuthorityId(1));
        assert_eq!(segs.len(), 3);
        assert_eq!(segs[0], (0, 10_000_000, 250.0));
        assert_eq!(segs[1], (10_000_000, 20_000_000, 0.5));
        assert_eq!(segs[2].0, 20_000_000);
        assert_eq!(segs[2].1, u64::MAX);
        let plain = s.bandwidth_segments(AuthorityId(0));
        assert_eq!(plain.len(), 1);
    }

    #[test]
    fn documents_are_deterministic_and_author_distinct() {
        let s = Scenario::from_toml("relays = 20").unwrap();
        let a = s.documents();
        let b = s.documents();
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(
                crate::codec::document_digest(x).unwrap(),
                crate::codec::document_digest(y).unwrap()
            );
        }
        // different authors disagree somewhere
        assert_ne!(
            crate::codec::document_digest(&a[0]).unwrap(),
            crate::codec::document_digest(&a[1]).unwrap()
        );
        // variant documents differ from the original
        let alt = synth_document(&s, AuthorityId(0), 1);
        assert_ne!(
            crate::codec::document_digest(&a[0]).unwrap(),
            crate::codec::document_digest(&alt).unwrap()
        );
    }

    #[test]
    fn different_vote_subsets_aggregate_differently() {
        // the failure mode the attack produces: five authorities holding
        // five different vote subsets must not produce identical documents
        let s = Scenario::from_toml("relays = 30").unwrap();
        let docs = s.documents();
        let t = s.effective_quorum();
        let subset = |skip: usize| {
            let slots: Vec<Option<Arc<StatusDocument>>> = (0..9)
                .map(|j| {
                    (j == skip || j >= 5).then(|| docs[if j == skip { skip } else { j }].clone())
                })
                .collect();
            crate::codec::consensus_encode(&crate::aggregation::aggregate(&slots, t, s.epoch))
                .unwrap()
        };
        assert_ne!(subset(0), subset(1));
    }
}
