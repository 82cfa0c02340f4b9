//! Simulated low-altitude swarm: node churn, battery drain, CPU load and
//! replayed traffic with attack injection, plus a synthetic labeled corpus.

use std::collections::BTreeMap;

use rand::seq::IndexedRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::classify::ResourceStatus;
use crate::ingest::{FeatureSchema, FiveTuple, FlowSession, Protocol};
use crate::orchestrator::{EventBody, PerceptionEvent};
use crate::pso_select::DeviceProfile;
use crate::util::seeded_rng;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SimError {
    #[error("replay source has no sessions of class {0}")]
    MissingClassInSource(String),
    #[error("invalid simulation config: {0}")]
    InvalidConfig(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimConfig {
    /// Size of the node pool.
    pub nodes: usize,
    /// Nodes present (joining) at step 0; the rest start absent.
    pub initial_nodes: usize,
    pub steps: usize,
    pub step_us: u64,
    /// Per-step probability that an absent node joins.
    pub join_prob: f64,
    /// Per-step probability that a present node leaves.
    pub leave_prob: f64,
    /// Per-step probability that a present node sends a traffic batch.
    pub traffic_prob: f64,
    pub batch_size: usize,
    /// A resource update is emitted every this many steps per present node.
    pub resource_every: usize,
    pub drain_mean: f64,
    pub drain_jitter: f64,
    pub cpu_step: f64,
    /// Class name to the fraction of batches drawn from it; the rest are benign.
    pub attack_mix: BTreeMap<String, f64>,
    pub benign_class: String,
    pub profiles: Vec<DeviceProfile>,
    pub seed: u64,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            nodes: 5,
            initial_nodes: 5,
            steps: 50,
            step_us: 1_000_000,
            join_prob: 0.1,
            leave_prob: 0.05,
            traffic_prob: 0.5,
            batch_size: 8,
            resource_every: 5,
            drain_mean: 0.01,
            drain_jitter: 0.005,
            cpu_step: 0.1,
            attack_mix: BTreeMap::from([("malicious".to_string(), 0.2)]),
            benign_class: "benign".into(),
            profiles: default_profiles("synthetic"),
            seed: 7,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<(), SimError> {
        let bad = |m: &str| Err(SimError::InvalidConfig(m.to_string()));
        let probability = |p: f64| (0.0..=1.0).contains(&p);
        if !(probability(self.join_prob) && probability(self.leave_prob) && probability(self.traffic_prob)) {
            return bad("probabilities must lie in [0, 1]");
        }
        if self.attack_mix.values().any(|f| !probability(*f)) || self.attack_mix.values().sum::<f64>() > 1.0 + 1e-12 {
            return bad("attack fractions must lie in [0, 1] and sum to at most 1");
        }
        if self.initial_nodes > self.nodes {
            return bad("initial_nodes exceeds nodes");
        }
        if self.profiles.is_empty() {
            return bad("at least one device profile is required");
        }
        if !(self.drain_mean >= 0.0 && self.drain_jitter >= 0.0 && self.cpu_step >= 0.0) {
            return bad("drain and cpu step must be nonnegative");
        }
        if self.batch_size == 0 || self.resource_every == 0 || self.step_us == 0 {
            return bad("batch_size, resource_every and step_us must be positive");
        }
        Ok(())
    }
}

/// Three archetypal device classes. Attributes are battery capacity (Wh),
/// CPU clock (MHz), memory (MB) and uplink rate (kbit/s).
pub fn default_profiles(schema: &str) -> Vec<DeviceProfile> {
    [
        ("quadrotor", [90.0, 1500.0, 2048.0, 20000.0]),
        ("fixed_wing", [250.0, 1000.0, 1024.0, 5000.0]),
        ("ground_sensor", [10.0, 120.0, 64.0, 250.0]),
    ]
    .into_iter()
    .map(|(class, attrs)| DeviceProfile {
        device_class: class.to_string(),
        attributes: attrs.to_vec(),
        schema: schema.to_string(),
    })
    .collect()
}

struct NodeSim {
    present: bool,
    battery: f64,
    cpu: f64,
    profile: DeviceProfile,
}

/// Generates a timestamp-ordered event stream. Within a step, nodes are
/// visited in index order and each emits at most one churn event, then a
/// resource update, then a traffic batch.
pub fn generate_scenario(cfg: &SimConfig, replay: &[FlowSession]) -> Result<Vec<PerceptionEvent>, SimError> {
    cfg.validate()?;
    let mut by_class: BTreeMap<&str, Vec<&FlowSession>> = BTreeMap::new();
    for s in replay {
        if let Some(label) = &s.label {
            by_class.entry(label.as_str()).or_default().push(s);
        }
    }
    let mut mix: Vec<(&str, f64)> = cfg
        .attack_mix
        .iter()
        .filter(|(_, f)| **f > 0.0)
        .map(|(c, f)| (c.as_str(), *f))
        .collect();
    let benign_share = 1.0 - mix.iter().map(|(_, f)| f).sum::<f64>();
    if benign_share > 0.0 {
        mix.push((cfg.benign_class.as_str(), benign_share));
    }
    if cfg.traffic_prob > 0.0 {
        for (class, _) in &mix {
            if by_class.get(class).is_none_or(|v| v.is_empty()) {
                return Err(SimError::MissingClassInSource(class.to_string()));
            }
        }
    }

    let mut rng = seeded_rng(cfg.seed, 0x5177);
    let mut nodes: Vec<NodeSim> = (0..cfg.nodes)
        .map(|i| NodeSim {
            present: false,
            battery: rng.random_range(0.6..=1.0),
            cpu: rng.random_range(0.05..0.5),
            profile: cfg.profiles[i % cfg.profiles.len()].clone(),
        })
        .collect();
    let mut events = Vec::new();
    for step in 0..cfg.steps {
        let ts = step as u64 * cfg.step_us;
        for (i, node) in nodes.iter_mut().enumerate() {
            let node_id = format!("node-{i}");
            let event = |body: EventBody| PerceptionEvent {
                node_id: node_id.clone(),
                timestamp_us: ts,
                body,
            };
            let churn: f64 = rng.random();
            if step == 0 {
                if i < cfg.initial_nodes {
                    node.present = true;
                    events.push(event(EventBody::NodeJoin {
                        profile: node.profile.clone(),
                    }));
                }
            } else if node.present && churn < cfg.leave_prob {
                node.present = false;
                events.push(event(EventBody::NodeLeave));
            } else if !node.present && churn < cfg.join_prob {
                node.present = true;
                events.push(event(EventBody::NodeJoin {
                    profile: node.profile.clone(),
                }));
            }
            let jitter: f64 = rng.random_range(-1.0..=1.0);
            let cpu_move: f64 = rng.random_range(-1.0..=1.0);
            let send: f64 = rng.random();
            let class_draw: f64 = rng.random();
            if !node.present {
                continue;
            }
            let drain = (cfg.drain_mean + cfg.drain_jitter * jitter).max(0.0);
            node.battery = (node.battery - drain).clamp(0.0, 1.0);
            node.cpu = (node.cpu + cfg.cpu_step * cpu_move).clamp(0.0, 1.0);
            if step % cfg.resource_every == 0 {
                events.push(event(EventBody::ResourceUpdate {
                    status: ResourceStatus {
                        battery_fraction: node.battery,
                        cpu_load: node.cpu,
                        memory_free_fraction: 1.0 - 0.5 * node.cpu,
                    },
                }));
            }
            if send < cfg.traffic_prob {
                let mut acc = 0.0;
                let mut class = mix[mix.len() - 1].0;
                for (c, f) in &mix {
                    acc += f;
                    if class_draw < acc {
                        class = c;
                        break;
                    }
                }
                let pool = &by_class[class];
                let sessions = (0..cfg.batch_size)
                    .map(|k| {
                        let src = *pool.choose(&mut rng).expect("nonempty class pool");
                        let mut s = src.clone();
                        s.session_id = format!("{node_id}/{step}/{k}/{}", src.session_id);
                        s.start_time_us = ts;
                        s
                    })
                    .collect();
                events.push(event(EventBody::TrafficBatch { sessions }));
            }
        }
    }
    Ok(events)
}

/// Event counts in the order join, leave, resource update, traffic batch,
/// then total sessions replayed.
pub fn event_counts(events: &[PerceptionEvent]) -> [usize; 5] {
    let mut c = [0; 5];
    for e in events {
        match &e.body {
            EventBody::NodeJoin { .. } => c[0] += 1,
            EventBody::NodeLeave => c[1] += 1,
            EventBody::ResourceUpdate { .. } => c[2] += 1,
            EventBody::TrafficBatch { sessions } => {
                c[3] += 1;
                c[4] += sessions.len();
            }
        }
    }
    c
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub n_benign: usize,
    pub n_malicious: usize,
    /// Longest payload in bytes; lengths are drawn from `[max/4, max]`.
    pub payload_len: usize,
    /// Benign bytes are perturbed by up to this many levels.
    pub benign_noise: u8,
    /// Fraction of benign bytes that receive noise.
    pub noise_rate: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_benign: 1000,
            n_malicious: 1000,
            payload_len: 1024,
            benign_noise: 8,
            noise_rate: 0.1,
            seed: 42,
        }
    }
}

pub const SYNTH_FEATURES: [&str; 10] = [
    "payload_len",
    "byte_mean",
    "byte_std",
    "byte_entropy",
    "zero_frac",
    "printable_frac",
    "distinct_frac",
    "longest_run_frac",
    "mean_abs_diff",
    "first_byte",
];

pub const SYNTH_CLASSES: [&str; 2] = ["benign", "malicious"];

pub fn synth_schema() -> FeatureSchema {
    FeatureSchema::new(
        "synthetic",
        SYNTH_FEATURES.iter().map(|s| s.to_string()).collect(),
        SYNTH_CLASSES.iter().map(|s| s.to_string()).collect(),
    )
    .expect("static schema is valid")
}

const TEMPLATES: [&[u8]; 4] = [
    b"MQTT\x04\x02\x00\x3c\x00\x0ctelemetry/uav{\"alt\":120,\"spd\":14,\"bat\":87}",
    b"GET /status HTTP/1.1\r\nHost: gcs.local\r\nAccept: */*\r\n\r\n",
    b"\xfe\x1c\x00\x01\x01\x21\x00\x00\x00\x00\x10\x27\x00\x00MAVLINK_GLOBAL_POSITION_INT",
    b"CoAP\x40\x01\x04\xd2\xb4sensors\x03env\xffT=21.5;H=40;P=1013",
];

/// Summary statistics of a payload, in `SYNTH_FEATURES` order.
pub fn payload_features(payload: &[u8]) -> Vec<f64> {
    let n = payload.len();
    if n == 0 {
        return vec![0.0; SYNTH_FEATURES.len()];
    }
    let nf = n as f64;
    let mut hist = [0usize; 256];
    for &b in payload {
        hist[b as usize] += 1;
    }
    let mean = payload.iter().map(|&b| b as f64).sum::<f64>() / nf;
    let var = payload.iter().map(|&b| (b as f64 - mean).powi(2)).sum::<f64>() / nf;
    let entropy = -hist
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / nf;
            p * p.log2()
        })
        .sum::<f64>();
    let printable = payload.iter().filter(|b| (0x20..0x7f).contains(*b)).count();
    let distinct = hist.iter().filter(|&&c| c > 0).count();
    let mut longest = 1;
    let mut run = 1;
    for w in payload.windows(2) {
        run = if w[0] == w[1] { run + 1 } else { 1 };
        longest = longest.max(run);
    }
    let abs_diff = payload
        .windows(2)
        .map(|w| (w[0] as f64 - w[1] as f64).abs())
        .sum::<f64>()
        / (n.max(2) - 1) as f64;
    vec![
        nf,
        mean,
        var.sqrt(),
        entropy,
        hist[0] as f64 / nf,
        printable as f64 / nf,
        distinct as f64 / 256.0,
        longest as f64 / nf,
        abs_diff,
        payload[0] as f64,
    ]
}

fn random_tuple(rng: &mut impl Rng, proto: Protocol) -> FiveTuple {
    FiveTuple::new(
        format!("10.0.{}.{}", rng.random_range(0..8u8), rng.random_range(1..255u8)),
        rng.random_range(1024..65535u16),
        format!("10.1.0.{}", rng.random_range(1..32u8)),
        [1883u16, 80, 14550, 5683][rng.random_range(0..4usize)],
        proto,
    )
}

/// Labeled synthetic sessions: benign payloads repeat a protocol-like
/// template with light noise, malicious ones keep a template header and then
/// turn into uniformly random bytes. Benign sessions come first.
pub fn synth_corpus(cfg: &SynthConfig) -> Vec<FlowSession> {
    let mut rng = seeded_rng(cfg.seed, 0x5E);
    let max_len = cfg.payload_len.max(16);
    let mut out = Vec::with_capacity(cfg.n_benign + cfg.n_malicious);
    for i in 0..cfg.n_benign + cfg.n_malicious {
        let malicious = i >= cfg.n_benign;
        let template = TEMPLATES[rng.random_range(0..TEMPLATES.len())];
        let len = rng.random_range(max_len / 4..=max_len);
        let header = rng.random_range(4..=12usize).min(template.len());
        let payload: Vec<u8> = (0..len)
            .map(|k| {
                if malicious && k >= header {
                    rng.random()
                } else {
                    let b = template[k % template.len()];
                    if !malicious && cfg.benign_noise > 0 && rng.random::<f64>() < cfg.noise_rate {
                        let d = rng.random_range(-(cfg.benign_noise as i16)..=cfg.benign_noise as i16);
                        (b as i16 + d).clamp(0, 255) as u8
                    } else {
                        b
                    }
                }
            })
            .collect();
        let proto = if rng.random::<bool>() {
            Protocol::Tcp
        } else {
            Protocol::Udp
        };
        out.push(FlowSession {
            session_id: format!("synth-{i}"),
            five_tuple: random_tuple(&mut rng, proto),
            start_time_us: i as u64 * 1000,
            tabular_features: payload_features(&payload),
            payload,
            label: Some(SYNTH_CLASSES[malicious as usize].to_string()),
        });
    }
    out
}
