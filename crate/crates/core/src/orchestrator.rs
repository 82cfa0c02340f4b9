//! The online perception-reasoning-action loop. Events from the swarm are
//! folded into per-node state; traffic is imaged, embedded, masked and
//! classified with the tier the node's resources allow.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{BufRead, Write};
use std::path::Path;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::classify::{
    select_tier, ClassifierModel, ModelBundle, ModelPool, ResourceStatus, Tier, TierPolicy, Verdict,
};
use crate::diffusion::FeatureMemory;
use crate::imaging::{session_to_image, ImageConfig};
use crate::ingest::FlowSession;
use crate::pso_select::{query_repository, DeviceProfile, FeatureMask, KnowledgeRepository};

#[derive(Debug, Error)]
pub enum OrchestratorError {
    #[error("event {index} at {timestamp_us} us precedes the previous event at {previous_us} us")]
    UnorderedEvents {
        index: usize,
        timestamp_us: u64,
        previous_us: u64,
    },
    #[error("bundle is unusable: {0}")]
    InvalidBundle(String),
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "payload", rename_all = "SCREAMING_SNAKE_CASE")]
pub enum EventBody {
    TrafficBatch { sessions: Vec<FlowSession> },
    NodeJoin { profile: DeviceProfile },
    NodeLeave,
    ResourceUpdate { status: ResourceStatus },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerceptionEvent {
    pub node_id: String,
    pub timestamp_us: u64,
    #[serde(flatten)]
    pub body: EventBody,
}

impl PerceptionEvent {
    pub fn kind(&self) -> &'static str {
        match self.body {
            EventBody::TrafficBatch { .. } => "TRAFFIC_BATCH",
            EventBody::NodeJoin { .. } => "NODE_JOIN",
            EventBody::NodeLeave => "NODE_LEAVE",
            EventBody::ResourceUpdate { .. } => "RESOURCE_UPDATE",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Severity {
    Info,
    Suspect,
    Intrusion,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum AlertAction {
    None,
    Isolated,
    Reported,
}

/// Invariant: an `Intrusion` alert never carries `AlertAction::None`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Alert {
    pub timestamp_us: u64,
    pub node_id: String,
    pub severity: Severity,
    pub action: AlertAction,
    pub session_ids: Vec<String>,
    pub verdicts: Vec<Verdict>,
    pub note: Option<String>,
}

/// Everything the online loop needs, produced by the offline stages.
#[derive(Debug, Clone)]
pub struct PipelineBundle {
    pub image: ImageConfig,
    pub memory: FeatureMemory,
    pub repository: KnowledgeRepository,
    pub models: ModelBundle,
    pub policy: TierPolicy,
}

impl PipelineBundle {
    pub fn validate(&self) -> Result<(), OrchestratorError> {
        let bad = |m: String| OrchestratorError::InvalidBundle(m);
        self.image.validate().map_err(|e| bad(e.to_string()))?;
        if (self.image.height, self.image.width) != (self.memory.image_height, self.memory.image_width) {
            return Err(bad("image shape differs from the feature memory".into()));
        }
        if self.models.pools.is_empty() {
            return Err(bad("no model pools".into()));
        }
        let full = FeatureMask::full(self.repository.feature_count);
        if self.models.input.uses_tabular() && self.models.pool_for(&full).is_none() {
            return Err(bad("no model pool for the full feature mask".into()));
        }
        for pool in &self.models.pools {
            for tier in Tier::ALL {
                if pool.get(tier).is_none() {
                    return Err(bad(format!("a pool lacks the {tier:?} tier")));
                }
            }
        }
        Ok(())
    }

    /// The pool trained for `mask`, or the full-mask pool when none was.
    /// Without tabular input there is a single pool.
    fn pool(&self, mask: &FeatureMask) -> (&ModelPool, bool) {
        if !self.models.input.uses_tabular() {
            return (&self.models.pools[0], true);
        }
        match self.models.pool_for(mask) {
            Some(p) => (p, true),
            None => (
                self.models
                    .pool_for(&FeatureMask::full(self.repository.feature_count))
                    .expect("validated bundle has a full-mask pool"),
                false,
            ),
        }
    }

    /// Runs one session through imaging, the feature memory and `model`.
    pub fn classify_session(&self, session: &FlowSession, model: &ClassifierModel) -> Result<Verdict, String> {
        let image = session_to_image(session, &self.image, self.models.scaler.as_ref()).map_err(|e| e.to_string())?;
        let representation = if self.models.input.uses_representation() {
            self.memory.extract(&image).map_err(|e| e.to_string())?
        } else {
            Vec::new()
        };
        if self.models.input.uses_tabular() && session.tabular_features.len() != model.feature_mask.len() {
            return Err(format!(
                "session {} has {} features, model expects {}",
                session.session_id,
                session.tabular_features.len(),
                model.feature_mask.len()
            ));
        }
        let x = self
            .models
            .input
            .assemble(&session.tabular_features, &model.feature_mask, &representation);
        model.predict(&x).map_err(|e| e.to_string())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OrchestratorConfig {
    /// Malicious fraction of a batch at which the node is isolated.
    pub theta_isolate: f64,
    /// Profile assumed for nodes that send traffic without joining; `None`
    /// uses every feature.
    pub default_profile: Option<DeviceProfile>,
}

impl Default for OrchestratorConfig {
    fn default() -> Self {
        OrchestratorConfig {
            theta_isolate: 0.5,
            default_profile: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeState {
    pub mask: FeatureMask,
    /// Repository entry the mask came from, if any.
    pub entry_id: Option<String>,
    pub status: ResourceStatus,
    pub tier: Tier,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct OrchestratorState {
    pub nodes: BTreeMap<String, NodeState>,
    pub isolated: BTreeSet<String>,
    pub dropped_batches: BTreeMap<String, usize>,
}

impl OrchestratorState {
    pub fn is_isolated(&self, node: &str) -> bool {
        self.isolated.contains(node)
    }

    pub fn dropped(&self, node: &str) -> usize {
        self.dropped_batches.get(node).copied().unwrap_or(0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionVerdict {
    pub node_id: String,
    pub session_id: String,
    pub label: Option<String>,
    pub verdict: Verdict,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct EventOutcome {
    pub alerts: Vec<Alert>,
    pub verdicts: Vec<SessionVerdict>,
}

fn alert(event: &PerceptionEvent, severity: Severity, action: AlertAction, note: impl Into<String>) -> Alert {
    Alert {
        timestamp_us: event.timestamp_us,
        node_id: event.node_id.clone(),
        severity,
        action,
        session_ids: Vec::new(),
        verdicts: Vec::new(),
        note: Some(note.into()),
    }
}

/// Registers (or re-registers) a node. Returns a note when the repository
/// could not supply a mask.
fn register(
    state: &mut OrchestratorState,
    bundle: &PipelineBundle,
    node: &str,
    profile: Option<&DeviceProfile>,
) -> Option<String> {
    let (mask, entry_id, problem) = match profile.map(|p| query_repository(&bundle.repository, p, None)) {
        Some(Ok(m)) => (m.mask, Some(m.entry_id), None),
        Some(Err(e)) => (
            FeatureMask::full(bundle.repository.feature_count),
            None,
            Some(format!("repository query failed, using all features: {e}")),
        ),
        None => (FeatureMask::full(bundle.repository.feature_count), None, None),
    };
    let status = state
        .nodes
        .get(node)
        .map(|n| n.status)
        .unwrap_or_else(ResourceStatus::full);
    let tier = bundle.policy.choose(&status);
    state.nodes.insert(
        node.to_string(),
        NodeState {
            mask,
            entry_id,
            status,
            tier,
        },
    );
    problem
}

/// Applies one event. Pipeline failures become `REPORTED` alerts; this never
/// fails.
pub fn handle_event(
    state: &mut OrchestratorState,
    bundle: &PipelineBundle,
    cfg: &OrchestratorConfig,
    event: &PerceptionEvent,
) -> EventOutcome {
    let mut out = EventOutcome::default();
    let node = event.node_id.as_str();
    match &event.body {
        EventBody::NodeJoin { profile } => {
            if let Some(problem) = register(state, bundle, node, Some(profile)) {
                out.alerts
                    .push(alert(event, Severity::Info, AlertAction::Reported, problem));
            }
        }
        EventBody::NodeLeave => {
            state.nodes.remove(node);
        }
        EventBody::ResourceUpdate { status } => {
            let Some(ns) = state.nodes.get_mut(node) else {
                return out;
            };
            match select_tier(bundle.pool(&ns.mask).0, status, &bundle.policy) {
                Ok(tier) => {
                    ns.status = *status;
                    ns.tier = tier;
                }
                Err(e) => out.alerts.push(alert(
                    event,
                    Severity::Info,
                    AlertAction::Reported,
                    format!("resource update rejected: {e}"),
                )),
            }
        }
        EventBody::TrafficBatch { sessions } => {
            let session_ids: Vec<String> = sessions.iter().map(|s| s.session_id.clone()).collect();
            if state.is_isolated(node) {
                *state.dropped_batches.entry(node.to_string()).or_insert(0) += 1;
                let mut a = alert(
                    event,
                    Severity::Info,
                    AlertAction::None,
                    "batch dropped: node is isolated",
                );
                a.session_ids = session_ids;
                out.alerts.push(a);
                return out;
            }
            if !state.nodes.contains_key(node) {
                let problem = register(state, bundle, node, cfg.default_profile.as_ref());
                let mut note = "traffic from an unregistered node; registered with the default profile".to_string();
                if let Some(p) = problem {
                    note = format!("{note}; {p}");
                }
                let mut a = alert(event, Severity::Suspect, AlertAction::Reported, note);
                a.session_ids = session_ids.clone();
                out.alerts.push(a);
            }
            if sessions.is_empty() {
                return out;
            }
            let ns = &state.nodes[node];
            let (pool, exact) = bundle.pool(&ns.mask);
            let model = pool.get(ns.tier).expect("validated pool has every tier");
            let verdicts: Result<Vec<Verdict>, String> =
                sessions.par_iter().map(|s| bundle.classify_session(s, model)).collect();
            let verdicts = match verdicts {
                Ok(v) => v,
                Err(e) => {
                    let mut a = alert(
                        event,
                        Severity::Info,
                        AlertAction::Reported,
                        format!("pipeline error: {e}"),
                    );
                    a.session_ids = session_ids;
                    out.alerts.push(a);
                    return out;
                }
            };
            let malicious = verdicts.iter().filter(|v| v.is_malicious).count();
            let fraction = malicious as f64 / verdicts.len() as f64;
            let pool_note = if exact {
                ""
            } else {
                " (no pool for the node's mask; full-feature models used)"
            };
            if fraction >= cfg.theta_isolate {
                state.isolated.insert(node.to_string());
                out.alerts.push(Alert {
                    timestamp_us: event.timestamp_us,
                    node_id: node.to_string(),
                    severity: Severity::Intrusion,
                    action: AlertAction::Isolated,
                    session_ids: session_ids.clone(),
                    verdicts: verdicts.clone(),
                    note: Some(format!("{malicious}/{} sessions malicious{pool_note}", verdicts.len())),
                });
            } else if malicious > 0 {
                out.alerts.push(Alert {
                    timestamp_us: event.timestamp_us,
                    node_id: node.to_string(),
                    severity: Severity::Suspect,
                    action: AlertAction::Reported,
                    session_ids: session_ids.clone(),
                    verdicts: verdicts.clone(),
                    note: Some(format!("{malicious}/{} sessions malicious{pool_note}", verdicts.len())),
                });
            }
            out.verdicts = sessions
                .iter()
                .zip(verdicts)
                .map(|(s, verdict)| SessionVerdict {
                    node_id: node.to_string(),
                    session_id: s.session_id.clone(),
                    label: s.label.clone(),
                    verdict,
                })
                .collect();
        }
    }
    out
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LatencyStats {
    pub events: usize,
    pub mean_us: f64,
    pub p50_us: f64,
    pub p95_us: f64,
    pub max_us: f64,
}

impl LatencyStats {
    pub fn from_samples(samples: &[f64]) -> Self {
        if samples.is_empty() {
            return LatencyStats::default();
        }
        let mut sorted = samples.to_vec();
        sorted.sort_by(f64::total_cmp);
        let pick = |q: f64| sorted[((sorted.len() - 1) as f64 * q).round() as usize];
        LatencyStats {
            events: samples.len(),
            mean_us: samples.iter().sum::<f64>() / samples.len() as f64,
            p50_us: pick(0.5),
            p95_us: pick(0.95),
            max_us: sorted[sorted.len() - 1],
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ScenarioSummary {
    pub events: usize,
    pub events_by_kind: BTreeMap<String, usize>,
    pub alerts_by_severity: BTreeMap<Severity, usize>,
    pub sessions_classified: usize,
    pub isolated_nodes: Vec<String>,
    pub dropped_batches: BTreeMap<String, usize>,
}

#[derive(Debug, Clone)]
pub struct ScenarioRun {
    pub alerts: Vec<Alert>,
    pub verdicts: Vec<SessionVerdict>,
    /// Wall-clock handling time per event; not reproducible.
    pub latency: LatencyStats,
    pub summary: ScenarioSummary,
    pub state: OrchestratorState,
}

/// Folds `handle_event` over a timestamp-ordered event list.
pub fn run_scenario(
    events: &[PerceptionEvent],
    bundle: &PipelineBundle,
    cfg: &OrchestratorConfig,
) -> Result<ScenarioRun, OrchestratorError> {
    for (i, pair) in events.windows(2).enumerate() {
        if pair[1].timestamp_us < pair[0].timestamp_us {
            return Err(OrchestratorError::UnorderedEvents {
                index: i + 1,
                timestamp_us: pair[1].timestamp_us,
                previous_us: pair[0].timestamp_us,
            });
        }
    }
    bundle.validate()?;
    let mut state = OrchestratorState::default();
    let mut alerts = Vec::new();
    let mut verdicts = Vec::new();
    let mut samples = Vec::with_capacity(events.len());
    let mut summary = ScenarioSummary {
        events: events.len(),
        ..ScenarioSummary::default()
    };
    for event in events {
        *summary.events_by_kind.entry(event.kind().to_string()).or_insert(0) += 1;
        let started = Instant::now();
        let outcome = handle_event(&mut state, bundle, cfg, event);
        samples.push(started.elapsed().as_secs_f64() * 1e6);
        alerts.extend(outcome.alerts);
        verdicts.extend(outcome.verdicts);
    }
    for a in &alerts {
        *summary.alerts_by_severity.entry(a.severity).or_insert(0) += 1;
    }
    summary.sessions_classified = verdicts.len();
    summary.isolated_nodes = state.isolated.iter().cloned().collect();
    summary.dropped_batches = state.dropped_batches.clone();
    Ok(ScenarioRun {
        alerts,
        verdicts,
        latency: LatencyStats::from_samples(&samples),
        summary,
        state,
    })
}

pub fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<(), OrchestratorError> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    for item in items {
        serde_json::to_writer(&mut w, item).map_err(std::io::Error::other)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>, OrchestratorError> {
    let reader = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| OrchestratorError::Parse {
            line: i + 1,
            message: e.to_string(),
        })?);
    }
    Ok(out)
}

/// Alert log as JSON Lines text.
pub fn alerts_to_jsonl(alerts: &[Alert]) -> String {
    let mut s = String::new();
    for a in alerts {
        s.push_str(&serde_json::to_string(a).expect("alert serializes"));
        s.push('\n');
    }
    s
}
