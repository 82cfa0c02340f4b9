//! The swarm "algorithm expert": turns epoch summaries into new PSO
//! parameters. A deterministic rule table is always available; the remote
//! advisor asks an OpenAI-style chat endpoint and falls back to the rule
//! table on any failure.

use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use crate::pso_select::{AdvisorSummary, DeviceProfile, PsoParams};
use crate::util::sha256_hex;

const ADVICE_PROMPT: &str = "\
You supervise a binary particle swarm that selects a feature subset for a network intrusion detector.
Summary of the epoch that just finished (JSON):
{summary}
Your most recent directives, oldest first (JSON):
{history}
Diagnose the swarm as exactly one of HEALTHY, PREMATURE_CONVERGENCE, STAGNATION, DIVERGENT_SEARCH.
Low diversity with no recent improvement calls for more exploration; high diversity with no improvement calls for a stronger pull toward the global best.
Propose the inertia weight w and the cognitive and social coefficients c1, c2 for the next epoch, with 0 <= w <= 1.2, 0 <= c1 <= 4, 0 <= c2 <= 4.
Reply with one JSON object and nothing else:
{\"w\": <number>, \"c1\": <number>, \"c2\": <number>, \"diagnosis\": \"<label>\", \"rationale\": \"<one sentence>\"}";

const PICK_PROMPT: &str = "\
A device is joining an aerial IoT swarm and needs a feature subset for intrusion detection.
Device profile (JSON):
{profile}
Candidate knowledge-repository entries, most similar first (JSON):
{candidates}
Pick the entry whose device is the closest operational match.
Reply with one JSON object and nothing else: {\"entry_id\": \"<id>\"}";

/// Digest of both prompt templates, recorded in run manifests.
pub fn prompt_template_digest() -> String {
    sha256_hex(format!("{ADVICE_PROMPT}\n--\n{PICK_PROMPT}").as_bytes())
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AdvisorError {
    #[error("request timed out")]
    Timeout,
    #[error("http error: {0}")]
    HttpError(String),
    #[error("malformed response: {0}")]
    MalformedResponse(String),
    #[error("api key variable {0} is not set")]
    MissingApiKey(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Diagnosis {
    Healthy,
    PrematureConvergence,
    Stagnation,
    DivergentSearch,
}

impl Diagnosis {
    fn parse(label: &str) -> Option<Diagnosis> {
        match label.trim().to_ascii_uppercase().as_str() {
            "HEALTHY" => Some(Diagnosis::Healthy),
            "PREMATURE_CONVERGENCE" => Some(Diagnosis::PrematureConvergence),
            "STAGNATION" => Some(Diagnosis::Stagnation),
            "DIVERGENT_SEARCH" => Some(Diagnosis::DivergentSearch),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdvisorDirective {
    pub new_params: PsoParams,
    pub diagnosis: Diagnosis,
    pub rationale: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdviceSource {
    Rule,
    Identity,
    Remote,
    /// Remote advice failed and the rule table answered instead.
    Fallback,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Advice {
    pub directive: AdvisorDirective,
    pub source: AdviceSource,
    pub fallback_reason: Option<String>,
}

/// A repository entry offered to the advisor when no device class matches.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RepositoryCandidate {
    pub id: String,
    pub profile: DeviceProfile,
    pub similarity: f64,
}

pub trait Advisor {
    fn advise(&mut self, summary: &AdvisorSummary, history: &[AdvisorDirective]) -> Advice;

    /// Chooses among repository candidates; `None` keeps the similarity winner.
    fn pick_entry(&mut self, _candidates: &[RepositoryCandidate], _profile: &DeviceProfile) -> Option<String> {
        None
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RuleThresholds {
    pub low_diversity: f64,
    pub premature_patience: usize,
    pub stagnation_patience: usize,
    pub divergence_epochs: usize,
}

impl Default for RuleThresholds {
    fn default() -> Self {
        RuleThresholds {
            low_diversity: 0.15,
            premature_patience: 3,
            stagnation_patience: 5,
            divergence_epochs: 3,
        }
    }
}

/// Deterministic diagnosis table. Rules are checked in order: premature
/// convergence, stagnation, divergent search; otherwise healthy.
pub fn rule_advise(summary: &AdvisorSummary, thresholds: &RuleThresholds) -> AdvisorDirective {
    let p = summary.params;
    let (diagnosis, params, rationale) = if summary.population_diversity < thresholds.low_diversity
        && summary.epochs_since_improvement >= thresholds.premature_patience
    {
        (
            Diagnosis::PrematureConvergence,
            PsoParams {
                inertia_weight: p.inertia_weight + 0.2,
                cognitive: p.cognitive + 0.5,
                social: p.social - 0.5,
                ..p
            },
            "swarm collapsed without improving; widen exploration",
        )
    } else if summary.population_diversity >= thresholds.low_diversity
        && summary.epochs_since_improvement >= thresholds.stagnation_patience
    {
        (
            Diagnosis::Stagnation,
            PsoParams {
                inertia_weight: p.inertia_weight - 0.1,
                social: p.social + 0.5,
                ..p
            },
            "diverse swarm is not improving; pull toward the global best",
        )
    } else if summary.consecutive_mean_declines >= thresholds.divergence_epochs {
        (
            Diagnosis::DivergentSearch,
            PsoParams {
                inertia_weight: p.inertia_weight - 0.2,
                ..p
            },
            "mean fitness keeps falling; damp the velocities",
        )
    } else {
        (Diagnosis::Healthy, p, "no intervention needed")
    };
    AdvisorDirective {
        new_params: params.clamped(&p),
        diagnosis,
        rationale: rationale.to_string(),
    }
}

#[derive(Debug, Clone, Default)]
pub struct RuleAdvisor {
    pub thresholds: RuleThresholds,
}

impl Advisor for RuleAdvisor {
    fn advise(&mut self, summary: &AdvisorSummary, _history: &[AdvisorDirective]) -> Advice {
        Advice {
            directive: rule_advise(summary, &self.thresholds),
            source: AdviceSource::Rule,
            fallback_reason: None,
        }
    }
}

/// Keeps the current parameters forever (fixed-parameter PSO).
#[derive(Debug, Clone, Copy, Default)]
pub struct IdentityAdvisor;

impl Advisor for IdentityAdvisor {
    fn advise(&mut self, summary: &AdvisorSummary, _history: &[AdvisorDirective]) -> Advice {
        Advice {
            directive: AdvisorDirective {
                new_params: summary.params,
                diagnosis: Diagnosis::Healthy,
                rationale: "fixed parameters".into(),
            },
            source: AdviceSource::Identity,
            fallback_reason: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RemoteAdvisorConfig {
    /// Full chat-completions URL.
    pub endpoint: String,
    pub model: String,
    pub timeout_s: f64,
    pub max_retries: u32,
    pub api_key_env: String,
}

impl Default for RemoteAdvisorConfig {
    fn default() -> Self {
        RemoteAdvisorConfig {
            endpoint: "https://api.openai.com/v1/chat/completions".into(),
            model: "gpt-4o-mini".into(),
            timeout_s: 30.0,
            max_retries: 2,
            api_key_env: "OPENAI_API_KEY".into(),
        }
    }
}

impl RemoteAdvisorConfig {
    pub fn validate(&self) -> Result<(), AdvisorError> {
        if !(self.timeout_s > 0.0 && self.timeout_s.is_finite()) {
            return Err(AdvisorError::HttpError(format!("invalid timeout {}", self.timeout_s)));
        }
        Ok(())
    }
}

/// One request/response pair. The API key never appears here.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Exchange {
    pub purpose: String,
    pub attempt: u32,
    pub request: Value,
    pub status: Option<u16>,
    pub response: Option<String>,
    pub error: Option<String>,
}

fn chat(
    cfg: &RemoteAdvisorConfig,
    purpose: &str,
    prompt: &str,
    log: &mut Vec<Exchange>,
) -> Result<String, AdvisorError> {
    cfg.validate()?;
    let key = std::env::var(&cfg.api_key_env).map_err(|_| AdvisorError::MissingApiKey(cfg.api_key_env.clone()))?;
    let body = json!({
        "model": cfg.model,
        "messages": [{"role": "user", "content": prompt}],
        "temperature": 0,
        "response_format": {"type": "json_object"},
    });
    let mut logged_request = body.clone();
    logged_request["authorization"] = json!("Bearer [REDACTED]");
    let agent: ureq::Agent = ureq::Agent::config_builder()
        .timeout_global(Some(Duration::from_secs_f64(cfg.timeout_s)))
        .http_status_as_error(false)
        .build()
        .into();
    let payload = body.to_string();

    let mut last = AdvisorError::HttpError("no attempt made".into());
    for attempt in 0..=cfg.max_retries {
        let mut entry = Exchange {
            purpose: purpose.to_string(),
            attempt,
            request: logged_request.clone(),
            status: None,
            response: None,
            error: None,
        };
        let outcome = agent
            .post(&cfg.endpoint)
            .header("Authorization", &format!("Bearer {key}"))
            .header("Content-Type", "application/json")
            .send(payload.as_str())
            .and_then(|mut resp| {
                let status = resp.status().as_u16();
                resp.body_mut().read_to_string().map(|text| (status, text))
            });
        let result = match outcome {
            Ok((status, text)) => {
                entry.status = Some(status);
                entry.response = Some(text.clone());
                if (200..300).contains(&status) {
                    message_content(&text)
                } else {
                    Err(AdvisorError::HttpError(format!("status {status}")))
                }
            }
            Err(ureq::Error::Timeout(_)) => Err(AdvisorError::Timeout),
            Err(e) => Err(AdvisorError::HttpError(e.to_string())),
        };
        if let Err(e) = &result {
            entry.error = Some(e.to_string());
        }
        log.push(entry);
        match result {
            Ok(content) => return Ok(content),
            Err(e @ AdvisorError::MalformedResponse(_)) => return Err(e),
            Err(e) => last = e,
        }
    }
    Err(last)
}

fn message_content(response: &str) -> Result<String, AdvisorError> {
    let value: Value =
        serde_json::from_str(response).map_err(|e| AdvisorError::MalformedResponse(format!("envelope: {e}")))?;
    value["choices"][0]["message"]["content"]
        .as_str()
        .map(str::to_string)
        .ok_or_else(|| AdvisorError::MalformedResponse("no choices[0].message.content".into()))
}

/// Strips an optional Markdown code fence around a JSON reply.
fn unfence(content: &str) -> &str {
    let t = content.trim();
    let Some(inner) = t.strip_prefix("```") else {
        return t;
    };
    let inner = inner.strip_prefix("json").unwrap_or(inner);
    inner.strip_suffix("```").unwrap_or(inner).trim()
}

fn parse_directive(content: &str, current: &PsoParams) -> Result<AdvisorDirective, AdvisorError> {
    #[derive(Deserialize)]
    #[serde(deny_unknown_fields)]
    struct Reply {
        w: f64,
        c1: f64,
        c2: f64,
        diagnosis: String,
        rationale: String,
    }
    let reply: Reply =
        serde_json::from_str(unfence(content)).map_err(|e| AdvisorError::MalformedResponse(e.to_string()))?;
    let diagnosis = Diagnosis::parse(&reply.diagnosis)
        .ok_or_else(|| AdvisorError::MalformedResponse(format!("unknown diagnosis {}", reply.diagnosis)))?;
    let params = PsoParams {
        inertia_weight: reply.w,
        cognitive: reply.c1,
        social: reply.c2,
        v_max: current.v_max,
    };
    Ok(AdvisorDirective {
        new_params: params.clamped(current),
        diagnosis,
        rationale: reply.rationale,
    })
}

fn render_advice_prompt(summary: &AdvisorSummary, history: &[AdvisorDirective]) -> String {
    ADVICE_PROMPT
        .replace(
            "{summary}",
            &serde_json::to_string(summary).expect("summary serializes"),
        )
        .replace(
            "{history}",
            &serde_json::to_string(history).expect("history serializes"),
        )
}

fn llm_advise_logged(
    summary: &AdvisorSummary,
    history: &[AdvisorDirective],
    cfg: &RemoteAdvisorConfig,
    log: &mut Vec<Exchange>,
) -> Result<AdvisorDirective, AdvisorError> {
    let content = chat(cfg, "advise", &render_advice_prompt(summary, history), log)?;
    parse_directive(&content, &summary.params)
}

/// One chat-completion round trip producing a directive with clamped values.
pub fn llm_advise(
    summary: &AdvisorSummary,
    history: &[AdvisorDirective],
    cfg: &RemoteAdvisorConfig,
) -> Result<AdvisorDirective, AdvisorError> {
    llm_advise_logged(summary, history, cfg, &mut Vec::new())
}

fn repository_pick_logged(
    candidates: &[RepositoryCandidate],
    profile: &DeviceProfile,
    cfg: &RemoteAdvisorConfig,
    log: &mut Vec<Exchange>,
) -> Option<String> {
    if candidates.is_empty() || candidates.len() > 3 {
        return None;
    }
    let prompt = PICK_PROMPT
        .replace("{profile}", &serde_json::to_string(profile).ok()?)
        .replace("{candidates}", &serde_json::to_string(candidates).ok()?);
    let content = chat(cfg, "pick", &prompt, log).ok()?;
    let body = unfence(&content);
    let id = match serde_json::from_str::<Value>(body) {
        Ok(Value::Object(map)) => map.get("entry_id")?.as_str()?.to_string(),
        Ok(Value::String(s)) => s,
        _ => body.trim_matches('"').to_string(),
    };
    candidates.iter().any(|c| c.id == id).then_some(id)
}

/// Asks the endpoint to choose a candidate id; any failure yields `None`.
pub fn repository_pick(
    candidates: &[RepositoryCandidate],
    profile: &DeviceProfile,
    cfg: &RemoteAdvisorConfig,
) -> Option<String> {
    repository_pick_logged(candidates, profile, cfg, &mut Vec::new())
}

/// Remote advisor with rule-table fallback. Every exchange is kept for the
/// run log.
#[derive(Debug, Clone)]
pub struct RemoteAdvisor {
    pub config: RemoteAdvisorConfig,
    pub thresholds: RuleThresholds,
    pub exchanges: Vec<Exchange>,
}

impl RemoteAdvisor {
    pub fn new(config: RemoteAdvisorConfig) -> Self {
        RemoteAdvisor {
            config,
            thresholds: RuleThresholds::default(),
            exchanges: Vec::new(),
        }
    }
}

impl Advisor for RemoteAdvisor {
    fn advise(&mut self, summary: &AdvisorSummary, history: &[AdvisorDirective]) -> Advice {
        match llm_advise_logged(summary, history, &self.config, &mut self.exchanges) {
            Ok(directive) => Advice {
                directive,
                source: AdviceSource::Remote,
                fallback_reason: None,
            },
            Err(e) => Advice {
                directive: rule_advise(summary, &self.thresholds),
                source: AdviceSource::Fallback,
                fallback_reason: Some(e.to_string()),
            },
        }
    }

    fn pick_entry(&mut self, candidates: &[RepositoryCandidate], profile: &DeviceProfile) -> Option<String> {
        repository_pick_logged(candidates, profile, &self.config, &mut self.exchanges)
    }
}
