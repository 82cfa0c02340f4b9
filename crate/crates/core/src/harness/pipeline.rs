use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::curve::{
    curve_csv, label_efficiency_curve, stratified_sample, stratified_split, CurveConfig, PreparedSplit,
};
use super::metrics::{detection_latency, evaluate, LatencyModel, MetricsReport};
use super::HarnessError;
use crate::advisor::{
    prompt_template_digest, Advice, Advisor, AdvisorDirective, Exchange, IdentityAdvisor, RemoteAdvisor,
    RemoteAdvisorConfig, RepositoryCandidate, RuleAdvisor, RuleThresholds,
};
use crate::classify::{train_tier, ClassifierInput, Dataset, ModelBundle, ModelPool, Tier, TierConfig, TierPolicy};
use crate::diffusion::{pretrain, FeatureMemory, PretrainConfig};
use crate::imaging::{
    filter_for_pretraining, fit_scaler, session_to_image, FeatureScaler, ImageConfig, PretrainFilter,
};
use crate::ingest::{load_flow_records, write_flow_records, FeatureSchema, FlowSession};
use crate::orchestrator::{
    read_jsonl, run_scenario, write_jsonl, Alert, OrchestratorConfig, PerceptionEvent, PipelineBundle, ScenarioSummary,
    SessionVerdict,
};
use crate::pso_select::{
    build_repository, select_features, AdvisorSummary, DeviceProfile, FeatureMask, KnowledgeRepository, ProfileDataset,
    SelectionConfig, SelectionResult,
};
use crate::swarm_env::{default_profiles, generate_scenario, synth_corpus, synth_schema, SimConfig, SynthConfig};
use crate::util::{json_digest, sha256_hex};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DataSource {
    Synthetic {
        #[serde(default)]
        synth: SynthConfig,
    },
    Csv {
        path: PathBuf,
        #[serde(default = "default_label_column")]
        label_column: String,
        #[serde(default = "default_benign_label")]
        benign_label: String,
        /// Stratified subset size; `None` keeps every usable row.
        #[serde(default)]
        limit: Option<usize>,
    },
}

fn default_label_column() -> String {
    "label".into()
}

fn default_benign_label() -> String {
    "benign".into()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum AdvisorChoice {
    Rule {
        #[serde(default)]
        thresholds: RuleThresholds,
    },
    Identity,
    Remote {
        #[serde(default)]
        config: RemoteAdvisorConfig,
    },
}

/// One document configuring every stage. `seed` overrides the seeds of the
/// nested stage configs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub seed: u64,
    pub deterministic: bool,
    pub data: DataSource,
    pub test_fraction: f64,
    /// Share of the labeled rows held out to score feature masks.
    pub validation_fraction: f64,
    pub image: ImageConfig,
    pub pretrain: PretrainConfig,
    pub pretrain_filter: PretrainFilter,
    pub selection: SelectionConfig,
    pub advisor: AdvisorChoice,
    /// Repository profiles; empty means the built-in archetypes.
    pub profiles: Vec<DeviceProfile>,
    /// Share of the training rows each profile's selection run sees.
    pub profile_fraction: f64,
    pub input: ClassifierInput,
    pub heavy_forest: bool,
    pub policy: TierPolicy,
    pub sim: SimConfig,
    pub orchestrator: OrchestratorConfig,
    /// Label fractions for the efficiency curve; empty skips it.
    pub curve_fractions: Vec<f64>,
    pub labeling_rate_per_hour: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 42,
            deterministic: true,
            data: DataSource::Synthetic {
                synth: SynthConfig {
                    n_benign: 1500,
                    n_malicious: 1500,
                    ..SynthConfig::default()
                },
            },
            test_fraction: 1.0 / 3.0,
            validation_fraction: 0.3,
            image: ImageConfig::default(),
            pretrain: PretrainConfig::default(),
            pretrain_filter: PretrainFilter::BenignOnly,
            selection: SelectionConfig::default(),
            advisor: AdvisorChoice::Rule {
                thresholds: RuleThresholds::default(),
            },
            profiles: Vec::new(),
            profile_fraction: 0.5,
            input: ClassifierInput::Combined,
            heavy_forest: false,
            policy: TierPolicy::default(),
            sim: SimConfig::default(),
            orchestrator: OrchestratorConfig::default(),
            curve_fractions: vec![0.1, 0.5, 1.0],
            labeling_rate_per_hour: 100.0,
        }
    }
}

impl RunConfig {
    /// Copies the run seed into every stage config.
    pub fn resolved(&self) -> RunConfig {
        let mut cfg = self.clone();
        if let DataSource::Synthetic { synth } = &mut cfg.data {
            synth.seed = cfg.seed;
        }
        cfg.pretrain.seed = cfg.seed;
        cfg.selection.seed = cfg.seed;
        cfg.sim.seed = cfg.seed;
        cfg
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        let bad = |m: &str| Err(HarnessError::Config(m.to_string()));
        if !(self.test_fraction > 0.0 && self.test_fraction < 1.0) {
            return bad("test_fraction must lie in (0, 1)");
        }
        if !(self.validation_fraction > 0.0 && self.validation_fraction < 1.0) {
            return bad("validation_fraction must lie in (0, 1)");
        }
        if !(self.profile_fraction > 0.0 && self.profile_fraction <= 1.0) {
            return bad("profile_fraction must lie in (0, 1]");
        }
        if self.curve_fractions.iter().any(|f| !(*f > 0.0 && *f <= 1.0)) {
            return bad("curve fractions must lie in (0, 1]");
        }
        if self.deterministic && matches!(self.advisor, AdvisorChoice::Remote { .. }) {
            return bad("a remote advisor cannot run in deterministic mode");
        }
        self.image.validate().map_err(|e| HarnessError::Config(e.to_string()))?;
        self.sim.validate().map_err(|e| HarnessError::Config(e.to_string()))?;
        self.selection
            .initial_params
            .validate()
            .map_err(|e| HarnessError::Config(e.to_string()))
    }

    pub fn digest(&self) -> String {
        json_digest(self)
    }

    pub fn load(path: &Path) -> Result<RunConfig, HarnessError> {
        let text = fs::read_to_string(path)?;
        let value: serde_json::Value = serde_json::from_str(&text).map_err(|e| HarnessError::Config(e.to_string()))?;
        let config = match value.get("config") {
            Some(inner) if value.get("config_digest").is_some() => inner.clone(),
            _ => value,
        };
        serde_json::from_value(config).map_err(|e| HarnessError::Config(e.to_string()))
    }
}

/// The advisor of a run, keeping remote exchanges for the log.
pub enum RunAdvisor {
    Rule(RuleAdvisor),
    Identity(IdentityAdvisor),
    Remote(RemoteAdvisor),
}

impl RunAdvisor {
    pub fn new(choice: &AdvisorChoice) -> Self {
        match choice {
            AdvisorChoice::Rule { thresholds } => RunAdvisor::Rule(RuleAdvisor {
                thresholds: *thresholds,
            }),
            AdvisorChoice::Identity => RunAdvisor::Identity(IdentityAdvisor),
            AdvisorChoice::Remote { config } => RunAdvisor::Remote(RemoteAdvisor::new(config.clone())),
        }
    }

    pub fn exchanges(&self) -> &[Exchange] {
        match self {
            RunAdvisor::Remote(r) => &r.exchanges,
            _ => &[],
        }
    }

    fn inner(&mut self) -> &mut dyn Advisor {
        match self {
            RunAdvisor::Rule(a) => a,
            RunAdvisor::Identity(a) => a,
            RunAdvisor::Remote(a) => a,
        }
    }
}

impl Advisor for RunAdvisor {
    fn advise(&mut self, summary: &AdvisorSummary, history: &[AdvisorDirective]) -> Advice {
        self.inner().advise(summary, history)
    }

    fn pick_entry(&mut self, candidates: &[RepositoryCandidate], profile: &DeviceProfile) -> Option<String> {
        self.inner().pick_entry(candidates, profile)
    }
}

/// File layout of a run directory.
#[derive(Debug, Clone)]
pub struct RunDir {
    root: PathBuf,
}

impl RunDir {
    pub fn new(root: impl Into<PathBuf>) -> Result<Self, HarnessError> {
        let root = root.into();
        fs::create_dir_all(&root)?;
        Ok(RunDir { root })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    fn write_json<T: Serialize>(&self, name: &str, value: &T) -> Result<(), HarnessError> {
        let mut text = serde_json::to_string_pretty(value).map_err(|e| HarnessError::Config(e.to_string()))?;
        text.push('\n');
        fs::write(self.path(name), text)?;
        Ok(())
    }

    fn read_json<T: for<'de> Deserialize<'de>>(&self, name: &str) -> Result<T, HarnessError> {
        let path = self.path(name);
        let text = fs::read_to_string(&path).map_err(|e| HarnessError::Missing(format!("{}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| HarnessError::Config(format!("{name}: {e}")))
    }

    fn sessions(&self, name: &str) -> Result<Vec<FlowSession>, HarnessError> {
        let path = self.path(name);
        if !path.exists() {
            return Err(HarnessError::Missing(path.display().to_string()));
        }
        Ok(read_jsonl(&path)?)
    }

    fn memory(&self) -> Result<FeatureMemory, HarnessError> {
        FeatureMemory::load(&self.path(MEMORY)).map_err(|e| HarnessError::Missing(format!("{MEMORY}: {e}")))
    }

    fn models(&self) -> Result<ModelBundle, HarnessError> {
        ModelBundle::load(&self.path(MODELS)).map_err(|e| HarnessError::Missing(format!("{MODELS}: {e}")))
    }

    fn timings(&self) -> BTreeMap<String, f64> {
        self.read_json(TIMINGS).unwrap_or_default()
    }

    fn record_timing(&self, stage: &str, seconds: f64) -> Result<(), HarnessError> {
        let mut t = self.timings();
        t.insert(stage.to_string(), seconds);
        self.write_json(TIMINGS, &t)
    }
}

pub const SCHEMA: &str = "schema.json";
pub const TRAIN: &str = "train.jsonl";
pub const TEST: &str = "test.jsonl";
pub const SCALER: &str = "scaler.json";
pub const MEMORY: &str = "memory.laem";
pub const SELECTION: &str = "selection.json";
pub const SELECTION_LOG: &str = "selection_log.jsonl";
pub const ADVISOR_LOG: &str = "advisor_exchanges.jsonl";
pub const REPOSITORY: &str = "repository.json";
pub const MODELS: &str = "models.laeb";
pub const SCENARIO: &str = "scenario.jsonl";
pub const ALERTS: &str = "alerts.jsonl";
pub const VERDICTS: &str = "verdicts.jsonl";
pub const SCENARIO_SUMMARY: &str = "scenario_summary.json";
pub const METRICS: &str = "metrics.json";
pub const LATENCY: &str = "latency.json";
pub const CURVE_CSV: &str = "curve.csv";
pub const CURVE_JSON: &str = "curve.json";
pub const TIMINGS: &str = "timings.json";
pub const MANIFEST: &str = "manifest.json";
pub const CONFIG: &str = "config.json";

fn label_indices(sessions: &[FlowSession], schema: &FeatureSchema) -> Result<Vec<usize>, HarnessError> {
    sessions
        .iter()
        .map(|s| {
            s.label
                .as_deref()
                .and_then(|l| schema.class_index(l))
                .ok_or_else(|| HarnessError::Config(format!("session {} has no known label", s.session_id)))
        })
        .collect()
}

fn tabular_dataset(sessions: &[FlowSession], schema: &FeatureSchema) -> Result<Dataset, HarnessError> {
    let rows: Vec<Vec<f64>> = sessions.iter().map(|s| s.tabular_features.clone()).collect();
    let labels = label_indices(sessions, schema)?;
    Dataset::from_rows(&rows, labels, schema.class_names.len()).map_err(|e| HarnessError::Config(e.to_string()))
}

fn pick<T: Clone>(items: &[T], rows: &[usize]) -> Vec<T> {
    rows.iter().map(|&r| items[r].clone()).collect()
}

/// Produces train/test splits and the schema, from the synthetic generator
/// or a labeled CSV.
pub fn stage_data(cfg: &RunConfig, dir: &RunDir) -> Result<(usize, usize), HarnessError> {
    let (schema, sessions) = match &cfg.data {
        DataSource::Synthetic { synth } => (synth_schema(), synth_corpus(synth)),
        DataSource::Csv {
            path,
            label_column,
            benign_label,
            limit,
        } => {
            let schema = FeatureSchema::infer_from_csv(path, label_column, benign_label, 1000)?;
            let records = load_flow_records(path, &schema, None)?;
            let mut sessions = records.sessions;
            if let Some(limit) = *limit {
                if limit < sessions.len() {
                    let labels = label_indices(&sessions, &schema)?;
                    let fraction = limit as f64 / sessions.len() as f64;
                    let rows = stratified_sample(&labels, schema.class_names.len(), fraction, cfg.seed)?;
                    sessions = pick(&sessions, &rows);
                }
            }
            (schema, sessions)
        }
    };
    let labels = label_indices(&sessions, &schema)?;
    let (train_rows, test_rows) = stratified_split(&labels, schema.class_names.len(), cfg.test_fraction, cfg.seed);
    let train = pick(&sessions, &train_rows);
    let test = pick(&sessions, &test_rows);
    dir.write_json(SCHEMA, &schema)?;
    write_jsonl(&dir.path(TRAIN), &train)?;
    write_jsonl(&dir.path(TEST), &test)?;
    write_flow_records(&dir.path("train.csv"), &schema, &train)?;
    write_flow_records(&dir.path("test.csv"), &schema, &test)?;
    Ok((train.len(), test.len()))
}

fn image_config(cfg: &RunConfig, sessions: &[FlowSession]) -> ImageConfig {
    let mut image = cfg.image.clone();
    if sessions.iter().any(|s| s.payload.is_empty()) {
        image.tabular_fallback = true;
    }
    image
}

/// Fits the scaler and pretrains the diffusion feature memory on the
/// (unlabeled use of the) training split.
pub fn stage_pretrain(cfg: &RunConfig, dir: &RunDir) -> Result<FeatureMemory, HarnessError> {
    let schema: FeatureSchema = dir.read_json(SCHEMA)?;
    let train = dir.sessions(TRAIN)?;
    let scaler = fit_scaler(&train)?;
    let image = image_config(cfg, &train);
    let chosen = filter_for_pretraining(&train, cfg.pretrain_filter, schema.benign_class());
    let images = chosen
        .par_iter()
        .map(|s| session_to_image(s, &image, Some(&scaler)))
        .collect::<Result<Vec<_>, _>>()?;
    let pcfg = PretrainConfig {
        dataset: schema.name.clone(),
        ..cfg.pretrain.clone()
    };
    let started = Instant::now();
    let memory = pretrain(&images, &pcfg)?;
    dir.record_timing("pretrain", started.elapsed().as_secs_f64())?;
    memory.save(&dir.path(MEMORY))?;
    dir.write_json(SCALER, &scaler)?;
    Ok(memory)
}

fn selection_split(data: &Dataset, fraction: f64, seed: u64) -> (Dataset, Dataset) {
    let (fit, val) = stratified_split(&data.labels, data.n_classes, fraction, seed);
    (data.subset(&fit), data.subset(&val))
}

/// Swarm feature selection over the tabular features of the training split.
pub fn stage_select(cfg: &RunConfig, dir: &RunDir) -> Result<SelectionResult, HarnessError> {
    let schema: FeatureSchema = dir.read_json(SCHEMA)?;
    let data = tabular_dataset(&dir.sessions(TRAIN)?, &schema)?;
    let (fit, val) = selection_split(&data, cfg.validation_fraction, cfg.seed);
    let mut advisor = RunAdvisor::new(&cfg.advisor);
    let result = select_features(&fit, &val, &cfg.selection, &mut advisor)?;
    dir.write_json(SELECTION, &result)?;
    write_jsonl(&dir.path(SELECTION_LOG), &result.log)?;
    write_jsonl(&dir.path(ADVISOR_LOG), advisor.exchanges())?;
    Ok(result)
}

pub fn run_profiles(cfg: &RunConfig, schema: &FeatureSchema) -> Vec<DeviceProfile> {
    if cfg.profiles.is_empty() {
        default_profiles(&schema.name)
    } else {
        cfg.profiles.clone()
    }
}

/// One selection run per device profile, each on its own stratified share
/// of the training split.
pub fn stage_repository(cfg: &RunConfig, dir: &RunDir) -> Result<KnowledgeRepository, HarnessError> {
    let schema: FeatureSchema = dir.read_json(SCHEMA)?;
    let data = tabular_dataset(&dir.sessions(TRAIN)?, &schema)?;
    let profiles = run_profiles(cfg, &schema);
    let datasets = (0..profiles.len())
        .map(|i| {
            let seed = cfg.seed.wrapping_add(i as u64 + 1);
            let rows = stratified_sample(&data.labels, data.n_classes, cfg.profile_fraction, seed)?;
            let (train, val) = selection_split(&data.subset(&rows), cfg.validation_fraction, seed);
            Ok(ProfileDataset { train, val })
        })
        .collect::<Result<Vec<_>, HarnessError>>()?;
    let mut advisor = RunAdvisor::new(&cfg.advisor);
    let repo = build_repository(&schema.name, &profiles, &datasets, &cfg.selection, &mut advisor)?;
    repo.save(&dir.path(REPOSITORY))?;
    if !advisor.exchanges().is_empty() {
        let mut log: Vec<Exchange> = read_jsonl(&dir.path(ADVISOR_LOG)).unwrap_or_default();
        log.extend_from_slice(advisor.exchanges());
        write_jsonl(&dir.path(ADVISOR_LOG), &log)?;
    }
    Ok(repo)
}

/// Diffusion representations of `sessions`, in order.
pub fn representations(
    sessions: &[FlowSession],
    image: &ImageConfig,
    scaler: &FeatureScaler,
    memory: &FeatureMemory,
) -> Result<Vec<Vec<f64>>, HarnessError> {
    sessions
        .par_iter()
        .map(|s| {
            let img = session_to_image(s, image, Some(scaler))?;
            Ok(memory.extract(&img)?)
        })
        .collect()
}

fn prepared(
    cfg: &RunConfig,
    dir: &RunDir,
    sessions: &[FlowSession],
    schema: &FeatureSchema,
) -> Result<PreparedSplit, HarnessError> {
    let memory = dir.memory()?;
    let scaler: FeatureScaler = dir.read_json(SCALER)?;
    let image = image_config(cfg, sessions);
    Ok(PreparedSplit {
        tabular: tabular_dataset(sessions, schema)?,
        representation: representations(sessions, &image, &scaler, &memory)?,
    })
}

fn pool_masks(
    cfg: &RunConfig,
    feature_count: usize,
    selection: &SelectionResult,
    repo: &KnowledgeRepository,
) -> Vec<FeatureMask> {
    if !cfg.input.uses_tabular() {
        return vec![FeatureMask::new(Vec::new())];
    }
    let mut masks = vec![FeatureMask::full(feature_count), selection.mask.clone()];
    masks.extend(repo.entries.iter().filter_map(|e| e.mask.clone()));
    let mut unique: Vec<FeatureMask> = Vec::new();
    for m in masks {
        if !unique.contains(&m) {
            unique.push(m);
        }
    }
    unique
}

/// Trains a full tier pool for every mask the online loop may need.
pub fn stage_train(cfg: &RunConfig, dir: &RunDir) -> Result<ModelBundle, HarnessError> {
    let schema: FeatureSchema = dir.read_json(SCHEMA)?;
    let train = dir.sessions(TRAIN)?;
    let split = prepared(cfg, dir, &train, &schema)?;
    let selection: SelectionResult = dir.read_json(SELECTION)?;
    let repo = KnowledgeRepository::load(&dir.path(REPOSITORY))?;
    let memory_bytes = fs::read(dir.path(MEMORY))?;
    let started = Instant::now();
    let pools = pool_masks(cfg, schema.feature_count(), &selection, &repo)
        .into_iter()
        .map(|mask| {
            let data = split.inputs(None, &mask, cfg.input);
            let extra = data.cols - mask.count();
            ModelPool::train(&data, &mask, extra, &schema.class_names, cfg.seed, cfg.heavy_forest)
        })
        .collect::<Result<Vec<_>, _>>()
        .map_err(|e| HarnessError::stage("train", e))?;
    dir.record_timing("train", started.elapsed().as_secs_f64())?;
    let bundle = ModelBundle {
        schema_name: schema.name.clone(),
        schema_digest: json_digest(&schema),
        class_names: schema.class_names.clone(),
        input: cfg.input,
        scaler: Some(dir.read_json(SCALER)?),
        memory_digest: sha256_hex(&memory_bytes),
        pools,
    };
    bundle.save(&dir.path(MODELS))?;
    Ok(bundle)
}

pub fn load_bundle(cfg: &RunConfig, dir: &RunDir) -> Result<PipelineBundle, HarnessError> {
    let train_sample = dir.sessions(TEST)?;
    Ok(PipelineBundle {
        image: image_config(cfg, &train_sample),
        memory: dir.memory()?,
        repository: KnowledgeRepository::load(&dir.path(REPOSITORY))?,
        models: dir.models()?,
        policy: cfg.policy,
    })
}

pub fn sim_config(cfg: &RunConfig, schema: &FeatureSchema) -> SimConfig {
    SimConfig {
        profiles: run_profiles(cfg, schema),
        benign_class: schema.benign_class().to_string(),
        ..cfg.sim.clone()
    }
}

/// Generates a swarm scenario replaying the test split and runs the online
/// loop over it.
pub fn stage_simulate(cfg: &RunConfig, dir: &RunDir) -> Result<ScenarioSummary, HarnessError> {
    let schema: FeatureSchema = dir.read_json(SCHEMA)?;
    let test = dir.sessions(TEST)?;
    let events = generate_scenario(&sim_config(cfg, &schema), &test)?;
    write_jsonl(&dir.path(SCENARIO), &events)?;
    let bundle = load_bundle(cfg, dir)?;
    let run = run_scenario(&events, &bundle, &cfg.orchestrator)?;
    write_jsonl(&dir.path(ALERTS), &run.alerts)?;
    write_jsonl(&dir.path(VERDICTS), &run.verdicts)?;
    dir.write_json(SCENARIO_SUMMARY, &run.summary)?;
    dir.write_json("scenario_latency.json", &run.latency)?;
    Ok(run.summary)
}

/// Replays a scenario file through the online loop.
pub fn replay_scenario(cfg: &RunConfig, dir: &RunDir, scenario: &Path) -> Result<Vec<Alert>, HarnessError> {
    let events: Vec<PerceptionEvent> = read_jsonl(scenario)?;
    let bundle = load_bundle(cfg, dir)?;
    Ok(run_scenario(&events, &bundle, &cfg.orchestrator)?.alerts)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TierScore {
    pub tier: Tier,
    pub accuracy: f64,
    pub macro_f1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OnlineReport {
    pub summary: ScenarioSummary,
    pub metrics: Option<MetricsReport>,
}

/// Contents of `metrics.json`. Everything here is reproducible from the
/// manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub config_digest: String,
    pub mask: FeatureMask,
    /// Heavy tier of the pool for the swarm-selected mask.
    pub pipeline: MetricsReport,
    pub tiers: Vec<TierScore>,
    /// Comparator without pretraining or selection.
    pub raw_supervised: MetricsReport,
    pub online: Option<OnlineReport>,
}

fn heavy_config(cfg: &RunConfig) -> TierConfig {
    if cfg.heavy_forest {
        TierConfig::forest(cfg.seed)
    } else {
        TierConfig::for_tier(Tier::Heavy, cfg.seed)
    }
}

/// Scores the trained pools and the raw-supervised comparator on the test
/// split, plus the online verdicts when a scenario was run.
pub fn stage_evaluate(cfg: &RunConfig, dir: &RunDir) -> Result<RunMetrics, HarnessError> {
    let schema: FeatureSchema = dir.read_json(SCHEMA)?;
    let test_sessions = dir.sessions(TEST)?;
    let test = prepared(cfg, dir, &test_sessions, &schema)?;
    let models = dir.models()?;
    let selection: SelectionResult = dir.read_json(SELECTION)?;
    let mask = if cfg.input.uses_tabular() {
        selection.mask.clone()
    } else {
        FeatureMask::new(Vec::new())
    };
    let pool = models
        .pool_for(&mask)
        .ok_or_else(|| HarnessError::stage("evaluate", "no pool for the selected mask"))?;
    let inputs = test.inputs(None, &mask, cfg.input);
    let digest = cfg.digest();
    let score = |model: &crate::classify::ClassifierModel, data: &Dataset| -> Result<MetricsReport, HarnessError> {
        let predictions = (0..data.rows)
            .map(|r| model.predict(data.row(r)).map(|v| v.predicted_class))
            .collect::<Result<Vec<_>, _>>()
            .map_err(|e| HarnessError::stage("evaluate", e))?;
        let mut report = evaluate(&predictions, &data.labels, &schema.class_names)?;
        report.manifest_digest = Some(digest.clone());
        Ok(report)
    };
    let mut tiers = Vec::new();
    let mut pipeline = None;
    for model in &pool.models {
        let report = score(model, &inputs)?;
        tiers.push(TierScore {
            tier: model.tier,
            accuracy: report.accuracy,
            macro_f1: report.macro_f1,
        });
        if model.tier == Tier::Heavy {
            pipeline = Some(report);
        }
    }
    let train = tabular_dataset(&dir.sessions(TRAIN)?, &schema)?;
    let full = FeatureMask::full(schema.feature_count());
    let raw_model = train_tier(Tier::Heavy, &train, &full, 0, &schema.class_names, &heavy_config(cfg))
        .map_err(|e| HarnessError::stage("evaluate", e))?;
    let raw_supervised = score(&raw_model, &test.tabular)?;

    let online = if dir.path(VERDICTS).exists() {
        let verdicts: Vec<SessionVerdict> = read_jsonl(&dir.path(VERDICTS))?;
        let summary: ScenarioSummary = dir.read_json(SCENARIO_SUMMARY)?;
        let (preds, labels): (Vec<usize>, Vec<usize>) = verdicts
            .iter()
            .filter_map(|v| {
                let label = schema.class_index(v.label.as_deref()?)?;
                Some((v.verdict.predicted_class, label))
            })
            .unzip();
        let metrics = if preds.is_empty() {
            None
        } else {
            let mut r = evaluate(&preds, &labels, &schema.class_names)?;
            r.manifest_digest = Some(digest.clone());
            Some(r)
        };
        Some(OnlineReport { summary, metrics })
    } else {
        None
    };

    let report = RunMetrics {
        config_digest: digest,
        mask,
        pipeline: pipeline.ok_or_else(|| HarnessError::stage("evaluate", "pool has no heavy tier"))?,
        tiers,
        raw_supervised,
        online,
    };
    dir.write_json(METRICS, &report)?;

    let timings = dir.timings();
    let training_hours =
        (timings.get("pretrain").copied().unwrap_or(0.0) + timings.get("train").copied().unwrap_or(0.0)) / 3600.0;
    let model = LatencyModel {
        labeling_rate_per_hour: cfg.labeling_rate_per_hour,
        n_labels: train.rows as u64,
        t_training_hours: training_hours,
    };
    let latency = serde_json::json!({
        "model": model,
        "t_labeling_hours": model.t_labeling_hours(),
        "detection_latency_hours": detection_latency(&model)?,
        "stage_seconds": timings,
    });
    dir.write_json(LATENCY, &latency)?;
    Ok(report)
}

/// Label-efficiency curve for the run's seed.
pub fn stage_curve(cfg: &RunConfig, dir: &RunDir) -> Result<Vec<super::curve::CurvePoint>, HarnessError> {
    let schema: FeatureSchema = dir.read_json(SCHEMA)?;
    let train = prepared(cfg, dir, &dir.sessions(TRAIN)?, &schema)?;
    let test = prepared(cfg, dir, &dir.sessions(TEST)?, &schema)?;
    let points = label_efficiency_curve(
        &train,
        &test,
        &schema.class_names,
        &CurveConfig {
            fractions: cfg.curve_fractions.clone(),
            seed: cfg.seed,
            selection: cfg.selection.clone(),
            validation_fraction: cfg.validation_fraction,
            input: cfg.input,
            heavy_forest: cfg.heavy_forest,
        },
    )?;
    fs::write(dir.path(CURVE_CSV), curve_csv(&points))?;
    dir.write_json(CURVE_JSON, &points)?;
    Ok(points)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub crate_version: String,
    pub config_digest: String,
    pub config: RunConfig,
    pub seed: u64,
    pub deterministic: bool,
    pub prompt_template_digest: String,
    pub stages: Vec<String>,
    /// SHA-256 of the reproducible artifacts.
    pub artifacts: BTreeMap<String, String>,
}

const REPRODUCIBLE: [&str; 8] = [SCHEMA, TRAIN, TEST, MEMORY, REPOSITORY, MODELS, ALERTS, METRICS];

/// Runs every stage in order and writes the manifest. A failing stage
/// aborts the run; artifacts of earlier stages stay on disk.
pub fn run_pipeline(config: &RunConfig, out: &Path) -> Result<RunManifest, HarnessError> {
    let cfg = config.resolved();
    cfg.validate()?;
    let dir = RunDir::new(out)?;
    dir.write_json(CONFIG, &cfg)?;
    let mut stages = Vec::new();
    macro_rules! stage {
        ($name:literal, $call:expr) => {{
            $call.map_err(|e: HarnessError| e.in_stage($name))?;
            stages.push($name.to_string());
        }};
    }
    stage!("data", stage_data(&cfg, &dir));
    stage!("pretrain", stage_pretrain(&cfg, &dir));
    stage!("select", stage_select(&cfg, &dir));
    stage!("build-repo", stage_repository(&cfg, &dir));
    stage!("train", stage_train(&cfg, &dir));
    stage!("simulate", stage_simulate(&cfg, &dir));
    stage!("evaluate", stage_evaluate(&cfg, &dir));
    if !cfg.curve_fractions.is_empty() {
        stage!("curve", stage_curve(&cfg, &dir));
    }
    let mut artifacts = BTreeMap::new();
    for name in REPRODUCIBLE {
        let path = dir.path(name);
        if path.exists() {
            artifacts.insert(name.to_string(), sha256_hex(&fs::read(path)?));
        }
    }
    let manifest = RunManifest {
        crate_version: env!("CARGO_PKG_VERSION").to_string(),
        config_digest: cfg.digest(),
        seed: cfg.seed,
        deterministic: cfg.deterministic,
        prompt_template_digest: prompt_template_digest(),
        config: cfg,
        stages,
        artifacts,
    };
    dir.write_json(MANIFEST, &manifest)?;
    Ok(manifest)
}

/// Re-runs the configuration recorded in a manifest into `out`.
pub fn replay_manifest(manifest: &Path, out: &Path) -> Result<RunManifest, HarnessError> {
    run_pipeline(&RunConfig::load(manifest)?, out)
}
