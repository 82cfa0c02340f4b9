//! Binary particle-swarm feature selection with per-epoch advisor retuning,
//! plus the offline device-profile knowledge repository.
//!
//! Positions are feature masks. Each bit is resampled as
//! `Bernoulli(sigmoid(v))` after the usual velocity update
//! `v <- w*v + c1*r1*(pbest - x) + c2*r2*(gbest - x)`, clamped to `±v_max`.
//! Fitness is validation accuracy of the LIGHT classifier tier on the masked
//! features minus `penalty * selected / F`.

use std::collections::HashMap;
use std::fmt;
use std::path::Path;
use std::sync::Mutex;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

use crate::advisor::{AdviceSource, Advisor, AdvisorDirective, Diagnosis, RepositoryCandidate};
use crate::classify::{train_tier, ClassifyError, Dataset, Tier, TierConfig};
use crate::util::{json_digest, seeded_rng};

pub const REPOSITORY_VERSION: u32 = 1;
const ADVISOR_HISTORY: usize = 3;

#[derive(Debug, Error, PartialEq)]
pub enum PsoError {
    #[error("need at least 2 particles and 1 feature, got {particles}x{features}")]
    InvalidDimensions { particles: usize, features: usize },
    #[error("split is missing class {0}")]
    DegenerateSplit(usize),
    #[error("mask selects no features")]
    EmptyMask,
    #[error("mask has {actual} bits, dataset has {expected} features")]
    MaskLength { expected: usize, actual: usize },
    #[error("invalid PSO parameters: {0}")]
    InvalidParams(String),
    #[error("repository is empty")]
    EmptyRepository,
    #[error("profile does not match repository schema: {0}")]
    SchemaMismatch(String),
    #[error("no profiles given")]
    NoProfiles,
    #[error("classifier error: {0}")]
    Classifier(#[from] ClassifyError),
    #[error("repository io: {0}")]
    Io(String),
}

/// Binary feature-selection vector.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct FeatureMask(Vec<bool>);

impl FeatureMask {
    pub fn new(bits: Vec<bool>) -> Self {
        FeatureMask(bits)
    }

    pub fn full(n: usize) -> Self {
        FeatureMask(vec![true; n])
    }

    /// Mask whose bits are the low `n` bits of `code`, bit 0 first.
    pub fn from_code(code: u64, n: usize) -> Self {
        FeatureMask((0..n).map(|i| code >> i & 1 == 1).collect())
    }

    pub fn bits(&self) -> &[bool] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn count(&self) -> usize {
        self.0.iter().filter(|b| **b).count()
    }

    pub fn selected(&self) -> Vec<usize> {
        self.0.iter().enumerate().filter(|(_, b)| **b).map(|(i, _)| i).collect()
    }

    pub fn apply(&self, values: &[f64]) -> Vec<f64> {
        values
            .iter()
            .zip(&self.0)
            .filter(|(_, b)| **b)
            .map(|(v, _)| *v)
            .collect()
    }

    pub fn hamming(&self, other: &FeatureMask) -> usize {
        self.0.iter().zip(&other.0).filter(|(a, b)| a != b).count()
    }

    pub fn parse(bits: &str) -> Option<Self> {
        bits.chars()
            .map(|c| match c {
                '1' => Some(true),
                '0' => Some(false),
                _ => None,
            })
            .collect::<Option<Vec<_>>>()
            .map(FeatureMask)
    }
}

impl fmt::Display for FeatureMask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for b in &self.0 {
            f.write_str(if *b { "1" } else { "0" })?;
        }
        Ok(())
    }
}

impl Serialize for FeatureMask {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for FeatureMask {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let text = String::deserialize(d)?;
        FeatureMask::parse(&text).ok_or_else(|| serde::de::Error::custom("mask must be a bitstring"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PsoParams {
    pub inertia_weight: f64,
    pub cognitive: f64,
    pub social: f64,
    pub v_max: f64,
}

impl Default for PsoParams {
    fn default() -> Self {
        PsoParams {
            inertia_weight: 0.7,
            cognitive: 1.5,
            social: 1.5,
            v_max: 4.0,
        }
    }
}

impl PsoParams {
    pub const MAX_INERTIA: f64 = 1.2;
    pub const MAX_COEFFICIENT: f64 = 4.0;

    pub fn validate(&self) -> Result<(), PsoError> {
        let ok = (0.0..=Self::MAX_INERTIA).contains(&self.inertia_weight)
            && (0.0..=Self::MAX_COEFFICIENT).contains(&self.cognitive)
            && (0.0..=Self::MAX_COEFFICIENT).contains(&self.social)
            && self.v_max > 0.0
            && self.v_max.is_finite();
        if ok {
            Ok(())
        } else {
            Err(PsoError::InvalidParams(format!("{self:?}")))
        }
    }

    /// Projects into the valid box; non-finite entries fall back to `fallback`.
    pub fn clamped(self, fallback: &PsoParams) -> PsoParams {
        let fix = |v: f64, fb: f64, hi: f64| {
            if v.is_finite() {
                v.clamp(0.0, hi)
            } else {
                fb.clamp(0.0, hi)
            }
        };
        PsoParams {
            inertia_weight: fix(self.inertia_weight, fallback.inertia_weight, Self::MAX_INERTIA),
            cognitive: fix(self.cognitive, fallback.cognitive, Self::MAX_COEFFICIENT),
            social: fix(self.social, fallback.social, Self::MAX_COEFFICIENT),
            v_max: if self.v_max.is_finite() && self.v_max > 0.0 {
                self.v_max
            } else {
                fallback.v_max
            },
        }
    }
}

/// Mask objective. Implementations must be pure: equal masks, equal values.
pub trait Fitness: Sync {
    fn evaluate(&self, mask: &FeatureMask) -> Result<f64, PsoError>;
}

impl<F> Fitness for F
where
    F: Fn(&FeatureMask) -> Result<f64, PsoError> + Sync,
{
    fn evaluate(&self, mask: &FeatureMask) -> Result<f64, PsoError> {
        self(mask)
    }
}

fn check_splits(train: &Dataset, val: &Dataset) -> Result<(), PsoError> {
    let (a, b) = (train.class_counts(), val.class_counts());
    for c in 0..train.n_classes.max(val.n_classes) {
        let in_train = a.get(c).copied().unwrap_or(0) > 0;
        let in_val = b.get(c).copied().unwrap_or(0) > 0;
        if in_train != in_val {
            return Err(PsoError::DegenerateSplit(c));
        }
    }
    if a.iter().filter(|&&n| n > 0).count() < 2 {
        return Err(PsoError::DegenerateSplit(0));
    }
    Ok(())
}

/// Uncached mask fitness: LIGHT tier trained on `train`, scored on `val`.
pub fn fitness(mask: &FeatureMask, train: &Dataset, val: &Dataset, penalty: f64, seed: u64) -> Result<f64, PsoError> {
    check_splits(train, val)?;
    mask_fitness(mask, train, val, penalty, seed)
}

fn mask_fitness(mask: &FeatureMask, train: &Dataset, val: &Dataset, penalty: f64, seed: u64) -> Result<f64, PsoError> {
    if mask.len() != train.cols {
        return Err(PsoError::MaskLength {
            expected: train.cols,
            actual: mask.len(),
        });
    }
    let selected = mask.selected();
    if selected.is_empty() {
        return Err(PsoError::EmptyMask);
    }
    let names: Vec<String> = (0..train.n_classes).map(|c| c.to_string()).collect();
    let masked_train = train.select_columns(&selected);
    let model = train_tier(
        Tier::Light,
        &masked_train,
        mask,
        0,
        &names,
        &TierConfig::for_tier(Tier::Light, seed),
    )?;
    let mut correct = 0usize;
    for r in 0..val.rows {
        let x = mask.apply(val.row(r));
        if model.predict(&x)?.predicted_class == val.labels[r] {
            correct += 1;
        }
    }
    let accuracy = correct as f64 / val.rows as f64;
    Ok(accuracy - penalty * selected.len() as f64 / mask.len() as f64)
}

/// Memoizing fitness over a fixed train/validation split.
pub struct MaskFitness {
    train: Dataset,
    val: Dataset,
    penalty: f64,
    seed: u64,
    cache: Mutex<HashMap<FeatureMask, f64>>,
}

impl MaskFitness {
    pub fn new(train: Dataset, val: Dataset, penalty: f64, seed: u64) -> Result<Self, PsoError> {
        check_splits(&train, &val)?;
        Ok(MaskFitness {
            train,
            val,
            penalty,
            seed,
            cache: Mutex::new(HashMap::new()),
        })
    }

    pub fn feature_count(&self) -> usize {
        self.train.cols
    }
}

impl Fitness for MaskFitness {
    fn evaluate(&self, mask: &FeatureMask) -> Result<f64, PsoError> {
        if let Some(v) = self.cache.lock().expect("fitness cache").get(mask) {
            return Ok(*v);
        }
        let v = mask_fitness(mask, &self.train, &self.val, self.penalty, self.seed)?;
        self.cache.lock().expect("fitness cache").insert(mask.clone(), v);
        Ok(v)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredMask {
    pub mask: FeatureMask,
    pub fitness: f64,
}

#[derive(Debug, Clone)]
pub struct SwarmState {
    pub positions: Vec<FeatureMask>,
    pub velocities: Vec<Vec<f64>>,
    pub fitness: Vec<f64>,
    pub personal_best: Vec<ScoredMask>,
    pub global_best: ScoredMask,
    pub epoch: usize,
    pub epochs_since_improvement: usize,
    pub consecutive_mean_declines: usize,
    rng: ChaCha8Rng,
}

impl SwarmState {
    pub fn particles(&self) -> usize {
        self.positions.len()
    }

    pub fn features(&self) -> usize {
        self.positions[0].len()
    }

    pub fn mean_fitness(&self) -> f64 {
        self.fitness.iter().sum::<f64>() / self.fitness.len() as f64
    }

    /// Mean pairwise Hamming distance divided by the feature count.
    pub fn diversity(&self) -> f64 {
        let p = self.particles();
        let mut total = 0usize;
        for i in 0..p {
            for j in i + 1..p {
                total += self.positions[i].hamming(&self.positions[j]);
            }
        }
        let pairs = p * (p - 1) / 2;
        total as f64 / (pairs as f64 * self.features() as f64)
    }

    /// Digest of positions, velocities and bests, for fixtures.
    pub fn digest(&self) -> String {
        let velocity_bits: Vec<Vec<u64>> = self
            .velocities
            .iter()
            .map(|row| row.iter().map(|v| v.to_bits()).collect())
            .collect();
        json_digest(&(
            &self.positions,
            velocity_bits,
            self.fitness.iter().map(|f| f.to_bits()).collect::<Vec<_>>(),
            &self.global_best.mask,
            self.epoch,
        ))
    }
}

fn evaluate_all(positions: &[FeatureMask], fitness: &dyn Fitness) -> Result<Vec<f64>, PsoError> {
    positions.par_iter().map(|m| fitness.evaluate(m)).collect()
}

fn best_of(bests: &[ScoredMask]) -> ScoredMask {
    let mut best = &bests[0];
    for b in &bests[1..] {
        if b.fitness > best.fitness {
            best = b;
        }
    }
    best.clone()
}

pub fn init_swarm(
    particles: usize,
    features: usize,
    v_max: f64,
    seed: u64,
    fitness: &dyn Fitness,
) -> Result<SwarmState, PsoError> {
    if particles < 2 || features < 1 {
        return Err(PsoError::InvalidDimensions { particles, features });
    }
    let mut rng = seeded_rng(seed, 0x950);
    let mut positions = Vec::with_capacity(particles);
    for _ in 0..particles {
        loop {
            let bits: Vec<bool> = (0..features).map(|_| rng.random_bool(0.5)).collect();
            if bits.iter().any(|b| *b) {
                positions.push(FeatureMask(bits));
                break;
            }
        }
    }
    let velocities = (0..particles)
        .map(|_| (0..features).map(|_| rng.random_range(-v_max..=v_max)).collect())
        .collect();
    let scores = evaluate_all(&positions, fitness)?;
    let personal_best: Vec<ScoredMask> = positions
        .iter()
        .zip(&scores)
        .map(|(m, f)| ScoredMask {
            mask: m.clone(),
            fitness: *f,
        })
        .collect();
    let global_best = best_of(&personal_best);
    Ok(SwarmState {
        positions,
        velocities,
        fitness: scores,
        personal_best,
        global_best,
        epoch: 0,
        epochs_since_improvement: 0,
        consecutive_mean_declines: 0,
        rng,
    })
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// One swarm iteration: velocity update, bit resampling, evaluation and
/// best tracking. Personal and global bests only change on strict
/// improvement, scanned in particle order.
pub fn pso_step(mut state: SwarmState, params: &PsoParams, fitness: &dyn Fitness) -> Result<SwarmState, PsoError> {
    params.validate()?;
    let features = state.features();
    let gbest = state.global_best.mask.clone();
    for i in 0..state.particles() {
        let pbest = &state.personal_best[i].mask;
        let x = &state.positions[i];
        let v = &mut state.velocities[i];
        for (j, vj) in v.iter_mut().enumerate() {
            let r1: f64 = state.rng.random();
            let r2: f64 = state.rng.random();
            let xj = x.0[j] as u8 as f64;
            let pull_p = pbest.0[j] as u8 as f64 - xj;
            let pull_g = gbest.0[j] as u8 as f64 - xj;
            let nv = params.inertia_weight * *vj + params.cognitive * r1 * pull_p + params.social * r2 * pull_g;
            *vj = nv.clamp(-params.v_max, params.v_max);
        }
        let mut bits: Vec<bool> = v.iter().map(|&vj| state.rng.random::<f64>() < sigmoid(vj)).collect();
        if !bits.iter().any(|b| *b) {
            bits[state.rng.random_range(0..features)] = true;
        }
        state.positions[i] = FeatureMask(bits);
    }

    let previous_mean = state.mean_fitness();
    state.fitness = evaluate_all(&state.positions, fitness)?;
    for i in 0..state.particles() {
        if state.fitness[i] > state.personal_best[i].fitness {
            state.personal_best[i] = ScoredMask {
                mask: state.positions[i].clone(),
                fitness: state.fitness[i],
            };
        }
    }
    let candidate = best_of(&state.personal_best);
    if candidate.fitness > state.global_best.fitness {
        state.global_best = candidate;
        state.epochs_since_improvement = 0;
    } else {
        state.epochs_since_improvement += 1;
    }
    if state.mean_fitness() < previous_mean {
        state.consecutive_mean_declines += 1;
    } else {
        state.consecutive_mean_declines = 0;
    }
    state.epoch += 1;
    Ok(state)
}

/// Population snapshot handed to the advisor after each epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdvisorSummary {
    pub epoch: usize,
    pub best_fitness: f64,
    pub mean_fitness: f64,
    pub population_diversity: f64,
    pub epochs_since_improvement: usize,
    pub consecutive_mean_declines: usize,
    pub params: PsoParams,
}

pub fn summarize(state: &SwarmState, params: &PsoParams) -> AdvisorSummary {
    AdvisorSummary {
        epoch: state.epoch,
        best_fitness: state.global_best.fitness,
        mean_fitness: state.mean_fitness(),
        population_diversity: state.diversity(),
        epochs_since_improvement: state.epochs_since_improvement,
        consecutive_mean_declines: state.consecutive_mean_declines,
        params: *params,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SelectionConfig {
    pub particles: usize,
    pub epochs: usize,
    pub penalty: f64,
    pub seed: u64,
    pub initial_params: PsoParams,
}

impl Default for SelectionConfig {
    fn default() -> Self {
        SelectionConfig {
            particles: 20,
            epochs: 30,
            penalty: 0.05,
            seed: 0,
            initial_params: PsoParams::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub summary: AdvisorSummary,
    pub params_used: PsoParams,
    pub next_params: PsoParams,
    pub diagnosis: Diagnosis,
    pub source: AdviceSource,
    pub fallback_reason: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionResult {
    pub mask: FeatureMask,
    pub fitness: f64,
    pub log: Vec<EpochRecord>,
    pub run_digest: String,
}

/// Runs `epochs` PSO iterations, consulting the advisor after each one and
/// installing its parameters for the next.
pub fn run_selection(
    fitness: &dyn Fitness,
    features: usize,
    cfg: &SelectionConfig,
    advisor: &mut dyn Advisor,
) -> Result<SelectionResult, PsoError> {
    cfg.initial_params.validate()?;
    let mut state = init_swarm(cfg.particles, features, cfg.initial_params.v_max, cfg.seed, fitness)?;
    let mut params = cfg.initial_params;
    let mut log: Vec<EpochRecord> = Vec::with_capacity(cfg.epochs);
    let mut history: Vec<AdvisorDirective> = Vec::new();
    for _ in 0..cfg.epochs {
        state = pso_step(state, &params, fitness)?;
        let summary = summarize(&state, &params);
        let window = &history[history.len().saturating_sub(ADVISOR_HISTORY)..];
        let advice = advisor.advise(&summary, window);
        let next = advice.directive.new_params.clamped(&params);
        log.push(EpochRecord {
            summary,
            params_used: params,
            next_params: next,
            diagnosis: advice.directive.diagnosis,
            source: advice.source,
            fallback_reason: advice.fallback_reason,
        });
        history.push(advice.directive);
        params = next;
    }
    let run_digest = json_digest(&(cfg, &state.global_best, &log));
    Ok(SelectionResult {
        mask: state.global_best.mask,
        fitness: state.global_best.fitness,
        log,
        run_digest,
    })
}

/// Convenience wrapper building the cached fitness from a split.
pub fn select_features(
    train: &Dataset,
    val: &Dataset,
    cfg: &SelectionConfig,
    advisor: &mut dyn Advisor,
) -> Result<SelectionResult, PsoError> {
    let fitness = MaskFitness::new(train.clone(), val.clone(), cfg.penalty, cfg.seed)?;
    run_selection(&fitness, train.cols, cfg, advisor)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeviceProfile {
    pub device_class: String,
    pub attributes: Vec<f64>,
    pub schema: String,
}

/// Labeled data a profile's selection run optimizes over.
#[derive(Debug, Clone)]
pub struct ProfileDataset {
    pub train: Dataset,
    pub val: Dataset,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RepositoryEntry {
    pub id: String,
    pub profile: DeviceProfile,
    pub mask: Option<FeatureMask>,
    pub fitness: Option<f64>,
    pub run_digest: Option<String>,
    /// Set when the profile's selection run failed; such entries are never matched.
    pub error: Option<String>,
}

impl RepositoryEntry {
    fn usable(&self) -> bool {
        self.error.is_none() && self.mask.is_some()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KnowledgeRepository {
    pub version: u32,
    pub schema: String,
    pub feature_count: usize,
    pub entries: Vec<RepositoryEntry>,
}

impl KnowledgeRepository {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("repository serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, PsoError> {
        let repo: KnowledgeRepository = serde_json::from_str(text).map_err(|e| PsoError::Io(e.to_string()))?;
        for e in &repo.entries {
            if let Some(m) = &e.mask {
                if m.len() != repo.feature_count || m.count() == 0 {
                    return Err(PsoError::Io(format!("entry {} has an invalid mask", e.id)));
                }
            }
        }
        Ok(repo)
    }

    pub fn save(&self, path: &Path) -> Result<(), PsoError> {
        std::fs::write(path, self.to_json()).map_err(|e| PsoError::Io(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, PsoError> {
        let text = std::fs::read_to_string(path).map_err(|e| PsoError::Io(e.to_string()))?;
        Self::from_json(&text)
    }

    pub fn entry(&self, id: &str) -> Option<&RepositoryEntry> {
        self.entries.iter().find(|e| e.id == id)
    }
}

/// Runs one selection per profile. Failed runs are kept as error entries.
pub fn build_repository(
    schema: &str,
    profiles: &[DeviceProfile],
    datasets: &[ProfileDataset],
    cfg: &SelectionConfig,
    advisor: &mut dyn Advisor,
) -> Result<KnowledgeRepository, PsoError> {
    if profiles.is_empty() {
        return Err(PsoError::NoProfiles);
    }
    if profiles.len() != datasets.len() {
        return Err(PsoError::SchemaMismatch(format!(
            "{} profiles but {} datasets",
            profiles.len(),
            datasets.len()
        )));
    }
    let feature_count = datasets[0].train.cols;
    let mut entries = Vec::with_capacity(profiles.len());
    for (i, (profile, data)) in profiles.iter().zip(datasets).enumerate() {
        let id = format!("e{i}");
        let outcome = if profile.schema != schema {
            Err(PsoError::SchemaMismatch(profile.schema.clone()))
        } else if data.train.cols != feature_count {
            Err(PsoError::MaskLength {
                expected: feature_count,
                actual: data.train.cols,
            })
        } else {
            select_features(&data.train, &data.val, cfg, advisor)
        };
        entries.push(match outcome {
            Ok(r) => RepositoryEntry {
                id,
                profile: profile.clone(),
                mask: Some(r.mask),
                fitness: Some(r.fitness),
                run_digest: Some(r.run_digest),
                error: None,
            },
            Err(e) => RepositoryEntry {
                id,
                profile: profile.clone(),
                mask: None,
                fitness: None,
                run_digest: None,
                error: Some(e.to_string()),
            },
        });
    }
    Ok(KnowledgeRepository {
        version: REPOSITORY_VERSION,
        schema: schema.to_string(),
        feature_count,
        entries,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MatchKind {
    ExactClass,
    Similarity,
    AdvisorPick,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RepositoryMatch {
    pub mask: FeatureMask,
    pub entry_id: String,
    pub score: f64,
    pub kind: MatchKind,
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

/// Similarity of `profile` to each usable entry: cosine over attributes
/// z-scored with the entries' per-attribute mean and population std (a zero
/// std scales by 1). Sorted best first, ties by entry order.
pub fn similarity_ranking(repo: &KnowledgeRepository, profile: &DeviceProfile) -> Vec<(usize, f64)> {
    let usable: Vec<usize> = (0..repo.entries.len()).filter(|&i| repo.entries[i].usable()).collect();
    let dims = profile.attributes.len();
    let n = usable.len() as f64;
    let mut mean = vec![0.0; dims];
    for &i in &usable {
        for (m, a) in mean.iter_mut().zip(&repo.entries[i].profile.attributes) {
            *m += a / n;
        }
    }
    let mut std = vec![0.0; dims];
    for &i in &usable {
        for ((s, a), m) in std.iter_mut().zip(&repo.entries[i].profile.attributes).zip(&mean) {
            *s += (a - m) * (a - m) / n;
        }
    }
    let scale: Vec<f64> = std.iter().map(|v| if *v > 0.0 { v.sqrt() } else { 1.0 }).collect();
    let z = |attrs: &[f64]| -> Vec<f64> {
        attrs
            .iter()
            .zip(&mean)
            .zip(&scale)
            .map(|((a, m), s)| (a - m) / s)
            .collect()
    };
    let query = z(&profile.attributes);
    let mut ranked: Vec<(usize, f64)> = usable
        .iter()
        .map(|&i| (i, cosine(&query, &z(&repo.entries[i].profile.attributes))))
        .collect();
    ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    ranked
}

/// Finds the feature mask for a device: exact class match first, otherwise
/// the most similar entry, optionally overridden by the advisor's pick
/// among the top three.
pub fn query_repository(
    repo: &KnowledgeRepository,
    profile: &DeviceProfile,
    advisor: Option<&mut dyn Advisor>,
) -> Result<RepositoryMatch, PsoError> {
    let usable: Vec<&RepositoryEntry> = repo.entries.iter().filter(|e| e.usable()).collect();
    if usable.is_empty() {
        return Err(PsoError::EmptyRepository);
    }
    if profile.schema != repo.schema {
        return Err(PsoError::SchemaMismatch(format!(
            "profile schema {} vs repository {}",
            profile.schema, repo.schema
        )));
    }
    if usable
        .iter()
        .any(|e| e.profile.attributes.len() != profile.attributes.len())
    {
        return Err(PsoError::SchemaMismatch("attribute vector length".into()));
    }
    let matched = |e: &RepositoryEntry, score: f64, kind: MatchKind| RepositoryMatch {
        mask: e.mask.clone().expect("usable entry has a mask"),
        entry_id: e.id.clone(),
        score,
        kind,
    };
    if let Some(e) = usable.iter().find(|e| e.profile.device_class == profile.device_class) {
        return Ok(matched(e, 1.0, MatchKind::ExactClass));
    }
    let ranked = similarity_ranking(repo, profile);
    let (top, top_score) = ranked[0];
    if let Some(advisor) = advisor {
        let candidates: Vec<RepositoryCandidate> = ranked
            .iter()
            .take(3)
            .map(|&(i, score)| RepositoryCandidate {
                id: repo.entries[i].id.clone(),
                profile: repo.entries[i].profile.clone(),
                similarity: score,
            })
            .collect();
        if let Some(pick) = advisor.pick_entry(&candidates, profile) {
            if let Some(&(i, score)) = ranked.iter().take(3).find(|(i, _)| repo.entries[*i].id == pick) {
                return Ok(matched(&repo.entries[i], score, MatchKind::AdvisorPick));
            }
        }
    }
    Ok(matched(&repo.entries[top], top_score, MatchKind::Similarity))
}
