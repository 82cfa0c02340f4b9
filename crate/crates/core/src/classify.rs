//! Tiered tree-ensemble classifiers and the resource-driven tier policy.
//!
//! LIGHT is a boosted-stump model, MEDIUM and HEAVY are gradient-boosted
//! trees of growing depth (HEAVY may instead be a bagged forest). Splits are
//! found by exact greedy search over sorted unique feature values, scanning
//! features and thresholds in ascending order and keeping the first best
//! gain, so training is fully deterministic. A split between two adjacent
//! unique values is placed at their midpoint.
//!
//! Class scores are softmax/logistic transforms of ensemble margins. They
//! rank classes but are not calibrated probabilities.

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::imaging::FeatureScaler;
use crate::pso_select::FeatureMask;
use crate::util::{json_digest, read_u32, read_u64, seeded_rng};

const BUNDLE_MAGIC: &[u8; 4] = b"LAEB";
const BUNDLE_VERSION: u32 = 1;
const LEAF_L2: f64 = 1.0;
const MIN_CHILD_HESSIAN: f64 = 1e-6;
const MIN_GAIN: f64 = 1e-12;

#[derive(Debug, Error, PartialEq)]
pub enum ClassifyError {
    #[error("training labels contain fewer than two classes")]
    SingleClassInput,
    #[error("non-finite feature at row {row}, column {col}")]
    NonFiniteFeature { row: usize, col: usize },
    #[error("expected {expected} features, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },
    #[error("model pool has no {0:?} tier")]
    IncompletePool(Tier),
    #[error("resource status out of range: {0}")]
    InvalidStatus(String),
    #[error("invalid dataset: {0}")]
    InvalidDataset(String),
    #[error("malformed model bundle: {0}")]
    Malformed(String),
    #[error("io error: {0}")]
    Io(String),
}

impl From<std::io::Error> for ClassifyError {
    fn from(e: std::io::Error) -> Self {
        ClassifyError::Io(e.to_string())
    }
}

/// Dense row-major feature matrix with integer class labels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub rows: usize,
    pub cols: usize,
    pub values: Vec<f64>,
    pub labels: Vec<usize>,
    pub n_classes: usize,
}

impl Dataset {
    pub fn from_rows(rows: &[Vec<f64>], labels: Vec<usize>, n_classes: usize) -> Result<Self, ClassifyError> {
        if rows.len() != labels.len() {
            return Err(ClassifyError::InvalidDataset(format!(
                "{} rows but {} labels",
                rows.len(),
                labels.len()
            )));
        }
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(ClassifyError::InvalidDataset("ragged rows".into()));
        }
        if labels.iter().any(|&l| l >= n_classes) {
            return Err(ClassifyError::InvalidDataset("label out of range".into()));
        }
        Ok(Dataset {
            rows: rows.len(),
            cols,
            values: rows.concat(),
            labels,
            n_classes,
        })
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    fn at(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.cols + col]
    }

    pub fn select_columns(&self, columns: &[usize]) -> Dataset {
        let mut values = Vec::with_capacity(self.rows * columns.len());
        for r in 0..self.rows {
            let row = self.row(r);
            values.extend(columns.iter().map(|&c| row[c]));
        }
        Dataset {
            rows: self.rows,
            cols: columns.len(),
            values,
            labels: self.labels.clone(),
            n_classes: self.n_classes,
        }
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        let mut values = Vec::with_capacity(indices.len() * self.cols);
        for &i in indices {
            values.extend_from_slice(self.row(i));
        }
        Dataset {
            rows: indices.len(),
            cols: self.cols,
            values,
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            n_classes: self.n_classes,
        }
    }

    /// Horizontal concatenation of two datasets with identical labels.
    pub fn hstack(&self, other: &Dataset) -> Result<Dataset, ClassifyError> {
        if self.rows != other.rows || self.labels != other.labels {
            return Err(ClassifyError::InvalidDataset("hstack of unaligned datasets".into()));
        }
        let mut values = Vec::with_capacity(self.rows * (self.cols + other.cols));
        for r in 0..self.rows {
            values.extend_from_slice(self.row(r));
            values.extend_from_slice(other.row(r));
        }
        Ok(Dataset {
            rows: self.rows,
            cols: self.cols + other.cols,
            values,
            labels: self.labels.clone(),
            n_classes: self.n_classes,
        })
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.n_classes];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }

    fn check_finite(&self) -> Result<(), ClassifyError> {
        match self.values.iter().position(|v| !v.is_finite()) {
            Some(i) => Err(ClassifyError::NonFiniteFeature {
                row: i / self.cols.max(1),
                col: i % self.cols.max(1),
            }),
            None => Ok(()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Tier {
    Light,
    Medium,
    Heavy,
}

impl Tier {
    pub const ALL: [Tier; 3] = [Tier::Light, Tier::Medium, Tier::Heavy];
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ModelKind {
    BoostedStumps,
    Gbdt,
    Forest,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ResourceStatus {
    pub battery_fraction: f64,
    pub cpu_load: f64,
    pub memory_free_fraction: f64,
}

impl ResourceStatus {
    pub fn new(battery_fraction: f64, cpu_load: f64, memory_free_fraction: f64) -> Result<Self, ClassifyError> {
        let status = ResourceStatus {
            battery_fraction,
            cpu_load,
            memory_free_fraction,
        };
        status.validate()?;
        Ok(status)
    }

    pub fn full() -> Self {
        ResourceStatus {
            battery_fraction: 1.0,
            cpu_load: 0.0,
            memory_free_fraction: 1.0,
        }
    }

    pub fn validate(&self) -> Result<(), ClassifyError> {
        for (name, v) in [
            ("battery", self.battery_fraction),
            ("cpu", self.cpu_load),
            ("memory", self.memory_free_fraction),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(ClassifyError::InvalidStatus(format!("{name}={v}")));
            }
        }
        Ok(())
    }
}

/// Threshold table mapping resource status to a tier.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TierPolicy {
    pub heavy_min_battery: f64,
    pub heavy_max_cpu: f64,
    pub light_below_battery: f64,
    pub light_above_cpu: f64,
}

impl Default for TierPolicy {
    fn default() -> Self {
        TierPolicy {
            heavy_min_battery: 0.5,
            heavy_max_cpu: 0.5,
            light_below_battery: 0.2,
            light_above_cpu: 0.8,
        }
    }
}

impl TierPolicy {
    /// LIGHT takes precedence when custom thresholds overlap.
    pub fn choose(&self, status: &ResourceStatus) -> Tier {
        if status.battery_fraction < self.light_below_battery || status.cpu_load > self.light_above_cpu {
            Tier::Light
        } else if status.battery_fraction >= self.heavy_min_battery && status.cpu_load <= self.heavy_max_cpu {
            Tier::Heavy
        } else {
            Tier::Medium
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TierConfig {
    pub rounds: usize,
    pub max_depth: usize,
    pub learning_rate: f64,
    pub seed: u64,
    /// Train HEAVY as a bagged forest instead of boosted trees.
    pub heavy_forest: bool,
}

impl Default for TierConfig {
    fn default() -> Self {
        TierConfig::for_tier(Tier::Medium, 0)
    }
}

impl TierConfig {
    pub fn for_tier(tier: Tier, seed: u64) -> Self {
        let (rounds, max_depth) = match tier {
            Tier::Light => (30, 1),
            Tier::Medium => (60, 3),
            Tier::Heavy => (120, 5),
        };
        TierConfig {
            rounds,
            max_depth,
            learning_rate: 0.1,
            seed,
            heavy_forest: false,
        }
    }

    pub fn forest(seed: u64) -> Self {
        TierConfig {
            rounds: 200,
            max_depth: 10,
            learning_rate: 1.0,
            seed,
            heavy_forest: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Node {
    Split {
        feature: usize,
        threshold: f64,
        left: usize,
        right: usize,
    },
    Leaf(Vec<f64>),
}

/// A binary decision tree; rows with `x[feature] <= threshold` go left.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tree {
    pub nodes: Vec<Node>,
}

impl Tree {
    pub fn leaf_value(&self, x: &[f64]) -> &[f64] {
        let mut at = 0;
        loop {
            match &self.nodes[at] {
                Node::Leaf(v) => return v,
                Node::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => at = if x[*feature] <= *threshold { *left } else { *right },
            }
        }
    }

    pub fn depth(&self) -> usize {
        fn walk(nodes: &[Node], at: usize) -> usize {
            match &nodes[at] {
                Node::Leaf(_) => 0,
                Node::Split { left, right, .. } => 1 + walk(nodes, *left).max(walk(nodes, *right)),
            }
        }
        walk(&self.nodes, 0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Ensemble {
    /// One margin per output (1 for binary, K for multiclass), each round
    /// holding one tree per output with shrinkage already applied.
    Boosted { base: Vec<f64>, rounds: Vec<Vec<Tree>> },
    /// Leaves hold class frequency vectors.
    Forest { trees: Vec<Tree> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingDigest {
    pub rows: usize,
    pub train_accuracy: f64,
    /// Training loss before the first round and after each round.
    pub loss_history: Vec<f64>,
    pub hash: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifierModel {
    pub tier: Tier,
    pub kind: ModelKind,
    /// Tabular feature mask in force at training time.
    pub feature_mask: FeatureMask,
    /// Representation dimensions appended after the masked features.
    pub extra_dims: usize,
    pub class_names: Vec<String>,
    pub ensemble: Ensemble,
    pub digest: TrainingDigest,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Verdict {
    pub predicted_class: usize,
    pub class_name: String,
    pub is_malicious: bool,
    pub scores: Vec<f64>,
    pub tier: Tier,
    pub feature_count: usize,
}

impl ClassifierModel {
    pub fn input_dim(&self) -> usize {
        self.feature_mask.count() + self.extra_dims
    }

    pub fn n_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn tree_count(&self) -> usize {
        match &self.ensemble {
            Ensemble::Boosted { rounds, .. } => rounds.iter().map(Vec::len).sum(),
            Ensemble::Forest { trees } => trees.len(),
        }
    }

    fn scores_unchecked(&self, x: &[f64]) -> Vec<f64> {
        match &self.ensemble {
            Ensemble::Boosted { base, rounds } => {
                let mut margins = base.clone();
                for round in rounds {
                    for (m, tree) in margins.iter_mut().zip(round) {
                        *m += tree.leaf_value(x)[0];
                    }
                }
                margins_to_scores(&margins)
            }
            Ensemble::Forest { trees } => {
                let mut acc = vec![0.0; self.n_classes()];
                for tree in trees {
                    for (a, p) in acc.iter_mut().zip(tree.leaf_value(x)) {
                        *a += p;
                    }
                }
                let total: f64 = acc.iter().sum();
                acc.iter().map(|a| a / total).collect()
            }
        }
    }

    pub fn predict(&self, x: &[f64]) -> Result<Verdict, ClassifyError> {
        if x.len() != self.input_dim() {
            return Err(ClassifyError::DimensionMismatch {
                expected: self.input_dim(),
                actual: x.len(),
            });
        }
        if let Some(col) = x.iter().position(|v| !v.is_finite()) {
            return Err(ClassifyError::NonFiniteFeature { row: 0, col });
        }
        let scores = self.scores_unchecked(x);
        let predicted_class = argmax(&scores);
        Ok(Verdict {
            predicted_class,
            class_name: self.class_names[predicted_class].clone(),
            is_malicious: predicted_class != 0,
            scores,
            tier: self.tier,
            feature_count: x.len(),
        })
    }

    fn accuracy_on(&self, data: &Dataset) -> f64 {
        let correct = (0..data.rows)
            .filter(|&r| argmax(&self.scores_unchecked(data.row(r))) == data.labels[r])
            .count();
        correct as f64 / data.rows.max(1) as f64
    }
}

pub fn predict(model: &ClassifierModel, features: &[f64]) -> Result<Verdict, ClassifyError> {
    model.predict(features)
}

fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// One margin means binary (logistic link), several mean softmax.
fn margins_to_scores(margins: &[f64]) -> Vec<f64> {
    if margins.len() == 1 {
        let p = sigmoid(margins[0]);
        return vec![1.0 - p, p];
    }
    let max = margins.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = margins.iter().map(|m| (m - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.iter().map(|e| e / total).collect()
}

fn mean_log_loss(margins: &[Vec<f64>], labels: &[usize]) -> f64 {
    let total: f64 = margins
        .iter()
        .zip(labels)
        .map(|(m, &y)| -margins_to_scores(m)[y].max(1e-300).ln())
        .sum();
    total / labels.len() as f64
}

/// Per-feature row order by ascending value, computed once per training run.
fn sorted_columns(data: &Dataset) -> Vec<Vec<u32>> {
    (0..data.cols)
        .map(|c| {
            let mut idx: Vec<u32> = (0..data.rows as u32).collect();
            idx.sort_by(|&a, &b| {
                data.at(a as usize, c)
                    .total_cmp(&data.at(b as usize, c))
                    .then(a.cmp(&b))
            });
            idx
        })
        .collect()
}

#[derive(Clone, Copy)]
struct Candidate {
    gain: f64,
    feature: usize,
    threshold: f64,
}

/// Level-wise exact greedy growth shared by the boosted and forest learners.
///
/// `stats` accumulates per-row statistics into a node's running vector and
/// `gain` scores a split from (left, total) sums. `allowed(node, feature)`
/// restricts the features a node may split on.
#[allow(clippy::too_many_arguments)]
fn grow_tree<S, G, L, A>(
    data: &Dataset,
    sorted: &[Vec<u32>],
    rows: &[usize],
    max_depth: usize,
    stat_len: usize,
    stats: S,
    gain: G,
    leaf: L,
    mut allowed: A,
) -> Tree
where
    S: Fn(usize, &mut [f64]),
    G: Fn(&[f64], &[f64]) -> Option<f64>,
    L: Fn(&[f64]) -> Vec<f64>,
    A: FnMut(usize, usize) -> bool,
{
    let mut nodes: Vec<Node> = vec![Node::Leaf(Vec::new())];
    // Row -> index into `open`, or usize::MAX once settled.
    let mut slot = vec![usize::MAX; data.rows];
    let mut open: Vec<usize> = vec![0];
    let mut totals: Vec<Vec<f64>> = vec![vec![0.0; stat_len]];
    for &r in rows {
        slot[r] = 0;
        stats(r, &mut totals[0]);
    }

    for _ in 0..max_depth {
        if open.is_empty() {
            break;
        }
        let mut best: Vec<Option<Candidate>> = vec![None; open.len()];
        let mut allow = vec![vec![false; data.cols]; open.len()];
        for (k, a) in allow.iter_mut().enumerate() {
            for (f, slot_ok) in a.iter_mut().enumerate() {
                *slot_ok = allowed(k, f);
            }
        }
        for (f, order) in sorted.iter().enumerate() {
            let mut left: Vec<Vec<f64>> = vec![vec![0.0; stat_len]; open.len()];
            let mut last: Vec<Option<f64>> = vec![None; open.len()];
            for &r in order {
                let r = r as usize;
                let k = slot[r];
                if k == usize::MAX || !allow[k][f] {
                    continue;
                }
                let v = data.at(r, f);
                if let Some(prev) = last[k] {
                    if v > prev {
                        if let Some(g) = gain(&left[k], &totals[k]) {
                            if best[k].is_none_or(|b| g > b.gain) {
                                let mid = prev + (v - prev) / 2.0;
                                best[k] = Some(Candidate {
                                    gain: g,
                                    feature: f,
                                    threshold: if mid < v { mid } else { prev },
                                });
                            }
                        }
                    }
                }
                stats(r, &mut left[k]);
                last[k] = Some(v);
            }
        }

        let mut next_open = Vec::new();
        let mut next_totals = Vec::new();
        let mut remap = vec![usize::MAX; open.len() * 2];
        for (k, cand) in best.iter().enumerate() {
            match cand {
                Some(c) if c.gain > MIN_GAIN => {
                    let (l, r) = (nodes.len(), nodes.len() + 1);
                    nodes.push(Node::Leaf(Vec::new()));
                    nodes.push(Node::Leaf(Vec::new()));
                    nodes[open[k]] = Node::Split {
                        feature: c.feature,
                        threshold: c.threshold,
                        left: l,
                        right: r,
                    };
                    remap[2 * k] = next_open.len();
                    next_open.push(l);
                    next_totals.push(vec![0.0; stat_len]);
                    remap[2 * k + 1] = next_open.len();
                    next_open.push(r);
                    next_totals.push(vec![0.0; stat_len]);
                }
                _ => nodes[open[k]] = Node::Leaf(leaf(&totals[k])),
            }
        }
        for &r in rows {
            let k = slot[r];
            if k == usize::MAX {
                continue;
            }
            match best[k] {
                Some(c) if c.gain > MIN_GAIN => {
                    let side = if data.at(r, c.feature) <= c.threshold { 0 } else { 1 };
                    let j = remap[2 * k + side];
                    slot[r] = j;
                    stats(r, &mut next_totals[j]);
                }
                _ => slot[r] = usize::MAX,
            }
        }
        open = next_open;
        totals = next_totals;
    }
    for (k, &node) in open.iter().enumerate() {
        nodes[node] = Node::Leaf(leaf(&totals[k]));
    }
    Tree { nodes }
}

fn validate_training(data: &Dataset, mask: &FeatureMask, extra_dims: usize) -> Result<(), ClassifyError> {
    if data.cols != mask.count() + extra_dims {
        return Err(ClassifyError::DimensionMismatch {
            expected: mask.count() + extra_dims,
            actual: data.cols,
        });
    }
    if data.class_counts().iter().filter(|&&c| c > 0).count() < 2 {
        return Err(ClassifyError::SingleClassInput);
    }
    data.check_finite()
}

fn train_boosted(data: &Dataset, cfg: &TierConfig) -> (Ensemble, Vec<f64>) {
    let k = data.n_classes;
    let outputs = if k == 2 { 1 } else { k };
    let counts = data.class_counts();
    let n = data.rows as f64;
    // Smoothed class priors keep the base margin finite for absent classes.
    let prior = |c: usize| (counts[c] as f64 + 1.0) / (n + k as f64);
    let base: Vec<f64> = if outputs == 1 {
        vec![(prior(1) / prior(0)).ln()]
    } else {
        (0..k).map(|c| prior(c).ln()).collect()
    };
    let sorted = sorted_columns(data);
    let all_rows: Vec<usize> = (0..data.rows).collect();
    let mut margins: Vec<Vec<f64>> = vec![base.clone(); data.rows];
    let mut loss = mean_log_loss(&margins, &data.labels);
    let mut history = vec![loss];
    let mut rounds = Vec::with_capacity(cfg.rounds);

    for _ in 0..cfg.rounds {
        let probs: Vec<Vec<f64>> = margins.iter().map(|m| margins_to_scores(m)).collect();
        let mut trees = Vec::with_capacity(outputs);
        for out in 0..outputs {
            let class = if outputs == 1 { 1 } else { out };
            let grad: Vec<f64> = (0..data.rows)
                .map(|r| probs[r][class] - if data.labels[r] == class { 1.0 } else { 0.0 })
                .collect();
            let hess: Vec<f64> = (0..data.rows)
                .map(|r| (probs[r][class] * (1.0 - probs[r][class])).max(1e-12))
                .collect();
            let score = |g: f64, h: f64| g * g / (h + LEAF_L2);
            let tree = grow_tree(
                data,
                &sorted,
                &all_rows,
                cfg.max_depth,
                2,
                |r, acc| {
                    acc[0] += grad[r];
                    acc[1] += hess[r];
                },
                |left, total| {
                    let (gl, hl) = (left[0], left[1]);
                    let (gr, hr) = (total[0] - gl, total[1] - hl);
                    if hl < MIN_CHILD_HESSIAN || hr < MIN_CHILD_HESSIAN {
                        return None;
                    }
                    Some(0.5 * (score(gl, hl) + score(gr, hr) - score(total[0], total[1])))
                },
                |total| vec![-total[0] / (total[1] + LEAF_L2)],
                |_, _| true,
            );
            trees.push(tree);
        }

        // Shrink further if a full step would raise the training loss, so
        // the recorded loss never increases.
        let mut shrink = cfg.learning_rate;
        let mut accepted = None;
        for _ in 0..30 {
            let candidate: Vec<Vec<f64>> = (0..data.rows)
                .map(|r| {
                    let x = data.row(r);
                    margins[r]
                        .iter()
                        .zip(&trees)
                        .map(|(m, t)| m + shrink * t.leaf_value(x)[0])
                        .collect()
                })
                .collect();
            let new_loss = mean_log_loss(&candidate, &data.labels);
            if new_loss <= loss {
                accepted = Some((candidate, new_loss));
                break;
            }
            shrink *= 0.5;
        }
        let applied = match accepted {
            Some((candidate, new_loss)) => {
                margins = candidate;
                loss = new_loss;
                shrink
            }
            None => 0.0,
        };
        for tree in &mut trees {
            for node in &mut tree.nodes {
                if let Node::Leaf(v) = node {
                    v[0] *= applied;
                }
            }
        }
        history.push(loss);
        rounds.push(trees);
    }
    (Ensemble::Boosted { base, rounds }, history)
}

fn train_forest(data: &Dataset, cfg: &TierConfig) -> Ensemble {
    let k = data.n_classes;
    let sorted = sorted_columns(data);
    let mut rng = seeded_rng(cfg.seed, 0xF0E5);
    let per_node = ((data.cols as f64).sqrt().ceil() as usize).clamp(1, data.cols.max(1));
    let gini_mass = |counts: &[f64]| {
        let n: f64 = counts.iter().sum();
        if n <= 0.0 {
            return 0.0;
        }
        n - counts.iter().map(|c| c * c).sum::<f64>() / n
    };
    let mut trees = Vec::with_capacity(cfg.rounds);
    for _ in 0..cfg.rounds {
        let mut weight = vec![0.0; data.rows];
        for _ in 0..data.rows {
            weight[rng.random_range(0..data.rows)] += 1.0;
        }
        let rows: Vec<usize> = (0..data.rows).filter(|&r| weight[r] > 0.0).collect();
        let tree_seed: u64 = rng.random();
        let mut feature_rng = seeded_rng(tree_seed, 1);
        let mut drawn: Vec<Vec<bool>> = Vec::new();
        let tree = grow_tree(
            data,
            &sorted,
            &rows,
            cfg.max_depth,
            k,
            |r, acc| acc[data.labels[r]] += weight[r],
            |left, total| {
                let right: Vec<f64> = total.iter().zip(left).map(|(t, l)| t - l).collect();
                if left.iter().sum::<f64>() <= 0.0 || right.iter().sum::<f64>() <= 0.0 {
                    return None;
                }
                Some(gini_mass(total) - gini_mass(left) - gini_mass(&right))
            },
            |total| {
                let n: f64 = total.iter().sum();
                total.iter().map(|c| c / n).collect()
            },
            |node, feature| {
                // Features are drawn per node, at the first query of a level.
                if node == 0 && feature == 0 {
                    drawn.clear();
                }
                while drawn.len() <= node {
                    let mut pick = vec![false; data.cols];
                    let mut idx: Vec<usize> = (0..data.cols).collect();
                    for i in 0..per_node {
                        let j = feature_rng.random_range(i..data.cols);
                        idx.swap(i, j);
                        pick[idx[i]] = true;
                    }
                    drawn.push(pick);
                }
                drawn[node][feature]
            },
        );
        trees.push(tree);
    }
    Ensemble::Forest { trees }
}

/// Trains one tier on already-masked features.
pub fn train_tier(
    tier: Tier,
    data: &Dataset,
    feature_mask: &FeatureMask,
    extra_dims: usize,
    class_names: &[String],
    cfg: &TierConfig,
) -> Result<ClassifierModel, ClassifyError> {
    validate_training(data, feature_mask, extra_dims)?;
    if class_names.len() != data.n_classes {
        return Err(ClassifyError::InvalidDataset(format!(
            "{} class names for {} classes",
            class_names.len(),
            data.n_classes
        )));
    }
    let forest = tier == Tier::Heavy && cfg.heavy_forest;
    let (kind, ensemble, loss_history) = if forest {
        (ModelKind::Forest, train_forest(data, cfg), Vec::new())
    } else {
        let mut cfg = cfg.clone();
        let kind = if tier == Tier::Light {
            cfg.max_depth = 1;
            ModelKind::BoostedStumps
        } else {
            ModelKind::Gbdt
        };
        let (ensemble, history) = train_boosted(data, &cfg);
        (kind, ensemble, history)
    };
    let mut model = ClassifierModel {
        tier,
        kind,
        feature_mask: feature_mask.clone(),
        extra_dims,
        class_names: class_names.to_vec(),
        ensemble,
        digest: TrainingDigest {
            rows: data.rows,
            train_accuracy: 0.0,
            loss_history,
            hash: String::new(),
        },
    };
    model.digest.train_accuracy = model.accuracy_on(data);
    model.digest.hash = json_digest(&model.ensemble);
    Ok(model)
}

/// One model per tier, all sharing the same input layout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelPool {
    pub models: Vec<ClassifierModel>,
}

impl ModelPool {
    pub fn train(
        data: &Dataset,
        feature_mask: &FeatureMask,
        extra_dims: usize,
        class_names: &[String],
        seed: u64,
        heavy_forest: bool,
    ) -> Result<ModelPool, ClassifyError> {
        let models = Tier::ALL
            .iter()
            .map(|&tier| {
                let cfg = if tier == Tier::Heavy && heavy_forest {
                    TierConfig::forest(seed)
                } else {
                    TierConfig::for_tier(tier, seed)
                };
                train_tier(tier, data, feature_mask, extra_dims, class_names, &cfg)
            })
            .collect::<Result<Vec<_>, _>>()?;
        Ok(ModelPool { models })
    }

    pub fn get(&self, tier: Tier) -> Option<&ClassifierModel> {
        self.models.iter().find(|m| m.tier == tier)
    }
}

pub fn select_tier(pool: &ModelPool, status: &ResourceStatus, policy: &TierPolicy) -> Result<Tier, ClassifyError> {
    for tier in Tier::ALL {
        if pool.get(tier).is_none() {
            return Err(ClassifyError::IncompletePool(tier));
        }
    }
    status.validate()?;
    Ok(policy.choose(status))
}

/// Which inputs the classifiers consume.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ClassifierInput {
    /// Masked tabular features followed by the diffusion representation.
    #[default]
    Combined,
    TabularOnly,
    RepresentationOnly,
}

impl ClassifierInput {
    pub fn uses_tabular(self) -> bool {
        !matches!(self, ClassifierInput::RepresentationOnly)
    }

    pub fn uses_representation(self) -> bool {
        !matches!(self, ClassifierInput::TabularOnly)
    }

    /// Assembles one classifier input vector.
    pub fn assemble(self, tabular: &[f64], mask: &FeatureMask, representation: &[f64]) -> Vec<f64> {
        let mut x = Vec::new();
        if self.uses_tabular() {
            x.extend(mask.apply(tabular));
        }
        if self.uses_representation() {
            x.extend_from_slice(representation);
        }
        x
    }
}

/// Everything the online classifier needs besides the feature memory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelBundle {
    pub schema_name: String,
    pub schema_digest: String,
    pub class_names: Vec<String>,
    pub input: ClassifierInput,
    pub scaler: Option<FeatureScaler>,
    pub memory_digest: String,
    /// Pools keyed by the tabular mask they were trained on.
    pub pools: Vec<ModelPool>,
}

impl ModelBundle {
    pub fn pool_for(&self, mask: &FeatureMask) -> Option<&ModelPool> {
        self.pools
            .iter()
            .find(|p| p.models.first().is_some_and(|m| &m.feature_mask == mask))
    }

    /// `LAEB` magic, format version, then a length-prefixed JSON body.
    pub fn to_bytes(&self) -> Vec<u8> {
        let body = serde_json::to_vec(self).expect("bundle serializes");
        let mut out = Vec::with_capacity(16 + body.len());
        out.extend_from_slice(BUNDLE_MAGIC);
        out.extend_from_slice(&BUNDLE_VERSION.to_le_bytes());
        out.extend_from_slice(&(body.len() as u64).to_le_bytes());
        out.extend_from_slice(&body);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, ClassifyError> {
        let bad = |m: &str| ClassifyError::Malformed(m.to_string());
        if bytes.len() < 16 || &bytes[..4] != BUNDLE_MAGIC {
            return Err(bad("magic"));
        }
        let mut at = 4;
        if read_u32(bytes, &mut at) != Some(BUNDLE_VERSION) {
            return Err(bad("unsupported version"));
        }
        let len = read_u64(bytes, &mut at).ok_or_else(|| bad("length"))? as usize;
        let body = bytes.get(at..at + len).ok_or_else(|| bad("truncated body"))?;
        serde_json::from_slice(body).map_err(|e| bad(&e.to_string()))
    }

    pub fn save(&self, path: &Path) -> Result<(), ClassifyError> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, ClassifyError> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    pub fn digest(&self) -> String {
        crate::util::sha256_hex(&self.to_bytes())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn names(k: usize) -> Vec<String> {
        (0..k).map(|i| format!("c{i}")).collect()
    }

    fn separable() -> Dataset {
        let rows: Vec<Vec<f64>> = (0..20).map(|i| vec![i as f64]).collect();
        let labels = (0..20).map(|i| usize::from(i >= 10)).collect();
        Dataset::from_rows(&rows, labels, 2).unwrap()
    }

    #[test]
    fn stumps_separate_threshold_data() {
        let data = separable();
        let mask = FeatureMask::full(1);
        let m = train_tier(
            Tier::Light,
            &data,
            &mask,
            0,
            &names(2),
            &TierConfig::for_tier(Tier::Light, 1),
        )
        .unwrap();
        assert_eq!(m.kind, ModelKind::BoostedStumps);
        assert_eq!(m.digest.train_accuracy, 1.0);
        assert_eq!(m.tree_count(), 30);
        assert!(m.predict(&[3.0]).unwrap().predicted_class == 0);
        assert!(m.predict(&[15.0]).unwrap().is_malicious);
    }

    #[test]
    fn training_is_deterministic() {
        let data = separable();
        let mask = FeatureMask::full(1);
        let cfg = TierConfig::for_tier(Tier::Medium, 9);
        let a = train_tier(Tier::Medium, &data, &mask, 0, &names(2), &cfg).unwrap();
        let b = train_tier(Tier::Medium, &data, &mask, 0, &names(2), &cfg).unwrap();
        assert_eq!(serde_json::to_vec(&a).unwrap(), serde_json::to_vec(&b).unwrap());
    }

    #[test]
    fn rejects_single_class_and_nan() {
        let rows = vec![vec![1.0], vec![2.0]];
        let data = Dataset::from_rows(&rows, vec![1, 1], 2).unwrap();
        let mask = FeatureMask::full(1);
        let cfg = TierConfig::for_tier(Tier::Light, 0);
        assert_eq!(
            train_tier(Tier::Light, &data, &mask, 0, &names(2), &cfg),
            Err(ClassifyError::SingleClassInput)
        );
        let data = Dataset::from_rows(&[vec![1.0], vec![f64::NAN]], vec![0, 1], 2).unwrap();
        assert!(matches!(
            train_tier(Tier::Light, &data, &mask, 0, &names(2), &cfg),
            Err(ClassifyError::NonFiniteFeature { row: 1, col: 0 })
        ));
    }

    #[test]
    fn predict_checks_dimension() {
        let data = separable();
        let mask = FeatureMask::full(1);
        let m = train_tier(
            Tier::Light,
            &data,
            &mask,
            0,
            &names(2),
            &TierConfig::for_tier(Tier::Light, 1),
        )
        .unwrap();
        assert_eq!(
            m.predict(&[1.0, 2.0]),
            Err(ClassifyError::DimensionMismatch { expected: 1, actual: 2 })
        );
        assert!(matches!(
            m.predict(&[f64::INFINITY]),
            Err(ClassifyError::NonFiniteFeature { .. })
        ));
    }

    #[test]
    fn tier_policy_table() {
        let p = TierPolicy::default();
        let s = |b, c| ResourceStatus::new(b, c, 1.0).unwrap();
        assert_eq!(p.choose(&s(0.9, 0.1)), Tier::Heavy);
        assert_eq!(p.choose(&s(0.15, 0.3)), Tier::Light);
        assert_eq!(p.choose(&s(0.4, 0.6)), Tier::Medium);
        assert_eq!(p.choose(&s(0.9, 0.9)), Tier::Light);
        assert_eq!(p.choose(&s(0.5, 0.5)), Tier::Heavy);
    }

    #[test]
    fn incomplete_pool() {
        let data = separable();
        let mask = FeatureMask::full(1);
        let m = train_tier(
            Tier::Light,
            &data,
            &mask,
            0,
            &names(2),
            &TierConfig::for_tier(Tier::Light, 1),
        )
        .unwrap();
        let pool = ModelPool { models: vec![m] };
        assert_eq!(
            select_tier(&pool, &ResourceStatus::full(), &TierPolicy::default()),
            Err(ClassifyError::IncompletePool(Tier::Medium))
        );
    }

    #[test]
    fn forest_learns_and_normalizes() {
        let rows: Vec<Vec<f64>> = (0..60).map(|i| vec![(i % 3) as f64, (i * 7 % 11) as f64]).collect();
        let labels = (0..60).map(|i| i % 3).collect();
        let data = Dataset::from_rows(&rows, labels, 3).unwrap();
        let mask = FeatureMask::full(2);
        let mut cfg = TierConfig::forest(3);
        cfg.rounds = 20;
        let m = train_tier(Tier::Heavy, &data, &mask, 0, &names(3), &cfg).unwrap();
        assert_eq!(m.kind, ModelKind::Forest);
        assert!(m.digest.train_accuracy > 0.95);
        let v = m.predict(&[2.0, 5.0]).unwrap();
        assert!((v.scores.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        assert_eq!(v.predicted_class, 2);
    }

    #[test]
    fn bundle_roundtrip() {
        let data = separable();
        let mask = FeatureMask::full(1);
        let pool = ModelPool::train(&data, &mask, 0, &names(2), 4, false).unwrap();
        let bundle = ModelBundle {
            schema_name: "toy".into(),
            schema_digest: "d".into(),
            class_names: names(2),
            input: ClassifierInput::TabularOnly,
            scaler: None,
            memory_digest: "m".into(),
            pools: vec![pool],
        };
        let back = ModelBundle::from_bytes(&bundle.to_bytes()).unwrap();
        assert_eq!(back, bundle);
        assert!(back.pool_for(&mask).is_some());
        assert!(ModelBundle::from_bytes(b"LAEBxxxx").is_err());
    }
}
