use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::metrics::{evaluate, MetricsError, MetricsReport};
use super::HarnessError;
use crate::advisor::RuleAdvisor;
use crate::classify::{train_tier, ClassifierInput, Dataset, Tier, TierConfig};
use crate::pso_select::{select_features, FeatureMask, SelectionConfig};
use crate::util::seeded_rng;

/// Indices of a class-stratified subsample holding `round(fraction * n_c)`
/// rows of every class `c` that occurs in `labels`, in ascending order.
pub fn stratified_sample(
    labels: &[usize],
    n_classes: usize,
    fraction: f64,
    seed: u64,
) -> Result<Vec<usize>, MetricsError> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(MetricsError::InfeasibleFraction { fraction, class: 0 });
    }
    let mut rng = seeded_rng(seed, 0x57A7);
    let mut chosen = Vec::new();
    for class in 0..n_classes {
        let mut members: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == class).collect();
        if members.is_empty() {
            continue;
        }
        let take = (fraction * members.len() as f64).round() as usize;
        if take == 0 {
            return Err(MetricsError::InfeasibleFraction { fraction, class });
        }
        members.shuffle(&mut rng);
        chosen.extend_from_slice(&members[..take]);
    }
    chosen.sort_unstable();
    Ok(chosen)
}

/// Splits row indices into (kept, held out). Each class with at least two
/// rows contributes `round(fraction * n_c)` held-out rows, clamped so both
/// sides keep at least one.
pub fn stratified_split(labels: &[usize], n_classes: usize, fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut rng = seeded_rng(seed, 0x5B17);
    let mut keep = Vec::new();
    let mut hold = Vec::new();
    for class in 0..n_classes {
        let mut members: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == class).collect();
        members.shuffle(&mut rng);
        let n = members.len();
        let k = if n < 2 {
            0
        } else {
            ((fraction * n as f64).round() as usize).clamp(1, n - 1)
        };
        hold.extend_from_slice(&members[..k]);
        keep.extend_from_slice(&members[k..]);
    }
    keep.sort_unstable();
    hold.sort_unstable();
    (keep, hold)
}

/// Tabular features and diffusion representations of one split, row-aligned.
#[derive(Debug, Clone)]
pub struct PreparedSplit {
    pub tabular: Dataset,
    pub representation: Vec<Vec<f64>>,
}

impl PreparedSplit {
    pub fn rows(&self) -> usize {
        self.tabular.rows
    }

    /// Classifier inputs for `rows` (all rows when `None`).
    pub fn inputs(&self, rows: Option<&[usize]>, mask: &FeatureMask, input: ClassifierInput) -> Dataset {
        let all: Vec<usize>;
        let rows = match rows {
            Some(r) => r,
            None => {
                all = (0..self.rows()).collect();
                &all
            }
        };
        let values: Vec<Vec<f64>> = rows
            .iter()
            .map(|&r| input.assemble(self.tabular.row(r), mask, &self.representation[r]))
            .collect();
        let labels = rows.iter().map(|&r| self.tabular.labels[r]).collect();
        Dataset::from_rows(&values, labels, self.tabular.n_classes).expect("aligned rows")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CurvePipeline {
    /// Swarm-selected tabular features plus the diffusion representation.
    Pretrained,
    /// Comparator: the same tier on all tabular features, no pretraining.
    RawSupervised,
}

impl CurvePipeline {
    pub fn name(self) -> &'static str {
        match self {
            CurvePipeline::Pretrained => "pretrained",
            CurvePipeline::RawSupervised => "raw_supervised",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurveConfig {
    pub fractions: Vec<f64>,
    pub seed: u64,
    pub selection: SelectionConfig,
    pub validation_fraction: f64,
    pub input: ClassifierInput,
    pub heavy_forest: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub fraction: f64,
    pub pipeline: CurvePipeline,
    pub seed: u64,
    pub labeled_rows: usize,
    pub mask: FeatureMask,
    pub report: MetricsReport,
}

fn heavy_config(seed: u64, forest: bool) -> TierConfig {
    if forest {
        TierConfig::forest(seed)
    } else {
        TierConfig::for_tier(Tier::Heavy, seed)
    }
}

/// Trains and scores both pipelines at each label fraction; the test split
/// is fixed across fractions.
pub fn label_efficiency_curve(
    train: &PreparedSplit,
    test: &PreparedSplit,
    class_names: &[String],
    cfg: &CurveConfig,
) -> Result<Vec<CurvePoint>, HarnessError> {
    let n_classes = class_names.len();
    let full = FeatureMask::full(train.tabular.cols);
    let mut points = Vec::new();
    for &fraction in &cfg.fractions {
        let rows = stratified_sample(&train.tabular.labels, n_classes, fraction, cfg.seed)?;
        let labels: Vec<usize> = rows.iter().map(|&r| train.tabular.labels[r]).collect();
        let (fit, val) = stratified_split(&labels, n_classes, cfg.validation_fraction, cfg.seed);
        let fit_rows: Vec<usize> = fit.iter().map(|&i| rows[i]).collect();
        let val_rows: Vec<usize> = val.iter().map(|&i| rows[i]).collect();
        let selection = SelectionConfig {
            seed: cfg.seed,
            ..cfg.selection.clone()
        };
        let chosen = select_features(
            &train.tabular.subset(&fit_rows),
            &train.tabular.subset(&val_rows),
            &selection,
            &mut RuleAdvisor::default(),
        )
        .map_err(|e| HarnessError::stage("curve", e))?;

        for (pipeline, mask, input) in [
            (CurvePipeline::Pretrained, chosen.mask.clone(), cfg.input),
            (CurvePipeline::RawSupervised, full.clone(), ClassifierInput::TabularOnly),
        ] {
            let data = train.inputs(Some(&rows), &mask, input);
            let extra = data.cols - if input.uses_tabular() { mask.count() } else { 0 };
            let model_mask = if input.uses_tabular() {
                mask.clone()
            } else {
                FeatureMask::full(0)
            };
            let model = train_tier(
                Tier::Heavy,
                &data,
                &model_mask,
                extra,
                class_names,
                &heavy_config(cfg.seed, cfg.heavy_forest),
            )
            .map_err(|e| HarnessError::stage("curve", e))?;
            let test_data = test.inputs(None, &mask, input);
            let predictions = (0..test_data.rows)
                .map(|r| model.predict(test_data.row(r)).map(|v| v.predicted_class))
                .collect::<Result<Vec<_>, _>>()
                .map_err(|e| HarnessError::stage("curve", e))?;
            points.push(CurvePoint {
                fraction,
                pipeline,
                seed: cfg.seed,
                labeled_rows: rows.len(),
                mask,
                report: evaluate(&predictions, &test_data.labels, class_names)?,
            });
        }
    }
    Ok(points)
}

/// `fraction,pipeline,accuracy,macro_f1` rows.
pub fn curve_csv(points: &[CurvePoint]) -> String {
    let mut s = String::from("fraction,pipeline,accuracy,macro_f1\n");
    for p in points {
        s.push_str(&format!(
            "{},{},{},{}\n",
            p.fraction,
            p.pipeline.name(),
            p.report.accuracy,
            p.report.macro_f1
        ));
    }
    s
}
