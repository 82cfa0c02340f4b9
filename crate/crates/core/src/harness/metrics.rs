use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricsError {
    #[error("{predictions} predictions but {labels} labels")]
    LengthMismatch { predictions: usize, labels: usize },
    #[error("entry {index} has class {value}, outside 0..{classes}")]
    ClassOutOfRange { index: usize, value: usize, classes: usize },
    #[error("no samples to evaluate")]
    EmptyInput,
    #[error("confusion matrix is empty")]
    EmptyMatrix,
    #[error("labeling rate must be positive")]
    ZeroRate,
    #[error("latency inputs must be finite and nonnegative")]
    InvalidLatency,
    #[error("fraction {fraction} leaves class {class} without samples")]
    InfeasibleFraction { fraction: f64, class: usize },
}

/// `counts[i][j]` = samples of true class `i` predicted as `j`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub class_names: Vec<String>,
    pub counts: Vec<Vec<u64>>,
}

impl ConfusionMatrix {
    pub fn classes(&self) -> usize {
        self.counts.len()
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.classes()).map(|i| self.counts[i][i]).sum()
    }

    pub fn with_names(mut self, names: &[String]) -> Self {
        if names.len() == self.classes() {
            self.class_names = names.to_vec();
        }
        self
    }
}

pub fn confusion(predictions: &[usize], labels: &[usize], classes: usize) -> Result<ConfusionMatrix, MetricsError> {
    if predictions.len() != labels.len() {
        return Err(MetricsError::LengthMismatch {
            predictions: predictions.len(),
            labels: labels.len(),
        });
    }
    if predictions.is_empty() {
        return Err(MetricsError::EmptyInput);
    }
    let mut counts = vec![vec![0u64; classes]; classes];
    for (index, (&p, &t)) in predictions.iter().zip(labels).enumerate() {
        for value in [p, t] {
            if value >= classes {
                return Err(MetricsError::ClassOutOfRange { index, value, classes });
            }
        }
        counts[t][p] += 1;
    }
    Ok(ConfusionMatrix {
        class_names: (0..classes).map(|c| c.to_string()).collect(),
        counts,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub name: String,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// True samples of this class.
    pub support: u64,
    pub predicted: u64,
}

/// Macro averages skip classes that occur neither in the truth nor in the
/// predictions. Every 0/0 ratio is defined as 0.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub accuracy: f64,
    pub macro_precision: f64,
    pub macro_recall: f64,
    pub macro_f1: f64,
    pub per_class: Vec<ClassMetrics>,
    pub confusion: ConfusionMatrix,
    pub manifest_digest: Option<String>,
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

pub fn metrics(cm: &ConfusionMatrix) -> Result<MetricsReport, MetricsError> {
    let total = cm.total();
    if total == 0 {
        return Err(MetricsError::EmptyMatrix);
    }
    let c = cm.classes();
    let per_class: Vec<ClassMetrics> = (0..c)
        .map(|k| {
            let tp = cm.counts[k][k];
            let support: u64 = cm.counts[k].iter().sum();
            let predicted: u64 = (0..c).map(|i| cm.counts[i][k]).sum();
            let precision = ratio(tp, predicted);
            let recall = ratio(tp, support);
            let f1 = if precision + recall == 0.0 {
                0.0
            } else {
                2.0 * precision * recall / (precision + recall)
            };
            ClassMetrics {
                name: cm.class_names.get(k).cloned().unwrap_or_else(|| k.to_string()),
                precision,
                recall,
                f1,
                support,
                predicted,
            }
        })
        .collect();
    let present: Vec<&ClassMetrics> = per_class.iter().filter(|m| m.support + m.predicted > 0).collect();
    let mean = |f: fn(&ClassMetrics) -> f64| present.iter().map(|m| f(m)).sum::<f64>() / present.len() as f64;
    Ok(MetricsReport {
        accuracy: cm.trace() as f64 / total as f64,
        macro_precision: mean(|m| m.precision),
        macro_recall: mean(|m| m.recall),
        macro_f1: mean(|m| m.f1),
        per_class,
        confusion: cm.clone(),
        manifest_digest: None,
    })
}

/// Shorthand for `metrics(confusion(..))` with named classes.
pub fn evaluate(
    predictions: &[usize],
    labels: &[usize],
    class_names: &[String],
) -> Result<MetricsReport, MetricsError> {
    metrics(&confusion(predictions, labels, class_names.len())?.with_names(class_names))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LatencyModel {
    pub labeling_rate_per_hour: f64,
    pub n_labels: u64,
    pub t_training_hours: f64,
}

impl LatencyModel {
    pub fn t_labeling_hours(&self) -> f64 {
        self.n_labels as f64 / self.labeling_rate_per_hour
    }
}

/// Hours from meeting a new threat to detecting it: labeling plus training.
pub fn detection_latency(m: &LatencyModel) -> Result<f64, MetricsError> {
    if m.labeling_rate_per_hour.is_nan() || m.labeling_rate_per_hour <= 0.0 {
        return Err(MetricsError::ZeroRate);
    }
    if !(m.t_training_hours >= 0.0 && m.t_training_hours.is_finite() && m.labeling_rate_per_hour.is_finite()) {
        return Err(MetricsError::InvalidLatency);
    }
    Ok(m.t_labeling_hours() + m.t_training_hours)
}
