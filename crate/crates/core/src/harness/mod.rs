//! Metrics, experiment drivers and the staged offline/online pipeline.

mod curve;
mod metrics;
mod pipeline;

use thiserror::Error;

pub use curve::{
    curve_csv, label_efficiency_curve, stratified_sample, stratified_split, CurveConfig, CurvePipeline, CurvePoint,
    PreparedSplit,
};
pub use metrics::{
    confusion, detection_latency, evaluate, metrics, ClassMetrics, ConfusionMatrix, LatencyModel, MetricsError,
    MetricsReport,
};
pub use pipeline::*;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("stage {stage} failed: {message}")]
    Stage { stage: String, message: String },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("missing artifact: {0}")]
    Missing(String),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

impl HarnessError {
    pub fn stage(stage: &str, err: impl std::fmt::Display) -> Self {
        HarnessError::Stage {
            stage: stage.to_string(),
            message: err.to_string(),
        }
    }

    /// Tags an error with the stage it came from, keeping an existing tag.
    pub fn in_stage(self, stage: &str) -> Self {
        match self {
            HarnessError::Stage { .. } => self,
            other => HarnessError::stage(stage, other),
        }
    }
}

macro_rules! stage_from {
    ($($t:ty => $name:literal),* $(,)?) => {
        $(impl From<$t> for HarnessError {
            fn from(e: $t) -> Self {
                HarnessError::stage($name, e)
            }
        })*
    };
}

stage_from!(
    crate::ingest::IngestError => "data",
    crate::imaging::ImagingError => "imaging",
    crate::diffusion::DiffusionError => "pretrain",
    crate::pso_select::PsoError => "select",
    crate::classify::ClassifyError => "train",
    crate::orchestrator::OrchestratorError => "simulate",
    crate::swarm_env::SimError => "simulate",
);
