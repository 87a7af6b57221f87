//! Cross-validated training of the two-level model: subsample graphs are
//! classified by a first network whose embeddings become the node features
//! of per-core graphs classified by a second one.

mod artifacts;
mod config;
mod cv;
mod folds;
mod hier;
mod normalize;
mod train;

use thiserror::Error;

pub use artifacts::{
    load_fold, metrics_document, parse_fold_manifest, parse_predictions, read_predictions, write_cv_artifacts, write_predictions, FoldManifest, LoadedFold, PredictionRow, FOLD_MANIFEST_FILE, METRICS_FILE,
    PREDICTIONS_FILE, RUN_MANIFEST_FILE,
};
pub use config::{derive_seed, hex, BaselineConfig, ClassWeighting, FlatGinConfig, LevelConfig, Normalization, RunConfig, TrainConfig};
pub use cv::{
    cross_validate, fold_metrics, labeled_keys, make_folds, run_cv, run_single_fold, summarize, Arm, ArmFold, ArmResult, CvOptions, CvResult, FoldMetrics, FoldSplit, MetricSummary,
};
pub use folds::{stratified_kfold, validation_split, StratumKey};
pub use hier::{aggregate_patient_score, assemble_core_graphs, build_cohort_graphs, score_patients, AssembledCore, CoreGraphs, CoreProbs, OverlapGraphs, PatientPrediction};
pub use normalize::NormStats;
pub use train::{class_weights, evaluate_loss, extract_embeddings, predict_positive, train_model, EpochLog, Example, TrainOptions, TrainedModel, TrainingLog};

use crate::cell_table::TableError;
use crate::gnn::{CheckpointError, GnnError};
use crate::graph_builder::GraphError;
use crate::survival_metrics::MetricsError;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("{patients} labeled patients cannot fill {k} folds")]
    TooFewPatients { patients: usize, k: usize },
    #[error("no training examples")]
    NoTrainingData,
    #[error("patient `{0}` has no predictions")]
    NoPredictions(String),
    #[error("patient `{0}` has no clinical record")]
    MissingClinical(String),
    #[error(transparent)]
    Model(#[from] GnnError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Table(#[from] TableError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("numeric failure: {0}")]
    Numeric(String),
    #[error("io: {0}")]
    Io(String),
    #[error("malformed predictions file: {0}")]
    Predictions(String),
    #[error("malformed fold manifest: {0}")]
    Manifest(String),
}

impl From<crate::autodiff::AutodiffError> for PipelineError {
    fn from(e: crate::autodiff::AutodiffError) -> Self {
        PipelineError::Model(GnnError::from(e))
    }
}
