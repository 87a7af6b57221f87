use std::collections::BTreeMap;

use ndarray::Array2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{extract_embeddings, predict_positive, Example, NormStats, PipelineError, TrainedModel};
use crate::cell_table::{attach_stage_feature, Cohort};
use crate::graph_builder::{build_core_graph, make_subsamples_with_features, Graph, GraphBuildConfig};

/// Subsample graphs of one core at one overlap plus the core-level graph
/// over their centroids (node features filled in per fold).
#[derive(Debug, Clone, PartialEq)]
pub struct OverlapGraphs {
    pub overlap: f64,
    pub subsamples: Vec<Graph>,
    pub core_graph: Graph,
}

/// Fold-independent graph structure of one core.
#[derive(Debug, Clone, PartialEq)]
pub struct CoreGraphs {
    /// Position of the core in `Cohort::cores`.
    pub core_index: usize,
    pub core_id: String,
    pub patient_id: String,
    pub overlaps: Vec<OverlapGraphs>,
}

impl CoreGraphs {
    /// Copy with every subsample node feature row mapped through `stats`.
    pub fn normalized(&self, stats: &NormStats) -> Self {
        let mut out = self.clone();
        for ov in &mut out.overlaps {
            for g in &mut ov.subsamples {
                g.node_features = stats.apply(&g.node_features);
            }
        }
        out
    }

    pub fn subsample_graphs(&self) -> impl Iterator<Item = &Graph> {
        self.overlaps.iter().flat_map(|o| o.subsamples.iter())
    }
}

/// Builds subsample and core-level graph structure for every core of the
/// cohort using the cores' raw features. Window geometry depends only on
/// each core's own cells.
pub fn build_cohort_graphs(cohort: &Cohort, cfg: &GraphBuildConfig, with_tissue: bool) -> Result<Vec<CoreGraphs>, PipelineError> {
    cfg.validate()?;
    cohort
        .cores
        .par_iter()
        .enumerate()
        .map(|(core_index, core)| {
            let features = core.node_feature_rows(with_tissue);
            let overlaps = cfg
                .overlaps
                .iter()
                .map(|&ov| {
                    let set = make_subsamples_with_features(core, &features, cfg, ov)?;
                    let placeholder = Array2::zeros((set.graphs.len(), 0));
                    let core_graph = build_core_graph(&set.graphs, placeholder, cfg)?;
                    Ok(OverlapGraphs {
                        overlap: ov,
                        subsamples: set.graphs,
                        core_graph,
                    })
                })
                .collect::<Result<Vec<_>, PipelineError>>()?;
            Ok(CoreGraphs {
                core_index,
                core_id: core.core_id.clone(),
                patient_id: core.patient_id.clone(),
                overlaps,
            })
        })
        .collect()
}

/// A core-level graph ready for the second model.
#[derive(Debug, Clone, PartialEq)]
pub struct AssembledCore {
    pub core_index: usize,
    pub patient_id: String,
    pub overlap: f64,
    pub graph: Graph,
}

/// One core graph per core and overlap whose node features are the
/// subsample model's penultimate embeddings. With `stage` given, each
/// patient's binary stage is appended to every node.
pub fn assemble_core_graphs(cores: &[CoreGraphs], model: &TrainedModel, stage: Option<&BTreeMap<String, bool>>) -> Result<Vec<AssembledCore>, PipelineError> {
    let mut out = Vec::new();
    for core in cores {
        for ov in &core.overlaps {
            let refs: Vec<&Graph> = ov.subsamples.iter().collect();
            let emb = extract_embeddings(model, &refs)?;
            let mut graph = ov.core_graph.clone();
            graph.node_features = emb;
            if let Some(stages) = stage {
                let s = *stages
                    .get(&core.patient_id)
                    .ok_or_else(|| PipelineError::MissingClinical(core.patient_id.clone()))?;
                graph = attach_stage_feature(&graph, s)?;
            }
            out.push(AssembledCore {
                core_index: core.core_index,
                patient_id: core.patient_id.clone(),
                overlap: ov.overlap,
                graph,
            });
        }
    }
    Ok(out)
}

/// Predicted scores of one core, one per augmentation (or per subsample
/// graph when the hierarchy is off).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoreProbs {
    pub core_id: String,
    pub probs: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatientPrediction {
    pub patient_id: String,
    /// Probability of the Short class.
    pub prob_short: f64,
    /// Ranking score for the c-index; identical to `prob_short`.
    pub risk_score: f64,
    pub per_core_probs: Vec<CoreProbs>,
}

/// Flat mean over all (core, augmentation) predictions of a patient.
pub fn aggregate_patient_score(patient_id: &str, per_core: Vec<CoreProbs>) -> Result<PatientPrediction, PipelineError> {
    let all: Vec<f64> = per_core.iter().flat_map(|c| c.probs.iter().copied()).collect();
    if all.is_empty() {
        return Err(PipelineError::NoPredictions(patient_id.to_string()));
    }
    if let Some(bad) = all.iter().find(|p| !(0.0..=1.0).contains(*p)) {
        return Err(PipelineError::Numeric(format!("probability {bad} outside [0, 1]")));
    }
    let mean = all.iter().sum::<f64>() / all.len() as f64;
    Ok(PatientPrediction {
        patient_id: patient_id.to_string(),
        prob_short: mean,
        risk_score: mean,
        per_core_probs: per_core,
    })
}

/// Scores each listed patient from its (normalized) cores. With a core
/// model, every core and overlap yields one core-graph prediction; without
/// one, every subsample graph is scored by the subsample model directly.
/// `stages` must be given exactly when the core model expects the fused
/// stage feature.
pub fn score_patients(
    cores: &[CoreGraphs],
    ids: &[String],
    subsample_model: &TrainedModel,
    core_model: Option<&TrainedModel>,
    stages: Option<&BTreeMap<String, bool>>,
) -> Result<Vec<PatientPrediction>, PipelineError> {
    let mut out = Vec::with_capacity(ids.len());
    for id in ids {
        let mut per_core = Vec::new();
        for core in cores.iter().filter(|c| &c.patient_id == id) {
            let probs = match core_model {
                Some(model) => {
                    let assembled = assemble_core_graphs(std::slice::from_ref(core), subsample_model, stages)?;
                    let ex: Vec<Example> = assembled
                        .iter()
                        .map(|ac| Example {
                            graph: &ac.graph,
                            extra: Vec::new(),
                            label: 0,
                        })
                        .collect();
                    predict_positive(&ex, model)?
                }
                None => {
                    let ex: Vec<Example> = core
                        .subsample_graphs()
                        .map(|g| Example {
                            graph: g,
                            extra: Vec::new(),
                            label: 0,
                        })
                        .collect();
                    predict_positive(&ex, subsample_model)?
                }
            };
            per_core.push(CoreProbs {
                core_id: core.core_id.clone(),
                probs,
            });
        }
        out.push(aggregate_patient_score(id, per_core)?);
    }
    Ok(out)
}
