//! Comparison methods scored on exactly the folds the hierarchical model
//! uses.

mod flat_gin;
mod linear;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use serde_json::json;
use thiserror::Error;

pub use flat_gin::{core_knn_graph, fit_flat_gin, flat_gin_config, patient_graphs, predict_flat_gin, FlatGinTraining, PatientGraphs};
pub use linear::{fit_linear_svc, fit_logistic, LinearModel};

use crate::cell_table::{Cohort, Core, TissueCategory};
use crate::pipeline::{
    cross_validate, derive_seed, fold_metrics, hex, labeled_keys, make_folds, summarize, write_predictions, FoldMetrics, FoldSplit, MetricSummary, NormStats,
    PatientPrediction, PipelineError, PredictionRow, RunConfig, METRICS_FILE, PREDICTIONS_FILE, RUN_MANIFEST_FILE,
};

#[derive(Debug, Error)]
pub enum BaselineError {
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("numeric failure: {0}")]
    Numeric(String),
    #[error("unknown baseline `{0}`")]
    UnknownMethod(String),
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaselineMethod {
    /// Scores each patient with its own true label.
    LabelUpperBound,
    /// Short rate among training patients of the same stage.
    StageOnly,
    LogReg,
    Svc,
    FlatGin,
}

impl BaselineMethod {
    pub const ALL: [BaselineMethod; 5] = [Self::LabelUpperBound, Self::StageOnly, Self::LogReg, Self::Svc, Self::FlatGin];

    pub fn name(self) -> &'static str {
        match self {
            Self::LabelUpperBound => "label",
            Self::StageOnly => "stage",
            Self::LogReg => "logreg",
            Self::Svc => "svc",
            Self::FlatGin => "flatgin",
        }
    }
}

impl FromStr for BaselineMethod {
    type Err = BaselineError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| BaselineError::UnknownMethod(s.to_string()))
    }
}

fn mean_std(rows: &[&[f64]], dim: usize) -> (Vec<f64>, Vec<f64>) {
    let stats = NormStats::fit(rows.iter().copied(), dim);
    // `fit` maps constant columns to unit scale; the summary wants 0 there.
    let std = stats
        .std
        .iter()
        .enumerate()
        .map(|(j, &s)| {
            let n = rows.len() as f64;
            let var = rows.iter().map(|r| (r[j] - stats.mean[j]).powi(2)).sum::<f64>() / n.max(1.0);
            if var.sqrt() > 1e-12 {
                s
            } else {
                0.0
            }
        })
        .collect();
    (stats.mean, std)
}

/// Per-patient summary over all cells of its cores: feature means and
/// population standard deviations. With `split_by_tissue` the block is
/// computed separately for tumor and stroma cells, each followed by a
/// presence flag (an absent compartment contributes zeros).
pub fn summary_features(cores: &[&Core], split_by_tissue: bool) -> Vec<f64> {
    let dim = cores.first().map_or(0, |c| c.feature_dim());
    let cells = || cores.iter().flat_map(|c| c.cells.iter());
    let block = |rows: Vec<&[f64]>, out: &mut Vec<f64>, flag: bool| {
        if rows.is_empty() {
            out.extend(std::iter::repeat_n(0.0, 2 * dim));
        } else {
            let (m, s) = mean_std(&rows, dim);
            out.extend(m);
            out.extend(s);
        }
        if flag {
            out.push(if rows.is_empty() { 0.0 } else { 1.0 });
        }
    };
    let mut out = Vec::new();
    if split_by_tissue {
        for cat in [TissueCategory::Tumor, TissueCategory::Stroma] {
            let rows: Vec<&[f64]> = cells().filter(|c| c.tissue_category == Some(cat)).map(|c| c.features.as_slice()).collect();
            block(rows, &mut out, true);
        }
    } else {
        block(cells().map(|c| c.features.as_slice()).collect(), &mut out, false);
    }
    out
}

fn cores_of<'a>(cohort: &'a Cohort, id: &str) -> Vec<&'a Core> {
    cohort.cores.iter().filter(|c| c.patient_id == id).collect()
}

fn record<'a>(cohort: &'a Cohort, id: &str) -> Result<&'a crate::cell_table::ClinicalRecord, BaselineError> {
    cohort.record(id).ok_or_else(|| PipelineError::MissingClinical(id.to_string()).into())
}

fn patient_only(id: &str, p: f64) -> PatientPrediction {
    PatientPrediction {
        patient_id: id.to_string(),
        prob_short: p,
        risk_score: p,
        per_core_probs: Vec::new(),
    }
}

/// Summary vector plus the binary stage, for every listed patient.
fn design(cohort: &Cohort, ids: &[String], split_by_tissue: bool) -> Result<Vec<Vec<f64>>, BaselineError> {
    ids.iter()
        .map(|id| {
            let mut v = summary_features(&cores_of(cohort, id), split_by_tissue);
            v.push(record(cohort, id)?.stage_binary as u8 as f64);
            Ok(v)
        })
        .collect()
}

/// Test-patient predictions of `method` trained on the fold's training and
/// validation patients.
pub fn predict_fold(cohort: &Cohort, run: &RunConfig, method: BaselineMethod, split: &FoldSplit, with_tissue: bool) -> Result<Vec<PatientPrediction>, BaselineError> {
    let fit_ids = split.fit_ids();
    let is_short = |id: &str| -> Result<bool, BaselineError> { Ok(record(cohort, id)?.label.is_some_and(|l| l.is_short())) };
    match method {
        BaselineMethod::LabelUpperBound => split.test_ids.iter().map(|id| Ok(patient_only(id, if is_short(id)? { 1.0 } else { 0.0 }))).collect(),
        BaselineMethod::StageOnly => {
            let mut counts = [[0usize; 2]; 2];
            for id in &fit_ids {
                let s = record(cohort, id)?.stage_binary as usize;
                counts[s][0] += 1;
                counts[s][1] += is_short(id)? as usize;
            }
            split
                .test_ids
                .iter()
                .map(|id| {
                    let [n, short] = counts[record(cohort, id)?.stage_binary as usize];
                    Ok(patient_only(id, (short as f64 + 1.0) / (n as f64 + 2.0)))
                })
                .collect()
        }
        BaselineMethod::LogReg | BaselineMethod::Svc => {
            let split_tissue = run.baselines.split_by_tissue && cohort.has_tissue_categories();
            let x_fit = design(cohort, &fit_ids, split_tissue)?;
            let y_fit: Vec<bool> = fit_ids.iter().map(|id| is_short(id)).collect::<Result<_, _>>()?;
            let dim = x_fit.first().map_or(0, Vec::len);
            let norm = NormStats::fit(x_fit.iter().map(Vec::as_slice), dim);
            let x_fit: Vec<Vec<f64>> = x_fit.iter().map(|r| norm.apply_row(r)).collect();
            let model = if method == BaselineMethod::LogReg {
                fit_logistic(&x_fit, &y_fit, run.baselines.logreg_l2)?
            } else {
                fit_linear_svc(&x_fit, &y_fit, run.baselines.svc_c, run.baselines.svc_iterations)?
            };
            let x_test = design(cohort, &split.test_ids, split_tissue)?;
            Ok(split.test_ids.iter().zip(&x_test).map(|(id, row)| patient_only(id, model.probability(&norm.apply_row(row)))).collect())
        }
        BaselineMethod::FlatGin => {
            let cfg = &run.baselines.flat_gin;
            let fit_rows: Vec<Vec<f64>> = fit_ids.iter().flat_map(|id| cores_of(cohort, id)).flat_map(|c| c.node_feature_rows(with_tissue)).collect();
            let dim = fit_rows.first().map_or(0, Vec::len);
            let norm = NormStats::fit(fit_rows.iter().map(Vec::as_slice), dim);
            drop(fit_rows);
            let mut patients = BTreeMap::new();
            for id in fit_ids.iter().chain(&split.test_ids) {
                let rec = record(cohort, id)?;
                patients.insert(
                    id.clone(),
                    PatientGraphs {
                        graphs: patient_graphs(&cores_of(cohort, id), &norm, with_tissue, cfg.k_neighbors),
                        label: rec.label.map_or(0, |l| l.class_index()),
                        stage: rec.stage_binary,
                    },
                );
            }
            let keys: Vec<_> = labeled_keys(cohort).into_iter().filter(|k| fit_ids.contains(&k.patient_id)).collect();
            let training = FlatGinTraining {
                weight_decay: run.train.weight_decay,
                class_weighting: run.train.class_weighting,
                seed: derive_seed(run.train.seed, &[split.fold as u64, 3]),
            };
            let model = fit_flat_gin(&patients, &keys, &split.train_ids, &split.val_ids, cfg, &training)?;
            split.test_ids.iter().map(|id| Ok(patient_only(id, predict_flat_gin(&model, &patients[id])?))).collect()
        }
    }
}

#[derive(Debug, Clone)]
pub struct BaselineFold {
    pub split: FoldSplit,
    pub predictions: Vec<PatientPrediction>,
    pub metrics: FoldMetrics,
}

#[derive(Debug, Clone)]
pub struct BaselineResult {
    pub method: BaselineMethod,
    pub config: RunConfig,
    pub folds: Vec<BaselineFold>,
    pub auroc: MetricSummary,
    pub c_index: MetricSummary,
}

/// Cross-validates `method` on the folds `run` defines for this cohort.
pub fn run_baseline_cv(cohort: &Cohort, run: &RunConfig, method: BaselineMethod, jobs: usize, with_tissue: bool) -> Result<BaselineResult, BaselineError> {
    run.validate()?;
    let folds = make_folds(cohort, run.folds, run.train.seed, run.train.val_fraction)?;
    let results = cross_validate(&folds, jobs, |split| {
        let predictions = predict_fold(cohort, run, method, split, with_tissue).map_err(|e| match e {
            BaselineError::Pipeline(p) => p,
            other => PipelineError::Numeric(other.to_string()),
        })?;
        let metrics = fold_metrics(&predictions, cohort)?;
        Ok(BaselineFold {
            split: split.clone(),
            predictions,
            metrics,
        })
    })?;
    let auc: Vec<Option<f64>> = results.iter().map(|f| f.metrics.auroc).collect();
    let ci: Vec<Option<f64>> = results.iter().map(|f| f.metrics.c_index).collect();
    Ok(BaselineResult {
        method,
        config: run.clone(),
        auroc: summarize(&auc),
        c_index: summarize(&ci),
        folds: results,
    })
}

fn fmt_cell(s: &MetricSummary) -> String {
    match (s.mean, s.std) {
        (Some(m), Some(d)) => format!("{m:.3} ± {d:.3}"),
        _ => "n/a".into(),
    }
}

/// Writes `predictions.csv` and `metrics.json` for a baseline run.
pub fn write_baseline_artifacts(result: &BaselineResult, cohort: &Cohort, out: &Path) -> Result<PathBuf, BaselineError> {
    std::fs::create_dir_all(out).map_err(|e| PipelineError::Io(format!("{}: {e}", out.display())))?;
    let mut rows = Vec::new();
    for f in &result.folds {
        for p in &f.predictions {
            let rec = record(cohort, &p.patient_id)?;
            rows.push(PredictionRow {
                patient_id: p.patient_id.clone(),
                fold: Some(f.split.fold),
                prob_short: p.prob_short,
                label: rec.label,
                follow_up_days: rec.follow_up,
                event: rec.event,
            });
        }
    }
    rows.sort_by(|a, b| a.patient_id.cmp(&b.patient_id));
    write_predictions(&out.join(PREDICTIONS_FILE), &rows)?;
    let name = result.method.name();
    let doc = json!({
        "run_manifest": RUN_MANIFEST_FILE,
        "config_hash": result.config.hash(),
        "folds": result.config.folds,
        "seed": result.config.train.seed,
        "arms": [{
            "arm": name,
            "config_hash": hex(&result.config.hash_bytes()),
            "n_patients": rows.len(),
            "auroc": result.auroc,
            "c_index": result.c_index,
            "table_row": {"method": name, "auroc": fmt_cell(&result.auroc), "c_index": fmt_cell(&result.c_index)},
        }],
    });
    let path = out.join(METRICS_FILE);
    let mut text = serde_json::to_string_pretty(&doc).expect("json value serializes");
    text.push('\n');
    std::fs::write(&path, text).map_err(|e| PipelineError::Io(format!("{}: {e}", path.display())))?;
    Ok(path)
}
