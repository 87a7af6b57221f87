use std::collections::{BTreeMap, BTreeSet};

use rayon::prelude::*;
use serde::Serialize;

use super::{
    assemble_core_graphs, build_cohort_graphs, derive_seed, score_patients, stratified_kfold, train_model, validation_split, AssembledCore,
    CoreGraphs, Example, NormStats, Normalization, PatientPrediction, PipelineError, RunConfig, StratumKey, TrainConfig, TrainOptions, TrainedModel,
};
use crate::cell_table::{attach_stage_feature, Cohort};
use crate::survival_metrics::{auroc, c_index, MetricsError};

/// Which model components are switched on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
pub struct Arm {
    pub edge_weights: bool,
    pub hierarchy: bool,
    pub stage_fusion: bool,
}

impl Arm {
    pub fn from_config(cfg: &TrainConfig) -> Self {
        Self {
            edge_weights: cfg.use_edge_weights,
            hierarchy: cfg.use_hierarchy,
            stage_fusion: cfg.use_stage_fusion,
        }
    }

    /// Short label such as `E+Hi+CS`; `GIN` when everything is off.
    pub fn name(&self) -> String {
        let mut parts = Vec::new();
        if self.edge_weights {
            parts.push("E");
        }
        if self.hierarchy {
            parts.push("Hi");
        }
        if self.stage_fusion {
            parts.push("CS");
        }
        if parts.is_empty() {
            "GIN".into()
        } else {
            parts.join("+")
        }
    }

    pub fn apply(&self, cfg: &TrainConfig) -> TrainConfig {
        let mut out = cfg.clone();
        out.use_edge_weights = self.edge_weights;
        out.use_hierarchy = self.hierarchy;
        out.use_stage_fusion = self.stage_fusion;
        out
    }
}

/// Patient ids of one outer fold.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FoldSplit {
    pub fold: usize,
    pub train_ids: Vec<String>,
    /// Early-stopping patients, disjoint from `train_ids`.
    pub val_ids: Vec<String>,
    pub test_ids: Vec<String>,
}

impl FoldSplit {
    /// Training plus validation patients.
    pub fn fit_ids(&self) -> Vec<String> {
        let mut ids: Vec<String> = self.train_ids.iter().chain(&self.val_ids).cloned().collect();
        ids.sort();
        ids
    }
}

/// Labeled patients with at least one core, as fold-splitter keys.
pub fn labeled_keys(cohort: &Cohort) -> Vec<StratumKey> {
    cohort
        .labeled_patients()
        .into_iter()
        .map(|r| StratumKey {
            patient_id: r.patient_id.clone(),
            label: r.label.expect("labeled_patients only returns labeled records"),
            stage_binary: r.stage_binary,
        })
        .collect()
}

/// Outer folds with each training part split again for early stopping.
pub fn make_folds(cohort: &Cohort, k: usize, seed: u64, val_fraction: f64) -> Result<Vec<FoldSplit>, PipelineError> {
    let keys = labeled_keys(cohort);
    let tests = stratified_kfold(&keys, k, seed)?;
    Ok(tests
        .into_iter()
        .enumerate()
        .map(|(fold, test_ids)| {
            let test: BTreeSet<&str> = test_ids.iter().map(String::as_str).collect();
            let rest: Vec<StratumKey> = keys.iter().filter(|p| !test.contains(p.patient_id.as_str())).cloned().collect();
            let (train_ids, val_ids) = validation_split(&rest, val_fraction, derive_seed(seed, &[fold as u64, 0x7661]));
            FoldSplit {
                fold,
                train_ids,
                val_ids,
                test_ids,
            }
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct FoldMetrics {
    /// `None` when the test fold holds a single class.
    pub auroc: Option<f64>,
    /// `None` when no pair is comparable.
    pub c_index: Option<f64>,
}

/// AUROC against the binary label and concordance against follow-up, both
/// ranking patients by predicted Short probability.
pub fn fold_metrics(preds: &[PatientPrediction], cohort: &Cohort) -> Result<FoldMetrics, PipelineError> {
    let mut scores = Vec::with_capacity(preds.len());
    let mut labels = Vec::with_capacity(preds.len());
    let mut time = Vec::with_capacity(preds.len());
    let mut event = Vec::with_capacity(preds.len());
    for p in preds {
        let rec = cohort.record(&p.patient_id).ok_or_else(|| PipelineError::MissingClinical(p.patient_id.clone()))?;
        scores.push(p.risk_score);
        labels.push(rec.label.is_some_and(|l| l.is_short()));
        time.push(rec.follow_up);
        event.push(rec.event);
    }
    let auc = match auroc(&scores, &labels) {
        Ok(v) => Some(v),
        Err(MetricsError::SingleClass) => None,
        Err(e) => return Err(e.into()),
    };
    let ci = match c_index(&scores, &time, &event) {
        Ok(v) => Some(v),
        Err(MetricsError::NoComparablePairs) => None,
        Err(e) => return Err(e.into()),
    };
    Ok(FoldMetrics { auroc: auc, c_index: ci })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricSummary {
    pub mean: Option<f64>,
    /// Population standard deviation over the folds where the metric exists.
    pub std: Option<f64>,
    pub per_fold: Vec<Option<f64>>,
}

pub fn summarize(per_fold: &[Option<f64>]) -> MetricSummary {
    let vals: Vec<f64> = per_fold.iter().flatten().copied().collect();
    let (mean, std) = if vals.is_empty() {
        (None, None)
    } else {
        let n = vals.len() as f64;
        let m = vals.iter().sum::<f64>() / n;
        let var = vals.iter().map(|v| (v - m).powi(2)).sum::<f64>() / n;
        (Some(m), Some(var.sqrt()))
    };
    MetricSummary {
        mean,
        std,
        per_fold: per_fold.to_vec(),
    }
}

/// Runs `f` on every fold, folds in parallel on `jobs` threads (0 picks
/// the machine's parallelism). Results come back in fold order.
pub fn cross_validate<T, F>(folds: &[FoldSplit], jobs: usize, f: F) -> Result<Vec<T>, PipelineError>
where
    T: Send,
    F: Fn(&FoldSplit) -> Result<T, PipelineError> + Sync,
{
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| PipelineError::InvalidConfig(format!("thread pool: {e}")))?;
    pool.install(|| folds.par_iter().map(&f).collect())
}

/// Everything one arm produced on one fold.
#[derive(Debug, Clone)]
pub struct ArmFold {
    pub split: FoldSplit,
    pub norm: NormStats,
    pub predictions: Vec<PatientPrediction>,
    pub metrics: FoldMetrics,
    pub subsample_model: TrainedModel,
    pub core_model: Option<TrainedModel>,
}

#[derive(Debug, Clone)]
pub struct ArmResult {
    pub arm: Arm,
    /// Hash of the run config with this arm's switches applied.
    pub config_hash: [u8; 32],
    pub folds: Vec<ArmFold>,
    pub auroc: MetricSummary,
    pub c_index: MetricSummary,
}

impl ArmResult {
    /// Out-of-fold predictions with their fold, sorted by patient id.
    pub fn predictions(&self) -> Vec<(usize, &PatientPrediction)> {
        let mut out: Vec<(usize, &PatientPrediction)> = self.folds.iter().flat_map(|f| f.predictions.iter().map(move |p| (f.split.fold, p))).collect();
        out.sort_by(|a, b| a.1.patient_id.cmp(&b.1.patient_id));
        out
    }
}

#[derive(Debug, Clone)]
pub struct CvResult {
    pub config: RunConfig,
    pub arms: Vec<ArmResult>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CvOptions {
    pub arms: Vec<Arm>,
    pub jobs: usize,
    /// Append the tumor indicator to each cell's features.
    pub with_tissue: bool,
}

impl CvOptions {
    pub fn single(cfg: &TrainConfig, with_tissue: bool) -> Self {
        Self {
            arms: vec![Arm::from_config(cfg)],
            jobs: 1,
            with_tissue,
        }
    }
}

/// Patient-level stratified k-fold cross-validation of every requested arm
/// on the same folds. Arms sharing the edge-weight switch share the
/// subsample model of each fold.
pub fn run_cv(cohort: &Cohort, run: &RunConfig, opts: &CvOptions) -> Result<CvResult, PipelineError> {
    run.validate()?;
    if opts.arms.is_empty() {
        return Err(PipelineError::InvalidConfig("no arms requested".into()));
    }
    for arm in &opts.arms {
        arm.apply(&run.train).validate()?;
    }
    let folds = make_folds(cohort, run.folds, run.train.seed, run.train.val_fraction)?;
    let structure = build_cohort_graphs(cohort, &run.train.graph, opts.with_tissue)?;
    let per_fold = cross_validate(&folds, opts.jobs, |split| run_fold(cohort, &structure, run, split, &opts.arms, opts.with_tissue))?;

    let mut arms = Vec::with_capacity(opts.arms.len());
    let mut columns: Vec<Vec<ArmFold>> = opts.arms.iter().map(|_| Vec::new()).collect();
    for fold in per_fold {
        for (a, r) in fold.into_iter().enumerate() {
            columns[a].push(r);
        }
    }
    for (arm, folds) in opts.arms.iter().zip(columns) {
        let auc: Vec<Option<f64>> = folds.iter().map(|f| f.metrics.auroc).collect();
        let ci: Vec<Option<f64>> = folds.iter().map(|f| f.metrics.c_index).collect();
        let mut arm_run = run.clone();
        arm_run.train = arm.apply(&run.train);
        arms.push(ArmResult {
            arm: *arm,
            config_hash: arm_run.hash_bytes(),
            auroc: summarize(&auc),
            c_index: summarize(&ci),
            folds,
        });
    }
    Ok(CvResult { config: run.clone(), arms })
}

/// Trains and evaluates every arm on one split only.
pub fn run_single_fold(cohort: &Cohort, run: &RunConfig, split: &FoldSplit, opts: &CvOptions) -> Result<Vec<ArmFold>, PipelineError> {
    run.validate()?;
    for arm in &opts.arms {
        arm.apply(&run.train).validate()?;
    }
    let structure = build_cohort_graphs(cohort, &run.train.graph, opts.with_tissue)?;
    run_fold(cohort, &structure, run, split, &opts.arms, opts.with_tissue)
}

fn run_fold(cohort: &Cohort, structure: &[CoreGraphs], run: &RunConfig, split: &FoldSplit, arms: &[Arm], with_tissue: bool) -> Result<Vec<ArmFold>, PipelineError> {
    let cfg = &run.train;
    let fold_seed = derive_seed(cfg.seed, &[split.fold as u64]);
    let by_patient = cohort.cores_by_patient();
    let cores_of = |ids: &[String]| -> Vec<usize> { ids.iter().flat_map(|id| by_patient.get(id.as_str()).cloned().unwrap_or_default()).collect() };

    // Normalization sees only cells of training and validation patients.
    let fit_cores = cores_of(&split.fit_ids());
    let mut rows = Vec::new();
    for &c in &fit_cores {
        rows.extend(cohort.cores[c].node_feature_rows(with_tissue));
    }
    let dim = structure
        .first()
        .and_then(|c| c.subsample_graphs().next())
        .map_or(0, |g| g.feature_dim());
    let norm = match cfg.normalization {
        Normalization::None => NormStats::identity(dim),
        Normalization::ZScorePerFeature => NormStats::fit(rows.iter().map(Vec::as_slice), dim),
    };
    drop(rows);

    let mut needed: Vec<usize> = fit_cores;
    needed.extend(cores_of(&split.test_ids));
    needed.sort_unstable();
    needed.dedup();
    let cores: Vec<CoreGraphs> = needed.iter().map(|&i| structure[i].normalized(&norm)).collect();
    let position: BTreeMap<usize, usize> = needed.iter().enumerate().map(|(p, &i)| (i, p)).collect();

    let mut labels: BTreeMap<&str, usize> = BTreeMap::new();
    let mut stages: BTreeMap<String, bool> = BTreeMap::new();
    for r in &cohort.clinical {
        if let Some(l) = r.label {
            labels.insert(r.patient_id.as_str(), l.class_index());
        }
        stages.insert(r.patient_id.clone(), r.stage_binary);
    }
    let label_of = |id: &str| labels.get(id).copied().ok_or_else(|| PipelineError::MissingClinical(id.to_string()));
    let subsample_examples = |ids: &[String]| -> Result<Vec<Example>, PipelineError> {
        let mut out = Vec::new();
        for id in ids {
            let label = label_of(id)?;
            for c in cores_of(std::slice::from_ref(id)) {
                for g in cores[position[&c]].subsample_graphs() {
                    out.push(Example { graph: g, extra: Vec::new(), label });
                }
            }
        }
        Ok(out)
    };
    let sub_train = subsample_examples(&split.train_ids)?;
    let sub_val = subsample_examples(&split.val_ids)?;

    let mut results: Vec<Option<ArmFold>> = arms.iter().map(|_| None).collect();
    let edge_settings: BTreeSet<bool> = arms.iter().map(|a| a.edge_weights).collect();
    for edges in edge_settings {
        let sub_cfg = cfg.subsample_model.model_config(dim, edges);
        let sub_opts = TrainOptions::from_config(cfg, derive_seed(fold_seed, &[1, edges as u64]));
        log::info!("fold {}: training subsample model (edges {edges}) on {} graphs", split.fold, sub_train.len());
        let sub_model = train_model(&sub_train, &sub_val, &sub_cfg, &sub_opts)?;

        let mut assembled: Option<Vec<AssembledCore>> = None;
        for (a, arm) in arms.iter().enumerate().filter(|(_, a)| a.edge_weights == edges) {
            let (predictions, core_model) = if arm.hierarchy {
                if assembled.is_none() {
                    assembled = Some(assemble_core_graphs(&cores, &sub_model, None)?);
                }
                let base = assembled.as_ref().expect("assembled above");
                let graphs: Vec<AssembledCore> = if arm.stage_fusion {
                    base.iter()
                        .map(|ac| {
                            let s = *stages.get(&ac.patient_id).ok_or_else(|| PipelineError::MissingClinical(ac.patient_id.clone()))?;
                            Ok(AssembledCore {
                                graph: attach_stage_feature(&ac.graph, s)?,
                                ..ac.clone()
                            })
                        })
                        .collect::<Result<_, PipelineError>>()?
                } else {
                    base.clone()
                };
                let core_examples = |ids: &[String]| -> Result<Vec<Example>, PipelineError> {
                    let wanted: BTreeSet<&str> = ids.iter().map(String::as_str).collect();
                    graphs
                        .iter()
                        .filter(|ac| wanted.contains(ac.patient_id.as_str()))
                        .map(|ac| {
                            Ok(Example {
                                graph: &ac.graph,
                                extra: Vec::new(),
                                label: label_of(&ac.patient_id)?,
                            })
                        })
                        .collect()
                };
                let core_cfg = cfg.core_model.model_config(sub_cfg.embed_dim() + arm.stage_fusion as usize, edges);
                let core_opts = TrainOptions::from_config(cfg, derive_seed(fold_seed, &[2, edges as u64, arm.stage_fusion as u64]));
                let core_train = core_examples(&split.train_ids)?;
                let core_val = core_examples(&split.val_ids)?;
                log::info!("fold {}: training core model ({}) on {} graphs", split.fold, arm.name(), core_train.len());
                let core_model = train_model(&core_train, &core_val, &core_cfg, &core_opts)?;

                let stage_map = arm.stage_fusion.then_some(&stages);
                let preds = score_patients(&cores, &split.test_ids, &sub_model, Some(&core_model), stage_map)?;
                (preds, Some(core_model))
            } else {
                let preds = score_patients(&cores, &split.test_ids, &sub_model, None, None)?;
                (preds, None)
            };
            let metrics = fold_metrics(&predictions, cohort)?;
            results[a] = Some(ArmFold {
                split: split.clone(),
                norm: norm.clone(),
                predictions,
                metrics,
                subsample_model: sub_model.clone(),
                core_model,
            });
        }
    }
    Ok(results.into_iter().map(|r| r.expect("every arm has an edge setting")).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn arm_names() {
        let arm = |e, h, s| Arm {
            edge_weights: e,
            hierarchy: h,
            stage_fusion: s,
        };
        assert_eq!(arm(true, true, true).name(), "E+Hi+CS");
        assert_eq!(arm(false, true, false).name(), "Hi");
        assert_eq!(arm(false, false, false).name(), "GIN");
    }

    #[test]
    fn summary_uses_population_std_and_skips_missing_folds() {
        let s = summarize(&[Some(0.6), None, Some(0.8)]);
        assert!((s.mean.unwrap() - 0.7).abs() < 1e-12);
        assert!((s.std.unwrap() - 0.1).abs() < 1e-12);
        assert_eq!(summarize(&[None]).mean, None);
    }
}
