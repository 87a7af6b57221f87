use std::collections::BTreeSet;
use std::io::Read;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::{hex, ArmResult, CvResult, FoldSplit, NormStats, PipelineError, TrainedModel};
use crate::cell_table::{Cohort, SurvivalLabel};
use crate::gnn::{load_checkpoint, save_checkpoint, Checkpoint};

pub const RUN_MANIFEST_FILE: &str = "run_manifest.json";
pub const METRICS_FILE: &str = "metrics.json";
pub const PREDICTIONS_FILE: &str = "predictions.csv";
pub const FOLD_MANIFEST_FILE: &str = "fold_manifest.json";

/// One line of a predictions file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRow {
    pub patient_id: String,
    #[serde(default)]
    pub fold: Option<usize>,
    pub prob_short: f64,
    #[serde(default)]
    pub label: Option<SurvivalLabel>,
    pub follow_up_days: f64,
    #[serde(deserialize_with = "de_event")]
    pub event: bool,
}

fn de_event<'de, D: serde::Deserializer<'de>>(d: D) -> Result<bool, D::Error> {
    let s = String::deserialize(d)?;
    match s.trim().to_ascii_lowercase().as_str() {
        "1" | "true" => Ok(true),
        "0" | "false" => Ok(false),
        other => Err(serde::de::Error::custom(format!("event must be 0 or 1, got `{other}`"))),
    }
}

/// Parses a predictions CSV with header `patient_id,prob_short,follow_up_days,event`
/// and optional `fold` and `label` columns.
pub fn parse_predictions<R: Read>(input: R) -> Result<Vec<PredictionRow>, PipelineError> {
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(input);
    let mut seen = BTreeSet::new();
    let mut rows = Vec::new();
    for (i, rec) in reader.deserialize::<PredictionRow>().enumerate() {
        let row = rec.map_err(|e| PipelineError::Predictions(format!("row {}: {e}", i + 1)))?;
        if !(0.0..=1.0).contains(&row.prob_short) {
            return Err(PipelineError::Predictions(format!("row {}: prob_short {} outside [0, 1]", i + 1, row.prob_short)));
        }
        if !(row.follow_up_days >= 0.0 && row.follow_up_days.is_finite()) {
            return Err(PipelineError::Predictions(format!("row {}: follow_up_days must be finite and non-negative", i + 1)));
        }
        if !seen.insert(row.patient_id.clone()) {
            return Err(PipelineError::Predictions(format!("patient `{}` listed twice", row.patient_id)));
        }
        rows.push(row);
    }
    Ok(rows)
}

pub fn read_predictions(path: &Path) -> Result<Vec<PredictionRow>, PipelineError> {
    let file = std::fs::File::open(path).map_err(|e| PipelineError::Io(format!("{}: {e}", path.display())))?;
    parse_predictions(std::io::BufReader::new(file))
}

pub fn write_predictions(path: &Path, rows: &[PredictionRow]) -> Result<(), PipelineError> {
    let io = |e: csv::Error| PipelineError::Io(format!("{}: {e}", path.display()));
    let mut w = csv::Writer::from_path(path).map_err(io)?;
    w.write_record(["patient_id", "fold", "prob_short", "label", "follow_up_days", "event"]).map_err(io)?;
    for r in rows {
        w.write_record([
            r.patient_id.clone(),
            r.fold.map(|f| f.to_string()).unwrap_or_default(),
            r.prob_short.to_string(),
            r.label.map(|l| l.as_str().to_string()).unwrap_or_default(),
            r.follow_up_days.to_string(),
            (r.event as u8).to_string(),
        ])
        .map_err(io)?;
    }
    w.flush().map_err(|e| PipelineError::Io(format!("{}: {e}", path.display())))
}

fn prediction_rows(arm: &ArmResult, cohort: &Cohort) -> Result<Vec<PredictionRow>, PipelineError> {
    arm.predictions()
        .into_iter()
        .map(|(fold, p)| {
            let rec = cohort.record(&p.patient_id).ok_or_else(|| PipelineError::MissingClinical(p.patient_id.clone()))?;
            Ok(PredictionRow {
                patient_id: p.patient_id.clone(),
                fold: Some(fold),
                prob_short: p.prob_short,
                label: rec.label,
                follow_up_days: rec.follow_up,
                event: rec.event,
            })
        })
        .collect()
}

fn fmt_cell(mean: Option<f64>, std: Option<f64>) -> String {
    match (mean, std) {
        (Some(m), Some(s)) => format!("{m:.3} ± {s:.3}"),
        _ => "n/a".into(),
    }
}

/// The metrics document written next to the fold directories. Contains no
/// timestamps, so identical runs produce identical bytes.
pub fn metrics_document(result: &CvResult) -> Value {
    let arms: Vec<Value> = result
        .arms
        .iter()
        .map(|a| {
            json!({
                "arm": a.arm.name(),
                "config_hash": hex(&a.config_hash),
                "n_patients": a.folds.iter().map(|f| f.predictions.len()).sum::<usize>(),
                "auroc": a.auroc,
                "c_index": a.c_index,
                "table_row": {
                    "method": a.arm.name(),
                    "auroc": fmt_cell(a.auroc.mean, a.auroc.std),
                    "c_index": fmt_cell(a.c_index.mean, a.c_index.std),
                },
            })
        })
        .collect();
    json!({
        "run_manifest": RUN_MANIFEST_FILE,
        "config_hash": result.config.hash(),
        "folds": result.config.folds,
        "seed": result.config.train.seed,
        "arms": arms,
    })
}

fn write_json(path: &Path, value: &Value) -> Result<(), PipelineError> {
    let mut text = serde_json::to_string_pretty(value).expect("json value serializes");
    text.push('\n');
    std::fs::write(path, text).map_err(|e| PipelineError::Io(format!("{}: {e}", path.display())))
}

fn save_model(path: &Path, model: &TrainedModel, config_hash: [u8; 32]) -> Result<(), PipelineError> {
    save_checkpoint(
        path,
        &Checkpoint {
            config: model.config.clone(),
            config_hash,
            params: model.params.clone(),
            adam: Some(model.optimizer.clone()),
        },
    )?;
    Ok(())
}

/// Writes per-fold manifests and checkpoints, the out-of-fold predictions
/// and the metrics document under `out`. A single arm writes directly into
/// `out`; several arms get one subdirectory each. Returns the written
/// metrics path.
pub fn write_cv_artifacts(result: &CvResult, cohort: &Cohort, out: &Path) -> Result<PathBuf, PipelineError> {
    let mkdir = |p: &Path| std::fs::create_dir_all(p).map_err(|e| PipelineError::Io(format!("{}: {e}", p.display())));
    mkdir(out)?;
    for arm in &result.arms {
        let root = if result.arms.len() == 1 { out.to_path_buf() } else { out.join(arm.arm.name().replace('+', "_")) };
        mkdir(&root)?;
        for f in &arm.folds {
            let dir = root.join(format!("fold_{}", f.split.fold));
            mkdir(&dir)?;
            save_model(&dir.join("subsample_model.ckpt"), &f.subsample_model, arm.config_hash)?;
            if let Some(core) = &f.core_model {
                save_model(&dir.join("core_model.ckpt"), core, arm.config_hash)?;
            }
            let manifest = json!({
                "fold": f.split.fold,
                "arm": arm.arm.name(),
                "config_hash": hex(&arm.config_hash),
                "train_ids": f.split.train_ids,
                "val_ids": f.split.val_ids,
                "test_ids": f.split.test_ids,
                "normalization": f.norm,
                "checkpoints": {
                    "subsample": "subsample_model.ckpt",
                    "core": f.core_model.as_ref().map(|_| "core_model.ckpt"),
                },
                "training": {
                    "subsample": f.subsample_model.log,
                    "core": f.core_model.as_ref().map(|m| &m.log),
                },
                "metrics": f.metrics,
            });
            write_json(&dir.join(FOLD_MANIFEST_FILE), &manifest)?;
        }
        write_predictions(&root.join(PREDICTIONS_FILE), &prediction_rows(arm, cohort)?)?;
    }
    let metrics_path = out.join(METRICS_FILE);
    write_json(&metrics_path, &metrics_document(result))?;
    Ok(metrics_path)
}

#[derive(Debug, Deserialize)]
struct CheckpointNames {
    subsample: String,
    core: Option<String>,
}

/// The fields of a fold manifest needed to score new patients.
#[derive(Debug, Deserialize)]
pub struct FoldManifest {
    pub fold: usize,
    pub arm: String,
    pub config_hash: String,
    pub train_ids: Vec<String>,
    pub val_ids: Vec<String>,
    pub test_ids: Vec<String>,
    pub normalization: NormStats,
    checkpoints: CheckpointNames,
}

impl FoldManifest {
    pub fn split(&self) -> FoldSplit {
        FoldSplit {
            fold: self.fold,
            train_ids: self.train_ids.clone(),
            val_ids: self.val_ids.clone(),
            test_ids: self.test_ids.clone(),
        }
    }
}

/// Parses a fold manifest and checks that normalization statistics are
/// usable.
pub fn parse_fold_manifest(bytes: &[u8]) -> Result<FoldManifest, PipelineError> {
    let m: FoldManifest = serde_json::from_slice(bytes).map_err(|e| PipelineError::Manifest(e.to_string()))?;
    let n = &m.normalization;
    if n.mean.len() != n.std.len() || n.mean.iter().chain(&n.std).any(|v| !v.is_finite()) || n.std.iter().any(|&s| s <= 0.0) {
        return Err(PipelineError::Manifest("normalization statistics must be finite with positive scales".into()));
    }
    for name in std::iter::once(&m.checkpoints.subsample).chain(&m.checkpoints.core) {
        if name.contains('/') || name.contains('\\') || name.is_empty() || name == ".." {
            return Err(PipelineError::Manifest(format!("checkpoint `{name}` must be a plain file name")));
        }
    }
    Ok(m)
}

/// A fold directory loaded back: manifest plus restored models.
#[derive(Debug)]
pub struct LoadedFold {
    pub manifest: FoldManifest,
    pub subsample_model: TrainedModel,
    pub core_model: Option<TrainedModel>,
}

/// Loads a `fold_<i>` directory written by [`write_cv_artifacts`] and checks
/// that both checkpoints carry the manifest's config hash.
pub fn load_fold(dir: &Path) -> Result<LoadedFold, PipelineError> {
    let path = dir.join(FOLD_MANIFEST_FILE);
    let bytes = std::fs::read(&path).map_err(|e| PipelineError::Io(format!("{}: {e}", path.display())))?;
    let manifest = parse_fold_manifest(&bytes)?;
    let load = |name: &str| -> Result<TrainedModel, PipelineError> {
        let ckpt = load_checkpoint(&dir.join(name))?;
        if hex(&ckpt.config_hash) != manifest.config_hash {
            return Err(PipelineError::InvalidConfig(format!("checkpoint {name} was trained under a different configuration")));
        }
        Ok(TrainedModel::from_checkpoint(ckpt))
    };
    let subsample_model = load(&manifest.checkpoints.subsample)?;
    let core_model = manifest.checkpoints.core.as_deref().map(load).transpose()?;
    Ok(LoadedFold {
        manifest,
        subsample_model,
        core_model,
    })
}
