//! Per-cell tables, clinical metadata and cohort configuration.
//!
//! Both supported dataset styles (continuous marker intensities and
//! one-hot phenotypes) bind through [`CohortConfig`]: column names, the
//! coordinate scale, the label threshold and the stage binarization rule
//! are all configuration, never code.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::io::Read;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph_builder::Graph;

/// Days per month used when thresholds or follow-up are given in months.
pub const DAYS_PER_MONTH: f64 = 365.25 / 12.0;

#[derive(Debug, Error)]
pub enum TableError {
    #[error("missing column `{0}`")]
    MissingColumn(String),
    #[error("row {row}: column `{column}` holds a non-finite or unparsable value `{value}`")]
    NonFiniteValue { row: usize, column: String, value: String },
    #[error("row {row}: unrecognized value `{value}` in column `{column}`")]
    InvalidValue { row: usize, column: String, value: String },
    #[error("core `{0}` has no cells")]
    EmptyCore(String),
    #[error("patient `{0}` appears more than once in the clinical table")]
    DuplicatePatient(String),
    #[error("stage `{value}` (row {row}) is not covered by the stage split")]
    UnknownStage { row: usize, value: String },
    #[error("core graph already carries a fused stage feature")]
    DoubleFusion,
    #[error("invalid cohort config: {0}")]
    InvalidConfig(String),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TissueCategory {
    Tumor,
    Stroma,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub cell_id: String,
    pub x_um: f64,
    pub y_um: f64,
    pub features: Vec<f64>,
    pub tissue_category: Option<TissueCategory>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Core {
    pub core_id: String,
    pub patient_id: String,
    pub cells: Vec<Cell>,
}

impl Core {
    pub fn feature_dim(&self) -> usize {
        self.cells.first().map_or(0, |c| c.features.len())
    }

    pub fn coords(&self) -> Vec<[f64; 2]> {
        self.cells.iter().map(|c| [c.x_um, c.y_um]).collect()
    }

    /// Node features for graph construction: the configured features plus,
    /// when `with_tissue` is set, a trailing 1.0 (tumor) / 0.0 (stroma or
    /// unknown) column.
    pub fn node_feature_rows(&self, with_tissue: bool) -> Vec<Vec<f64>> {
        self.cells
            .iter()
            .map(|c| {
                let mut row = c.features.clone();
                if with_tissue {
                    row.push(if c.tissue_category == Some(TissueCategory::Tumor) { 1.0 } else { 0.0 });
                }
                row
            })
            .collect()
    }

    pub fn has_tissue_categories(&self) -> bool {
        self.cells.iter().any(|c| c.tissue_category.is_some())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SurvivalLabel {
    Short,
    Long,
}

impl SurvivalLabel {
    /// Class index used by the classifiers: Short is the positive class.
    pub fn class_index(self) -> usize {
        match self {
            SurvivalLabel::Short => 1,
            SurvivalLabel::Long => 0,
        }
    }

    pub fn is_short(self) -> bool {
        self == SurvivalLabel::Short
    }

    pub fn as_str(self) -> &'static str {
        match self {
            SurvivalLabel::Short => "short",
            SurvivalLabel::Long => "long",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClinicalRecord {
    pub patient_id: String,
    /// Follow-up in days.
    pub follow_up: f64,
    pub event: bool,
    pub stage_binary: bool,
    pub label: Option<SurvivalLabel>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CensorPolicy {
    ExcludeCensoredShort,
    KeepAll,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum TimeUnit {
    #[default]
    Days,
    Months,
}

impl TimeUnit {
    pub fn to_days(self, value: f64) -> f64 {
        match self {
            TimeUnit::Days => value,
            TimeUnit::Months => value * DAYS_PER_MONTH,
        }
    }
}

/// Assigns the binary label from follow-up. The threshold is inclusive on
/// the Long side.
pub fn derive_binary_label(follow_up: f64, event: bool, threshold: f64, policy: CensorPolicy) -> Option<SurvivalLabel> {
    if follow_up >= threshold {
        Some(SurvivalLabel::Long)
    } else if event {
        Some(SurvivalLabel::Short)
    } else {
        match policy {
            CensorPolicy::ExcludeCensoredShort => None,
            CensorPolicy::KeepAll => Some(SurvivalLabel::Short),
        }
    }
}

/// Returns a copy of a core-level graph with one trailing node feature
/// holding the binary stage.
pub fn attach_stage_feature(core_graph: &Graph, stage_binary: bool) -> Result<Graph, TableError> {
    if core_graph.stage_fused {
        return Err(TableError::DoubleFusion);
    }
    let n = core_graph.n_nodes();
    let d = core_graph.feature_dim();
    let value = if stage_binary { 1.0 } else { 0.0 };
    let mut features = ndarray::Array2::from_elem((n, d + 1), value);
    features.slice_mut(ndarray::s![.., ..d]).assign(&core_graph.node_features);
    let mut out = core_graph.clone();
    out.node_features = features;
    out.stage_fused = true;
    Ok(out)
}

fn default_patient_col() -> String {
    "patient_id".into()
}
fn default_core_col() -> String {
    "core_id".into()
}
fn default_x_col() -> String {
    "x".into()
}
fn default_y_col() -> String {
    "y".into()
}
fn default_follow_up_col() -> String {
    "follow_up_days".into()
}
fn default_event_col() -> String {
    "event".into()
}
fn default_stage_col() -> String {
    "stage".into()
}

/// One-hot expansion of a categorical column.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OneHotColumn {
    pub column: String,
    pub levels: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellColumns {
    #[serde(default = "default_patient_col")]
    pub patient_id: String,
    #[serde(default = "default_core_col")]
    pub core_id: String,
    #[serde(default)]
    pub cell_id: Option<String>,
    #[serde(default = "default_x_col")]
    pub x: String,
    #[serde(default = "default_y_col")]
    pub y: String,
    #[serde(default)]
    pub tissue_category: Option<String>,
    /// Continuous feature columns, in feature order.
    #[serde(default)]
    pub features: Vec<String>,
    /// Categorical column expanded after the continuous features.
    #[serde(default)]
    pub one_hot: Option<OneHotColumn>,
}

impl Default for CellColumns {
    fn default() -> Self {
        Self {
            patient_id: default_patient_col(),
            core_id: default_core_col(),
            cell_id: None,
            x: default_x_col(),
            y: default_y_col(),
            tissue_category: None,
            features: Vec::new(),
            one_hot: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClinicalColumns {
    #[serde(default = "default_patient_col")]
    pub patient_id: String,
    #[serde(default = "default_follow_up_col")]
    pub follow_up: String,
    #[serde(default = "default_event_col")]
    pub event: String,
    #[serde(default = "default_stage_col")]
    pub stage: String,
    #[serde(default)]
    pub follow_up_unit: TimeUnit,
}

impl Default for ClinicalColumns {
    fn default() -> Self {
        Self {
            patient_id: default_patient_col(),
            follow_up: default_follow_up_col(),
            event: default_event_col(),
            stage: default_stage_col(),
            follow_up_unit: TimeUnit::Days,
        }
    }
}

/// Raw stage strings mapped to the binary stage indicator. Matching is
/// case-insensitive after trimming.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageSplit {
    pub low: Vec<String>,
    pub high: Vec<String>,
}

impl StageSplit {
    pub fn classify(&self, raw: &str) -> Option<bool> {
        let key = raw.trim().to_ascii_lowercase();
        if self.high.iter().any(|s| s.trim().to_ascii_lowercase() == key) {
            Some(true)
        } else if self.low.iter().any(|s| s.trim().to_ascii_lowercase() == key) {
            Some(false)
        } else {
            None
        }
    }
}

impl Default for StageSplit {
    /// Stage I versus stages II-IV.
    fn default() -> Self {
        Self {
            low: vec!["I".into(), "IA".into(), "IB".into(), "1".into()],
            high: ["II", "IIA", "IIB", "III", "IIIA", "IIIB", "IIIC", "IV", "IVA", "IVB", "2", "3", "4"]
                .iter()
                .map(|s| s.to_string())
                .collect(),
        }
    }
}

/// Cohort-level ingestion settings, usually read from a TOML file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CohortConfig {
    /// Label threshold in days.
    pub label_threshold: f64,
    pub um_per_unit: f64,
    pub censor_policy: CensorPolicy,
    pub stage_split: StageSplit,
    pub cell_columns: CellColumns,
    pub clinical_columns: ClinicalColumns,
    /// Append the tissue category as a 0/1 node feature when the column is
    /// configured.
    pub tissue_as_node_feature: bool,
    pub cells_path: Option<PathBuf>,
    pub clinical_path: Option<PathBuf>,
}

impl CohortConfig {
    pub fn new(label_threshold_days: f64) -> Self {
        Self {
            label_threshold: label_threshold_days,
            um_per_unit: 1.0,
            censor_policy: CensorPolicy::ExcludeCensoredShort,
            stage_split: StageSplit::default(),
            cell_columns: CellColumns::default(),
            clinical_columns: ClinicalColumns::default(),
            tissue_as_node_feature: true,
            cells_path: None,
            clinical_path: None,
        }
    }

    pub fn validate(&self) -> Result<(), TableError> {
        if !(self.label_threshold > 0.0 && self.label_threshold.is_finite()) {
            return Err(TableError::InvalidConfig("label threshold must be positive".into()));
        }
        if !(self.um_per_unit > 0.0 && self.um_per_unit.is_finite()) {
            return Err(TableError::InvalidConfig("um_per_unit must be positive".into()));
        }
        if self.cell_columns.features.is_empty() && self.cell_columns.one_hot.is_none() {
            return Err(TableError::InvalidConfig("no feature columns configured".into()));
        }
        if let Some(oh) = &self.cell_columns.one_hot {
            if oh.levels.is_empty() {
                return Err(TableError::InvalidConfig("one-hot column needs at least one level".into()));
            }
        }
        Ok(())
    }

    /// Parses the TOML form. Relative data paths resolve against `base_dir`.
    pub fn from_toml_str(text: &str, base_dir: Option<&Path>) -> Result<Self, TableError> {
        let file: CohortFile = toml::from_str(text).map_err(|e| TableError::InvalidConfig(e.message().to_string()))?;
        let threshold = match (file.label_threshold_days, file.label_threshold_months) {
            (Some(d), None) => d,
            (None, Some(m)) => m * DAYS_PER_MONTH,
            (Some(_), Some(_)) => {
                return Err(TableError::InvalidConfig(
                    "give label_threshold_days or label_threshold_months, not both".into(),
                ))
            }
            (None, None) => return Err(TableError::InvalidConfig("missing label threshold".into())),
        };
        let resolve = |p: Option<PathBuf>| match (p, base_dir) {
            (Some(p), Some(base)) if p.is_relative() => Some(base.join(p)),
            (p, _) => p,
        };
        let cfg = Self {
            label_threshold: threshold,
            um_per_unit: file.um_per_unit,
            censor_policy: file.censor_policy,
            stage_split: file.stage_split.unwrap_or_default(),
            cell_columns: file.cells,
            clinical_columns: file.clinical,
            tissue_as_node_feature: file.tissue_as_node_feature,
            cells_path: resolve(file.cells_path),
            clinical_path: resolve(file.clinical_path),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_toml_file(path: &Path) -> Result<Self, TableError> {
        let text = std::fs::read_to_string(path).map_err(|source| TableError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_toml_str(&text, path.parent())
    }

    pub fn to_toml_string(&self) -> String {
        let file = CohortFile {
            label_threshold_days: Some(self.label_threshold),
            label_threshold_months: None,
            um_per_unit: self.um_per_unit,
            censor_policy: self.censor_policy,
            stage_split: Some(self.stage_split.clone()),
            cells: self.cell_columns.clone(),
            clinical: self.clinical_columns.clone(),
            tissue_as_node_feature: self.tissue_as_node_feature,
            cells_path: self.cells_path.clone(),
            clinical_path: self.clinical_path.clone(),
        };
        toml::to_string(&file).expect("cohort config serializes")
    }

    /// Number of per-cell features produced by the column mapping.
    pub fn feature_dim(&self) -> usize {
        self.cell_columns.features.len() + self.cell_columns.one_hot.as_ref().map_or(0, |o| o.levels.len())
    }
}

fn default_um_per_unit() -> f64 {
    1.0
}
fn default_censor_policy() -> CensorPolicy {
    CensorPolicy::ExcludeCensoredShort
}
fn default_true() -> bool {
    true
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CohortFile {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    label_threshold_days: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    label_threshold_months: Option<f64>,
    #[serde(default = "default_um_per_unit")]
    um_per_unit: f64,
    #[serde(default = "default_censor_policy")]
    censor_policy: CensorPolicy,
    #[serde(default = "default_true")]
    tissue_as_node_feature: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    cells_path: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    clinical_path: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    stage_split: Option<StageSplit>,
    #[serde(default)]
    cells: CellColumns,
    #[serde(default)]
    clinical: ClinicalColumns,
}

fn column_index(headers: &csv::StringRecord, name: &str) -> Result<usize, TableError> {
    headers
        .iter()
        .position(|h| h.trim() == name)
        .ok_or_else(|| TableError::MissingColumn(name.to_string()))
}

fn parse_finite(record: &csv::StringRecord, idx: usize, row: usize, column: &str) -> Result<f64, TableError> {
    let raw = record.get(idx).unwrap_or("");
    match raw.trim().parse::<f64>() {
        Ok(v) if v.is_finite() => Ok(v),
        _ => Err(TableError::NonFiniteValue {
            row,
            column: column.to_string(),
            value: raw.to_string(),
        }),
    }
}

fn parse_bool(record: &csv::StringRecord, idx: usize, row: usize, column: &str) -> Result<bool, TableError> {
    let raw = record.get(idx).unwrap_or("");
    match raw.trim().to_ascii_lowercase().as_str() {
        "1" | "1.0" | "true" | "yes" | "y" | "dead" | "deceased" => Ok(true),
        "0" | "0.0" | "false" | "no" | "n" | "alive" | "censored" => Ok(false),
        _ => Err(TableError::InvalidValue {
            row,
            column: column.to_string(),
            value: raw.to_string(),
        }),
    }
}

fn reader<R: Read>(input: R) -> csv::Reader<R> {
    csv::ReaderBuilder::new().trim(csv::Trim::All).flexible(false).from_reader(input)
}

/// Parses a cell table. Cores come out in order of first appearance; cells
/// keep file order. Row numbers in errors count data rows from 1.
pub fn parse_cell_table<R: Read>(input: R, config: &CohortConfig) -> Result<Vec<Core>, TableError> {
    let cols = &config.cell_columns;
    let mut rdr = reader(input);
    let headers = rdr.headers()?.clone();
    let pid = column_index(&headers, &cols.patient_id)?;
    let cid = column_index(&headers, &cols.core_id)?;
    let xi = column_index(&headers, &cols.x)?;
    let yi = column_index(&headers, &cols.y)?;
    let cell_idx = cols.cell_id.as_deref().map(|c| column_index(&headers, c)).transpose()?;
    let tissue_idx = cols.tissue_category.as_deref().map(|c| column_index(&headers, c)).transpose()?;
    let feat_idx = cols
        .features
        .iter()
        .map(|c| column_index(&headers, c))
        .collect::<Result<Vec<_>, _>>()?;
    let one_hot = cols
        .one_hot
        .as_ref()
        .map(|o| column_index(&headers, &o.column).map(|i| (i, o)))
        .transpose()?;

    let mut order: Vec<(String, String)> = Vec::new();
    let mut cores: HashMap<(String, String), Vec<Cell>> = HashMap::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let row = i + 1;
        let patient = rec.get(pid).unwrap_or("").to_string();
        let core = rec.get(cid).unwrap_or("").to_string();
        let x = parse_finite(&rec, xi, row, &cols.x)? * config.um_per_unit;
        let y = parse_finite(&rec, yi, row, &cols.y)? * config.um_per_unit;
        let mut features = Vec::with_capacity(config.feature_dim());
        for (&fi, name) in feat_idx.iter().zip(&cols.features) {
            features.push(parse_finite(&rec, fi, row, name)?);
        }
        if let Some((oi, spec)) = one_hot {
            let raw = rec.get(oi).unwrap_or("").trim();
            let hit = spec.levels.iter().position(|l| l == raw).ok_or_else(|| TableError::InvalidValue {
                row,
                column: spec.column.clone(),
                value: raw.to_string(),
            })?;
            features.extend((0..spec.levels.len()).map(|l| if l == hit { 1.0 } else { 0.0 }));
        }
        let tissue_category = match tissue_idx {
            None => None,
            Some(ti) => {
                let raw = rec.get(ti).unwrap_or("").trim();
                match raw.to_ascii_lowercase().as_str() {
                    "tumor" | "tumour" => Some(TissueCategory::Tumor),
                    "stroma" => Some(TissueCategory::Stroma),
                    "" | "na" | "none" | "other" => None,
                    _ => {
                        return Err(TableError::InvalidValue {
                            row,
                            column: cols.tissue_category.clone().unwrap_or_default(),
                            value: raw.to_string(),
                        })
                    }
                }
            }
        };
        let key = (patient, core);
        let cells = cores.entry(key.clone()).or_insert_with(|| {
            order.push(key);
            Vec::new()
        });
        let cell_id = match cell_idx {
            Some(ci) => rec.get(ci).unwrap_or("").to_string(),
            None => cells.len().to_string(),
        };
        cells.push(Cell {
            cell_id,
            x_um: x,
            y_um: y,
            features,
            tissue_category,
        });
    }

    let mut out = Vec::with_capacity(order.len());
    for key in order {
        let cells = cores.remove(&key).unwrap_or_default();
        if cells.is_empty() {
            return Err(TableError::EmptyCore(key.1));
        }
        out.push(Core {
            patient_id: key.0,
            core_id: key.1,
            cells,
        });
    }
    Ok(out)
}

pub fn load_cell_table(path: &Path, config: &CohortConfig) -> Result<Vec<Core>, TableError> {
    let file = std::fs::File::open(path).map_err(|source| TableError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    parse_cell_table(std::io::BufReader::new(file), config)
}

/// Parses the clinical table, one row per patient.
pub fn parse_clinical<R: Read>(input: R, config: &CohortConfig) -> Result<Vec<ClinicalRecord>, TableError> {
    let cols = &config.clinical_columns;
    let mut rdr = reader(input);
    let headers = rdr.headers()?.clone();
    let pid = column_index(&headers, &cols.patient_id)?;
    let fi = column_index(&headers, &cols.follow_up)?;
    let ei = column_index(&headers, &cols.event)?;
    let si = column_index(&headers, &cols.stage)?;

    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let row = i + 1;
        let patient_id = rec.get(pid).unwrap_or("").to_string();
        if !seen.insert(patient_id.clone()) {
            return Err(TableError::DuplicatePatient(patient_id));
        }
        let raw_follow_up = parse_finite(&rec, fi, row, &cols.follow_up)?;
        if raw_follow_up < 0.0 {
            return Err(TableError::InvalidValue {
                row,
                column: cols.follow_up.clone(),
                value: raw_follow_up.to_string(),
            });
        }
        let follow_up = cols.follow_up_unit.to_days(raw_follow_up);
        let event = parse_bool(&rec, ei, row, &cols.event)?;
        let raw_stage = rec.get(si).unwrap_or("");
        let stage_binary = config.stage_split.classify(raw_stage).ok_or_else(|| TableError::UnknownStage {
            row,
            value: raw_stage.to_string(),
        })?;
        let label = derive_binary_label(follow_up, event, config.label_threshold, config.censor_policy);
        out.push(ClinicalRecord {
            patient_id,
            follow_up,
            event,
            stage_binary,
            label,
        });
    }
    Ok(out)
}

pub fn load_clinical(path: &Path, config: &CohortConfig) -> Result<Vec<ClinicalRecord>, TableError> {
    let file = std::fs::File::open(path).map_err(|source| TableError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    parse_clinical(std::io::BufReader::new(file), config)
}

/// Cores and clinical records of one cohort, joined by patient.
#[derive(Debug, Clone)]
pub struct Cohort {
    pub cores: Vec<Core>,
    pub clinical: Vec<ClinicalRecord>,
}

impl Cohort {
    pub fn new(cores: Vec<Core>, clinical: Vec<ClinicalRecord>) -> Self {
        Self { cores, clinical }
    }

    pub fn record(&self, patient_id: &str) -> Option<&ClinicalRecord> {
        self.clinical.iter().find(|r| r.patient_id == patient_id)
    }

    /// Core indices per patient id.
    pub fn cores_by_patient(&self) -> BTreeMap<&str, Vec<usize>> {
        let mut map: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
        for (i, c) in self.cores.iter().enumerate() {
            map.entry(c.patient_id.as_str()).or_default().push(i);
        }
        map
    }

    /// Labeled patients that have at least one core, in clinical-table order.
    pub fn labeled_patients(&self) -> Vec<&ClinicalRecord> {
        let with_cores: HashSet<&str> = self.cores.iter().map(|c| c.patient_id.as_str()).collect();
        self.clinical
            .iter()
            .filter(|r| r.label.is_some() && with_cores.contains(r.patient_id.as_str()))
            .collect()
    }

    pub fn feature_dim(&self) -> usize {
        self.cores.first().map_or(0, Core::feature_dim)
    }

    pub fn has_tissue_categories(&self) -> bool {
        self.cores.iter().any(Core::has_tissue_categories)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph_builder::{Graph, Provenance};
    use ndarray::Array2;

    fn config() -> CohortConfig {
        let mut c = CohortConfig::new(1730.0);
        c.cell_columns.features = vec!["f1".into(), "f2".into()];
        c
    }

    const CELLS: &str = "patient_id,core_id,x,y,f1,f2\np1,c1,0,0,1,2\np1,c1,10,4,3,4\np1,c1,20,8,5,6\n";

    #[test]
    fn loads_one_core_with_identity_scale() {
        let cores = parse_cell_table(CELLS.as_bytes(), &config()).unwrap();
        assert_eq!(cores.len(), 1);
        assert_eq!(cores[0].cells.len(), 3);
        assert_eq!((cores[0].cells[1].x_um, cores[0].cells[1].y_um), (10.0, 4.0));
        assert_eq!(cores[0].cells[2].features, vec![5.0, 6.0]);
    }

    #[test]
    fn coordinate_scale_halves() {
        let mut cfg = config();
        cfg.um_per_unit = 0.5;
        let cores = parse_cell_table(CELLS.as_bytes(), &cfg).unwrap();
        assert_eq!((cores[0].cells[2].x_um, cores[0].cells[2].y_um), (10.0, 4.0));
    }

    #[test]
    fn non_numeric_coordinate_names_row() {
        let bad = "patient_id,core_id,x,y,f1,f2\np1,c1,0,0,1,2\np1,c1,abc,4,3,4\n";
        match parse_cell_table(bad.as_bytes(), &config()) {
            Err(TableError::NonFiniteValue { row, column, .. }) => {
                assert_eq!(row, 2);
                assert_eq!(column, "x");
            }
            other => panic!("unexpected {other:?}"),
        }
        let inf = "patient_id,core_id,x,y,f1,f2\np1,c1,inf,0,1,2\n";
        assert!(matches!(parse_cell_table(inf.as_bytes(), &config()), Err(TableError::NonFiniteValue { row: 1, .. })));
    }

    #[test]
    fn missing_feature_column() {
        let bad = "patient_id,core_id,x,y,f1\np1,c1,0,0,1\n";
        assert!(matches!(parse_cell_table(bad.as_bytes(), &config()), Err(TableError::MissingColumn(c)) if c == "f2"));
    }

    #[test]
    fn one_hot_phenotype_and_tissue() {
        let mut cfg = CohortConfig::new(36.0 * DAYS_PER_MONTH);
        cfg.cell_columns.one_hot = Some(OneHotColumn {
            column: "phenotype".into(),
            levels: vec!["T".into(), "B".into(), "Tumor".into()],
        });
        cfg.cell_columns.tissue_category = Some("tissue".into());
        let csv = "patient_id,core_id,x,y,phenotype,tissue\na,1,0,0,B,stroma\na,1,1,1,Tumor,Tumor\nb,2,3,3,T,stroma\n";
        let cores = parse_cell_table(csv.as_bytes(), &cfg).unwrap();
        assert_eq!(cores.len(), 2);
        assert_eq!(cores[0].cells[0].features, vec![0.0, 1.0, 0.0]);
        assert_eq!(cores[0].cells[1].tissue_category, Some(TissueCategory::Tumor));
        assert_eq!(cores[0].node_feature_rows(true)[1], vec![0.0, 0.0, 1.0, 1.0]);
        let bad = "patient_id,core_id,x,y,phenotype,tissue\na,1,0,0,NK,stroma\n";
        assert!(matches!(parse_cell_table(bad.as_bytes(), &cfg), Err(TableError::InvalidValue { .. })));
    }

    #[test]
    fn clinical_rows_follow_dataset_rules() {
        let csv = "patient_id,follow_up_days,event,stage\np1,2000,1,I\np2,1000,1,III\np3,1000,0,II\n";
        let recs = parse_clinical(csv.as_bytes(), &config()).unwrap();
        assert_eq!(recs[0].label, Some(SurvivalLabel::Long));
        assert!(!recs[0].stage_binary);
        assert_eq!(recs[1].label, Some(SurvivalLabel::Short));
        assert!(recs[1].stage_binary);
        assert_eq!(recs[2].label, None);
    }

    #[test]
    fn duplicate_patient_rejected() {
        let csv = "patient_id,follow_up_days,event,stage\np1,2000,1,I\np1,10,1,I\n";
        assert!(matches!(parse_clinical(csv.as_bytes(), &config()), Err(TableError::DuplicatePatient(p)) if p == "p1"));
    }

    #[test]
    fn clinical_missing_column() {
        let csv = "patient_id,follow_up_days,stage\np1,2000,I\n";
        assert!(matches!(parse_clinical(csv.as_bytes(), &config()), Err(TableError::MissingColumn(c)) if c == "event"));
    }

    #[test]
    fn label_threshold_inclusive_on_long_side() {
        use CensorPolicy::*;
        assert_eq!(derive_binary_label(1730.0, true, 1730.0, ExcludeCensoredShort), Some(SurvivalLabel::Long));
        let t = 36.0 * DAYS_PER_MONTH;
        assert_eq!(derive_binary_label(t - 1.0, true, t, ExcludeCensoredShort), Some(SurvivalLabel::Short));
        assert_eq!(derive_binary_label(100.0, false, 1730.0, ExcludeCensoredShort), None);
        assert_eq!(derive_binary_label(100.0, false, 1730.0, KeepAll), Some(SurvivalLabel::Short));
        assert_eq!(derive_binary_label(5000.0, false, 1730.0, ExcludeCensoredShort), Some(SurvivalLabel::Long));
    }

    #[test]
    fn months_follow_up_unit() {
        let mut cfg = CohortConfig::new(36.0 * DAYS_PER_MONTH);
        cfg.cell_columns.features = vec!["f".into()];
        cfg.clinical_columns.follow_up_unit = TimeUnit::Months;
        cfg.clinical_columns.follow_up = "months".into();
        let csv = "patient_id,months,event,stage\na,35.9,1,I\nb,36,1,I\n";
        let recs = parse_clinical(csv.as_bytes(), &cfg).unwrap();
        assert_eq!(recs[0].label, Some(SurvivalLabel::Short));
        assert_eq!(recs[1].label, Some(SurvivalLabel::Long));
    }

    #[test]
    fn cohort_toml_round_trip_and_months_threshold() {
        let text = r#"
            label_threshold_months = 36
            um_per_unit = 1.0
            censor_policy = "exclude_censored_short"
            cells_path = "cells.csv"
            [stage_split]
            low = ["I", "II"]
            high = ["III", "IV"]
            [cells]
            one_hot = { column = "phenotype", levels = ["a", "b"] }
            [clinical]
            follow_up = "months"
            follow_up_unit = "months"
        "#;
        let cfg = CohortConfig::from_toml_str(text, Some(Path::new("/data"))).unwrap();
        assert!((cfg.label_threshold - 36.0 * DAYS_PER_MONTH).abs() < 1e-9);
        assert_eq!(cfg.cells_path.as_deref(), Some(Path::new("/data/cells.csv")));
        assert_eq!(cfg.stage_split.classify("ii"), Some(false));
        let again = CohortConfig::from_toml_str(&cfg.to_toml_string(), None).unwrap();
        assert_eq!(again.stage_split, cfg.stage_split);
        assert_eq!(again.cell_columns, cfg.cell_columns);
        assert!(CohortConfig::from_toml_str("um_per_unit = 1.0\n[cells]\nfeatures=[\"a\"]", None).is_err());
        assert!(CohortConfig::from_toml_str("label_threshold_days = 10\num_per_unit = -1\n[cells]\nfeatures=[\"a\"]", None).is_err());
    }

    fn small_graph(n: usize, d: usize) -> Graph {
        Graph {
            node_features: Array2::from_elem((n, d), 0.5),
            coords_um: (0..n).map(|i| [i as f64, 0.0]).collect(),
            edges: vec![],
            edge_weights: vec![],
            provenance: Provenance::CoreLevel,
            centroid_um: [0.0, 0.0],
            stage_fused: false,
        }
    }

    #[test]
    fn stage_feature_appended_once() {
        let g = small_graph(5, 3);
        let hi = attach_stage_feature(&g, true).unwrap();
        assert_eq!(hi.node_features.dim(), (5, 4));
        assert!(hi.node_features.column(3).iter().all(|&v| v == 1.0));
        assert_eq!(hi.edges, g.edges);
        let lo = attach_stage_feature(&g, false).unwrap();
        assert!(lo.node_features.column(3).iter().all(|&v| v == 0.0));
        assert!(matches!(attach_stage_feature(&hi, true), Err(TableError::DoubleFusion)));
    }

    proptest::proptest! {
        #[test]
        fn label_partition_is_total(follow_up in 0.0f64..5000.0, event: bool, threshold in 1.0f64..4000.0, keep: bool) {
            let policy = if keep { CensorPolicy::KeepAll } else { CensorPolicy::ExcludeCensoredShort };
            let label = derive_binary_label(follow_up, event, threshold, policy);
            match label {
                Some(SurvivalLabel::Long) => proptest::prop_assert!(follow_up >= threshold),
                Some(SurvivalLabel::Short) => proptest::prop_assert!(follow_up < threshold && (event || keep)),
                None => proptest::prop_assert!(follow_up < threshold && !event && !keep),
            }
        }

        #[test]
        fn scaling_is_homogeneous(scale in 0.01f64..10.0) {
            let mut cfg = config();
            cfg.um_per_unit = scale;
            let base = parse_cell_table(CELLS.as_bytes(), &config()).unwrap();
            let scaled = parse_cell_table(CELLS.as_bytes(), &cfg).unwrap();
            let d = |c: &Core, i: usize, j: usize| ((c.cells[i].x_um - c.cells[j].x_um).powi(2) + (c.cells[i].y_um - c.cells[j].y_um).powi(2)).sqrt();
            for (i, j) in [(0, 1), (0, 2), (1, 2)] {
                proptest::prop_assert!((d(&scaled[0], i, j) - scale * d(&base[0], i, j)).abs() < 1e-9 * (1.0 + d(&base[0], i, j) * scale));
            }
        }
    }
}
