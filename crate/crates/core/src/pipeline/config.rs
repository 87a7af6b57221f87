use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::PipelineError;
use crate::gnn::ModelConfig;
use crate::graph_builder::GraphBuildConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClassWeighting {
    None,
    /// `w_c = N / (n_classes · N_c)` over the training examples.
    InverseFrequency,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Normalization {
    None,
    ZScorePerFeature,
}

/// Architecture of one level without the data-dependent input width.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LevelConfig {
    pub hidden_dim: usize,
    pub n_conv_layers: usize,
    pub mlp_head_layers: usize,
    pub sag_ratio: f64,
    pub dropout_p: f64,
}

impl Default for LevelConfig {
    fn default() -> Self {
        let m = ModelConfig::new(1);
        Self {
            hidden_dim: m.hidden_dim,
            n_conv_layers: m.n_conv_layers,
            mlp_head_layers: m.mlp_head_layers,
            sag_ratio: m.sag_ratio,
            dropout_p: m.dropout_p,
        }
    }
}

impl LevelConfig {
    pub fn model_config(&self, in_dim: usize, use_edge_weights: bool) -> ModelConfig {
        ModelConfig {
            in_dim,
            hidden_dim: self.hidden_dim,
            n_conv_layers: self.n_conv_layers,
            mlp_head_layers: self.mlp_head_layers,
            sag_ratio: self.sag_ratio,
            dropout_p: self.dropout_p,
            use_edge_weights,
            use_sag_pool: true,
            readout_extra: 0,
            n_classes: 2,
        }
    }
}

/// Everything that determines a training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub max_epochs: usize,
    pub early_stop_patience: usize,
    pub seed: u64,
    /// Share of each training fold's patients held out for early stopping.
    pub val_fraction: f64,
    pub class_weighting: ClassWeighting,
    pub normalization: Normalization,
    /// GINE (edge-weighted) convolutions at both levels.
    pub use_edge_weights: bool,
    /// Train the core-level model; otherwise patients are scored by the
    /// subsample model directly.
    pub use_hierarchy: bool,
    pub use_stage_fusion: bool,
    pub subsample_model: LevelConfig,
    pub core_model: LevelConfig,
    pub graph: GraphBuildConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            weight_decay: 1e-4,
            max_epochs: 100,
            early_stop_patience: 10,
            seed: 0,
            val_fraction: 0.15,
            class_weighting: ClassWeighting::InverseFrequency,
            normalization: Normalization::ZScorePerFeature,
            use_edge_weights: true,
            use_hierarchy: true,
            use_stage_fusion: false,
            subsample_model: LevelConfig::default(),
            core_model: LevelConfig::default(),
            graph: GraphBuildConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), PipelineError> {
        let bad = |m: &str| Err(PipelineError::InvalidConfig(m.to_string()));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("lr must be positive");
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad("weight_decay must be non-negative");
        }
        if self.max_epochs == 0 {
            return bad("max_epochs must be at least 1");
        }
        if !(0.0..0.9).contains(&self.val_fraction) {
            return bad("val_fraction must lie in [0, 0.9)");
        }
        if self.use_stage_fusion && !self.use_hierarchy {
            return bad("stage fusion attaches the stage to core-level graphs and needs use_hierarchy");
        }
        self.graph.validate().map_err(|e| PipelineError::InvalidConfig(e.to_string()))?;
        for level in [&self.subsample_model, &self.core_model] {
            level
                .model_config(1, self.use_edge_weights)
                .validate()
                .map_err(|e| PipelineError::InvalidConfig(e.to_string()))?;
        }
        Ok(())
    }
}

/// Settings of the comparison methods.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BaselineConfig {
    pub logreg_l2: f64,
    pub svc_c: f64,
    pub svc_iterations: usize,
    /// Summary statistics split into tumor and stroma blocks when the
    /// cohort has tissue categories.
    pub split_by_tissue: bool,
    pub flat_gin: FlatGinConfig,
}

impl Default for BaselineConfig {
    fn default() -> Self {
        Self {
            logreg_l2: 1.0,
            svc_c: 1.0,
            svc_iterations: 2000,
            split_by_tissue: true,
            flat_gin: FlatGinConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FlatGinConfig {
    pub k_neighbors: usize,
    pub n_conv_layers: usize,
    pub dropout_p: f64,
    pub max_epochs: usize,
    pub early_stop_patience: usize,
    pub inner_folds: usize,
    pub lr_grid: Vec<f64>,
    pub hidden_grid: Vec<usize>,
}

impl Default for FlatGinConfig {
    fn default() -> Self {
        Self {
            k_neighbors: 3,
            n_conv_layers: 3,
            dropout_p: 0.2,
            max_epochs: 100,
            early_stop_patience: 10,
            inner_folds: 5,
            lr_grid: vec![1e-3, 1e-4],
            hidden_grid: vec![32, 64],
        }
    }
}

/// The run configuration file: cohort location, fold count, training and
/// baseline settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Cohort config file; relative paths resolve against the run file.
    pub cohort: Option<PathBuf>,
    pub folds: usize,
    pub train: TrainConfig,
    pub baselines: BaselineConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            cohort: None,
            folds: 5,
            train: TrainConfig::default(),
            baselines: BaselineConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml_str(text: &str, base_dir: Option<&Path>) -> Result<Self, PipelineError> {
        let mut cfg: RunConfig = toml::from_str(text).map_err(|e| PipelineError::InvalidConfig(e.message().to_string()))?;
        if let (Some(p), Some(base)) = (&cfg.cohort, base_dir) {
            if p.is_relative() {
                cfg.cohort = Some(base.join(p));
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_toml_file(path: &Path) -> Result<Self, PipelineError> {
        let text = std::fs::read_to_string(path).map_err(|e| PipelineError::Io(format!("{}: {e}", path.display())))?;
        Self::from_toml_str(&text, path.parent())
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        if self.folds < 2 {
            return Err(PipelineError::InvalidConfig("folds must be at least 2".into()));
        }
        let b = &self.baselines;
        if !(b.logreg_l2 >= 0.0 && b.svc_c > 0.0 && b.svc_iterations > 0) {
            return Err(PipelineError::InvalidConfig("baseline regularization must be positive".into()));
        }
        let f = &b.flat_gin;
        if f.lr_grid.is_empty() || f.hidden_grid.is_empty() || f.lr_grid.iter().any(|&lr| !(lr > 0.0)) || f.hidden_grid.contains(&0) {
            return Err(PipelineError::InvalidConfig("flat_gin grid must be non-empty and positive".into()));
        }
        if f.k_neighbors == 0 || f.max_epochs == 0 || f.inner_folds < 2 {
            return Err(PipelineError::InvalidConfig("flat_gin needs k_neighbors, max_epochs >= 1 and inner_folds >= 2".into()));
        }
        self.train.validate()
    }

    /// Hex SHA-256 of the canonical JSON of everything except the cohort
    /// location.
    pub fn hash(&self) -> String {
        hex(&self.hash_bytes())
    }

    pub fn hash_bytes(&self) -> [u8; 32] {
        let canonical = serde_json::json!({
            "folds": self.folds,
            "train": self.train,
            "baselines": self.baselines,
        });
        Sha256::digest(serde_json::to_vec(&canonical).expect("config serializes")).into()
    }
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// SplitMix64 finalizer; derives independent child seeds from a base seed
/// and a path of tags.
pub fn derive_seed(base: u64, tags: &[u64]) -> u64 {
    let mut z = base;
    for &t in tags {
        z = z.wrapping_add(0x9E37_79B9_7F4A_7C15).wrapping_add(t.wrapping_mul(0xD6E8_FEB8_6659_FD93));
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^= z >> 31;
    }
    z
}
