//! Synthetic cohorts whose outcome signal lives only in the spatial
//! arrangement of cell types.
//!
//! Every core has exactly the same cell-type composition. Long-survival
//! patients have types laid out in smooth segregated patches; for
//! Short-survival patients a `mixing_strength` share of cells swap types at
//! random, interleaving the patches without changing the composition.

use std::f64::consts::PI;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cell_table::{derive_binary_label, Cell, CellColumns, ClinicalRecord, Cohort, CohortConfig, Core, OneHotColumn, SurvivalLabel};
use crate::graph_builder::GraphBuildConfig;
use crate::pipeline::{derive_seed, LevelConfig, RunConfig, TrainConfig};

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid synth config: {0}")]
    InvalidConfig(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub seed: u64,
    pub n_patients: usize,
    pub cores_per_patient: usize,
    /// Inclusive range of cells per core.
    pub cells_per_core: (usize, usize),
    pub n_cell_types: usize,
    /// Share of cells whose types are shuffled in Short cores.
    pub mixing_strength: f64,
    /// Probability that a patient's stage is set from its label rather
    /// than by a fair coin.
    pub stage_signal: f64,
    /// Share of Long patients without an observed event.
    pub censor_rate: f64,
    pub label_threshold_days: f64,
    /// Mean spacing between neighbouring cells.
    pub cell_spacing_um: f64,
    /// Typical size of the segregated patches.
    pub patch_size_um: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            n_patients: 60,
            cores_per_patient: 1,
            cells_per_core: (900, 1100),
            n_cell_types: 4,
            mixing_strength: 1.0,
            stage_signal: 0.0,
            censor_rate: 0.2,
            label_threshold_days: 1730.0,
            cell_spacing_um: 10.0,
            patch_size_um: 60.0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |m: &str| Err(SynthError::InvalidConfig(m.to_string()));
        if self.n_patients < 2 || self.cores_per_patient == 0 || self.n_cell_types < 2 {
            return bad("need at least 2 patients, 1 core per patient and 2 cell types");
        }
        if self.cells_per_core.0 == 0 || self.cells_per_core.0 > self.cells_per_core.1 {
            return bad("cells_per_core must be a non-empty positive range");
        }
        for (name, v) in [("mixing_strength", self.mixing_strength), ("stage_signal", self.stage_signal), ("censor_rate", self.censor_rate)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(SynthError::InvalidConfig(format!("{name} must lie in [0, 1]")));
            }
        }
        for (name, v) in [
            ("label_threshold_days", self.label_threshold_days),
            ("cell_spacing_um", self.cell_spacing_um),
            ("patch_size_um", self.patch_size_um),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(SynthError::InvalidConfig(format!("{name} must be positive")));
            }
        }
        Ok(())
    }

    pub fn type_name(t: usize) -> String {
        format!("t{t}")
    }

    /// Cohort config matching the files written by [`write_cohort`].
    pub fn cohort_config(&self) -> CohortConfig {
        let mut c = CohortConfig::new(self.label_threshold_days);
        c.cell_columns = CellColumns {
            cell_id: Some("cell_id".into()),
            one_hot: Some(OneHotColumn {
                column: "cell_type".into(),
                levels: (0..self.n_cell_types).map(Self::type_name).collect(),
            }),
            ..CellColumns::default()
        };
        c
    }
}

/// A generated cohort plus the ground truth the files do not carry.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthCohort {
    pub cores: Vec<Core>,
    pub clinical: Vec<ClinicalRecord>,
    /// Raw stage strings as written to the clinical file.
    pub stage_raw: Vec<String>,
    /// Planted label of each patient (before censoring affects anything).
    pub planted: Vec<SurvivalLabel>,
    /// Cell type of every cell, per core.
    pub cell_types: Vec<Vec<usize>>,
}

impl SynthCohort {
    pub fn cohort(&self) -> Cohort {
        Cohort::new(self.cores.clone(), self.clinical.clone())
    }
}

/// Per-type counts identical for every core of size `n`.
pub fn composition(n: usize, n_types: usize) -> Vec<usize> {
    (0..n_types).map(|t| n / n_types + usize::from(t < n % n_types)).collect()
}

struct Field {
    waves: Vec<([f64; 2], f64)>,
}

impl Field {
    fn new(rng: &mut impl Rng, patch: f64) -> Self {
        let k = PI / patch;
        let waves = (0..6)
            .map(|_| {
                let angle = rng.random_range(0.0..PI);
                let phase = rng.random_range(0.0..2.0 * PI);
                ([k * angle.cos(), k * angle.sin()], phase)
            })
            .collect();
        Self { waves }
    }

    fn at(&self, p: [f64; 2]) -> f64 {
        self.waves.iter().map(|(w, ph)| (w[0] * p[0] + w[1] * p[1] + ph).cos()).sum()
    }
}

fn generate_core(cfg: &SynthConfig, label: SurvivalLabel, rng: &mut ChaCha8Rng) -> (Vec<[f64; 2]>, Vec<usize>) {
    let n = rng.random_range(cfg.cells_per_core.0..=cfg.cells_per_core.1);
    let side = (n as f64).sqrt() * cfg.cell_spacing_um;
    let coords: Vec<[f64; 2]> = (0..n).map(|_| [rng.random_range(0.0..side), rng.random_range(0.0..side)]).collect();

    // Segregated layout: types by quantile of a smooth random field.
    let field = Field::new(rng, cfg.patch_size_um);
    let values: Vec<f64> = coords.iter().map(|&p| field.at(p)).collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]).then(a.cmp(&b)));
    let mut types = vec![0; n];
    let mut next = 0;
    for (t, count) in composition(n, cfg.n_cell_types).into_iter().enumerate() {
        for &i in &order[next..next + count] {
            types[i] = t;
        }
        next += count;
    }

    if label == SurvivalLabel::Short {
        let n_mix = (cfg.mixing_strength * n as f64).round() as usize;
        let mut chosen: Vec<usize> = (0..n).collect();
        chosen.shuffle(rng);
        chosen.truncate(n_mix);
        let mut pool: Vec<usize> = chosen.iter().map(|&i| types[i]).collect();
        pool.shuffle(rng);
        for (&i, t) in chosen.iter().zip(pool) {
            types[i] = t;
        }
    }
    (coords, types)
}

fn truncated_exp(rng: &mut ChaCha8Rng, mean: f64, upper: f64) -> f64 {
    let u: f64 = rng.random();
    -mean * (1.0 - u * (1.0 - (-upper / mean).exp())).ln()
}

/// Deterministic cohort from `cfg`; patients are generated in parallel with
/// per-patient seeds so the result does not depend on thread count.
pub fn generate_cohort(cfg: &SynthConfig) -> Result<SynthCohort, SynthError> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &[0]));
    let n_short = cfg.n_patients / 2;
    let mut planted: Vec<SurvivalLabel> = (0..cfg.n_patients).map(|i| if i < n_short { SurvivalLabel::Short } else { SurvivalLabel::Long }).collect();
    planted.shuffle(&mut rng);

    struct Patient {
        cores: Vec<(Vec<[f64; 2]>, Vec<usize>)>,
        follow_up: f64,
        event: bool,
        stage_high: bool,
    }
    let threshold = cfg.label_threshold_days;
    let patients: Vec<Patient> = planted
        .par_iter()
        .enumerate()
        .map(|(p, &label)| {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &[1, p as u64]));
            let cores = (0..cfg.cores_per_patient).map(|_| generate_core(cfg, label, &mut rng)).collect();
            let (follow_up, event) = match label {
                SurvivalLabel::Short => (truncated_exp(&mut rng, threshold / 2.0, threshold).max(1.0).min(threshold - 1.0), true),
                SurvivalLabel::Long => {
                    let extra: f64 = -(threshold / 2.0) * (1.0 - rng.random::<f64>()).ln();
                    (threshold + extra, rng.random::<f64>() >= cfg.censor_rate)
                }
            };
            let stage_high = if rng.random::<f64>() < cfg.stage_signal { label == SurvivalLabel::Short } else { rng.random::<bool>() };
            Patient {
                cores,
                follow_up,
                event,
                stage_high,
            }
        })
        .collect();

    let mut out = SynthCohort {
        cores: Vec::new(),
        clinical: Vec::new(),
        stage_raw: Vec::new(),
        planted: planted.clone(),
        cell_types: Vec::new(),
    };
    let cohort_cfg = cfg.cohort_config();
    for (p, patient) in patients.into_iter().enumerate() {
        let patient_id = format!("P{p:03}");
        for (c, (coords, types)) in patient.cores.into_iter().enumerate() {
            let core_id = format!("{patient_id}_C{c}");
            let cells = coords
                .iter()
                .zip(&types)
                .enumerate()
                .map(|(i, (&[x, y], &t))| {
                    let mut features = vec![0.0; cfg.n_cell_types];
                    features[t] = 1.0;
                    Cell {
                        cell_id: format!("{core_id}_{i}"),
                        x_um: x,
                        y_um: y,
                        features,
                        tissue_category: None,
                    }
                })
                .collect();
            out.cores.push(Core {
                core_id,
                patient_id: patient_id.clone(),
                cells,
            });
            out.cell_types.push(types);
        }
        out.clinical.push(ClinicalRecord {
            patient_id,
            follow_up: patient.follow_up,
            event: patient.event,
            stage_binary: patient.stage_high,
            label: derive_binary_label(patient.follow_up, patient.event, threshold, cohort_cfg.censor_policy),
        });
        out.stage_raw.push(if patient.stage_high { "III" } else { "I" }.to_string());
    }
    Ok(out)
}

/// Run settings sized for synthetic cohorts on a laptop: windows of about
/// a hundred cells, narrow networks and short training.
pub fn desk_run_config() -> RunConfig {
    let level = LevelConfig {
        hidden_dim: 16,
        ..LevelConfig::default()
    };
    let mut run = RunConfig {
        train: TrainConfig {
            lr: 1e-3,
            max_epochs: 15,
            early_stop_patience: 4,
            subsample_model: level.clone(),
            core_model: level,
            graph: GraphBuildConfig {
                n_target: 100,
                ..GraphBuildConfig::default()
            },
            ..TrainConfig::default()
        },
        ..RunConfig::default()
    };
    run.baselines.flat_gin.max_epochs = 15;
    run.baselines.flat_gin.early_stop_patience = 4;
    run.baselines.flat_gin.hidden_grid = vec![16, 32];
    run.baselines.flat_gin.inner_folds = 3;
    run
}

/// Paths written by [`write_cohort`].
#[derive(Debug, Clone, PartialEq)]
pub struct SynthFiles {
    pub cells: PathBuf,
    pub clinical: PathBuf,
    pub cohort_config: PathBuf,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> SynthError + '_ {
    move |source| SynthError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Writes `cells.csv`, `clinical.csv` and a `cohort.toml` pointing at them
/// (relative paths) into `dir`.
pub fn write_cohort(dir: &Path, cohort: &SynthCohort, cfg: &SynthConfig) -> Result<SynthFiles, SynthError> {
    std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    let files = SynthFiles {
        cells: dir.join("cells.csv"),
        clinical: dir.join("clinical.csv"),
        cohort_config: dir.join("cohort.toml"),
    };

    let mut w = std::io::BufWriter::new(std::fs::File::create(&files.cells).map_err(io_err(&files.cells))?);
    let mut text = String::from("patient_id,core_id,cell_id,x,y,cell_type\n");
    for (core, types) in cohort.cores.iter().zip(&cohort.cell_types) {
        for (cell, &t) in core.cells.iter().zip(types) {
            text.push_str(&format!("{},{},{},{},{},{}\n", core.patient_id, core.core_id, cell.cell_id, cell.x_um, cell.y_um, SynthConfig::type_name(t)));
        }
        w.write_all(text.as_bytes()).map_err(io_err(&files.cells))?;
        text.clear();
    }
    w.flush().map_err(io_err(&files.cells))?;

    let mut clinical = String::from("patient_id,follow_up_days,event,stage\n");
    for (rec, stage) in cohort.clinical.iter().zip(&cohort.stage_raw) {
        clinical.push_str(&format!("{},{},{},{}\n", rec.patient_id, rec.follow_up, rec.event as u8, stage));
    }
    std::fs::write(&files.clinical, clinical).map_err(io_err(&files.clinical))?;

    let mut cc = cfg.cohort_config();
    cc.cells_path = Some("cells.csv".into());
    cc.clinical_path = Some("clinical.csv".into());
    std::fs::write(&files.cohort_config, cc.to_toml_string()).map_err(io_err(&files.cohort_config))?;
    Ok(files)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SynthConfig {
        SynthConfig {
            n_patients: 10,
            cells_per_core: (80, 120),
            ..SynthConfig::default()
        }
    }

    #[test]
    fn same_seed_same_cohort() {
        let a = generate_cohort(&small()).unwrap();
        let b = generate_cohort(&small()).unwrap();
        assert_eq!(a, b);
        let c = generate_cohort(&SynthConfig { seed: 1, ..small() }).unwrap();
        assert_ne!(a.cores, c.cores);
    }

    #[test]
    fn every_core_has_the_fixed_composition() {
        let s = generate_cohort(&small()).unwrap();
        for types in &s.cell_types {
            let mut counts = vec![0; 4];
            for &t in types {
                counts[t] += 1;
            }
            assert_eq!(counts, composition(types.len(), 4));
        }
    }

    #[test]
    fn labels_follow_the_planted_split() {
        let s = generate_cohort(&SynthConfig { n_patients: 40, ..small() }).unwrap();
        for (rec, planted) in s.clinical.iter().zip(&s.planted) {
            assert_eq!(rec.label, Some(*planted));
        }
        assert_eq!(s.planted.iter().filter(|l| l.is_short()).count(), 20);
    }

    #[test]
    fn full_stage_signal_copies_label() {
        let s = generate_cohort(&SynthConfig { stage_signal: 1.0, ..small() }).unwrap();
        for (rec, planted) in s.clinical.iter().zip(&s.planted) {
            assert_eq!(rec.stage_binary, planted.is_short());
        }
    }

    #[test]
    fn rejects_bad_rates() {
        assert!(generate_cohort(&SynthConfig { mixing_strength: 1.5, ..small() }).is_err());
        assert!(generate_cohort(&SynthConfig { cells_per_core: (10, 5), ..small() }).is_err());
    }
}
