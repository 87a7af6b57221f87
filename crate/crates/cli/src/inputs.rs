//! Resolving run configuration and loading cohorts.

use std::path::{Path, PathBuf};

use higine::cell_table::{load_cell_table, load_clinical, Cohort, CohortConfig};
use higine::pipeline::RunConfig;

use crate::error::CliError;
use crate::manifest::RunManifest;
use crate::{ArmArgs, RunArgs};

/// A cohort with the configuration it was read under.
pub struct LoadedCohort {
    pub config_path: PathBuf,
    pub config: CohortConfig,
    pub cohort: Cohort,
}

impl LoadedCohort {
    /// Whether the tumor/stroma indicator joins the node features.
    pub fn with_tissue(&self) -> bool {
        self.config.tissue_as_node_feature && self.cohort.has_tissue_categories()
    }

    /// Fills the dataset fields of a manifest.
    pub fn describe(&self, m: &mut RunManifest) {
        m.cohort_config = Some(self.config_path.display().to_string());
        m.cells_file = self.config.cells_path.as_ref().map(|p| p.display().to_string());
        m.clinical_file = self.config.clinical_path.as_ref().map(|p| p.display().to_string());
        m.n_patients = Some(self.cohort.clinical.len());
        m.n_cores = Some(self.cohort.cores.len());
    }
}

pub fn load_cohort(path: &Path) -> Result<LoadedCohort, CliError> {
    let config = CohortConfig::from_toml_file(path)?;
    let cells = config
        .cells_path
        .clone()
        .ok_or_else(|| CliError::Config(format!("{}: cells_path is not set", path.display())))?;
    let clinical = config
        .clinical_path
        .clone()
        .ok_or_else(|| CliError::Config(format!("{}: clinical_path is not set", path.display())))?;
    let cores = load_cell_table(&cells, &config)?;
    let records = load_clinical(&clinical, &config)?;
    let cohort = Cohort::new(cores, records);
    for core in &cohort.cores {
        if cohort.record(&core.patient_id).is_none() {
            log::warn!("core {} belongs to patient {} without a clinical record", core.core_id, core.patient_id);
        }
    }
    Ok(LoadedCohort {
        config_path: path.to_path_buf(),
        config,
        cohort,
    })
}

/// Reads the run file (if any) and applies flag overrides.
pub fn resolve_run(args: &RunArgs, arm: Option<ArmArgs>) -> Result<RunConfig, CliError> {
    let mut run = match &args.config {
        Some(p) => RunConfig::from_toml_file(p)?,
        None => RunConfig::default(),
    };
    if let Some(c) = &args.cohort {
        run.cohort = Some(c.clone());
    }
    if let Some(k) = args.k {
        run.folds = k;
    }
    if let Some(seed) = args.seed {
        run.train.seed = seed;
    }
    if let Some(e) = args.epochs {
        run.train.max_epochs = e;
        run.baselines.flat_gin.max_epochs = e;
    }
    if let Some(a) = arm {
        if a.no_edges {
            run.train.use_edge_weights = false;
        }
        if a.no_hierarchy {
            run.train.use_hierarchy = false;
        }
        if a.fuse_stage {
            run.train.use_stage_fusion = true;
        }
    }
    if args.jobs == 0 {
        return Err(CliError::Config("--jobs must be at least 1".into()));
    }
    run.validate()?;
    Ok(run)
}

/// Resolved run configuration plus the cohort it names.
pub fn resolve(args: &RunArgs, arm: Option<ArmArgs>) -> Result<(RunConfig, LoadedCohort), CliError> {
    let run = resolve_run(args, arm)?;
    let path = run
        .cohort
        .clone()
        .ok_or_else(|| CliError::Config("no cohort given: pass --cohort or set `cohort` in the run config".into()))?;
    let cohort = load_cohort(&path)?;
    Ok((run, cohort))
}

/// A manifest describing a resolved run.
pub fn manifest_for(command: &str, run: &RunConfig, cohort: &LoadedCohort) -> RunManifest {
    let mut m = RunManifest::new(command);
    m.config_hash = Some(run.hash());
    m.seed = Some(run.train.seed);
    cohort.describe(&mut m);
    m
}
