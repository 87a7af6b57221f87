//! Subcommand implementations.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use clap::Args;
use higine::baselines::{run_baseline_cv, write_baseline_artifacts, BaselineMethod};
use higine::cell_table::Cohort;
use higine::gnn::{check_model_gradients, ModelConfig, ModelParams};
use higine::graph_builder::{radius_edges, write_graphs, Graph, Provenance, TaggedGraph};
use higine::pipeline::{
    build_cohort_graphs, load_fold, make_folds, run_cv, run_single_fold, score_patients, summarize, write_cv_artifacts, write_predictions, Arm, ArmResult, CvOptions, CvResult,
    PredictionRow, RUN_MANIFEST_FILE,
};
use higine::synth::{desk_run_config, generate_cohort, write_cohort, SynthConfig};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use serde_json::json;

use crate::error::CliError;
use crate::inputs::{load_cohort, manifest_for, resolve};
use crate::manifest::{write_json, RunManifest};
use crate::{ArmArgs, RunArgs};

/// The arms of the ablation table, from plain GIN to the full model.
const ABLATION_ARMS: [Arm; 5] = [
    Arm {
        edge_weights: false,
        hierarchy: false,
        stage_fusion: false,
    },
    Arm {
        edge_weights: true,
        hierarchy: false,
        stage_fusion: false,
    },
    Arm {
        edge_weights: false,
        hierarchy: true,
        stage_fusion: false,
    },
    Arm {
        edge_weights: true,
        hierarchy: true,
        stage_fusion: false,
    },
    Arm {
        edge_weights: true,
        hierarchy: true,
        stage_fusion: true,
    },
];

#[derive(Debug, Serialize)]
struct CohortSummary {
    patients: usize,
    cores: usize,
    cells: usize,
    min_cells_per_core: usize,
    max_cells_per_core: usize,
    feature_dim: usize,
    tissue_categories: bool,
    labeled_short: usize,
    labeled_long: usize,
    unlabeled: usize,
    events: usize,
    high_stage: usize,
    patients_without_cores: usize,
}

fn summarize_cohort(cohort: &Cohort) -> CohortSummary {
    let sizes: Vec<usize> = cohort.cores.iter().map(|c| c.cells.len()).collect();
    let with_cores = cohort.cores_by_patient();
    let labeled = cohort.labeled_patients();
    let short = labeled.iter().filter(|r| r.label.is_some_and(|l| l.is_short())).count();
    CohortSummary {
        patients: cohort.clinical.len(),
        cores: cohort.cores.len(),
        cells: sizes.iter().sum(),
        min_cells_per_core: sizes.iter().copied().min().unwrap_or(0),
        max_cells_per_core: sizes.iter().copied().max().unwrap_or(0),
        feature_dim: cohort.feature_dim(),
        tissue_categories: cohort.has_tissue_categories(),
        labeled_short: short,
        labeled_long: labeled.len() - short,
        unlabeled: cohort.clinical.len() - labeled.len(),
        events: cohort.clinical.iter().filter(|r| r.event).count(),
        high_stage: cohort.clinical.iter().filter(|r| r.stage_binary).count(),
        patients_without_cores: cohort.clinical.iter().filter(|r| !with_cores.contains_key(r.patient_id.as_str())).count(),
    }
}

pub fn ingest(cohort_path: &Path, out: Option<&Path>) -> Result<(), CliError> {
    let loaded = load_cohort(cohort_path)?;
    let summary = summarize_cohort(&loaded.cohort);
    println!("{}", serde_json::to_string_pretty(&summary).expect("summary serializes"));
    if let Some(path) = out {
        write_json(path, &summary)?;
    }
    Ok(())
}

pub fn build_graphs(args: &RunArgs, out: &Path) -> Result<(), CliError> {
    let (run, loaded) = resolve(args, None)?;
    let structure = build_cohort_graphs(&loaded.cohort, &run.train.graph, loaded.with_tissue())?;
    let mut tagged = Vec::new();
    for core in &structure {
        for ov in &core.overlaps {
            for (i, g) in ov.subsamples.iter().enumerate() {
                tagged.push(TaggedGraph {
                    tag: format!("{}/{}/overlap={}/sub{i}", core.patient_id, core.core_id, ov.overlap),
                    graph: g.clone(),
                });
            }
            tagged.push(TaggedGraph {
                tag: format!("{}/{}/overlap={}/core", core.patient_id, core.core_id, ov.overlap),
                graph: ov.core_graph.clone(),
            });
        }
    }
    if let Some(dir) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    }
    write_graphs(out, &tagged)?;
    log::info!("wrote {} graphs from {} cores to {}", tagged.len(), structure.len(), out.display());
    Ok(())
}

pub fn train(args: &RunArgs, arm: ArmArgs, fold: usize, out: &Path) -> Result<(), CliError> {
    let (run, loaded) = resolve(args, Some(arm))?;
    if fold >= run.folds {
        return Err(CliError::Config(format!("--fold {fold} is out of range for {} folds", run.folds)));
    }
    manifest_for("train", &run, &loaded).write(out)?;
    let folds = make_folds(&loaded.cohort, run.folds, run.train.seed, run.train.val_fraction)?;
    let split = &folds[fold];
    let opts = CvOptions::single(&run.train, loaded.with_tissue());
    let mut results = run_single_fold(&loaded.cohort, &run, split, &opts)?;
    let fold_result = results.remove(0);
    let metrics = fold_result.metrics.clone();
    let result = CvResult {
        config: run.clone(),
        arms: vec![ArmResult {
            arm: opts.arms[0],
            config_hash: run.hash_bytes(),
            auroc: summarize(&[metrics.auroc]),
            c_index: summarize(&[metrics.c_index]),
            folds: vec![fold_result],
        }],
    };
    write_cv_artifacts(&result, &loaded.cohort, out)?;
    Ok(())
}

/// Inverse of [`Arm::name`].
fn parse_arm(name: &str) -> Result<Arm, CliError> {
    let mut arm = Arm {
        edge_weights: false,
        hierarchy: false,
        stage_fusion: false,
    };
    if name != "GIN" {
        for part in name.split('+') {
            match part {
                "E" => arm.edge_weights = true,
                "Hi" => arm.hierarchy = true,
                "CS" => arm.stage_fusion = true,
                _ => return Err(CliError::Data(format!("unknown arm `{name}` in fold manifest"))),
            }
        }
    }
    Ok(arm)
}

pub fn predict(args: &RunArgs, fold_dir: &Path, test_only: bool, out: &Path) -> Result<(), CliError> {
    let fold = load_fold(fold_dir)?;
    let arm = parse_arm(&fold.manifest.arm)?;
    let (mut run, loaded) = resolve(args, None)?;
    run.train = arm.apply(&run.train);
    let hash = run.hash();
    if hash != fold.manifest.config_hash {
        return Err(CliError::Config(format!(
            "run configuration hash {hash} does not match the checkpoints ({}); pass the configuration and flags used for training",
            fold.manifest.config_hash
        )));
    }
    let cohort = &loaded.cohort;
    let ids: Vec<String> = if test_only {
        fold.manifest.test_ids.clone()
    } else {
        cohort.clinical.iter().map(|r| r.patient_id.clone()).collect()
    };
    let by_patient = cohort.cores_by_patient();
    let ids: Vec<String> = ids.into_iter().filter(|id| by_patient.contains_key(id.as_str())).collect();
    if ids.is_empty() {
        return Err(CliError::Data("no patients with both cores and clinical records to score".into()));
    }
    let wanted: Vec<usize> = ids.iter().flat_map(|id| by_patient[id.as_str()].clone()).collect();
    let subset = Cohort::new(wanted.iter().map(|&i| cohort.cores[i].clone()).collect(), cohort.clinical.clone());
    let structure = build_cohort_graphs(&subset, &run.train.graph, loaded.with_tissue())?;
    let cores: Vec<_> = structure.iter().map(|c| c.normalized(&fold.manifest.normalization)).collect();
    let stages: BTreeMap<String, bool> = cohort.clinical.iter().map(|r| (r.patient_id.clone(), r.stage_binary)).collect();
    let fused = fold.core_model.as_ref().is_some_and(|m| m.config.in_dim == fold.subsample_model.config.embed_dim() + 1);
    let preds = score_patients(&cores, &ids, &fold.subsample_model, fold.core_model.as_ref(), fused.then_some(&stages))?;
    let mut rows = Vec::with_capacity(preds.len());
    for p in preds {
        let rec = cohort.record(&p.patient_id).ok_or_else(|| CliError::Data(format!("patient {} has no clinical record", p.patient_id)))?;
        rows.push(PredictionRow {
            patient_id: p.patient_id,
            fold: Some(fold.manifest.fold),
            prob_short: p.prob_short,
            label: rec.label,
            follow_up_days: rec.follow_up,
            event: rec.event,
        });
    }
    rows.sort_by(|a, b| a.patient_id.cmp(&b.patient_id));
    if let Some(dir) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    }
    write_predictions(out, &rows)?;
    Ok(())
}

pub fn cv(args: &RunArgs, arm: ArmArgs, ablation: bool, out: &Path) -> Result<(), CliError> {
    let (run, loaded) = resolve(args, if ablation { None } else { Some(arm) })?;
    manifest_for("cv", &run, &loaded).write(out)?;
    let mut opts = CvOptions::single(&run.train, loaded.with_tissue());
    opts.jobs = args.jobs;
    if ablation {
        opts.arms = ABLATION_ARMS.to_vec();
    }
    let result = run_cv(&loaded.cohort, &run, &opts)?;
    let metrics = write_cv_artifacts(&result, &loaded.cohort, out)?;
    for a in &result.arms {
        let cell = |s: &higine::pipeline::MetricSummary| match (s.mean, s.std) {
            (Some(m), Some(d)) => format!("{m:.3} ± {d:.3}"),
            _ => "n/a".into(),
        };
        println!("{:<10} AUROC {}  C-index {}", a.arm.name(), cell(&a.auroc), cell(&a.c_index));
    }
    log::info!("metrics written to {}", metrics.display());
    Ok(())
}

pub fn baseline(args: &RunArgs, method: &str, out: &Path) -> Result<(), CliError> {
    let method: BaselineMethod = method.parse()?;
    let (run, loaded) = resolve(args, None)?;
    manifest_for("baseline", &run, &loaded).write(out)?;
    let result = run_baseline_cv(&loaded.cohort, &run, method, args.jobs, loaded.with_tissue())?;
    write_baseline_artifacts(&result, &loaded.cohort, out)?;
    println!("{:<10} AUROC {:?}  C-index {:?}", method.name(), result.auroc.mean, result.c_index.mean);
    Ok(())
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Generator settings (TOML); flags below override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    n_patients: Option<usize>,
    #[arg(long)]
    cores_per_patient: Option<usize>,
    #[arg(long)]
    cells_min: Option<usize>,
    #[arg(long)]
    cells_max: Option<usize>,
    /// Share of cells whose types are shuffled in short-survival cores.
    #[arg(long)]
    mixing: Option<f64>,
    /// Probability that stage follows the label.
    #[arg(long)]
    stage_signal: Option<f64>,
    #[arg(long)]
    censor_rate: Option<f64>,
    #[arg(long)]
    out: PathBuf,
}

pub fn synth(args: &SynthArgs) -> Result<(), CliError> {
    let mut cfg = match &args.config {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| CliError::io(p, e))?;
            toml::from_str::<SynthConfig>(&text).map_err(|e| CliError::Config(format!("{}: {}", p.display(), e.message())))?
        }
        None => SynthConfig::default(),
    };
    if let Some(v) = args.seed {
        cfg.seed = v;
    }
    if let Some(v) = args.n_patients {
        cfg.n_patients = v;
    }
    if let Some(v) = args.cores_per_patient {
        cfg.cores_per_patient = v;
    }
    if let Some(v) = args.cells_min {
        cfg.cells_per_core.0 = v;
    }
    if let Some(v) = args.cells_max {
        cfg.cells_per_core.1 = v;
    }
    if let Some(v) = args.mixing {
        cfg.mixing_strength = v;
    }
    if let Some(v) = args.stage_signal {
        cfg.stage_signal = v;
    }
    if let Some(v) = args.censor_rate {
        cfg.censor_rate = v;
    }
    let cohort = generate_cohort(&cfg)?;
    let files = write_cohort(&args.out, &cohort, &cfg)?;
    let mut run = desk_run_config();
    run.cohort = Some(PathBuf::from("cohort.toml"));
    run.train.seed = cfg.seed;
    let run_path = args.out.join("run.toml");
    std::fs::write(&run_path, run.to_toml_string()).map_err(|e| CliError::io(&run_path, e))?;
    let settings = args.out.join("synth.toml");
    std::fs::write(&settings, toml::to_string(&cfg).expect("synth config serializes")).map_err(|e| CliError::io(&settings, e))?;
    println!("wrote {}, {}, {} and {}", files.cells.display(), files.clinical.display(), files.cohort_config.display(), run_path.display());
    Ok(())
}

#[derive(Debug, Args)]
pub struct GradCheckArgs {
    #[arg(long, default_value_t = 20)]
    graphs: usize,
    #[arg(long, default_value_t = 12)]
    nodes: usize,
    #[arg(long, default_value_t = 4)]
    features: usize,
    #[arg(long, default_value_t = 8)]
    hidden: usize,
    #[arg(long, default_value_t = 1e-4)]
    step: f64,
    #[arg(long, default_value_t = 1e-4)]
    tolerance: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Write the per-graph reports as JSON.
    #[arg(long)]
    out: Option<PathBuf>,
}

pub fn grad_check(args: &GradCheckArgs) -> Result<(), CliError> {
    if args.graphs == 0 || args.nodes == 0 || !(args.step > 0.0) || !(args.tolerance > 0.0) {
        return Err(CliError::Config("graphs, nodes, step and tolerance must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(args.seed);
    let mut cfg = ModelConfig::new(args.features);
    cfg.hidden_dim = args.hidden;
    cfg.dropout_p = 0.0;
    let mut reports = Vec::with_capacity(args.graphs);
    for i in 0..args.graphs {
        let coords: Vec<[f64; 2]> = (0..args.nodes).map(|_| [rng.random_range(0.0..40.0), rng.random_range(0.0..40.0)]).collect();
        let (edges, weights) = radius_edges(&coords, 20.0, 0.1);
        let feats = Array2::from_shape_fn((args.nodes, args.features), |_| rng.random_range(-1.0..1.0));
        let graph = Graph::new(feats, coords, edges, weights, Provenance::Subsample);
        let params = ModelParams::init(&cfg, &mut rng)?;
        reports.push(check_model_gradients(&graph, &[], i % 2, &params, &cfg, args.step, args.tolerance)?);
    }
    let worst = reports.iter().map(|r| r.max_rel_error).fold(0.0, f64::max);
    let passed = reports.iter().all(|r| r.passed);
    let doc = json!({
        "run_manifest": RUN_MANIFEST_FILE,
        "passed": passed,
        "max_rel_error": worst,
        "checked": reports.iter().map(|r| r.checked).sum::<usize>(),
        "skipped_at_kinks": reports.iter().map(|r| r.skipped_at_kinks).sum::<usize>(),
        "reports": reports,
    });
    if let Some(out) = &args.out {
        let mut m = RunManifest::new("grad-check");
        m.seed = Some(args.seed);
        m.write(out.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new(".")))?;
        write_json(out, &doc)?;
    }
    println!("gradient check {}: max relative error {worst:.3e}", if passed { "passed" } else { "FAILED" });
    if passed {
        Ok(())
    } else {
        Err(CliError::Numeric(format!("max relative error {worst:.3e} exceeds {}", args.tolerance)))
    }
}
