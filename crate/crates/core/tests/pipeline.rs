//! Cross-validation plumbing: fold hygiene, normalization leakage, score
//! aggregation, stage wiring and early training progress.

use std::collections::BTreeSet;

use higine::cell_table::{attach_stage_feature, SurvivalLabel};
use higine::graph_builder::{Graph, Provenance};
use higine::pipeline::{
    aggregate_patient_score, build_cohort_graphs, make_folds, run_single_fold, train_model, CoreProbs, CvOptions, Example, NormStats, PipelineError, TrainOptions,
};
use higine::synth::{desk_run_config, generate_cohort, SynthConfig};
use ndarray::Array2;

fn tiny_cohort(seed: u64, n: usize) -> higine::synth::SynthCohort {
    generate_cohort(&SynthConfig {
        seed,
        n_patients: n,
        cells_per_core: (40, 50),
        stage_signal: 0.5,
        ..SynthConfig::default()
    })
    .unwrap()
}

#[test]
fn folds_partition_labeled_patients_with_balanced_labels() {
    let synth = tiny_cohort(1, 30);
    let cohort = synth.cohort();
    let labeled: BTreeSet<String> = cohort.labeled_patients().iter().map(|r| r.patient_id.clone()).collect();
    let folds = make_folds(&cohort, 5, 9, 0.2).unwrap();
    let mut seen = BTreeSet::new();
    let mut shorts = Vec::new();
    for f in &folds {
        for id in &f.test_ids {
            assert!(seen.insert(id.clone()), "{id} tested twice");
        }
        let train: BTreeSet<&String> = f.train_ids.iter().collect();
        let val: BTreeSet<&String> = f.val_ids.iter().collect();
        let test: BTreeSet<&String> = f.test_ids.iter().collect();
        assert!(train.is_disjoint(&val) && train.is_disjoint(&test) && val.is_disjoint(&test));
        assert_eq!(train.len() + val.len() + test.len(), labeled.len());
        let short = f
            .test_ids
            .iter()
            .filter(|id| cohort.record(id).unwrap().label == Some(SurvivalLabel::Short))
            .count();
        shorts.push(short);
    }
    assert_eq!(seen, labeled);
    assert!(shorts.iter().max().unwrap() - shorts.iter().min().unwrap() <= 1, "{shorts:?}");
}

#[test]
fn test_patients_never_influence_training() {
    let synth = tiny_cohort(2, 12);
    let cohort = synth.cohort();
    let mut run = desk_run_config();
    run.folds = 3;
    run.train.max_epochs = 2;
    run.train.graph.n_target = 20;
    run.train.subsample_model.hidden_dim = 4;
    run.train.core_model.hidden_dim = 4;
    let split = make_folds(&cohort, 3, run.train.seed, run.train.val_fraction).unwrap().remove(0);
    let opts = CvOptions::single(&run.train, false);
    let base = run_single_fold(&cohort, &run, &split, &opts).unwrap().remove(0);

    // Normalization statistics come from training and validation cells only.
    let fit: BTreeSet<&String> = split.train_ids.iter().chain(&split.val_ids).collect();
    let rows: Vec<Vec<f64>> = cohort
        .cores
        .iter()
        .filter(|c| fit.contains(&c.patient_id))
        .flat_map(|c| c.node_feature_rows(false))
        .collect();
    let expect = NormStats::fit(rows.iter().map(Vec::as_slice), cohort.feature_dim());
    assert_eq!(base.norm, expect);

    // Rewriting every held-out cell leaves the fitted models unchanged.
    let test: BTreeSet<&String> = split.test_ids.iter().collect();
    let mut altered = cohort.clone();
    for core in altered.cores.iter_mut().filter(|c| test.contains(&c.patient_id)) {
        for cell in &mut core.cells {
            cell.features.iter_mut().for_each(|x| *x = *x * 50.0 + 3.0);
        }
    }
    let again = run_single_fold(&altered, &run, &split, &opts).unwrap().remove(0);
    assert_eq!(again.norm, base.norm);
    assert_eq!(again.subsample_model.params, base.subsample_model.params);
    assert_eq!(again.core_model.unwrap().params, base.core_model.unwrap().params);
    assert_ne!(again.predictions, base.predictions);
}

#[test]
fn patient_score_is_the_flat_mean() {
    let cores = vec![
        CoreProbs {
            core_id: "a".into(),
            probs: vec![0.2, 0.4],
        },
        CoreProbs {
            core_id: "b".into(),
            probs: vec![0.9],
        },
    ];
    let p = aggregate_patient_score("p", cores).unwrap();
    assert!((p.prob_short - 0.5).abs() < 1e-15);
    assert_eq!(p.risk_score, p.prob_short);
    assert!(matches!(aggregate_patient_score("p", vec![]), Err(PipelineError::NoPredictions(_))));
    let bad = vec![CoreProbs {
        core_id: "a".into(),
        probs: vec![1.5],
    }];
    assert!(aggregate_patient_score("p", bad).is_err());
}

#[test]
fn stage_feature_is_one_trailing_constant_column() {
    let feats = Array2::from_shape_fn((3, 2), |(r, c)| (r * 2 + c) as f64);
    let g = Graph::new(feats.clone(), vec![[0.0, 0.0], [1.0, 0.0], [2.0, 0.0]], vec![[0, 1], [1, 0]], vec![1.0, 1.0], Provenance::CoreLevel);
    for stage in [false, true] {
        let fused = attach_stage_feature(&g, stage).unwrap();
        assert_eq!(fused.feature_dim(), 3);
        assert_eq!(fused.node_features.slice(ndarray::s![.., ..2]), feats);
        assert!(fused.node_features.column(2).iter().all(|&x| x == f64::from(u8::from(stage))));
        assert_eq!((fused.edges.clone(), fused.edge_weights.clone()), (g.edges.clone(), g.edge_weights.clone()));
        assert!(attach_stage_feature(&fused, stage).is_err());
    }
}

#[test]
fn training_loss_drops_below_chance_within_five_epochs() {
    let synth = generate_cohort(&SynthConfig {
        seed: 3,
        n_patients: 16,
        cells_per_core: (200, 220),
        ..SynthConfig::default()
    })
    .unwrap();
    let cohort = synth.cohort();
    let mut run = desk_run_config();
    run.train.max_epochs = 5;
    run.train.early_stop_patience = 5;
    let structure = build_cohort_graphs(&cohort, &run.train.graph, false).unwrap();
    let rows: Vec<Vec<f64>> = cohort.cores.iter().flat_map(|c| c.node_feature_rows(false)).collect();
    let norm = NormStats::fit(rows.iter().map(Vec::as_slice), cohort.feature_dim());
    let cores: Vec<_> = structure.iter().map(|c| c.normalized(&norm)).collect();
    let mut examples = Vec::new();
    for core in &cores {
        let label = cohort.record(&core.patient_id).unwrap().label.unwrap().class_index();
        examples.extend(core.subsample_graphs().map(|g| Example {
            graph: g,
            extra: Vec::new(),
            label,
        }));
    }
    let cfg = run.train.subsample_model.model_config(cohort.feature_dim(), true);
    let model = train_model(&examples, &[], &cfg, &TrainOptions::from_config(&run.train, 1)).unwrap();
    let best = model.log.epochs.iter().map(|e| e.train_loss).fold(f64::INFINITY, f64::min);
    assert!(best < std::f64::consts::LN_2, "best training loss {best}");
}
