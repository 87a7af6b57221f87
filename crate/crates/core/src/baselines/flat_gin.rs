//! Single-level GIN over the k-nearest-neighbour graph of all cells of a
//! core, with the binary stage concatenated to the readout.

use std::collections::BTreeMap;

use ndarray::Array2;

use super::BaselineError;
use crate::autodiff::softmax;
use crate::cell_table::Core;
use crate::gnn::{predict, ModelConfig};
use crate::graph_builder::{knn_edges, Graph, Provenance};
use crate::pipeline::{derive_seed, evaluate_loss, stratified_kfold, train_model, ClassWeighting, Example, FlatGinConfig, NormStats, StratumKey, TrainOptions, TrainedModel};

/// Cell graph of a whole core with unit edge weights.
pub fn core_knn_graph(core: &Core, rows: &[Vec<f64>], k: usize) -> Graph {
    let coords = core.coords();
    let dim = rows.first().map_or(0, Vec::len);
    let flat: Vec<f64> = rows.iter().flatten().copied().collect();
    let features = Array2::from_shape_vec((rows.len(), dim), flat).expect("rows share one width");
    let edges = knn_edges(&coords, k);
    let weights = vec![1.0; edges.len()];
    Graph::new(features, coords, edges, weights, Provenance::Subsample)
}

pub fn flat_gin_config(in_dim: usize, hidden_dim: usize, cfg: &FlatGinConfig) -> ModelConfig {
    ModelConfig {
        in_dim,
        hidden_dim,
        n_conv_layers: cfg.n_conv_layers,
        mlp_head_layers: 2,
        sag_ratio: 1.0,
        dropout_p: cfg.dropout_p,
        use_edge_weights: false,
        use_sag_pool: false,
        readout_extra: 1,
        n_classes: 2,
    }
}

/// Graphs of one patient plus its label and stage.
#[derive(Debug, Clone)]
pub struct PatientGraphs {
    pub graphs: Vec<Graph>,
    pub label: usize,
    pub stage: bool,
}

/// Shared training settings of the flat model.
#[derive(Debug, Clone)]
pub struct FlatGinTraining {
    pub weight_decay: f64,
    pub class_weighting: ClassWeighting,
    pub seed: u64,
}

fn examples<'a>(patients: &'a BTreeMap<String, PatientGraphs>, ids: &[String]) -> Vec<Example<'a>> {
    ids.iter()
        .filter_map(|id| patients.get(id))
        .flat_map(|p| {
            p.graphs.iter().map(move |g| Example {
                graph: g,
                extra: vec![p.stage as u8 as f64],
                label: p.label,
            })
        })
        .collect()
}

fn fit_one(patients: &BTreeMap<String, PatientGraphs>, train: &[String], val: &[String], config: &ModelConfig, lr: f64, cfg: &FlatGinConfig, t: &FlatGinTraining, seed: u64) -> Result<TrainedModel, BaselineError> {
    let opts = TrainOptions {
        lr,
        weight_decay: t.weight_decay,
        max_epochs: cfg.max_epochs,
        patience: cfg.early_stop_patience,
        class_weighting: t.class_weighting,
        seed,
    };
    Ok(train_model(&examples(patients, train), &examples(patients, val), config, &opts)?)
}

/// Picks learning rate and hidden width by inner cross-validated loss on
/// the training patients, then trains on `train` with early stopping on
/// `val`.
pub fn fit_flat_gin(
    patients: &BTreeMap<String, PatientGraphs>,
    keys: &[StratumKey],
    train: &[String],
    val: &[String],
    cfg: &FlatGinConfig,
    t: &FlatGinTraining,
) -> Result<TrainedModel, BaselineError> {
    let in_dim = patients
        .values()
        .flat_map(|p| p.graphs.first())
        .next()
        .map(Graph::feature_dim)
        .ok_or_else(|| BaselineError::InvalidInput("no graphs".into()))?;
    let grid: Vec<(f64, usize)> = cfg.lr_grid.iter().flat_map(|&lr| cfg.hidden_grid.iter().map(move |&h| (lr, h))).collect();
    let mut chosen = grid[0];
    if grid.len() > 1 && keys.len() >= cfg.inner_folds {
        let inner = stratified_kfold(keys, cfg.inner_folds, derive_seed(t.seed, &[0x1a]))?;
        let mut best = f64::INFINITY;
        for (gi, &(lr, hidden)) in grid.iter().enumerate() {
            let config = flat_gin_config(in_dim, hidden, cfg);
            let mut total = 0.0;
            for (fi, held) in inner.iter().enumerate() {
                let inner_train: Vec<String> = keys.iter().map(|k| k.patient_id.clone()).filter(|id| !held.contains(id)).collect();
                let model = fit_one(patients, &inner_train, held, &config, lr, cfg, t, derive_seed(t.seed, &[gi as u64, fi as u64]))?;
                let held_ex = examples(patients, held);
                let w = vec![1.0; 2];
                total += evaluate_loss(&held_ex, &model.params, &model.config, &w)?;
            }
            let score = total / inner.len() as f64;
            log::debug!("flat GIN lr {lr} hidden {hidden}: inner loss {score:.4}");
            if score < best {
                best = score;
                chosen = (lr, hidden);
            }
        }
    }
    let config = flat_gin_config(in_dim, chosen.1, cfg);
    fit_one(patients, train, val, &config, chosen.0, cfg, t, derive_seed(t.seed, &[u64::MAX]))
}

/// Short probability of a patient: logits averaged over its cores, then
/// softmax.
pub fn predict_flat_gin(model: &TrainedModel, patient: &PatientGraphs) -> Result<f64, BaselineError> {
    if patient.graphs.is_empty() {
        return Err(BaselineError::InvalidInput("patient without cores".into()));
    }
    let mut mean = vec![0.0; model.config.n_classes];
    for g in &patient.graphs {
        let p = predict(g, &[patient.stage as u8 as f64], &model.params, &model.config).map_err(crate::pipeline::PipelineError::from)?;
        for (m, l) in mean.iter_mut().zip(&p.logits) {
            *m += l / patient.graphs.len() as f64;
        }
    }
    Ok(softmax(&mean)[1])
}

/// Graphs for every listed patient with features standardized by `norm`.
pub fn patient_graphs(cores: &[&Core], norm: &NormStats, with_tissue: bool, k: usize) -> Vec<Graph> {
    cores
        .iter()
        .map(|c| {
            let rows: Vec<Vec<f64>> = c.node_feature_rows(with_tissue).iter().map(|r| norm.apply_row(r)).collect();
            core_knn_graph(c, &rows, k)
        })
        .collect()
}
