use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::{derive_seed, ClassWeighting, PipelineError, TrainConfig};
use crate::autodiff::{AdamState, Tape};
use crate::gnn::{forward_model, predict, Checkpoint, ModelConfig, ModelParams};
use crate::graph_builder::Graph;

/// One labelled graph with its graph-level extras (empty unless the model
/// declares `readout_extra`).
#[derive(Debug, Clone)]
pub struct Example<'a> {
    pub graph: &'a Graph,
    pub extra: Vec<f64>,
    pub label: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrainOptions {
    pub lr: f64,
    pub weight_decay: f64,
    pub max_epochs: usize,
    pub patience: usize,
    pub class_weighting: ClassWeighting,
    pub seed: u64,
}

impl TrainOptions {
    pub fn from_config(cfg: &TrainConfig, seed: u64) -> Self {
        Self {
            lr: cfg.lr,
            weight_decay: cfg.weight_decay,
            max_epochs: cfg.max_epochs,
            patience: cfg.early_stop_patience,
            class_weighting: cfg.class_weighting,
            seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrainingLog {
    pub epochs: Vec<EpochLog>,
    /// 1-based epoch whose parameters were kept.
    pub best_epoch: usize,
    pub stopped_early: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainedModel {
    pub config: ModelConfig,
    pub params: ModelParams,
    pub optimizer: AdamState,
    pub log: TrainingLog,
}

impl TrainedModel {
    /// Restores a model from a checkpoint. The training log is not stored in
    /// checkpoints and comes back empty.
    pub fn from_checkpoint(ckpt: Checkpoint) -> Self {
        let optimizer = ckpt.adam.unwrap_or_else(|| AdamState::new(&ckpt.params.set, 0.0, 0.0));
        Self {
            config: ckpt.config,
            params: ckpt.params,
            optimizer,
            log: TrainingLog {
                epochs: Vec::new(),
                best_epoch: 0,
                stopped_early: false,
            },
        }
    }
}

/// Per-class loss weights. Inverse frequency gives `N / (C · N_c)`, so a
/// class three times rarer weighs three times more; absent classes get 0.
pub fn class_weights(labels: &[usize], n_classes: usize, weighting: ClassWeighting) -> Vec<f64> {
    match weighting {
        ClassWeighting::None => vec![1.0; n_classes],
        ClassWeighting::InverseFrequency => {
            let mut counts = vec![0usize; n_classes];
            for &l in labels {
                counts[l] += 1;
            }
            counts
                .iter()
                .map(|&c| if c == 0 { 0.0 } else { labels.len() as f64 / (n_classes * c) as f64 })
                .collect()
        }
    }
}

fn weighted_nll(probs: &[f64], label: usize, weights: &[f64]) -> f64 {
    -weights[label] * probs[label].max(f64::MIN_POSITIVE).ln()
}

/// Mean weighted cross-entropy in inference mode.
pub fn evaluate_loss(examples: &[Example], params: &ModelParams, config: &ModelConfig, weights: &[f64]) -> Result<f64, PipelineError> {
    let mut total = 0.0;
    for ex in examples {
        let p = predict(ex.graph, &ex.extra, params, config)?;
        total += weighted_nll(&p.probs, ex.label, weights);
    }
    Ok(total / examples.len().max(1) as f64)
}

/// Adam on per-graph (batch size 1) weighted cross-entropy with the graph
/// order reshuffled each epoch. With a validation set, training stops after
/// `patience` epochs without a lower validation loss and the best
/// parameters are returned; otherwise the last epoch's parameters are.
pub fn train_model(train: &[Example], val: &[Example], config: &ModelConfig, opts: &TrainOptions) -> Result<TrainedModel, PipelineError> {
    if train.is_empty() {
        return Err(PipelineError::NoTrainingData);
    }
    config.validate()?;
    let mut init_rng = ChaCha8Rng::seed_from_u64(derive_seed(opts.seed, &[0]));
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(opts.seed, &[1]));
    let mut params = ModelParams::init(config, &mut init_rng)?;
    let mut adam = AdamState::new(&params.set, opts.lr, opts.weight_decay);
    let labels: Vec<usize> = train.iter().map(|e| e.label).collect();
    let weights = class_weights(&labels, config.n_classes, opts.class_weighting);

    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut epochs = Vec::new();
    let mut best: Option<(f64, usize, ModelParams, AdamState)> = None;
    let mut since_best = 0;
    let mut stopped_early = false;
    for epoch in 1..=opts.max_epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for &i in &order {
            let ex = &train[i];
            let mut tape = Tape::new();
            let out = forward_model(&mut tape, ex.graph, &ex.extra, &params, config, true, &mut rng)?;
            let loss = tape.softmax_cross_entropy(out.logits, ex.label, &weights)?;
            total += tape.scalar(loss)?;
            params.set.zero_grad();
            tape.backward(loss, &mut params.set)?;
            adam.step(&mut params.set)?;
        }
        params.set.zero_grad();
        let train_loss = total / train.len() as f64;
        if !train_loss.is_finite() {
            return Err(PipelineError::Numeric(format!("training loss became {train_loss} in epoch {epoch}")));
        }
        let val_loss = if val.is_empty() { None } else { Some(evaluate_loss(val, &params, config, &weights)?) };
        epochs.push(EpochLog { epoch, train_loss, val_loss });
        match val_loss {
            Some(v) => {
                if best.as_ref().is_none_or(|b| v < b.0) {
                    best = Some((v, epoch, params.clone(), adam.clone()));
                    since_best = 0;
                } else {
                    since_best += 1;
                    if since_best >= opts.patience.max(1) {
                        stopped_early = true;
                        break;
                    }
                }
            }
            None => best = Some((train_loss, epoch, params.clone(), adam.clone())),
        }
    }
    let (_, best_epoch, mut params, mut optimizer) = best.expect("at least one epoch ran");
    // Checkpoints hold 32-bit reals; evaluating the rounded model keeps
    // in-process predictions identical to ones made from saved checkpoints.
    let round = |m: &mut Array2<f64>| m.mapv_inplace(|x| f64::from(x as f32));
    params.set.iter_mut().for_each(|t| round(&mut t.value));
    optimizer.first_moment.iter_mut().chain(&mut optimizer.second_moment).for_each(round);
    Ok(TrainedModel {
        config: config.clone(),
        params,
        optimizer,
        log: TrainingLog {
            epochs,
            best_epoch,
            stopped_early,
        },
    })
}

/// Positive-class (Short) probability of each example.
pub fn predict_positive(examples: &[Example], model: &TrainedModel) -> Result<Vec<f64>, PipelineError> {
    examples
        .iter()
        .map(|ex| Ok(predict(ex.graph, &ex.extra, &model.params, &model.config)?.probs[1]))
        .collect()
}

/// Penultimate activations in inference mode, one row per graph.
pub fn extract_embeddings(model: &TrainedModel, graphs: &[&Graph]) -> Result<Array2<f64>, PipelineError> {
    let dim = model.config.embed_dim();
    let mut out = Array2::zeros((graphs.len(), dim));
    for (i, g) in graphs.iter().enumerate() {
        let p = predict(g, &[], &model.params, &model.config)?;
        if p.embedding.len() != dim {
            return Err(PipelineError::InvalidConfig(format!("embedding width {} differs from {dim}", p.embedding.len())));
        }
        out.row_mut(i).assign(&ndarray::ArrayView1::from(&p.embedding));
    }
    Ok(out)
}
