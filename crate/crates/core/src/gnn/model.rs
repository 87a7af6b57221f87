use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{gin_conv, gine_conv, readout, sag_pool, GnnError, ModelConfig, ModelParams, Topology};
use crate::autodiff::{grad_check, linear, softmax, GradCheckReport, Tape, Var};
use crate::graph_builder::Graph;

/// Tape handles produced by one forward pass.
#[derive(Debug, Clone, Copy)]
pub struct ModelOutput {
    /// 1×n_classes.
    pub logits: Var,
    /// Input of the last linear layer (before its dropout).
    pub penultimate: Var,
}

/// Conv blocks (dropout, convolution, relu, optional SAG pooling), then
/// mean∥max readout, optional graph-level extras, and the MLP head.
pub fn forward_model<R: Rng + ?Sized>(
    tape: &mut Tape,
    graph: &Graph,
    extra: &[f64],
    params: &ModelParams,
    config: &ModelConfig,
    training: bool,
    rng: &mut R,
) -> Result<ModelOutput, GnnError> {
    if graph.feature_dim() != config.in_dim {
        return Err(GnnError::InputDim {
            expected: config.in_dim,
            got: graph.feature_dim(),
        });
    }
    if extra.len() != config.readout_extra {
        return Err(GnnError::InputDim {
            expected: config.readout_extra,
            got: extra.len(),
        });
    }
    if graph.n_nodes() == 0 {
        return Err(GnnError::EmptyGraph);
    }
    let set = &params.set;
    let mut topo = Topology::from_graph(graph);
    let mut h = tape.constant(graph.node_features.clone())?;
    for layer in &params.layers {
        h = tape.dropout(h, config.dropout_p, training, rng)?;
        h = if config.use_edge_weights {
            gine_conv(tape, h, &topo, set, &layer.conv)?
        } else {
            gin_conv(tape, h, &topo, set, &layer.conv)?
        };
        h = tape.relu(h)?;
        if let Some(score) = &layer.score {
            let pooled = sag_pool(tape, h, &topo, config.sag_ratio, set, score)?;
            h = pooled.h;
            topo = pooled.topology;
        }
    }
    let mut z = readout(tape, h)?;
    if !extra.is_empty() {
        let e = tape.constant(Array2::from_shape_vec((1, extra.len()), extra.to_vec()).expect("row shape"))?;
        z = tape.concat_cols(z, e)?;
    }
    let (last, hidden) = params.head.split_last().expect("validated head");
    for &(w, b) in hidden {
        z = tape.dropout(z, config.dropout_p, training, rng)?;
        let (w, b) = (tape.param(set, w)?, tape.param(set, b)?);
        z = linear(tape, z, w, b)?;
        z = tape.relu(z)?;
    }
    let penultimate = z;
    let z = tape.dropout(z, config.dropout_p, training, rng)?;
    let (w, b) = (tape.param(set, last.0)?, tape.param(set, last.1)?);
    let logits = linear(tape, z, w, b)?;
    Ok(ModelOutput { logits, penultimate })
}

/// Inference-mode evaluation of one graph.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub logits: Vec<f64>,
    pub probs: Vec<f64>,
    pub embedding: Vec<f64>,
}

pub fn predict(graph: &Graph, extra: &[f64], params: &ModelParams, config: &ModelConfig) -> Result<Prediction, GnnError> {
    let mut tape = Tape::new();
    // Dropout is the identity outside training, so no randomness is drawn.
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let out = forward_model(&mut tape, graph, extra, params, config, false, &mut rng)?;
    let logits = tape.value(out.logits)?.row(0).to_vec();
    let embedding = tape.value(out.penultimate)?.row(0).to_vec();
    Ok(Prediction {
        probs: softmax(&logits),
        logits,
        embedding,
    })
}

/// Finite-difference check of every parameter gradient of the inference-mode
/// cross-entropy of `graph` against `label`.
pub fn check_model_gradients(graph: &Graph, extra: &[f64], label: usize, params: &ModelParams, config: &ModelConfig, step: f64, tolerance: f64) -> Result<GradCheckReport, GnnError> {
    let mut failure = None;
    let report = grad_check(
        |tape, set| {
            let mp = ModelParams {
                set: set.clone(),
                layers: params.layers.clone(),
                head: params.head.clone(),
            };
            let mut rng = ChaCha8Rng::seed_from_u64(0);
            let out = match forward_model(tape, graph, extra, &mp, config, false, &mut rng) {
                Ok(out) => out,
                Err(GnnError::Autodiff(a)) => return Err(a),
                Err(other) => {
                    failure = Some(other);
                    return Err(crate::autodiff::AutodiffError::InvalidArgument("model forward failed"));
                }
            };
            tape.softmax_cross_entropy(out.logits, label, &vec![1.0; config.n_classes])
        },
        &params.set,
        step,
        tolerance,
    );
    match (report, failure) {
        (_, Some(e)) => Err(e),
        (r, None) => Ok(r?),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::grad_check;
    use crate::graph_builder::{radius_edges, Provenance};
    use rand::seq::SliceRandom;

    fn random_graph(n: usize, d: usize, seed: u64) -> Graph {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let coords: Vec<[f64; 2]> = (0..n).map(|_| [rng.random_range(0.0..60.0), rng.random_range(0.0..60.0)]).collect();
        let (edges, weights) = radius_edges(&coords, 20.0, 0.1);
        let feats = Array2::from_shape_fn((n, d), |_| rng.random_range(-1.0..1.0));
        Graph::new(feats, coords, edges, weights, Provenance::Subsample)
    }

    fn permuted(g: &Graph, perm: &[usize]) -> Graph {
        // New node i is old node perm[i].
        let mut inv = vec![0; perm.len()];
        for (new, &old) in perm.iter().enumerate() {
            inv[old] = new;
        }
        let feats = g.node_features.select(ndarray::Axis(0), perm);
        let coords = perm.iter().map(|&o| g.coords_um[o]).collect();
        let mut pairs: Vec<([usize; 2], f64)> = g.edges.iter().zip(&g.edge_weights).map(|(&[u, v], &w)| ([inv[u], inv[v]], w)).collect();
        pairs.sort_by(|a, b| a.0.cmp(&b.0));
        let (edges, weights) = pairs.into_iter().unzip();
        Graph::new(feats, coords, edges, weights, g.provenance)
    }

    fn small_config(d: usize) -> ModelConfig {
        let mut c = ModelConfig::new(d);
        c.hidden_dim = 8;
        c
    }

    #[test]
    fn logits_are_permutation_invariant() {
        for (seed, edge) in [(1u64, true), (2, false), (3, true)] {
            let g = random_graph(30, 4, seed);
            let mut cfg = small_config(4);
            cfg.use_edge_weights = edge;
            let params = ModelParams::init(&cfg, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
            let base = predict(&g, &[], &params, &cfg).unwrap();
            let mut perm: Vec<usize> = (0..30).collect();
            perm.shuffle(&mut ChaCha8Rng::seed_from_u64(seed + 100));
            let other = predict(&permuted(&g, &perm), &[], &params, &cfg).unwrap();
            for (a, b) in base.logits.iter().zip(&other.logits) {
                assert!((a - b).abs() < 1e-9, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn gin_ignores_edge_weights_gine_does_not() {
        let g = random_graph(25, 3, 7);
        let mut reweighted = g.clone();
        for w in &mut reweighted.edge_weights {
            *w *= 3.0;
        }
        let mut cfg = small_config(3);
        cfg.use_edge_weights = false;
        let p = ModelParams::init(&cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(predict(&g, &[], &p, &cfg).unwrap(), predict(&reweighted, &[], &p, &cfg).unwrap());
        let cfg = small_config(3);
        let p = ModelParams::init(&cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_ne!(predict(&g, &[], &p, &cfg).unwrap().logits, predict(&reweighted, &[], &p, &cfg).unwrap().logits);
    }

    #[test]
    fn sag_keeps_ceil_of_ratio() {
        let g = random_graph(7, 2, 4);
        let cfg = small_config(2);
        let p = ModelParams::init(&cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let mut tape = Tape::new();
        let h = tape.constant(Array2::from_shape_fn((7, 8), |(r, c)| (r * 3 + c) as f64 * 0.1)).unwrap();
        let pooled = sag_pool(&mut tape, h, &Topology::from_graph(&g), 0.5, &p.set, p.layers[0].score.as_ref().unwrap()).unwrap();
        assert_eq!(pooled.kept.len(), 4);
        assert_eq!(tape.value(pooled.h).unwrap().nrows(), 4);
        assert_eq!(pooled.topology.n_nodes, 4);
        let single = Topology {
            n_nodes: 1,
            src: vec![],
            dst: vec![],
            weights: vec![],
        };
        let h1 = tape.constant(Array2::ones((1, 8))).unwrap();
        assert_eq!(sag_pool(&mut tape, h1, &single, 0.5, &p.set, p.layers[0].score.as_ref().unwrap()).unwrap().kept, vec![0]);
    }

    #[test]
    fn pooling_below_one_node_is_impossible() {
        // Three conv layers at ratio 0.5 on a 2-node graph: 2 → 1 → 1 → 1.
        let g = random_graph(2, 2, 9);
        let cfg = small_config(2);
        let p = ModelParams::init(&cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert!(predict(&g, &[], &p, &cfg).is_ok());
    }

    #[test]
    fn penultimate_width_matches_config() {
        let g = random_graph(12, 3, 5);
        let mut cfg = small_config(3);
        cfg.readout_extra = 1;
        let p = ModelParams::init(&cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let out = predict(&g, &[1.0], &p, &cfg).unwrap();
        assert_eq!(out.embedding.len(), cfg.embed_dim());
        assert!((out.probs.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(predict(&g, &[], &p, &cfg).is_err());
    }

    #[test]
    fn input_dimension_is_checked() {
        let g = random_graph(5, 3, 1);
        let cfg = small_config(4);
        let p = ModelParams::init(&cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert!(matches!(predict(&g, &[], &p, &cfg), Err(GnnError::InputDim { .. })));
    }

    #[test]
    fn gradients_match_finite_differences() {
        for (seed, edge, pool) in [(11u64, true, true), (12, false, true), (13, true, false)] {
            let g = random_graph(14, 3, seed);
            let mut cfg = small_config(3);
            cfg.hidden_dim = 4;
            cfg.use_edge_weights = edge;
            cfg.use_sag_pool = pool;
            cfg.dropout_p = 0.0;
            let params = ModelParams::init(&cfg, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
            let handles = params.clone();
            let report = grad_check(
                |tape, set| {
                    let mp = ModelParams {
                        set: set.clone(),
                        layers: handles.layers.clone(),
                        head: handles.head.clone(),
                    };
                    let mut rng = ChaCha8Rng::seed_from_u64(0);
                    let out = forward_model(tape, &g, &[], &mp, &cfg, true, &mut rng).map_err(|e| match e {
                        GnnError::Autodiff(a) => a,
                        other => panic!("{other}"),
                    })?;
                    tape.softmax_cross_entropy(out.logits, 1, &[0.7, 1.3])
                },
                &params.set,
                1e-6,
                1e-4,
            )
            .unwrap();
            assert!(report.passed, "{report:?}");
            assert!(report.checked > 0);
        }
    }
}
