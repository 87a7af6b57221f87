//! Hierarchical graph neural networks for survival prediction from spatial
//! single-cell tables.

pub mod autodiff;
pub mod baselines;
pub mod cell_table;
pub mod gnn;
pub mod graph_builder;
pub mod pipeline;
pub mod survival_metrics;
pub mod synth;
