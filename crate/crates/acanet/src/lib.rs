//! Future-graph learning for logistical demand-supply pressure forecasting.
//!
//! The model forecasts the average delivery time of orders created within
//! the next five minutes in a delivery district. Instead of a long series of
//! historical time slices it consumes exactly two graphs — an *ongoing*
//! graph of currently open orders and a *global* graph aggregating the full
//! order history — fuses them with cross-attention transformer blocks,
//! learns a supervised future adjacency matrix, and feeds that future graph
//! to a pretrained pressure simulator.
//!
//! The crate ships its own synthetic on-demand-delivery world so every label
//! and truth adjacency has an exact oracle, which makes the whole pipeline
//! testable end to end on a desk-scale CPU budget.
//!
//! Start with the runnable examples (`cargo run --release --example …`) or
//! the `acanet` binary; the module map mirrors the pipeline:
//!
//! - [`tensor`] — dense f64 tensors with reverse-mode autodiff
//! - [`graph`] — order-flow graphs, samples, dataset files, input-byte accounting
//! - [`world`] — synthetic delivery world and exact label oracles
//! - [`norm`] — train-split-fitted feature normalization
//! - [`embed`] — GNN graph embedding and per-feature supply/env tokens
//! - [`attention`] — cross-attention transformer (CAT) blocks
//! - [`agl`] — adaptive future-graph learning and its supervision loss
//! - [`sim`] — pretrained pressure simulator
//! - [`train`] — full-model forward, training loop, ablation masks
//! - [`metrics`] — MAE/RMSE/MAPE and lightweightness accounting
//! - [`ablation`] — the component-ablation harness
//! - [`checkpoint`] — named-tensor-block checkpoint container
//! - [`pipeline`] — high-level commands shared by the CLI and examples

pub mod ablation;
pub mod agl;
pub mod attention;
pub mod checkpoint;
pub mod embed;
pub mod graph;
pub mod metrics;
pub mod norm;
pub mod pipeline;
pub mod sim;
pub mod tensor;
pub mod train;
pub mod world;
