//! Depth-routing experiments for a toy flow-matching transformer: a small
//! DiT-style backbone whose cross-layer wiring is swappable between the
//! plain residual stream, U-Net-style long skips, and learned softmax
//! aggregation over depth, plus the measurement and training harness used
//! to compare them.

pub mod backbone;
pub mod checkpoint;
pub mod config;
pub mod cost;
pub mod data;
pub mod diagnostics;
pub mod eval;
pub mod fused;
pub mod params;
pub mod plot;
pub mod router;
pub mod sample;
pub mod train;
