//! Scaling-law toolkit for dense retrieval: ranking metrics, power-law fitting,
//! budget-optimal allocation and a small simulator that produces
//! `(model size, data size, contrastive entropy)` observations.

// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod budget;
pub mod cli;
pub mod lawfit;
pub mod metrics;
mod optim;
pub mod toysim;
