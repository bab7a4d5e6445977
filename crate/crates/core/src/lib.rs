//! Carbon-aware DNN partitioning between an edge device and a server, with
//! conformal prediction sets over candidate partition points.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod benchmark;
pub mod cli;
pub mod conformal;
pub mod context;
pub mod cost_model;
pub mod decision;
pub mod error;
pub mod par;
pub mod predictor;
pub mod shift;
pub mod simulator;
