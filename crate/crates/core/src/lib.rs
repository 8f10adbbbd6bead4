//! Scaling toolkit for Vision Transformers.
//!
//! * [`cost`]: analytic parameter/FLOP/memory model and grid shape search.
//! * [`laws`]: double-saturating power-law fits and Pareto frontiers.
//! * [`tensor`], [`vit`], [`optim`], [`train`]: a desk-scale ViT trainer with
//!   CLS/GAP/MAP heads, decoupled head weight decay, half-precision momentum
//!   and factored second moments.
//! * [`probe`]: closed-form ridge probe on frozen features.
//! * [`runs`]: run-log ingestion, compute attachment and plot output.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cost;
pub mod error;
pub mod laws;
pub mod optim;
pub mod par;
pub mod probe;
pub mod runs;
pub mod tensor;
pub mod train;
pub mod vit;

pub use error::{Error, Result};
