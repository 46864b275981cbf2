//! Ensembles of mesh-based graph network emulators of a backward Lagrangian
//! particle dispersion model, and ensemble-spread uncertainty analysis.

// `!(x > 0.0)` is the NaN-rejecting form used throughout validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod analysis;
pub mod checkpoint;
pub mod config;
pub mod domain;
pub mod ensemble;
pub mod error;
pub mod features;
pub mod formats;
pub mod gnn;
mod kernels;
pub mod lpdm;
pub mod mesh;
pub mod molefrac;
pub mod pipeline;
pub mod postprocess;
pub mod synthmet;
pub mod train;

pub use error::{Error, Result};
