//! Ray-surface distance fields for multi-view 3D shape representation.

#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::type_complexity)]

pub mod cli;
pub mod config;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod geometry;
pub(crate) mod io;
pub mod model;
pub mod nn;
pub mod scene;
pub mod training;

pub use error::{Error, Result};
