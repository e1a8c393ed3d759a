//! EQGAT: equivariant graph attention over molecular point clouds.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod checkpoint;
pub mod data;
pub mod error;
pub mod geometry;
pub mod layer;
pub mod model;
pub mod nn;
pub mod params;
pub mod synthetic;
pub mod testkit;
pub mod training;

pub use error::{EqgatError, Result};
