//! One-step flow-matching generation of periodic 3D+t multi-structure mesh
//! sequences.
//!
//! The pipeline: a parametric synthetic dataset of beating multi-structure
//! shapes ([`synthdata`]) provides per-frame point-cloud targets; multi-scale
//! cubic B-spline free-form deformation fields are fitted to those targets
//! ([`fitting`], [`ffd`]); a one-step generative flow ([`flow`], [`neural`])
//! learns the distribution of the fitted fields, conditioned on a periodic
//! temporal encoding of the cardiac frame ([`encoding`]) and, optionally, on
//! volume-derived phenotypes; generated fields warp a template mesh
//! ([`mesh`]) into new sequences, which are scored by a volume-distribution
//! metric suite ([`metrics`]).
//!
//! All differentiable computation runs on the minimal reverse-mode tape in
//! [`tape`]; every adjoint is validated against central finite differences.

pub mod config;
pub mod encoding;
pub mod error;
pub mod ffd;
pub mod fitting;
pub mod flow;
pub mod mesh;
pub mod metrics;
pub mod neural;
pub mod synthdata;
pub mod tape;

pub use error::{Error, Result};
