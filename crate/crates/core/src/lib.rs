//! Count-level weakly-supervised crowd counting.
//!
//! A small dilated CNN predicts density maps. A handful of images carry dot
//! annotations; the rest only carry a total count. Multiple auxiliary task
//! training (MATT) adds extra density heads whose blurred outputs must agree
//! with the primary head, with gradients from that agreement kept out of the
//! primary head.

pub mod autodiff;
pub mod cli;
pub mod config;
pub mod density;
pub mod error;
pub mod eval;
pub mod grid;
pub mod losses;
pub mod model;
pub mod pgm;
pub mod rng;
pub mod synth;
pub mod trainer;

pub use error::{Error, Result};
pub use grid::DenseGrid;
