//! Attentive recurrent neural network (ARNN) for multi-channel time series.
//!
//! A segment of `c` channels by `n` samples is split into `l` local windows.
//! A recurrent cell attends within each window, exchanges information with a
//! block of `s` state vectors through two cross-attentions, and updates that
//! block with an LSTM-style gate. Self-attention cost falls with `l` while
//! the state carries context across windows.
//!
//! The crate is organized bottom-up:
//!
//! * [`numerics`]: dense matrices and differentiable primitives with hand-written backward passes
//! * [`cell`]: one recurrent step and its gradients
//! * [`model`]: windowing, the full classifier, checkpoints
//! * [`training`]: binary cross-entropy, Adam, step decay, metrics
//! * [`data`]: CSV datasets, min-max normalization, a synthetic burst generator
//! * [`bench`]: a naive full-attention kernel, FLOP models and timing sweeps
//! * [`gradcheck`]: finite-difference verification of every parameter gradient
//!
//! ```
//! use arnn::model::{ArnnModel, ModelConfig};
//! use arnn::numerics::{Matrix, Rng};
//!
//! let config = ModelConfig::new(4, 64, 8, 6, 0.3).unwrap();
//! let model = ArnnModel::new(config, 7);
//! let mut rng = Rng::seed(1);
//! let segment = Matrix::uniform(4, 64, 1.0, &mut rng);
//! let out = model.forward(&segment, false, &mut rng).unwrap();
//! assert!(out.prob > 0.0 && out.prob < 1.0);
//! assert_eq!(out.states.len(), 9);
//! ```

pub mod bench;
pub mod cell;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod io;
pub mod model;
pub mod numerics;
pub mod training;

pub use error::{Error, Result};

// The guide's code blocks run as doctests so the book cannot drift from the API.
#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/cell.md")]
    mod cell {}
    #[doc = include_str!("../../../book/src/model.md")]
    mod model {}
    #[doc = include_str!("../../../book/src/training.md")]
    mod training {}
    #[doc = include_str!("../../../book/src/data.md")]
    mod data {}
    #[doc = include_str!("../../../book/src/cost.md")]
    mod cost {}
    #[doc = include_str!("../../../book/src/gradcheck.md")]
    mod gradcheck {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
    #[doc = include_str!("../../../README.md")]
    mod readme {}
}
