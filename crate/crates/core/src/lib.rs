//! Mutual-information bounds: CLUB and its variational and sampled
//! variants, the leave-one-out and variational upper bounds, and the
//! NWJ, MINE and InfoNCE lower bounds, built on a small reverse-mode
//! autodiff kernel.
//!
//! ```
//! use mibounds::distributions::{stream_rng, CorrelatedGaussianSource};
//! use mibounds::estimators::club_known;
//!
//! let src = CorrelatedGaussianSource::gaussian(1, 0.5).unwrap();
//! let batch = src.sample_joint(512, &mut stream_rng(1, 0)).unwrap();
//! let est = club_known(&batch, &src.known_conditional().unwrap()).unwrap();
//! assert!(est.value.is_finite());
//! ```

// `!(x > 0.0)` is used on purpose so NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod bench;
pub mod distributions;
pub mod error;
pub mod estimators;
pub mod graph;
pub mod nn;
pub mod optim;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use estimators::{Batch, Estimate, EstimatorId};
pub use graph::{Graph, Var};
pub use tensor::{Axis, Tensor};
pub use trainer::{MinimizeConfig, Task, TrainConfig};
