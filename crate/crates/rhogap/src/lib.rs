//! Training-data quality measures and uncertainty-aware tracking bounds
//! for learning-based control of control-affine systems.
//!
//! A composite-kernel Gaussian process learns the residual between a
//! nominal model and the true dynamics `f(x) + g(x) u` from noisy
//! observations, yielding separate posteriors for `f` and `g`. On top of
//! that model this crate provides:
//!
//! - uniform high-probability error tubes around both posterior means
//!   ([`bounds`]),
//! - M-fill distances and rho-gaps that localize where the training data
//!   is too sparse for a requested closed-loop performance ([`quality`]),
//! - a feedback-linearizing tracking controller with an
//!   uncertainty-dependent ultimate error bound ([`control`]),
//! - the benchmark system, integrator and data-collection harness that
//!   reproduce the experiment end to end ([`sim`], [`experiment`]).
//!
//! The narrative guide in `book/` walks through each concept; its code
//! snippets compile and run as doc-tests of this crate.
//!
//! # Quick start
//!
//! ```
//! use nalgebra::DVector;
//! use rhogap::gp::{zero_prior, GpModel, TrainingSet};
//! use rhogap::kernels::{Hyperparameters, InputPoint};
//!
//! // three residual observations of h(z) = f(x) + g(x) u
//! let data = TrainingSet::new(
//!     vec![
//!         InputPoint::from_slice(&[0.0, 0.0], 0.5)?,
//!         InputPoint::from_slice(&[1.0, 0.5], -1.0)?,
//!         InputPoint::from_slice(&[-0.5, 1.0], 0.0)?,
//!     ],
//!     vec![0.4, -0.2, 0.1],
//!     0.01,
//! )?;
//! let h = Hyperparameters::new(1.0, 1.0, 1.0, 1.0, 0.01)?;
//! let model = GpModel::new(data, h, zero_prior(), zero_prior())?;
//!
//! let x = DVector::from_row_slice(&[0.2, 0.1]);
//! let f = model.posterior_f(&x);
//! let g = model.posterior_g(&x);
//! assert!(f.variance <= 1.0 && g.variance <= 1.0);
//! # Ok::<(), rhogap::Error>(())
//! ```

// validation predicates use `!(x > 0)` so NaN fails them too
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod bounds;
pub mod control;
mod error;
pub mod experiment;
pub mod gp;
pub mod io;
pub mod kernels;
pub mod quality;
pub mod sim;

pub use error::{Error, Result};

// The book chapters double as doc-tests so the guide cannot drift from
// the API.
#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/composite-gp.md")]
    mod composite_gp {}
    #[doc = include_str!("../../../book/src/error-bounds.md")]
    mod error_bounds {}
    #[doc = include_str!("../../../book/src/data-quality.md")]
    mod data_quality {}
    #[doc = include_str!("../../../book/src/tracking-control.md")]
    mod tracking_control {}
    #[doc = include_str!("../../../book/src/experiment.md")]
    mod experiment {}
}
