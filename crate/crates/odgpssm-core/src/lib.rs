//! Output-dependent Gaussian process state-space models.
//!
//! A GPSSM places GP priors on the transition function of a state-space
//! model. Here the `d_x` transition outputs are linear combinations of `Q`
//! independent latent GPs (a linear model of coregionalization), so
//! correlations between state dimensions are modeled instead of ignored.
//! The crate provides:
//!
//! - dense Gaussian/linear-algebra primitives with a jitter-laddered
//!   Cholesky ([`linalg`], [`gaussian`]),
//! - sparse variational GP predictives over shared inducing inputs
//!   ([`gp`]),
//! - the coregionalization layer and its identifiability diagnostics
//!   ([`lmc`]),
//! - the generative model, reparameterized state sampling, and the
//!   Monte-Carlo evidence lower bound ([`model`]),
//! - reverse-mode autodiff, parameter transforms, Adam, and the training
//!   loop ([`ad`], [`train`]),
//! - exact linear-Gaussian oracles: simulator, Kalman filter, RTS smoother
//!   ([`lgssm`]).

pub mod ad;
pub mod error;
pub mod gaussian;
pub mod gp;
pub mod lgssm;
pub mod linalg;
pub mod lmc;
pub mod model;
pub mod rng;
pub mod train;

pub use error::{LinalgError, ModelError};
pub use gaussian::{kl_gaussian, sample_gaussian, GaussianBelief};
pub use linalg::Mat;
