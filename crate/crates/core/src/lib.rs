//! Learn parametric and invertible 2D projections of high-dimensional data.
//!
//! A reference projection (exact t-SNE, or any precomputed 2D layout) is
//! taught to three neural architectures:
//!
//! - **P&R**: an independent projector `x → y` and reconstructor `y → x`;
//! - **AEL**: an autoencoder whose 2D latent is pulled onto the reference
//!   projection by an extra `ω·MSE(y, ŷ)` term;
//! - **VAEL**: a variational autoencoder with the same latent term plus a
//!   `β`-weighted KL divergence to a standard normal prior.
//!
//! The encoder then acts as a parametric projection and the decoder as an
//! inverse projection. [`evaluation`] measures both on held-out rows and
//! renders gradient maps of the inverse mapping.

pub mod architectures;
pub mod cli;
pub mod data;
pub mod error;
pub mod evaluation;
pub mod io;
pub mod nn;
pub mod projection;
pub mod render;
pub mod training;

pub use error::{Error, Result};
