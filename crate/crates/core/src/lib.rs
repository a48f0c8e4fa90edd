//! Bayesian inversion of 2D elliptic (Darcy-flow) problems with learned
//! field priors: Karhunen-Loeve training data, fully-connected VAE priors,
//! latent-space pCN MCMC, overlapping domain decomposition with GP-regressed
//! interface conditions, and gradient-domain blending of local posteriors.

pub mod blend;
pub mod darcy;
pub mod error;
pub mod gp;
pub mod grid;
pub mod linalg;
pub mod mcmc;
pub mod pipeline;
pub mod random_field;
pub mod vae;

pub use error::{Error, Result};
