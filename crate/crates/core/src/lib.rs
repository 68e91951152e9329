//! Multiresolution Gaussian processes.
//!
//! A function is modelled as a hierarchy of smooth GPs on a random nested
//! binary partition of a 1-D domain: the parent GP spans the whole domain and
//! each child GP is centred on its parent restricted to one partition set.
//! Conditioned on the partition, every latent GP integrates out and the data
//! are Gaussian with a block-structured covariance, which makes the tree
//! itself cheap to infer by importance sampling or independence-chain
//! Metropolis-Hastings driven by normalized-cut proposals.

pub mod error;
pub mod eval;
pub mod io;
pub mod kernels;
pub mod likelihood;
pub mod linalg;
pub mod mcmc;
pub mod ncut;
pub mod partition;
pub mod synth;

pub use error::{MgpError, Result};
