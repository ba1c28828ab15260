//! Structure-aware deep spectral embedding.
//!
//! Data are split into random batches. Each batch gets a Gaussian-affinity
//! graph whose Laplacian eigenvectors serve as regression targets for the
//! latent layer of a small autoencoder. A self-expression matrix, learned by
//! query/key attention networks and sparsified to the few strongest
//! neighbours of each point, adds a structure-preservation penalty on the
//! latent codes. The trained encoder embeds seen or unseen points, which are
//! then clustered with k-means and scored against ground truth.

pub mod clustering;
pub mod data;
pub mod error;
pub mod linalg;
pub mod nn;
pub mod pipeline;
pub mod selfexpr;
pub mod spectral;

pub use error::{Error, Result};
