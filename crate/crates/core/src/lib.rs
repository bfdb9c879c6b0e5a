//! Multi-scale geometry-aware transformer for point-cloud classification.
//!
//! A cloud is divided into patches at several scales (farthest-point
//! centers, K-nearest-neighbor groups). A per-scale local feature extractor
//! with sphere mapping embeds each patch as a token; an encoder whose
//! attention weights come from geodesic distances on an oblique manifold
//! mixes the tokens, and a linear head reads the class token.
//!
//! Everything runs on the small reverse-mode engine in [`autodiff`].

pub mod attention;
pub mod autodiff;
pub mod checks;
pub mod cli;
pub mod config;
pub mod data;
mod error;
pub mod experiments;
pub mod geometry;
pub mod model;
pub mod nn;
pub mod slfe;
pub mod train;

pub use error::{Error, Result};
