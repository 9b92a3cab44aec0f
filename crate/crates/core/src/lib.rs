//! Structure-and-motion as probabilistic inference.
//!
//! Camera poses, 3D (or planar) feature positions and their observed image
//! projections are modelled as Gaussian random variables. Every projection
//! forms a cluster `{x, p, X}` whose joint is obtained by pushing sigma
//! points of the pose and feature priors through the pinhole projection.
//! Loopy belief propagation over the resulting cluster graph, repeated from
//! re-linearized posteriors, yields the posterior over structure and motion.

pub mod cli;
pub mod error;
pub mod gaussian;
pub mod geometry;
pub mod linalg;
pub mod graph;
pub mod io;
pub mod propagation;
pub mod scenes;
pub mod unscented;

pub use error::{Error, Result};
