//! # dmae
//!
//! Feature-based clustering with the dissimilarity mixture model (DMM) and
//! its autoencoder formulation (DMAE).
//!
//! The DMM soft-assigns samples to clusters with a softmax over negated
//! dissimilarities, reconstructs per-sample cluster descriptors as convex
//! combinations, and trains everything with mini-batch gradient descent.
//! Plugging the mixture between a deep encoder and decoder yields DMAE, an
//! end-to-end deep clustering model.
//!
//! Module map:
//!
//! | Module | Provides |
//! |--------|----------|
//! | [`dissim`] | catalog of convex dissimilarities with analytic gradients |
//! | [`dmm`] | soft-assignment encoder, convex decoder, lower-bound loss |
//! | [`deepnet`] | fully-connected autoencoder with manual backprop |
//! | [`optim`] | SGD/Adam, mini-batching, finite-difference checker |
//! | [`data`] | synthetic generators (pinwheel, toroidal, moons, circles) and CSV |
//! | [`metrics`] | unsupervised accuracy (Hungarian matching) and NMI |
//! | [`baseline`] | Lloyd's K-means with k-means++ seeding |
//! | [`pipeline`] | DMM / AE+DMM / DMAE training regimes and reports |

pub mod baseline;
pub mod data;
pub mod deepnet;
pub mod dissim;
pub mod dmm;
pub mod error;
pub mod gradcheck;
pub mod metrics;
pub mod optim;
pub mod pipeline;

pub use error::{Error, Result};

/// Samples are rows: an `N x m` matrix of feature vectors.
pub type DataMatrix = ndarray::Array2<f64>;
