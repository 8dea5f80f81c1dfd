//! Desk-scale unsupervised domain adaptation via style-aware feature fusion.
//!
//! The crate trains a small token-based classifier on a labeled source
//! domain and an unlabeled target domain, bridged by a self-intermediate
//! domain whose features are rewritten in-network by cross-domain style
//! fusion. A six-cell memory bank supplies class and style prototypes for
//! the inter-domain losses, and a Monte-Carlo verifier checks the
//! closed-form upper bound on the intermediate-domain loss.
//!
//! Layers, bottom-up:
//!
//! * [`tensor`], [`tape`], [`gradcheck`], [`optim`], [`checkpoint`], [`rng`]
//!   — dense tensors, reverse-mode autodiff, SGD, serialization, seeding.
//! * [`data`] — synthetic multi-domain datasets, CSV format, batching.
//! * [`model`] — the block feature extractor with fusion hook points.
//! * [`ssid`] — style-statistics extraction and feature fusion.
//! * [`membank`] — the external prototype store.
//! * [`losses`] — intra- and inter-domain objectives.
//! * [`theory`] — latent-space counting, Monte-Carlo loss estimation, and
//!   the moment-generating-function upper bound.
//! * [`pipeline`] — pretraining, the three-branch training loop, ablations.
//! * [`analysis`] — class centers, inter-domain distance, projection
//!   histograms.
//! * [`cli`] — the `saff` executable's subcommands.

pub mod analysis;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod losses;
pub mod membank;
pub mod model;
pub mod optim;
pub mod pipeline;
pub mod rng;
pub mod ssid;
pub mod tape;
pub mod tensor;
pub mod theory;

pub use error::{Error, Result};
pub use tensor::Tensor;
