//! Offline actor-critic with behavior regularisation through an analytical
//! KL upper bound and gradient-penalised policy evaluation.
//!
//! Modules, bottom-up:
//! - [`distributions`]: Gaussian, tanh-squashed Gaussian and 1-D mixtures.
//! - [`networks`]: MLPs, twin Q-networks, Adam, checkpoints.
//! - [`behavior_model`]: CVAE ensemble for the behavior policy and the KL bound.
//! - [`divergences`]: MMD, Monte-Carlo KL, integration oracles, landscape sweep.
//! - [`envs_data`]: the two-goal point mass, scripted datasets, scores.
//! - [`agent`]: initialisation, the two step functions and the training loop.
//! - [`harness`]: experiment orchestration behind the command-line tool.

pub mod agent;
pub mod behavior_model;
pub mod distributions;
pub mod divergences;
pub mod envs_data;
pub mod error;
pub mod harness;
pub mod networks;
pub mod rng;

pub use error::{Error, Result};
