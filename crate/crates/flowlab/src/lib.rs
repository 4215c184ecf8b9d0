//! flowlab: a desk-scale generative modeling laboratory.
//!
//! One pair of abstractions carries the whole crate: a *probability path*
//! (how clean data is coupled to noise at train time) and a *sampler* (how a
//! trained vector field or noise predictor is integrated back to data).
//! Optimal-transport flow matching and variance-preserving diffusion are two
//! instances of that pair, trained on the same tiny networks, conditioned the
//! same way, and judged by the same distribution metrics.
//!
//! Layering, bottom to top:
//!
//! * [`numerics`] - f64 tensors and tape-based reverse-mode autodiff
//! * [`paths`] - interpolants, noise schedules, training pairs, losses
//! * [`models`] - conditioned MLP / encoder-decoder vector-field networks
//! * [`samplers`] - Euler, Heun, DDPM ancestral, DDIM
//! * [`datasets`] - synthetic 2-D clouds and 16x16 phantoms, speckle noise
//! * [`metrics`] - MMD^2, sliced Wasserstein, SSIM, PSNR/SNR, KDE shift
//! * [`training`] - Adam, deterministic train/eval loops, checkpoints
//! * [`config`] / [`cli`] - strict run configs and the command-line surface
//!
//! Determinism is a contract, not an accident: every stochastic choice flows
//! from an explicit seed, and (config, seed) reproduces checkpoints and
//! reports byte for byte.

pub mod error;
pub mod datasets;
pub mod digest;
pub mod models;
pub mod numerics;
pub mod paths;
pub mod metrics;
pub mod samplers;
pub mod training;

pub use error::{Error, Result};
pub mod cli;
pub mod config;
