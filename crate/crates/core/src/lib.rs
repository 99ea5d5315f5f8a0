//! Research toolkit for frequency-domain backdoor attacks on small image
//! classifiers, built for desk-scale experiments that fit in seconds to
//! minutes of CPU time.
//!
//! The pieces, in pipeline order:
//!
//! - [`spectral`]: orthonormal 2-D DCT and spectrum inspection helpers.
//! - [`trigger`]: perturbations planted in low-frequency DCT bands, plus
//!   dataset poisoning.
//! - [`classifier`]: a from-scratch CNN (f64, plain SGD) with gradient
//!   checking and binary checkpoints.
//! - [`objective`]: the attack objective a trigger is optimized against.
//! - [`annealing`]: black-box simulated-annealing trigger search through a
//!   semi-trained surrogate.
//! - [`defenses`]: Gaussian, Wiener and JPEG-style preprocessing defenses,
//!   STRIP entropy, and robustness rates.
//! - [`metrics`]: PSNR, SSIM and frequency-disparity stealth measurement.
//! - [`synth`]: a reproducible MNIST-shaped digit generator so experiments
//!   need no external data.
//!
//! Batch operations run through [`par`], which preserves element order and
//! reduces sequentially; results are bit-identical whether or not the
//! `parallel` feature (on by default) is enabled.

pub mod annealing;
pub mod classifier;
pub mod dataset;
pub mod defenses;
pub mod error;
pub mod experiment;
pub mod idx;
pub mod image;
pub mod metrics;
pub mod objective;
pub mod par;
pub mod pnm;
pub mod spectral;
pub mod synth;
pub mod trigger;

pub use error::{Error, Result};
