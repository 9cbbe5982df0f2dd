//! Attribute enhancement through Bayesian style sampling.
//!
//! Given an input image, a style transfer operator and a learned density over
//! style vectors, the crate samples styles (and optionally stylization
//! strengths) whose stylizations score highly under an attribute predictor.
//!
//! Layout:
//! - [`tensor`]: dense tensors, reverse-mode differentiation, checkpoints
//! - [`nets`]: MLPs, the convolutional codec and predictor backbones
//! - [`styletx`]: AdaIN stylization and decoder training
//! - [`stylegan`]: WGAN-GP over style vectors
//! - [`attribute`]: attribute predictors and score normalisation
//! - [`sampler`]: energies and the MH / Langevin / Hamiltonian chains
//! - [`harness`]: synthetic data, experiments, evaluation and reports

pub mod attribute;
pub mod error;
pub mod harness;
pub mod nets;
pub mod sampler;
pub mod stylegan;
pub mod styletx;
pub mod tensor;

pub use error::{Error, Result};
