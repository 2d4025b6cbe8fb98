//! Perceptually regularized adversarial perturbations as saliency maps.
//!
//! The crate finds a perturbation `x'` of an input image that drives a
//! classifier's margin for a chosen class below zero while keeping the
//! activations of selected ReLU layers close to those of the clean image.
//! The per-pixel size of that perturbation, blurred, is the explanation.
//! Explanations are scored with weak localization, insertion/deletion and
//! pointing games on self-trained convolutional nets and synthetic data.

pub mod cli;
pub mod container;
pub mod data;
pub mod error;
pub mod eval;
pub mod model;
pub mod perturb;
pub mod saliency;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{CompGraph, Gradients, NodeId, Tensor};
