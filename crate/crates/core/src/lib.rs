//! Weak-to-strong consistency training for semi-supervised semantic
//! segmentation.
//!
//! A small convolutional segmenter is trained on a few labeled images plus
//! many unlabeled ones. Unlabeled images get pseudo labels from a weakly
//! augmented view; perturbed copies (strong photometric augmentation and
//! CutMix on the input, dropout or noise on intermediate features) are then
//! trained to agree with those labels wherever the weak prediction is
//! confident enough.
//!
//! Everything runs in `f64` on the CPU. Work inside a step is split per sample
//! (see [`par`]); gradients are reduced in a fixed order, so results do not
//! depend on the number of threads or on the `parallel` feature.

pub mod augment;
pub mod consistency;
pub mod data;
pub mod error;
pub mod eval;
pub mod featperturb;
pub mod model;
pub mod nn;
pub mod par;
pub mod rng;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
