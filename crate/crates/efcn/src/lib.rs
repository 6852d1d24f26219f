//! Evidential fully convolutional segmentation.
//!
//! This crate implements a small encoder–decoder network whose output layer
//! produces Dempster-Shafer mass functions instead of softmax probabilities.
//! Each pixel receives mass on the class singletons plus the whole frame Ω,
//! where the Ω mass expresses ignorance. A utility layer turns those masses
//! into set-valued decisions: a pixel may be assigned a single class, a union
//! of plausible classes, or Ω itself ("I don't know"), with the caution level
//! controlled by a tolerance-to-imprecision parameter γ.
//!
//! The main pieces:
//!
//! * [`frame`] — frames of discernment, bitmask class sets, act lists;
//! * [`belief`] — mass vectors, Dempster combination, pignistic transform;
//! * [`ds_layer`] — the prototype-based evidential output layer;
//! * [`utility`] — ordered-weighted-average weights and utility tables;
//! * [`backbone`] — a minimal conv / max-pool / transposed-conv network;
//! * [`training`] — the end-to-end loss, gradients, and SGD loop;
//! * [`metrics`] — pixel utility, imprecise IoU, calibration, novelty stats;
//! * [`data`] — synthetic scene generation and dataset persistence;
//! * [`io`] — binary tensor/mask/checkpoint formats and PPM output.

pub mod backbone;
pub mod belief;
pub mod data;
pub mod ds_layer;
mod error;
pub mod frame;
pub mod io;
pub mod metrics;
pub mod model;
pub mod tensor;
pub mod training;
pub mod utility;
pub mod viz;

pub use error::{Error, Result};
pub use frame::{ActList, ClassSet, Frame, PixelLabel};
pub use tensor::Tensor;
