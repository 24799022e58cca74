//! Fundus lesion segmentation with an index-unpooling encoder-decoder network.
//!
//! The crate is organised bottom-up:
//!
//! 1. **tensor** – dense `f64` tensors and the fixed xorshift-star generator.
//! 2. **layers** – forward/backward for conv, batch norm, ReLU, max-pool with
//!    stored indices, max-unpool, sigmoid, and the inference-only channel softmax.
//! 3. **model** – the symmetric encoder-decoder network and its checkpoint format.
//! 4. **objective** – per-class binary cross-entropy and Adam.
//! 5. **data** – PPM/PGM codecs, preprocessing, 7-class targets, manifests, fixtures.
//! 6. **train** – minibatch training, early stopping, per-class checkpoint ensemble.
//! 7. **eval** – ensemble inference, threshold sweeps and calibration, metrics.
//! 8. **gradcheck** – central finite-difference checks of every backward pass.

#![allow(clippy::needless_range_loop)]

pub mod data;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod layers;
pub mod model;
pub mod objective;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{Prng, Tensor};

/// Number of output classes.
pub const NUM_CLASSES: usize = 7;

/// Number of annotated classes (lesions plus optic disk) that get thresholds.
pub const NUM_SCORED: usize = 5;

/// Short class names in channel order.
pub const CLASS_NAMES: [&str; NUM_CLASSES] = ["ma", "hem", "ex", "se", "od", "rd", "bg"];

/// Channel indices.
pub mod class {
    pub const MA: usize = 0;
    pub const HEM: usize = 1;
    pub const EX: usize = 2;
    pub const SE: usize = 3;
    pub const OD: usize = 4;
    pub const RD: usize = 5;
    pub const BG: usize = 6;
}
