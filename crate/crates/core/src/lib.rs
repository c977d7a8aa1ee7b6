//! Few-shot classification of hyperspectral cubes with prototypical networks,
//! channel attention on raw spectral bands and collective class prototypes.
//!
//! Modules, bottom-up:
//!
//! * [`cubeio`]: cube model, `.hsc` files, manifests, preprocessing.
//! * [`synth`]: synthetic labelled cubes with controllable separability.
//! * [`embed`]: the embedding network with hand-written gradients.
//! * [`fewshot`]: episodes, prototypes, posteriors, training, CCP banks.
//! * [`eval`]: evaluation protocols, baselines and exports.

pub mod cubeio;
pub mod embed;
pub mod error;
pub mod eval;
pub mod fewshot;
pub mod matrix;
pub mod par;
pub mod synth;

pub use error::{Error, Result};
pub use matrix::Matrix;
