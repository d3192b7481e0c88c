//! Character-level morphological inflection with first-order MAML.
//!
//! Modules, bottom-up:
//! - [`adcore`]: tensors, a recorded operation graph with reverse-mode
//!   gradients, optimizers, checkpoints.
//! - [`corpus`]: datasets, vocabularies, encodings, synthetic families.
//! - [`models`]: the MED attention encoder-decoder and the pointer-generator.
//! - [`metatrain`]: MAML, multi-task, fine-tuning and monolingual regimes.
//! - [`evalkit`]: accuracy, reports, source-language ablations.

pub mod adcore;
pub mod corpus;
pub mod error;
pub mod evalkit;
pub mod metatrain;
pub mod models;

pub use error::{Error, Result};

use rand::SeedableRng;

/// Random generator used everywhere; ChaCha keeps streams identical across
/// platforms.
pub type SeededRng = rand_chacha::ChaCha8Rng;

pub fn seeded_rng(seed: u64) -> SeededRng {
    SeededRng::seed_from_u64(seed)
}
