//! Compositional probing toolkit for dual-encoder vision-language models.
//!
//! * [`scene`] mines relation/attribution probes from scene graphs.
//! * [`text`] tokenizes, tags and chunks captions.
//! * [`perturb`] builds order perturbations and swap negatives.
//! * [`image_shuffle`] permutes image grid cells.
//! * [`embeddings`] stores embeddings and runs cosine / exact kNN.
//! * [`eval`] scores matching, order tasks and retrieval.
//! * [`synthetic`] generates structured toy data for training checks.
//! * [`trainer`] fits projection heads with hard-negative contrastive loss.

pub mod embeddings;
pub mod error;
pub mod eval;
pub mod image_shuffle;
pub mod io;
pub mod perturb;
pub mod rng;
pub mod scene;
pub mod synthetic;
pub mod text;
pub mod trainer;

pub use error::{Error, Result};
