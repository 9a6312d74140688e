//! Culture-aware hate-speech perception modeling.
//!
//! The pipeline turns per-annotator hate judgments into a combination-by-post
//! interaction matrix, factorizes it, pools each annotator's combination
//! embeddings into a personal "hate subspace" vector and trains a classifier
//! that predicts individual judgments from that vector and post features.

pub mod classifier;
pub mod data;
pub mod error;
pub mod factor;
pub mod interaction;
pub mod lattice;
pub mod matrix;
pub mod pipeline;
pub mod subspace;
pub mod synthetic;

pub use error::{Error, Result};
