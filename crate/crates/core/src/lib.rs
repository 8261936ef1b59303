//! Momentum-contrastive zero-shot slot filling.
//!
//! A slot-type-conditioned BIO tagger (transformer encoder + linear-chain
//! CRF) trained with a mixture of CRF negative log-likelihood and an InfoNCE
//! loss whose keys come from a momentum-updated copy of the encoder.

pub mod corpus;
pub mod cli;
pub mod config;
pub mod contrast;
pub mod crf;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod generator;
pub mod kv;
pub mod model;
pub mod nn;
pub mod optim;
pub mod params;
pub mod tokenizer;
pub mod trainer;
pub mod weights;

pub use error::{Error, Result};
