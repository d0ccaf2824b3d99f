//! A unified generative recommender: one decoder-only transformer serves
//! query-aware search and query-free recommendation, for both catalog
//! retrieval and candidate ranking.
//!
//! The crate is organised bottom-up:
//!
//! - [`tensor`]: dense tensors with a reverse-mode tape and finite differences
//! - [`events`]: interaction logs, preprocessing, leave-one-out split, synthetic data
//! - [`embeddings`]: frozen semantic tables, collaborative tables and token fusion
//! - [`attention`]: task-specific mask and timestamp rotary embeddings
//! - [`decoder`]: transformer backbone, heads and checkpoints
//! - [`losses`]: InfoNCE retrieval loss and pointwise/pairwise ranking loss
//! - [`trainer`]: sequence assembly, negative sampling, AdamW and the training loop
//! - [`evaluation`]: candidate pools, Recall/NDCG/MRR and evaluation protocols
//! - [`config`]: run configuration shared by the command line tool

#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::too_many_arguments)]

pub mod attention;
pub mod config;
pub mod decoder;
pub mod embeddings;
pub mod error;
pub mod evaluation;
pub mod events;
pub mod losses;
pub mod rng;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
