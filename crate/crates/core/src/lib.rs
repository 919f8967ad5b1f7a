//! Neural listeners and speakers for three-object reference games, together
//! with the data pipeline that feeds them and the analysis battery that probes
//! them.
//!
//! The crate is organised by pipeline stage:
//!
//! - [`corpus`]: transcript ingestion, tokenisation, vocabularies and splits.
//! - [`context`]: hard/easy context construction over an object embedding.
//! - [`encoders`]: object codes (image features, point-cloud autoencoder) and word vectors.
//! - [`listener`]: the three listener architectures with optional word attention.
//! - [`speaker`]: literal, context-unaware and listener-reranked speakers.
//! - [`evaluation`]: subpopulation accuracy, lesions, PMI tables and α/β sweeps.
//! - [`synthetic`]: a procedurally generated world for desk-scale end-to-end runs.

pub mod checkpoint;
pub mod config;
pub mod context;
pub mod corpus;
pub mod encoders;
mod error;
pub mod evaluation;
pub mod listener;
pub mod nn;
pub mod par;
pub mod speaker;
pub mod synthetic;
pub mod util;

pub use error::{Error, Result};
