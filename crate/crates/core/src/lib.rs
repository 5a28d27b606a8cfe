//! Packet-level adversarial network-traffic synthesis.
//!
//! A sequence-policy generator (LSTM) is trained with policy-gradient
//! updates against a convolutional substitute detector, which in turn is
//! trained on the predictions of a fixed black-box NIDS. Generated packets
//! keep attack-functional bytes pinned through constraint masks, so evading
//! samples remain functional attacks.
//!
//! The crate is organized around the training pipeline:
//!
//! - [`packet`]: packet normalization, tokenization, constraint masks
//! - [`ingest`]: pcap reading, synthetic corpora, dataset splits and storage
//! - [`embedding`]: skip-gram byte embeddings
//! - [`nids`]: the black-box detector zoo (MLP, SVM, DT, LR)
//! - [`generator`]: the LSTM policy, MLE pretraining, policy gradient
//! - [`rollout`]: Monte Carlo completion and per-position action values
//! - [`discriminator`]: the convolutional substitute detector
//! - [`metrics`]: MAPE / AFR / ASR / ASIR
//! - [`orchestrator`]: the end-to-end adversarial training loop

pub mod checkpoint;
pub mod config;
pub mod discriminator;
pub mod embedding;
mod error;
pub mod generator;
pub mod ingest;
pub mod metrics;
pub mod nids;
pub mod opt;
pub mod orchestrator;
pub mod packet;
pub mod rng;
pub mod rollout;

pub use error::{Error, Result};
