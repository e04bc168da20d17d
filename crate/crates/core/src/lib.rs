//! Specific emitter identification with active learning.
//!
//! The crate trains a small 1-D convolutional identifier on complex baseband
//! I/Q records in three stages:
//!
//! 1. self-supervised contrastive pretraining with a momentum key branch and
//!    a FIFO dictionary of key embeddings ([`training::pretrain_stage1`]);
//! 2. supervised fine-tuning with a weighted mix of cross-entropy and
//!    contrastive loss ([`training::train_stage2`]);
//! 3. query rounds that pick unlabeled records for annotation using BALD
//!    (MC dropout) or K-center greedy over cosine distance ([`selection`]).
//!
//! Everything runs on a purpose-built reverse-mode tensor core
//! ([`numerics`]) in 64-bit floats. A seeded I/Q emitter simulator
//! ([`signal`]) supplies data when no capture file is given, and
//! [`harness`] drives full experiments.

pub mod error;
pub mod harness;
pub mod numerics;
pub mod rng;
pub mod selection;
pub mod model;
pub mod signal;
pub mod training;

pub use error::{Error, Result};
