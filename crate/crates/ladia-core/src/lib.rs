//! Core algorithms for minimally supervised task-oriented dialogue modeling.
//!
//! The model generates system responses conditioned on discrete latent
//! variables (latent actions) that are trained without turn-level
//! annotation. Database interaction is grounded through special
//! query/result pseudo-turns, which is the only supervision used beyond
//! raw utterance text.
//!
//! This crate is `no_std` (with `alloc`) and holds everything that does
//! not touch the filesystem or a terminal: the differentiable model and
//! its training loop, the synthetic corpus generator, the in-memory
//! database, evaluation metrics, and the latent-interpretation tools.
//! File formats, checkpointing and the command-line interface live in
//! the companion `ladia` crate.

#![no_std]

extern crate alloc;

#[cfg(test)]
extern crate std;

pub mod data;
pub mod db;
pub mod error;
pub(crate) mod fmath;
pub mod graph;
pub mod inference;
pub mod interpret;
pub mod metrics;
pub mod model;
pub mod rng;
pub mod training;

pub use error::{Error, Result};
