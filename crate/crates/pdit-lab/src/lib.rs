//! Training laboratory for an interleaved perception-decision transformer
//! on a language-conditioned gridworld.
//!
//! The crate is organized bottom-up:
//!
//! - [`tensor`]: dense f32 tensors with reverse-mode autodiff on a Wengert
//!   tape, an Adam optimizer, and a finite-difference gradient checker.
//! - [`env`]: a deterministic 8x8 go-to-object gridworld with templated
//!   language missions, egocentric 7x7 observations, and a BFS expert.
//! - [`model`]: the interleaved perception-decision architecture plus the
//!   stacked and flat-baseline ablation variants.
//! - [`losses`]: GAE, the clipped PPO surrogate, symmetric InfoNCE,
//!   imitation cross-entropy, and their weighted combination.
//! - [`trainer`]: rollout collection, PPO updates, supervised pre-training,
//!   evaluation, and the full training loop.
//! - [`metrics`]: stability ratio, variance reduction, convergence step,
//!   and JSON-lines metrics logging.
//! - [`checkpoint`] / [`config`] / [`cli`]: persistence and the command-line
//!   front end.

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod env;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod tensor;
pub mod trainer;
