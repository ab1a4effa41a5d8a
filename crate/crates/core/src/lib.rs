//! Joint supernet/subnet training with orthogonal-softmax mask learning.
//!
//! The crate trains one full-size Conformer-lite CTC encoder together with M
//! budget-constrained subnets. Subnets are defined by binary masks over
//! parameter groups (FFN hidden-channel chunks, attention heads, convolution
//! modules, or whole modules), learned during a first training phase and
//! frozen for a second joint-training phase.
//!
//! Module map:
//! - [`autodiff`]: minimal reverse-mode tape over dense 2-D tensors.
//! - [`encoder`]: the maskable encoder, its parameter-group registry, and
//!   structural pruning.
//! - [`costs`]: per-group sparsity/FLOPs cost vectors, budgets, and an
//!   instrumented MAC-count oracle.
//! - [`orthomask`]: the orthogonal-softmax mask learner.
//! - [`baselines`]: straight-through top-k, hard-concrete L0, and
//!   bottom-blocks mask learners.
//! - [`tasks`]: synthetic sequence corpus, CTC loss with brute-force oracle,
//!   greedy decoding, label error rate.
//! - [`train`]: the two-step pipeline, optimizer, checkpoints, evaluation.
//! - [`config`]: run configuration files and hashing.
//! - [`report`]: remaining-ratio analysis of rounded masks.
//! - [`suites`]: the gradcheck/oracle verification suites shared by tests and
//!   the CLI.

pub mod autodiff;
pub mod baselines;
pub mod config;
pub mod costs;
pub mod encoder;
pub mod error;
pub mod orthomask;
pub mod report;
pub mod rng;
pub mod suites;
pub mod tasks;
pub mod train;

pub use error::{Error, Result};
