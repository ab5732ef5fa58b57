//! Path-locked dual-expert decoder.
//!
//! A small decoder-only transformer whose per-layer feed-forward block is
//! duplicated into a no-think and a think expert. A control token in the
//! prompt selects one expert for every layer and every decoding step. The
//! crate also carries the numeric substrate (tensors, a reverse-mode tape
//! and finite-difference oracles), a routing-conditioned trainer, the
//! quadratic-surrogate analysis of mode conflict, and a reasoning-leakage
//! evaluation harness.

pub mod error;
pub mod grad;
pub mod kernels;
pub mod leakage;
pub mod model;
pub mod ops;
pub mod tape;
pub mod tensor;
pub mod theory;
pub mod tokenizer;
pub mod trainer;

pub use error::{Error, Result};
pub use tape::{Reduction, Tape, Var};
pub use tensor::{ParamVector, Tensor};
pub use tokenizer::{Route, Vocabulary};
