//! Core numerics for the face-synthesis workspace: a small reverse-mode tape,
//! NCHW convolution kernels with a data-parallel lane, the style subspace,
//! the synthesis and recognition networks, training losses, and a checkpoint
//! container.
//!
//! Everything is deterministic for a fixed seed: the parallel and sequential
//! lanes produce bitwise-identical results (fixed work partition, ordered
//! reductions), and all randomness flows through [`nn::derive_rng`].

pub mod blas;
pub mod checkpoint;
pub mod conv;
pub mod error;
pub mod fr;
pub mod graph;
pub mod nn;
pub mod objectives;
pub mod parallel;
pub mod reference;
pub mod subspace;
pub mod synthesis;

pub use error::{CoreError, Result};
pub use graph::{Gradients, Tape, Var};
pub use nn::ParamSet;
