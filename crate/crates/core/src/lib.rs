//! Gate-Shift-Fuse spatio-temporal kernels with a small reverse-mode tape,
//! toy video classifiers, cost accounting and brute-force oracles.

pub mod accounting;
pub mod bench;
pub mod data;
pub mod error;
pub mod gsf;
pub mod layers;
pub mod nets;
pub mod ops;
pub mod oracle;
pub mod parallel;
pub mod rng;
pub mod selftest;
pub mod tape;
pub mod tensor;
pub mod train;
pub mod weights;

pub use error::{GsfError, Result};
pub use tape::{BatchStats, Gradients, Tape, Var};
pub use tensor::{Element, Tensor};
