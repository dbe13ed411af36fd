//! Context-aware multiple instance learning with hook tokens.
//!
//! A small set of learnable hook tokens reads from a bag of instance
//! features, exchanges information among itself, and writes context back into
//! every instance, in time linear in the bag size. The crate contains the
//! forward model, hand-written gradients checked against finite differences,
//! an Adam trainer, synthetic MIL benchmarks, and executable checks of the
//! block's structural properties (rank of the induced instance dependency,
//! two-hop connectivity, scaling).

pub mod checkpoint;
#[cfg(feature = "cli")]
pub mod commands;
pub mod config;
pub mod data;
pub mod error;
pub mod grad;
pub mod heads;
pub mod hook;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod rng;
pub mod tensor;
pub mod theory;
pub mod train;
pub mod verify;

pub use error::{Error, Result};
pub use tensor::Matrix;
