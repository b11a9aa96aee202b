//! PaTH attention on the CPU: data-dependent multiplicative position
//! encoding via cumulative Householder-like products, with a blockwise
//! FlashAttention-style forward, incremental decoding, a simulated ring
//! context-parallel variant, hand-weighted constructions, synthetic task
//! generators, and a tiny training harness.

pub mod attention;
pub mod blockwise;
pub mod constructions;
pub mod decode;
pub mod error;
pub mod householder;
pub mod linalg;
pub mod ring;
pub mod tasks;
pub mod test_support;
pub mod train;

pub use attention::{AttentionBatch, LogitMatrix};
pub use blockwise::{BlockConfig, BlockFactors};
pub use decode::DecodeCache;
pub use error::{PathError, Result};
pub use householder::{HouseholderSeq, UTFactors};
pub use tasks::TaskExample;
