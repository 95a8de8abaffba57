//! CommonKV: cross-layer KV-cache compression for grouped-query-attention
//! decoders through shared low-rank weight factors.

pub mod budget;
pub mod check;
pub mod container;
pub mod corpus;
pub mod error;
pub mod eval;
pub mod factorization;
pub mod latent_cache;
pub mod model;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{Matrix, Real};
