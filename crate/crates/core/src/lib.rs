pub mod corpus;
pub mod crf;
pub mod embedder;
pub mod error;
pub mod eval;
pub mod knowledge;
pub mod msea;
pub mod pipeline;
pub mod promptgen;
pub mod seeds;

pub use error::{Error, Result};
