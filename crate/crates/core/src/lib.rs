pub mod backbone;
pub mod blocks;
pub mod config;
pub mod dsf;
pub mod embedding;
pub mod error;
pub mod harness;
pub mod heads;
pub mod mcp;
pub mod numerics;
pub mod theory;

pub use error::{Error, Result};
