pub mod error;
pub mod eval;
pub mod experiment;
pub mod geometry;
pub mod gradcheck;
mod maps;
pub mod metatta;
pub mod mvsnet;
pub mod photoloss;
pub mod scenegen;

pub use error::{Error, Result};
