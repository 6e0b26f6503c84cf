pub mod cli;
pub mod diffnet;
pub mod error;
pub mod evalkit;
pub mod gradest;
pub mod imputers;
pub mod lexmodel;
pub mod maskdist;
pub mod rng;
pub mod synthgen;
pub mod trainer;

pub use error::{LexError, Result};
