pub mod ablation;
pub mod attention;
pub mod bench;
pub mod cli;
pub mod config;
pub mod error;
pub mod numcore;
pub mod routing;
pub mod sparse_global;
pub mod tokens;
pub mod training;

pub use error::{Error, Result};
