pub mod basis;
pub mod cli;
pub mod error;
pub mod errors;
pub mod h_interp;
pub mod local_ops;
pub mod mesh;
pub mod semidisc;
pub mod timeint;

pub use error::{Error, Result};
