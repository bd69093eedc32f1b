pub mod cli;
pub mod corpus;
pub mod ecdf;
pub mod error;
pub mod model;
pub mod numerics;
pub mod train;

pub use error::{Error, Result};
