pub mod cli;
pub mod config;
pub mod corpus;
pub mod error;
pub mod evidence;
pub mod model;
pub mod nn;
pub mod pipeline;
pub mod text_index;

pub use error::{Error, Result};
