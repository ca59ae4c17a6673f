pub mod cache;
pub mod cli;
pub mod cluster;
pub mod controller;
pub mod corpus;
pub mod embed;
pub mod error;
pub mod index;
pub mod sim;
pub mod util;
pub mod vector;

pub use error::{Error, Result};
