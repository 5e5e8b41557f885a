//! Multiple anchor learning for dense detectors on synthetic scenes.

pub mod cli;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod gradcheck;
pub mod losses;
pub mod mal;
pub mod matching;
pub mod model;
pub mod scenes;

pub use error::{Error, Result};
