//! Oriented object detection with rotation-sensitive deformable attention.

pub mod error;
pub mod numcore;

pub use error::{Error, Result};
pub mod geometry;
pub mod losses;
pub mod matching;
pub mod attention;
pub mod model;
pub mod harness;
