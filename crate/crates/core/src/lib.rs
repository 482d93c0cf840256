pub mod diffusion;
pub mod downstream;
pub mod error;
pub mod eval;
pub mod mesh;
pub mod model;
pub mod numerics;
pub mod synthetic;
pub mod training;

pub use error::{Error, Result};
