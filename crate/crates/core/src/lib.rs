pub mod data;
pub mod diffcore;
pub mod error;
pub mod eval;
pub mod linalg;
pub mod losses;
pub mod model;
pub mod rigidity;
pub mod trainer;

pub use error::{Error, Result};
