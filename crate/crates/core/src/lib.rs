pub mod belief;
pub mod error;
pub mod fitting;
pub mod geometry;
pub mod hedac;
pub mod io;
pub mod lagrangian;
pub mod linalg;
pub mod mission;
pub mod pso;
pub mod sensing;
pub mod spline;
pub mod surrogate;

pub use error::{Error, Result};
