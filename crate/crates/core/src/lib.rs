//! Dynamic scene reconstruction with a canonical radiance field and dual
//! Eulerian/Lagrangian rigid-motion fields, plus motion-based part discovery.

pub mod autodiff;
pub mod data;
pub mod error;
pub mod eval;
pub mod fields;
pub mod model;
pub mod parts;
pub mod render;
pub mod rigid;
pub mod train;

pub use error::{Error, Result};
