pub mod error;
pub mod experiments;
pub mod fidelity;
pub mod grape;
pub mod io;
pub mod lbfgs;
pub mod lie;
pub mod linalg;
pub mod propagation;
pub mod systems;
pub mod targets;

pub use error::{Error, Result};
