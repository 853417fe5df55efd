pub mod error;
pub mod fourier;
pub mod io;
pub mod kernel;
pub mod moments;
pub mod ode;
pub mod particles;
pub mod quad;
pub mod rng;
pub mod selfsimilar;
pub mod shear;
pub mod stats;

pub use error::{Error, Result};
