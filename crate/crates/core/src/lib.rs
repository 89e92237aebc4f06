pub mod corrector;
pub mod env;
pub mod error;
pub mod fft;
pub mod fslattice;
pub mod grid;
pub mod linspde;
pub mod monotone;
pub mod multiscale;
pub mod rng;
pub mod stats;

pub use error::{Error, Result};
