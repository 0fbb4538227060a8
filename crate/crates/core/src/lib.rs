//! Neural Fourier filter bank.

pub mod error;
pub mod experiment;
pub mod filter_bank;
pub mod fourier;
pub mod grid;
pub mod io;
pub mod math;
pub mod parallel;
pub mod params;
pub mod real;
pub mod tasks;

pub use error::{NffbError, Result};
