#![no_std]
extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod dataset;
pub mod error;
pub mod eval;
pub mod layers;
pub mod losses;
pub mod networks;
pub mod optim;
pub mod params;
pub mod phoneme_prior;
pub mod pipeline;
pub mod tensor;

pub use error::{Error, Result};
