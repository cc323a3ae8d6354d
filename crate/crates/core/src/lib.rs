pub mod autodiff;
pub mod error;
pub mod losses;
pub mod threshold;
pub mod image;
pub mod cim;
pub mod pipeline;
pub mod gradcurves;

#[cfg(test)]
mod testutil;

pub use error::{Error, Result};
