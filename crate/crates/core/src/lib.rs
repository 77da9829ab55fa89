//! Continual test-time adaptation with an expandable mixture-of-experts
//! adapter and a spectral online domain discriminator.

pub mod adaptation;
pub mod backbone;
pub mod codec;
pub mod dbe_ts;
pub mod error;
pub mod harness;
pub mod moe;
pub mod numerics;
pub mod oracles;
pub mod params;
pub mod sodd;
pub mod spectral;

pub use error::{Error, Result};
