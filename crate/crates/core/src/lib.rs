//! Image-domain dual-energy CT material decomposition with iterative
//! convolutional refiners (BCD-Net), plus baselines and synthetic data.

pub mod bcdnet;
pub mod conv;
pub mod ep;
pub mod error;
pub mod eval;
pub mod image;
pub mod phantom;
pub mod physics;
pub mod refiner;
pub mod training;
pub mod verify;

pub use error::{Error, Result};
