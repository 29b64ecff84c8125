//! Extended depth-of-field lensless imaging with radial coded masks.
//!
//! The crate covers the whole simulation loop: mask design ([`mask`],
//! [`optimizer`]), geometric PSF formation and MTF analysis ([`optics`]),
//! multi-depth measurement synthesis ([`forward`]), ADMM-TV reconstruction
//! ([`recon`]), image quality metrics ([`metrics`]) and the experiment
//! pipeline that ties them together ([`experiment`]).

pub mod error;
pub mod fft;
pub mod mask;
pub mod optics;
pub mod optimizer;
pub mod forward;
pub mod recon;
pub mod scenes;
pub mod metrics;
pub mod io;
pub mod experiment;

pub use error::{Error, Result};
