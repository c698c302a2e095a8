//! Simulation and training of broad-spectrum diffractive neural networks:
//! several wavelength channels share one stack of passive phase masks,
//! and the chromatic dispersion of the masks turns each channel into a
//! distinct base learner whose detector intensities are aggregated by a
//! Sum, Maxout or Maxout+FC head.

pub mod checkpoint;
pub mod data;
pub mod error;
mod fft;
pub mod field;
pub mod network;
pub mod optics;
pub mod training;

pub use rustfft::num_complex::Complex64 as Complex;

pub use error::{Error, Result};
pub use field::{ChannelSet, ComplexField, GridSpec, IntensityMap};
pub use network::{ClassScores, DetectorLayout, FcWeights, Head, Network, NetworkConfig, Simulator};
pub use optics::{DispersionKind, DispersionModel, PhaseMask, Scheme};
