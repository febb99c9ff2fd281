//! Design, simulation and analysis of a single-shot single-photon
//! spectrometer built from a virtually imaged phased array (VIPA) and a
//! SPAD line array, plus the heralding-rate model for frequency-multiplexed
//! repeater links that motivates it.
//!
//! * [`optics`]: focal-plane forward model (phase, intensity, dispersion, FSR, resolution).
//! * [`design`]: inversion of the design relations (angle, f_x, f_in, f_y, thickness).
//! * [`sim`]: seeded Monte Carlo of weak coherent pulses on the SPAD row.
//! * [`analysis`]: time histograms, windowed profiles, Lorentzian fits, mode classification.
//! * [`herald`]: single- vs multi-mode heralding probabilities and crossover counts.

pub mod analysis;
pub mod design;
pub mod error;
pub mod herald;
pub mod optics;
pub mod sim;
pub mod units;

pub use error::{Error, Result};
