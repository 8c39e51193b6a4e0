//! Simulation and estimation toolkit for a single electron spin that is
//! hyperfine-coupled to one or more nuclear spins and read out by counting
//! the microwave photons it emits into a superconducting resonator.
//!
//! The crate is organised bottom-up:
//!
//! - [`spin`]: Hamiltonian, eigenstructure, matrix elements, Purcell and
//!   cross-relaxation rates, AC-Zeeman shifted forbidden lines.
//! - [`lattice`]: point-dipole hyperfine couplings over a crystal model and
//!   nuclear site assignment.
//! - [`dynamics`]: quantum-jump Monte Carlo over pulse schedules.
//! - [`detector`]: photon counter with efficiency, dark counts and dead time.
//! - [`sequencer`]: the measurement protocols (spectroscopy, traces, readout,
//!   ELDOR, DNP, Rabi/Ramsey/echo) and closed-loop frequency tracking.
//! - [`analysis`]: least-squares fits and the estimators that invert the
//!   protocols.
//!
//! Frequencies are angular (rad/s) everywhere inside the crate. Results that
//! are meant for humans (fit reports, lattice tables) are converted to Hz at
//! the boundary and say so in their field names.

pub mod analysis;
pub mod detector;
pub mod dynamics;
mod error;
pub mod lattice;
pub mod rng;
pub mod sequencer;
pub mod spin;
pub mod units;

pub use error::{Error, Result};
