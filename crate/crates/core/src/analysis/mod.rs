//! Estimators that invert the measurement protocols.

pub mod decay;
pub mod excitation;
pub mod hyperfine;
pub mod lm;
pub mod lorentzian;
pub mod readout;
pub mod stats;
pub mod trace;

pub use decay::{exponential_rate_mle, fit_damped_cosine, fit_exponential, fit_fluorescence, DampedCosineFit, ExpFit, FluorescenceFit};
pub use excitation::{excitation_count, spectral_fwhm};
pub use hyperfine::{extract_b_rabi, fit_omega_i, OmegaIFit, ShiftedLine};
pub use lorentzian::{fit_lorentzian, fit_multi_lorentzian, LorentzianFit};
pub use readout::{b_from_eta, fit_readout_curve, fit_readout_curve_weighted, readout_threshold, ReadoutFit, ReadoutModel, Threshold};
pub use stats::ks_test;
pub use trace::{classify_trace, estimate_eta, estimate_eta_resolved, wald, ClassifyOptions, EtaEstimate, EtaPair, TraceClassification};
