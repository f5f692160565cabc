//! Maximum-likelihood inference for discretely observed linear
//! birth-death-shift processes.
//!
//! The process is approximated by a two-type branching process whose
//! transition probabilities and restricted moments come from generating
//! functions evaluated on a grid of roots of unity and inverted by FFT.
//! Covariate-dependent rates are fitted with EM.

pub mod baselines;
pub mod em;
pub mod error;
pub mod genfun;
pub mod io;
pub mod model;
pub mod ode;
pub mod sim;
pub mod spectral;

pub use error::{BdsError, Result};
pub use model::{
    ModelSpec, PanelDataset, Rate, RateTriple, ReducedInterval, RegressionCoefficients,
};
