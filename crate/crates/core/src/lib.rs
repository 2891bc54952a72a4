pub mod cli;
pub mod error;
pub mod estimators;
pub mod factor_model;
pub mod io;
pub mod subspace;
pub mod synthetic;

pub use error::{Error, Result};
pub use estimators::{EstimatorConfig, FitReport, Mode, Termination, WeightedScatter};
pub use factor_model::{DataMatrix, FactorModel, Layout};
