//! Forecasting toolkit for short, noisy time series.
//!
//! The library fits exact Gaussian-process regressions with a spectral
//! mixture kernel to univariate series, estimates the kernel hyperparameters
//! by MAP optimization, Hamiltonian Monte Carlo, or Bayesian optimization,
//! and compares the resulting forecasts against a classical ARIMA baseline.
//! Every fit produces calibrated 95% credible intervals in the data's native
//! units.
//!
//! All numeric code is generic over the [`scalar::Scalar`] type; the aliases
//! at the crate root pin the common `f64` instantiation.

pub mod arima;
pub mod bayesopt;
pub mod eval;
pub mod gp;
pub mod inference;
pub mod kernels;
pub mod model_file;
pub mod optimize;
pub mod scalar;
pub mod timeseries;

pub use scalar::Scalar;

/// `f64` time series.
pub type TimeSeries64 = timeseries::TimeSeries<f64>;
/// `f64` spectral mixture kernel hyperparameters.
pub type SmKernelParams64 = kernels::SmKernelParams<f64>;
/// `f64` observation-noise variance.
pub type NoiseParam64 = kernels::NoiseParam<f64>;
/// `f64` fitted Gaussian-process model.
pub type GpModel64 = gp::GpModel<f64>;
/// `f64` posterior predictive summary.
pub type PredictiveDistribution64 = gp::PredictiveDistribution<f64>;
/// `f64` HMC posterior sample.
pub type HmcChain64 = inference::HmcChain<f64>;
/// `f64` Bayesian-optimization trace.
pub type TuneTrace64 = bayesopt::TuneTrace<f64>;
/// `f64` ARIMA model.
pub type ArimaModel64 = arima::ArimaModel<f64>;
