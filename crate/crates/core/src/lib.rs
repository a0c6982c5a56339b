pub mod error;
pub mod model;
pub mod num;
pub mod sim;
pub mod trace;
pub mod nn;
pub mod encoding;
pub mod baselines;
pub mod agent;
pub mod sl;
pub mod eval;
pub mod rl;
pub mod config;
pub mod experiment;

pub use num::Scalar;

/// Double-precision network used throughout training.
pub type Net = nn::Network<f64>;
pub type Gradients = nn::Gradients<f64>;
pub type Adam = nn::Adam<f64>;
