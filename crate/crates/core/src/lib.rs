//! Domain core for the sensor wallet: time, uplink decoding, feature
//! engineering, neural networks, forecasting and the device simulator.
//!
//! The numeric code is generic over [`Scalar`]; the aliases below pin it to
//! `f64`, which is what the service uses.

pub mod downlink;
pub mod features;
pub mod forecaster;
pub mod neural;
pub mod reading;
pub mod scalar;
pub mod sim;
pub mod time;
pub mod uplink;

pub use scalar::Scalar;
pub use time::{Duration, Timestamp};

pub type Ffnn = neural::FeedForward<f64>;
pub type LstmNet = neural::LstmNetwork<f64>;
pub type Adam = neural::AdamState<f64>;
pub type Mat = neural::Matrix<f64>;
