pub mod dataset;
pub mod error;
pub mod harness;
pub mod metrics;
pub mod model;
pub mod ndmath;
pub mod objectives;
pub mod seed;
pub mod sim;
pub mod trajio;

pub use error::{Error, Result};
