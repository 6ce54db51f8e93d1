pub mod dataset;
pub mod encoder;
pub mod error;
pub mod kbci;
pub mod knowledge;
pub mod model;
pub mod numeric;
pub mod params;
pub mod prediction;
pub mod trainer;

pub use error::{Error, Result};
