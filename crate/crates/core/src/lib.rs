pub mod error;
pub mod geodata;
pub mod loss;
pub mod model;
pub mod metrics;
pub mod morph;
pub mod params;
pub mod points;
pub mod prompt;
pub mod raster;
pub mod seed;
pub mod tape;
pub mod train;

pub use error::{Error, Result};
