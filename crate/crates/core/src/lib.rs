pub mod camera;
pub mod cli;
pub mod error;
pub mod feedback;
pub mod integration;
pub mod io;
pub mod kinematics;
pub mod metrics;
pub mod nn;
pub mod raster;
pub mod rotmath;
pub mod sampling;
pub mod scenario;
pub mod toy;

pub use error::{Error, Result};
