//! Dynamic radiance fields from monocular video: a static Eulerian feature
//! grid superposed with a dynamic grid splatted from Lagrangian appearance
//! particles whose motion is learned.

pub mod error;
pub mod eval;
pub mod grids;
pub mod image;
pub mod losses;
pub mod math;
pub mod model;
pub mod ndiff;
pub mod nn;
pub mod particles;
pub mod radiance;
pub mod scene;
pub mod trainer;

pub use error::{Error, Result};
