pub mod autodiff;
pub mod error;
pub mod imaging;
pub mod infer;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod pyramid;
pub mod trainer;

pub use error::{Error, Result};
