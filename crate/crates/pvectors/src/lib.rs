pub mod error;
pub mod features;
pub mod gradcheck;
pub mod metrics;
pub mod model;
pub mod params;
pub mod sfa;
pub mod sfai;
pub mod tdnn;
pub mod tensor;
pub mod training;
pub mod transformer;

pub use error::{Error, Result};
