pub mod attacks;
pub mod dataset;
pub mod ensemble;
pub mod error;
pub mod harness;
pub mod learner;
pub mod metrics;
pub mod oracle;
pub mod par;
pub mod signature;

pub use error::{Error, Result};
