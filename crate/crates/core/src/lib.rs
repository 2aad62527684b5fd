//! Cycle-level simulator, static scheduler and analytic cycle predictor for a
//! statically scheduled streaming tensor processor running int8 encoder layers.

pub mod error;
pub mod exec;
pub mod machine;
pub mod scheduler;
pub mod simulator;
pub mod reference;
pub mod tensor;

pub use error::{Error, Result};
pub use exec::Exec;
