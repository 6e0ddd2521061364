pub mod corpus;
pub mod error;
pub mod exec;
pub mod harness;
pub mod kv;
pub mod model;
pub mod objectives;
pub mod retrieval;
pub mod store;
pub mod tensor;

pub use error::{RammError, Result};
pub use exec::Exec;
pub use tensor::{Real, Tensor};
