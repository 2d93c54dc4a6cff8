pub mod error;
pub mod eval;
pub mod frame;
pub mod models;
pub mod pipeline;
pub mod postprocess;
pub mod roobi;
pub mod synthdata;
pub mod targets;

pub use error::{CoreError, Result};
