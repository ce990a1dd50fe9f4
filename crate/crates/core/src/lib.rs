pub mod data;
pub mod domain;
pub mod dsbn;
pub mod error;
pub mod eval;
pub mod experiments;
pub mod checkpoint;
pub mod config;
pub mod losses;
pub mod mean_teacher;
pub mod model;
pub mod report;
pub mod nn;
pub mod trainer;

pub use domain::DomainId;
pub use error::{Error, Result};
