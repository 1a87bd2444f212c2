pub mod blob;
pub mod data;
pub mod error;
pub mod evaluation;
pub mod freezing;
pub mod losses;
pub mod networks;
pub mod synthetic;
pub mod training;

pub use error::{PacaError, Result};
