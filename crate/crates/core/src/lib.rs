pub mod attribution;
pub mod error;
pub mod jsae;
pub mod lm;
pub mod sae;
pub mod scalar;
pub mod tensor;
pub mod workbench;

pub use error::{Error, Result};
