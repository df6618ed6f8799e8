pub mod attention;
pub mod convlstm;
pub mod error;
pub mod harness;
pub mod imaging;
pub mod losses;
pub mod model;
pub mod numerics;

pub use error::{Error, Result};
