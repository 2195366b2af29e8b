pub mod autodiff;
pub mod datagen;
pub mod end2end;
pub mod error;
pub mod experiments;
pub(crate) mod ipm;
pub mod linalg;
pub mod metatrain;
pub mod oracles;
pub mod problems;
pub mod psdmap;
pub mod projection;
pub mod random;
pub mod solver;

pub use error::{Error, Result};
