pub mod attention;
pub mod bench;
pub mod corpus;
pub mod decoder;
pub mod dsp;
pub mod error;
pub mod fusion;
pub mod gradcheck;
pub mod linalg;
pub mod losses;
pub mod model;
pub mod optim;
pub mod params;
mod projection;
pub mod speech;
pub mod ssm;
pub mod text;
pub mod train;

pub use error::{Error, Result};
