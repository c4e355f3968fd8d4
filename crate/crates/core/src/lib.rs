pub mod diffcore;
pub mod error;

pub use error::{Result, UbrError};
pub mod network;
pub mod losses;
pub mod rng;
pub mod phantom;
pub mod sampler;
pub mod trainer;
pub mod evaluate;
pub mod selfcheck;
