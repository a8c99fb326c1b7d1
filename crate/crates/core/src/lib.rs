pub mod datagen;
pub mod error;
pub mod io;
pub mod metrics;
pub mod netcore;
pub mod router;
pub mod sample;
pub mod schedules;
pub mod train;
pub mod seed;

pub use error::{Error, Result};
