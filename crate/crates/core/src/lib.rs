pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod error;
pub mod evaluation;
pub mod io;
pub mod losses;
pub mod networks;
pub mod optim;
pub mod phantom;
pub mod preproc;
pub mod scoring;
pub mod training;
pub mod volume;

pub use error::{Error, ExitStatus, Result};
pub use volume::{IntensityDomain, Volume};
