pub mod classes;
pub mod error;
pub mod fusion;
pub mod genunet;
pub mod grid;
pub mod imgops;
pub mod losses;
pub mod metrics;
pub mod mocc;
pub mod optim;
pub mod params;
pub mod renderer;
pub mod sim;
pub mod sparse;
pub mod tape;
pub mod train;

pub use error::{Error, Result};
