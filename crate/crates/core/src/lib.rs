pub mod cubature;
pub mod error;
pub mod esgvi;
pub mod graph;
pub mod info;
pub mod io;
pub mod liegroup;
pub mod map;
pub mod metrics;
pub mod noise;
pub mod numeric;
pub mod sim;
pub mod trace;

pub use error::{Error, Result};
