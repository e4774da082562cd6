//! Everything around the model: data, cropping, tracking, training,
//! metrics and persistence.

pub mod synthetic;
pub mod crop;
pub mod metrics;
pub mod model;
pub mod tracker;
pub mod optim;
pub mod train;
pub mod ablate;
pub mod checkpoint;
pub mod io;
pub mod svg;
