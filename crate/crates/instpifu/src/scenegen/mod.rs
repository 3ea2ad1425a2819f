//! Procedural synthetic scenes with exact ground truth, plus dataset
//! serialisation and external-corpus adapters.

pub mod dataset;
pub mod primitives;
pub mod raster;
pub mod rooms;
pub mod scene;
