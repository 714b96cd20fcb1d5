//! Iterative coregistration of oblique photographs against georeferenced
//! map tiles.

pub mod bench;
pub mod bridge;
pub mod calibrate;
pub mod engine;
pub mod features;
pub mod geo;
pub mod raster;
pub mod robustfit;
pub mod synth;
