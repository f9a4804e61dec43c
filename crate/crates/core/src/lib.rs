pub mod compare;
pub mod config;
pub mod error;
pub mod evalkit;
pub mod ingest;
pub mod metrics;
pub mod model;
pub mod orchestrate;
pub mod par;
pub mod plugins;
pub mod raster;
pub mod reconstruct;
pub mod synthetic;
pub mod walkthrough;
