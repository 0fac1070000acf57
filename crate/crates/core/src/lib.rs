pub mod augment;
pub mod cli;
pub mod backbones;
pub mod dataset;
pub mod geometry;
pub mod heads;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod pipeline;
