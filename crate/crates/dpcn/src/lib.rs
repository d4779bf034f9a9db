//! D-PCN training laboratory: parallel CNN feature extractors driven apart
//! by a discriminator, with fused features classified by an extra classifier.

pub mod analysis;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod image_io;
pub mod layers;
pub mod metrics;
pub mod model;
pub mod oracle;
pub mod params;
pub mod rng;
pub mod tape;
pub mod train;
pub mod tensor;
