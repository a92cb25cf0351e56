//! Tools for triplet-comparison studies of compressed HDR images: stimulus
//! catalogs, study design, response collection, cleansing, JND scale
//! reconstruction and metric benchmarking.

pub mod bench;
pub mod bitrate;
pub mod catalog;
pub mod cleansing;
pub mod design;
pub mod error;
pub mod pipeline;
pub mod prob;
pub mod scale;
pub mod seed;
pub mod store;
pub mod synthetic;

pub use error::{Error, Result};
