//! Data pipeline, configuration and evaluation for relation-aware facial
//! action unit recognition with self-supervised RoI inpainting and optical
//! flow auxiliary tasks.

pub mod config;
pub mod dataset;
pub mod error;
pub mod flow;
pub mod geometry;
pub mod image;
pub mod landmarks;
pub mod metrics;
pub mod sample;
pub mod synth;

pub use config::{load_config, AuSpec, Config, HyperParams, ModelDims, TrainParams};
pub use error::{Error, Result};
pub use flow::{FlowField, FlowProvider};
pub use image::Image;
pub use sample::{MaskDescriptor, Sample};
