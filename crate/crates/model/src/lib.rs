//! Relation-aware AU recognition network with RoI inpainting and optical
//! flow auxiliary heads, built on candle.

pub mod backbone;
pub mod batch;
pub mod checkpoint;
pub mod error;
pub mod model;
pub mod nn;
pub mod ofe;
pub mod relation;
pub mod roii;
pub mod train;

pub use backbone::Prediction;
pub use batch::Batch;
pub use error::{Error, Result};
pub use model::{ParamScope, Rtatl};
pub use nn::Mode;
pub use train::{evaluate, supervised_loss, LossReport, StepPhase, Trainer};
