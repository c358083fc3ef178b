//! Bottom-up class-agnostic segmentation on the real projective sphere.
//!
//! The pipeline: a small convolutional encoder-decoder emits a unit line
//! feature per pixel, trained so that features agree within an entity and
//! are orthogonal across entities; inference clusters the features with
//! mean-shift on the hypersphere and optionally refines across resolutions.

pub mod cluster;
pub mod data;
pub mod error;
pub mod geometry;
pub mod labels;
pub mod losses;
pub mod metrics;
pub mod network;
pub mod persist;
pub mod tensor;
pub mod train;

pub use error::{DataError, GeometryError, PersistError, TensorError, TrainError};
pub use tensor::graph::{Graph, Var};
pub use tensor::Tensor;
