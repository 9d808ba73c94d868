//! Quantization-aware training lab for small fully connected networks.
//!
//! The crate generates a two-class ring dataset in the plane, trains
//! `width-depth` ReLU classifiers in floating point, retrains them with
//! low-bit weights and/or activations, and renders prediction maps that
//! expose how each kind of quantization error shows up.

pub mod checkpoint;
pub mod data;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod gradcheck;
pub mod model;
pub mod nn;
pub mod quant;
pub mod rng;
pub mod tensor;
pub mod train;

pub use data::{DatasetSpec, LabeledDataset, Point2, Sample, Window};
pub use error::{Error, Result};
pub use eval::{EvalSet, PredictionMap};
pub use model::{Model, ModelConfig, Network};
pub use nn::{DenseLayer, GradientSet};
pub use quant::{LayerQuantState, QuantSpec, QuantState};
pub use tensor::Matrix;
pub use train::{ClrSchedule, MetricLog, TrainConfig};
