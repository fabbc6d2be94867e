//! QCFS activations, integrate-and-fire conversion and a tiny YOLO-style
//! detector, with the training and evaluation harness around them.

pub mod bbox;
pub mod convert;
pub mod error;
pub mod eval;
pub mod graph;
pub mod metrics;
pub mod neuron;
pub mod ops;
pub mod par;
pub mod qcfs;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{Real, Tensor};
