//! Interaction-aware trajectory prediction, traffic-light classification and
//! their fusion into a robot crossing decision, on a small reverse-mode
//! autodiff engine.

pub mod attenet;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod fusion;
pub mod gradcheck;
pub mod graph;
pub mod iatcnn;
pub mod image;
pub mod kernels;
pub mod labels;
pub mod metrics;
pub mod optim;
pub mod par;
pub mod params;
pub mod synth;
pub mod tensor;

pub use error::{Error, Result};
pub use graph::{Gradients, Graph, Var};
pub use params::{ParamId, ParamStore};
pub use tensor::Tensor;
