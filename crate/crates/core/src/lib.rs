//! Sequence-to-sequence translation in which a frozen context encoder's
//! last-layer states are fused into every encoder and decoder layer
//! through dedicated attention modules.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod decode;
pub mod dropnet;
pub mod error;
pub mod experiment;
pub mod gradcheck;
pub mod graph;
pub mod model;
pub mod nn;
pub mod optim;
pub mod params;
pub mod provider;
pub mod tensor;
pub mod tokenizer;
pub mod training;

pub use error::{Error, Result};
pub use graph::{Graph, Var};
pub use params::{Bindings, ParamId, ParamStore};
pub use tensor::Tensor;
