pub mod attention;
pub mod checkpoint;
pub mod dataset;
pub mod error;
pub mod featurize;
pub mod gradcheck;
pub mod graph;
pub mod layout;
pub mod model;
pub mod optim;
pub mod params;
pub mod rng;
pub mod synth;
pub mod tensor;
pub mod train;

pub use error::{EetError, Result};
pub use graph::{Graph, Mask, Var};
pub use params::ParamSet;
pub use tensor::Tensor;
