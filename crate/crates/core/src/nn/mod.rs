//! Dense math, the transformer, and parameter storage.

mod model;
mod params;
mod scalar;

pub use model::{Evaluation, Mode, ModelConfig, Transformer};
pub use params::{cosine, dot, norm, Layout, ParamVec, ParameterVector, Segment};
pub use scalar::{matmul, Precision, Real};
