//! Parameter bookkeeping and transformer layers.

pub mod layers;
pub mod registry;

pub use layers::{block_forward, linear, BlockParams, LN_EPS, MLP_RATIO};
pub use registry::{BoundParams, GradMode, Init, ParamDesc, ParamLayout, Parameter, ParameterRegistry};
