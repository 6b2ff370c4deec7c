//! CPU network: tensors, layer kernels, declarative specs and the
//! forward/backward executor.

pub mod model;
pub mod ops;
pub mod params;
pub mod spec;
pub mod tensor;

pub use model::{Network, ResidualBlock};
pub use params::{init_parameters, Parameters};
pub use spec::{
    build_model, build_raspp, build_raspp_with, build_unet, build_unet_with, param_count, ModelKind,
    NetworkOptions, NetworkSpec,
};
pub use tensor::Tensor;
