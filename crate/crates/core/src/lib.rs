pub mod branches;
pub mod cycle;
pub mod extractor;
pub mod mff;
pub mod model;
pub mod pipeline;
pub mod scalar;
pub mod skeleton;
pub mod synth;
pub mod tensor;

pub use scalar::Scalar;
pub use tensor::ParamStore;
pub use tensor::{Tape, Tensor, Var};

pub type Tensor64 = Tensor<f64>;
pub type Tensor32 = Tensor<f32>;
pub type Tape64 = Tape<f64>;
pub type Tape32 = Tape<f32>;
pub type ParamStore64 = ParamStore<f64>;
pub type ParamStore32 = ParamStore<f32>;
pub type GaitTensor64 = skeleton::GaitTensor<f64>;
pub type GaitTensor32 = skeleton::GaitTensor<f32>;
pub type BranchBundle64 = branches::BranchBundle<f64>;
pub type BranchBundle32 = branches::BranchBundle<f32>;
