pub mod analysis;
pub mod error;
pub mod experiment;
pub mod gating;
pub mod io;
pub mod layer;
pub mod mpo;
pub mod optim;
pub mod scalar;
pub mod tensor;

pub use error::{Error, Result};
pub use scalar::Scalar;
pub use tensor::{svd, SvdResult, Tensor};

pub use gating::GateConfig;
pub use layer::{DenseMoeBank, MoeBank, MpoeExpertBank};
pub use mpo::{FactorizationPlan, MpoFactors};

pub type Tensor64 = Tensor<f64>;
pub type Tensor32 = Tensor<f32>;
pub type MpoFactors64 = MpoFactors<f64>;
pub type MpoFactors32 = MpoFactors<f32>;
pub type MpoeBank64 = MpoeExpertBank<f64>;
pub type MpoeBank32 = MpoeExpertBank<f32>;
