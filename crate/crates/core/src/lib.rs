//! Convolutional networks whose kernels are shared across dilation rates.
//!
//! A multi-scale layer applies one set of `k_o / n` kernels at rates
//! `1..=n`, concatenates the branch outputs into `k_o` channels and updates
//! the kernels with the mean of the per-rate gradients. The crate builds
//! AlexNet and ResNet-{18,34,50,101,152} in vanilla, unshared and shared
//! form, counts their parameters and multiply-accumulates exactly, trains
//! them with momentum SGD and serializes them to a checksummed binary
//! format.
//!
//! Everything runs on the CPU in plain Rust. Tensors are `f32` for
//! training; every operation is generic over [`Scalar`] so gradient checks
//! can run in `f64`.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod layers;
pub mod model;
pub mod msconv;
pub mod ops;
pub mod param;
pub mod tensor;
pub mod toy;
pub mod train;
pub mod viz;
pub mod zoo;

pub use config::Config;
pub use error::{Error, Result};
pub use model::Model;
pub use msconv::{SharedGradient, SharedMultiScaleConvSpec};
pub use param::Param;
pub use tensor::{ConvGeometry, Matrix, Scalar, Shape, Tensor};
pub use train::{Evaluation, OptimState, SgdConfig};
pub use zoo::{build_model, build_topology, he_init, ArchSpec, Family, Variant};
