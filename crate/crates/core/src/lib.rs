//! Expression transfer with a style-based generator.
//!
//! The pipeline normalises two face images from their landmarks, recovers a
//! layered style vector for each by gradient descent through a frozen
//! generator, splices expression layers of one style into the other, renders
//! the fused style and composites it back onto the identity image.
//!
//! Module map:
//!
//! - [`tensor`], [`kernels`], [`autodiff`], [`gradcheck`]: dense tensors and a
//!   tape-based reverse-mode engine.
//! - [`generator`]: mapping and synthesis networks, [`ntws`] weight files.
//! - [`perceptual`]: pixel and feature-space distances.
//! - [`inversion`]: style inference.
//! - [`fusion`]: layer-wise style splicing and the contiguous-block search.
//! - [`geometry`]: rectification, affine warps, hull masks and blending.
//! - [`metrics`]: ℓ1, ℓ2 and SSIM.
//! - [`imageio`], [`fixture`], [`pipeline`]: I/O, synthetic test faces and the
//!   end-to-end transfer.

pub mod autodiff;
pub mod error;
pub mod fusion;
pub mod generator;
pub mod fixture;
pub mod geometry;
pub mod gradcheck;
pub mod imageio;
pub mod inversion;
pub mod kernels;
pub mod metrics;
pub mod ntws;
pub mod perceptual;
pub mod pipeline;
pub mod tensor;

pub use autodiff::{Gradients, Graph, Var};
pub use error::{Error, Result};
pub use generator::{Generator, GeneratorConfig, ImageTensor, NoiseBank, StyleVector};
pub use inversion::{invert, InversionConfig, InversionResult, Optimizer};
pub use ntws::WeightStore;
pub use perceptual::{Distance, DistanceKind, DistanceSpec, FeatureExtractor};
pub use tensor::Tensor;
