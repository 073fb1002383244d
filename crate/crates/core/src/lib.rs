//! Text-image inconsistency localization.
//!
//! Given an image and its caption, the pipeline aligns the caption's token
//! embedding to the image through a diffusion backend, edits the image to
//! materialize the caption, realigns to the edited image, and compares
//! conditional noise estimates to produce a pixel mask of the inconsistent
//! region, the inconsistent words, and a consistency score in `[0, 100]`.
//!
//! All numerical code is generic over [`Scalar`] (`f32` or `f64`); the
//! aliases below fix the scalar to `f64`, which is what the CLI uses.

pub mod align;
pub mod backends;
pub mod bench;
pub mod dataset;
pub mod edit;
pub mod error;
pub mod io;
pub mod localize;
pub mod mask;
pub mod maskgen;
pub mod metrics;
pub mod pipeline;
pub mod scalar;
pub mod seed;
pub mod tensor;

pub use error::{Error, Result, Stage};
pub use scalar::Scalar;

pub type Image = tensor::ImageTensor<f64>;
pub type Embedding = tensor::TokenEmbeddingMatrix<f64>;
pub type Schedule = tensor::NoiseSchedule<f64>;
pub type Map = mask::DiffMap<f64>;
pub type Bundle = backends::BackendBundle<f64>;

pub type AlignConfig = align::AlignConfig<f64>;



pub type ImageF32 = tensor::ImageTensor<f32>;
pub type EmbeddingF32 = tensor::TokenEmbeddingMatrix<f32>;
pub type BundleF32 = backends::BackendBundle<f32>;

pub use mask::BinaryMask;
pub type MaskGenConfig = maskgen::MaskGenConfig<f64>;
pub type Analysis = localize::AnalysisResult<f64>;
pub type PipelineConfig = pipeline::PipelineConfig<f64>;
