//! Adapter boundary for the learned models the pipeline consumes.
//!
//! A [`BackendBundle`] groups five handles (text encoder, image encoder,
//! generator, noise estimator, inpainter) with the noise schedule and the
//! guidance scale. Handles are immutable after construction. The
//! [`synthetic`] backend implements every role in closed form.

pub mod synthetic;

use std::env;
use std::fmt;
use std::path::PathBuf;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::mask::BinaryMask;
use crate::scalar::Scalar;
use crate::tensor::{ImageTensor, NoiseSchedule, Tensor, TokenEmbeddingMatrix};

pub use synthetic::SyntheticBackend;

/// Environment variable naming the model cache directory for real backends.
pub const MODEL_DIR_ENV: &str = "TIIL_MODEL_DIR";

/// Classifier-free guidance scale used when none is configured.
pub const DEFAULT_GUIDANCE_SCALE: f64 = 7.5;

/// Output of [`TextEncoder::encode_text`]; truncation is reported in `warnings`.
#[derive(Debug, Clone, PartialEq)]
pub struct TextEncoding<T> {
    pub embedding: TokenEmbeddingMatrix<T>,
    pub warnings: Vec<String>,
}

pub trait TextEncoder<T: Scalar>: Send + Sync {
    fn encode_text(&self, text: &str) -> Result<TextEncoding<T>>;
}

pub trait ImageEncoder<T: Scalar>: Send + Sync {
    fn embedding_dim(&self) -> usize;

    /// Unit-norm embedding. When `mask` is given, pixels outside it are
    /// zeroed first.
    fn encode_image(&self, image: &ImageTensor<T>, mask: Option<&BinaryMask>) -> Result<Vec<T>>;
}

pub trait Generator<T: Scalar>: Send + Sync {
    fn generate(&self, x_t: &Tensor<T>, e: &TokenEmbeddingMatrix<T>) -> Result<ImageTensor<T>>;

    /// Vector-Jacobian product: the gradient with respect to `e` of
    /// `<cotangent, generate(x_t, e)>`.
    fn generate_vjp(
        &self,
        _x_t: &Tensor<T>,
        _e: &TokenEmbeddingMatrix<T>,
        _cotangent: &Tensor<T>,
    ) -> Result<TokenEmbeddingMatrix<T>> {
        Err(Error::NotDifferentiable)
    }
}

pub trait NoiseEstimator<T: Scalar>: Send + Sync {
    fn estimate_noise(
        &self,
        x_t: &Tensor<T>,
        t: usize,
        e: &TokenEmbeddingMatrix<T>,
        schedule: &NoiseSchedule<T>,
        guidance_scale: T,
    ) -> Result<Tensor<T>>;
}

pub trait Inpainter<T: Scalar>: Send + Sync {
    fn inpaint(
        &self,
        image: &ImageTensor<T>,
        mask: &BinaryMask,
        e: &TokenEmbeddingMatrix<T>,
    ) -> Result<ImageTensor<T>>;

    /// Maximum per-value change the adapter may introduce outside the mask.
    fn preservation_tolerance(&self) -> T {
        T::zero()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Capabilities {
    pub differentiable_generator: bool,
    pub concurrent_inference: bool,
}

/// `sqrt(alpha_t)·x0 + sqrt(1 − alpha_t)·eps`.
pub fn forward_noise<T: Scalar>(
    x0: &ImageTensor<T>,
    t: usize,
    eps: &Tensor<T>,
    schedule: &NoiseSchedule<T>,
) -> Result<Tensor<T>> {
    x0.as_tensor().same_shape(eps)?;
    let alpha = schedule.alpha(t)?;
    let (a, b) = (alpha.sqrt(), (T::one() - alpha).sqrt());
    let data = x0
        .data()
        .iter()
        .zip(eps.data())
        .map(|(&x, &n)| a * x + b * n)
        .collect();
    let (h, w, c) = x0.shape();
    Tensor::new(h, w, c, data)
}

/// Which backend to construct, parsed from `synthetic` or `diffusion:<model-id>`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum BackendSpec {
    Synthetic,
    Diffusion { model_id: String },
}

impl BackendSpec {
    pub fn parse(s: &str) -> Result<Self> {
        match s.split_once(':') {
            None if s == "synthetic" => Ok(BackendSpec::Synthetic),
            Some(("diffusion", id)) if !id.is_empty() => Ok(BackendSpec::Diffusion {
                model_id: id.to_string(),
            }),
            _ => Err(Error::InvalidConfig(format!(
                "unknown backend `{s}`; expected `synthetic` or `diffusion:<model-id>`"
            ))),
        }
    }
}

impl fmt::Display for BackendSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            BackendSpec::Synthetic => f.write_str("synthetic"),
            BackendSpec::Diffusion { model_id } => write!(f, "diffusion:{model_id}"),
        }
    }
}

/// The set of model handles one analysis runs against.
#[derive(Clone)]
pub struct BackendBundle<T: Scalar> {
    pub id: String,
    pub text_encoder: Arc<dyn TextEncoder<T>>,
    pub image_encoder: Arc<dyn ImageEncoder<T>>,
    pub generator: Arc<dyn Generator<T>>,
    pub noise_estimator: Arc<dyn NoiseEstimator<T>>,
    pub inpainter: Arc<dyn Inpainter<T>>,
    pub schedule: NoiseSchedule<T>,
    pub guidance_scale: T,
    pub capabilities: Capabilities,
}

impl<T: Scalar> fmt::Debug for BackendBundle<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("BackendBundle")
            .field("id", &self.id)
            .field("capabilities", &self.capabilities)
            .finish_non_exhaustive()
    }
}

impl<T: Scalar> BackendBundle<T> {
    /// Bundle backed by the synthetic backend in every role.
    pub fn synthetic(seed: u64) -> Self {
        let backend = Arc::new(SyntheticBackend::<T>::new(seed));
        Self {
            id: format!("synthetic:{seed}"),
            text_encoder: backend.clone(),
            image_encoder: backend.clone(),
            generator: backend.clone(),
            noise_estimator: backend.clone(),
            inpainter: backend.clone(),
            schedule: backend.schedule().clone(),
            guidance_scale: T::lit(DEFAULT_GUIDANCE_SCALE),
            capabilities: Capabilities {
                differentiable_generator: true,
                concurrent_inference: true,
            },
        }
    }

    /// Constructs the backend named by `spec`.
    ///
    /// Real diffusion models are supplied through adapters implementing the
    /// role traits; none is compiled into this crate, so `diffusion:<id>`
    /// reports a backend error after resolving the model directory.
    pub fn load(spec: &BackendSpec, seed: u64) -> Result<Self> {
        match spec {
            BackendSpec::Synthetic => Ok(Self::synthetic(seed)),
            BackendSpec::Diffusion { model_id } => {
                let dir = env::var_os(MODEL_DIR_ENV).map(PathBuf::from).ok_or_else(|| {
                    Error::Backend(format!("{MODEL_DIR_ENV} is not set; cannot locate `{model_id}`"))
                })?;
                Err(Error::Backend(format!(
                    "no diffusion adapter is built into this binary (model `{model_id}` in {})",
                    dir.display()
                )))
            }
        }
    }

    pub fn with_guidance_scale(mut self, scale: T) -> Result<Self> {
        if !(scale > T::zero()) {
            return Err(Error::InvalidConfig(format!("guidance scale must be > 0, got {scale}")));
        }
        self.guidance_scale = scale;
        Ok(self)
    }

    pub fn encode_text(&self, text: &str) -> Result<TextEncoding<T>> {
        if text.trim().is_empty() {
            return Err(Error::EmptyText);
        }
        let enc = self.text_encoder.encode_text(text)?;
        for w in &enc.warnings {
            log::warn!("{w}");
        }
        Ok(enc)
    }

    pub fn encode_image(&self, image: &ImageTensor<T>, mask: Option<&BinaryMask>) -> Result<Vec<T>> {
        if let Some(m) = mask {
            image.check_mask(m)?;
        }
        self.image_encoder.encode_image(image, mask)
    }

    pub fn forward_noise(&self, x0: &ImageTensor<T>, t: usize, eps: &Tensor<T>) -> Result<Tensor<T>> {
        forward_noise(x0, t, eps, &self.schedule)
    }

    pub fn generate(&self, x_t: &Tensor<T>, e: &TokenEmbeddingMatrix<T>) -> Result<ImageTensor<T>> {
        self.generator.generate(x_t, e)
    }

    pub fn generate_vjp(
        &self,
        x_t: &Tensor<T>,
        e: &TokenEmbeddingMatrix<T>,
        cotangent: &Tensor<T>,
    ) -> Result<TokenEmbeddingMatrix<T>> {
        if !self.capabilities.differentiable_generator {
            return Err(Error::NotDifferentiable);
        }
        self.generator.generate_vjp(x_t, e, cotangent)
    }

    pub fn estimate_noise(
        &self,
        x_t: &Tensor<T>,
        t: usize,
        e: &TokenEmbeddingMatrix<T>,
    ) -> Result<Tensor<T>> {
        self.noise_estimator
            .estimate_noise(x_t, t, e, &self.schedule, self.guidance_scale)
    }

    pub fn inpaint(
        &self,
        image: &ImageTensor<T>,
        mask: &BinaryMask,
        e: &TokenEmbeddingMatrix<T>,
    ) -> Result<ImageTensor<T>> {
        image.check_mask(mask)?;
        if mask.is_empty() {
            return Ok(image.clone());
        }
        self.inpainter.inpaint(image, mask, e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn forward_noise_hand_values() {
        let sched = NoiseSchedule::new(vec![1.0, 0.25, 1e-12]).unwrap();
        let x0 = ImageTensor::<f64>::filled(8, 8, 1, 0.5).unwrap();
        let ones = Tensor::filled(8, 8, 1, 1.0);
        let out = forward_noise(&x0, 1, &ones, &sched).unwrap();
        let expected = 0.25 + 0.75_f64.sqrt();
        assert!(out.data().iter().all(|&v| (v - expected).abs() < 1e-15));
        assert!((expected - (0.25 + 0.866)).abs() < 1e-3);

        let same = forward_noise(&x0, 0, &ones, &sched).unwrap();
        assert_eq!(same.data(), x0.data());

        let zeros = Tensor::zeros(8, 8, 1);
        let vanishing = forward_noise(&x0, 2, &zeros, &sched).unwrap();
        assert!(vanishing.data().iter().all(|&v| v.abs() < 1e-5));
    }

    #[test]
    fn forward_noise_rejects_bad_timestep_and_shape() {
        let sched = NoiseSchedule::new(vec![0.5]).unwrap();
        let x0 = ImageTensor::<f64>::filled(8, 8, 1, 0.5).unwrap();
        assert!(matches!(
            forward_noise(&x0, 1, &Tensor::zeros(8, 8, 1), &sched),
            Err(Error::TimestepOutOfRange { t: 1, len: 1 })
        ));
        assert!(forward_noise(&x0, 0, &Tensor::zeros(8, 8, 3), &sched).is_err());
    }

    #[test]
    fn backend_spec_parsing() {
        assert_eq!(BackendSpec::parse("synthetic").unwrap(), BackendSpec::Synthetic);
        assert_eq!(
            BackendSpec::parse("diffusion:sd-1.5").unwrap(),
            BackendSpec::Diffusion {
                model_id: "sd-1.5".into()
            }
        );
        assert!(BackendSpec::parse("diffusion:").is_err());
        assert!(BackendSpec::parse("clip").is_err());
        assert_eq!(BackendSpec::parse("diffusion:x").unwrap().to_string(), "diffusion:x");
    }

    #[test]
    fn diffusion_backend_is_a_backend_error() {
        let spec = BackendSpec::parse("diffusion:sd").unwrap();
        assert!(matches!(
            BackendBundle::<f64>::load(&spec, 0),
            Err(Error::Backend(_))
        ));
    }

    #[test]
    fn guidance_scale_must_be_positive() {
        let b = BackendBundle::<f64>::synthetic(0);
        assert_eq!(b.guidance_scale, 7.5);
        assert!(b.clone().with_guidance_scale(0.0).is_err());
        assert_eq!(b.with_guidance_scale(3.0).unwrap().guidance_scale, 3.0);
    }
}
