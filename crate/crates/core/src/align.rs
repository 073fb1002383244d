//! Image-regulated text alignment: find the embedding within a Frobenius
//! ball around the caption embedding whose generation best reconstructs a
//! given image.
//!
//! The objective is minimised by projected gradient descent on the squared
//! reconstruction error, projecting back onto the ball after every step.
//! Reported losses are the unsquared L2 reconstruction error.

use crate::backends::BackendBundle;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::seed::{derive_seed, normal_tensor};
use crate::tensor::{ImageTensor, Tensor, TokenEmbeddingMatrix};

#[derive(Debug, Clone, PartialEq)]
pub struct AlignConfig<T> {
    /// Radius of the Frobenius ball around the initial embedding. `∞`
    /// disables the constraint.
    pub gamma: T,
    pub iterations: usize,
    pub learning_rate: T,
    /// Seeds the fixed starting noise `x_T`.
    pub seed: u64,
    /// Record the loss every this many iterations.
    pub loss_log_every: usize,
    /// Record the distance to the ball centre after every step.
    pub record_distances: bool,
}

impl<T: Scalar> Default for AlignConfig<T> {
    fn default() -> Self {
        Self {
            gamma: T::lit(8.0),
            iterations: 500,
            learning_rate: T::lit(4e-6),
            seed: 0,
            loss_log_every: 1,
            record_distances: false,
        }
    }
}

impl<T: Scalar> AlignConfig<T> {
    /// Step size tuned to the curvature of the synthetic backend.
    pub const SYNTHETIC_LEARNING_RATE: f64 = 1.0;

    pub fn synthetic() -> Self {
        Self {
            learning_rate: T::lit(Self::SYNTHETIC_LEARNING_RATE),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.gamma >= T::zero()) {
            return Err(Error::InvalidConfig(format!("gamma must be >= 0, got {}", self.gamma)));
        }
        if self.iterations == 0 {
            return Err(Error::InvalidConfig("iterations must be >= 1".into()));
        }
        if !(self.learning_rate > T::zero()) || !self.learning_rate.is_finite() {
            return Err(Error::InvalidConfig(format!(
                "learning rate must be finite and > 0, got {}",
                self.learning_rate
            )));
        }
        if self.loss_log_every == 0 {
            return Err(Error::InvalidConfig("loss_log_every must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AlignResult<T> {
    pub embedding: TokenEmbeddingMatrix<T>,
    /// Unsquared reconstruction error: at the start, every
    /// `loss_log_every` iterations, and at the end.
    pub loss_trajectory: Vec<T>,
    pub final_frobenius_distance: T,
    /// Distance to the ball centre after each step, when requested.
    pub distance_trajectory: Vec<T>,
    /// Iteration whose iterate is returned (0 = the initial embedding).
    pub best_iteration: usize,
    /// The loss became non-finite and the loop stopped early.
    pub diverged: bool,
}

/// Projects `e` onto the closed Frobenius ball of radius `gamma` around `e0`.
pub fn project_to_ball<T: Scalar>(
    e: &TokenEmbeddingMatrix<T>,
    e0: &TokenEmbeddingMatrix<T>,
    gamma: T,
) -> Result<TokenEmbeddingMatrix<T>> {
    let dist = e.frobenius_distance(e0)?;
    if dist <= gamma {
        return Ok(e.clone());
    }
    let scale = gamma / dist;
    let rows = e
        .as_slice()
        .iter()
        .zip(e0.as_slice())
        .map(|(&v, &c)| c + scale * (v - c))
        .collect();
    TokenEmbeddingMatrix::new(
        e.n_tokens(),
        e.dim(),
        rows,
        e.token_strings().to_vec(),
        e.origin(),
    )
}

/// Squared reconstruction error `‖image − G(x_T; e)‖²` and its gradient
/// with respect to `e`.
pub fn reconstruction_loss_and_grad<T: Scalar>(
    bundle: &BackendBundle<T>,
    image: &ImageTensor<T>,
    x_t: &Tensor<T>,
    e: &TokenEmbeddingMatrix<T>,
) -> Result<(T, TokenEmbeddingMatrix<T>)> {
    let generated = bundle.generate(x_t, e)?;
    image.as_tensor().same_shape(generated.as_tensor())?;
    let residual: Vec<T> = generated
        .data()
        .iter()
        .zip(image.data())
        .map(|(&g, &i)| g - i)
        .collect();
    let loss = residual.iter().map(|&r| r * r).sum();
    let (h, w, c) = image.shape();
    let cotangent = Tensor::new(h, w, c, residual.iter().map(|&r| r + r).collect())?;
    let grad = bundle.generate_vjp(x_t, e, &cotangent)?;
    Ok((loss, grad))
}

/// The fixed starting noise: `image` noised to the last schedule step.
pub fn starting_noise<T: Scalar>(
    bundle: &BackendBundle<T>,
    image: &ImageTensor<T>,
    seed: u64,
) -> Result<Tensor<T>> {
    let (h, w, c) = image.shape();
    let eps = normal_tensor(derive_seed(seed, "align/x_T"), h, w, c);
    bundle.forward_noise(image, bundle.schedule.len() - 1, &eps)
}

/// Aligns `e0` to `image`. The returned embedding is the lowest-loss
/// iterate visited, so its loss never exceeds the loss at `e0`.
pub fn align_embedding<T: Scalar>(
    image: &ImageTensor<T>,
    e0: &TokenEmbeddingMatrix<T>,
    bundle: &BackendBundle<T>,
    cfg: &AlignConfig<T>,
) -> Result<AlignResult<T>> {
    cfg.validate()?;
    if !bundle.capabilities.differentiable_generator {
        return Err(Error::NotDifferentiable);
    }
    let x_t = starting_noise(bundle, image, cfg.seed)?;

    let mut e = e0.clone();
    let mut best: Option<(T, usize, TokenEmbeddingMatrix<T>)> = None;
    let mut losses = Vec::new();
    let mut distances = Vec::new();
    let mut diverged = false;

    for it in 0..=cfg.iterations {
        let (sq_loss, grad) = match reconstruction_loss_and_grad(bundle, image, &x_t, &e) {
            Ok(v) => v,
            // Backends reject non-finite outputs; past the first step that is divergence.
            Err(Error::InvalidValue(msg)) if it > 0 => {
                log::warn!("alignment diverged at iteration {it}: {msg}");
                diverged = true;
                break;
            }
            Err(err) => return Err(err),
        };
        let loss = sq_loss.sqrt();
        if it == 0 || it == cfg.iterations || it % cfg.loss_log_every == 0 {
            losses.push(loss);
        }
        if !loss.is_finite() || grad.as_slice().iter().any(|g| !g.is_finite()) {
            log::warn!("alignment diverged at iteration {it}; returning best iterate");
            diverged = true;
            break;
        }
        if best.as_ref().map_or(true, |(b, _, _)| loss < *b) {
            best = Some((loss, it, e.clone()));
        }
        if it == cfg.iterations {
            break;
        }
        let stepped: Vec<T> = e
            .as_slice()
            .iter()
            .zip(grad.as_slice())
            .map(|(&v, &g)| v - cfg.learning_rate * g)
            .collect();
        let stepped = TokenEmbeddingMatrix::optimized(e.n_tokens(), e.dim(), stepped)
            .or_else(|_| {
                // A non-finite step is divergence; keep the current iterate.
                diverged = true;
                Ok::<_, Error>(e.clone())
            })?;
        if diverged {
            log::warn!("alignment step {it} produced non-finite values; returning best iterate");
            break;
        }
        e = project_to_ball(&stepped, e0, cfg.gamma)?;
        let dist = e.frobenius_distance(e0)?;
        debug_assert!(dist <= cfg.gamma + T::lit(1e-6) * (T::one() + cfg.gamma));
        if cfg.record_distances {
            distances.push(dist);
        }
    }

    let (_, best_iteration, embedding) = best.unwrap_or((T::nan(), 0, e0.clone()));
    let embedding = TokenEmbeddingMatrix::optimized(
        embedding.n_tokens(),
        embedding.dim(),
        embedding.as_slice().to_vec(),
    )?;
    let final_frobenius_distance = embedding.frobenius_distance(e0)?;
    Ok(AlignResult {
        embedding,
        loss_trajectory: losses,
        final_frobenius_distance,
        distance_trajectory: distances,
        best_iteration,
        diverged,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backends::synthetic::{SyntheticBackend, DIM};

    fn mat(rows: Vec<f64>, dim: usize) -> TokenEmbeddingMatrix<f64> {
        TokenEmbeddingMatrix::optimized(rows.len() / dim, dim, rows).unwrap()
    }

    #[test]
    fn projection_cases() {
        let e0 = mat(vec![1.0, 1.0, 1.0, 1.0], 2);
        assert_eq!(project_to_ball(&e0, &e0, 0.5).unwrap(), e0);

        // distance 2γ with γ = 1: halfway back along the same direction
        let e = mat(vec![1.0 + 1.2, 1.0, 1.0 - 1.6, 1.0], 2);
        let p = project_to_ball(&e, &e0, 1.0).unwrap();
        assert!((p.frobenius_distance(&e0).unwrap() - 1.0).abs() < 1e-12);
        assert!((p.as_slice()[0] - 1.6).abs() < 1e-12);
        assert!((p.as_slice()[2] - 0.2).abs() < 1e-12);

        assert_eq!(project_to_ball(&e, &e0, 1e9).unwrap(), e);
        assert_eq!(project_to_ball(&e, &e0, f64::INFINITY).unwrap(), e);
        assert!(project_to_ball(&e, &mat(vec![0.0; 2], 2), 1.0).is_err());
    }

    #[test]
    fn config_validation() {
        assert!(AlignConfig::<f64>::default().validate().is_ok());
        let bad = AlignConfig::<f64> {
            iterations: 0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        let bad = AlignConfig::<f64> {
            learning_rate: 0.0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        let bad = AlignConfig::<f64> {
            gamma: f64::NAN,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        let d = AlignConfig::<f64>::default();
        assert_eq!((d.gamma, d.iterations, d.learning_rate), (8.0, 500, 4e-6));
    }

    #[test]
    fn aligned_input_is_a_fixed_point() {
        let bundle = BackendBundle::<f64>::synthetic(5);
        let backend = SyntheticBackend::<f64>::new(5);
        let e0 = backend.embed_words(&["kettle", "moss", "ferry"]).unwrap();
        let image = backend.render(&e0).unwrap();
        let res = align_embedding(&image, &e0, &bundle, &AlignConfig::synthetic()).unwrap();
        assert!(res.embedding.frobenius_distance(&e0).unwrap() < 1e-3);
        assert!(res.loss_trajectory.iter().all(|&l| l < 1e-9));
    }

    #[test]
    fn zero_radius_returns_initial_embedding() {
        let bundle = BackendBundle::<f64>::synthetic(5);
        let backend = SyntheticBackend::<f64>::new(5);
        let e0 = backend.embed_words(&["kettle", "moss"]).unwrap();
        let target = backend.embed_words(&["kettle", "anvil"]).unwrap();
        let image = backend.render(&target).unwrap();
        let cfg = AlignConfig {
            gamma: 0.0,
            iterations: 20,
            ..AlignConfig::synthetic()
        };
        let res = align_embedding(&image, &e0, &bundle, &cfg).unwrap();
        assert_eq!(res.embedding.as_slice(), e0.as_slice());
        assert_eq!(res.final_frobenius_distance, 0.0);
    }

    #[test]
    fn non_differentiable_backend_is_rejected() {
        let mut bundle = BackendBundle::<f64>::synthetic(5);
        bundle.capabilities.differentiable_generator = false;
        let image = ImageTensor::filled(16, 16, 3, 0.5).unwrap();
        let e0 = mat(vec![0.0; DIM], DIM);
        assert!(matches!(
            align_embedding(&image, &e0, &bundle, &AlignConfig::default()),
            Err(Error::NotDifferentiable)
        ));
    }

    struct Exploding;

    impl crate::backends::Generator<f64> for Exploding {
        fn generate(&self, _: &Tensor<f64>, _: &TokenEmbeddingMatrix<f64>) -> Result<ImageTensor<f64>> {
            ImageTensor::filled(16, 16, 3, 0.5)
        }

        fn generate_vjp(
            &self,
            _: &Tensor<f64>,
            e: &TokenEmbeddingMatrix<f64>,
            _: &Tensor<f64>,
        ) -> Result<TokenEmbeddingMatrix<f64>> {
            TokenEmbeddingMatrix::optimized(e.n_tokens(), e.dim(), vec![1e308; e.n_tokens() * e.dim()])
        }
    }

    #[test]
    fn divergent_step_returns_best_iterate() {
        let mut bundle = BackendBundle::<f64>::synthetic(5);
        bundle.generator = std::sync::Arc::new(Exploding);
        let e0 = mat(vec![0.25; DIM], DIM);
        let image = ImageTensor::filled(16, 16, 3, 0.1).unwrap();
        let cfg = AlignConfig {
            learning_rate: 10.0,
            gamma: f64::INFINITY,
            iterations: 10,
            ..AlignConfig::synthetic()
        };
        let res = align_embedding(&image, &e0, &bundle, &cfg).unwrap();
        assert!(res.diverged);
        assert_eq!(res.best_iteration, 0);
        assert_eq!(res.embedding.as_slice(), e0.as_slice());
    }

    #[test]
    fn loss_log_every_thins_the_trajectory() {
        let bundle = BackendBundle::<f64>::synthetic(5);
        let backend = SyntheticBackend::<f64>::new(5);
        let e0 = backend.embed_words(&["kettle"]).unwrap();
        let image = backend.render(&backend.embed_words(&["anvil"]).unwrap()).unwrap();
        let cfg = AlignConfig {
            iterations: 10,
            loss_log_every: 4,
            ..AlignConfig::synthetic()
        };
        let res = align_embedding(&image, &e0, &bundle, &cfg).unwrap();
        // iterations 0, 4, 8, 10
        assert_eq!(res.loss_trajectory.len(), 4);
    }
}
