//! Closed-form backend for desk-scale verification.
//!
//! Images are 16×16×3. Up to eight tokens of dimension 16 are supported;
//! token `k` owns the vertical strip of columns `[2k, 2k + 2)` and paints
//! every value `j` of that strip with `sigmoid(A_k[j] · E[k])`, where `A_k`
//! is a seeded 96×16 matrix whose columns sum to zero. Strips without a
//! token stay at 0.5. The input noise is ignored by the generator.
//!
//! The image encoder is the fixed linear map whose block for strip `k` is
//! `4 (A_kᵀ A_k)⁻¹ A_kᵀ`, the least-squares inverse of the linearised
//! renderer, so a rendered image encodes to roughly the sum of its token
//! rows. Word embeddings are seeded standard normal rows keyed by the
//! lowercase word, so the same word maps to the same row everywhere.

use nalgebra::DMatrix;

use crate::backends::{
    Generator, ImageEncoder, Inpainter, NoiseEstimator, TextEncoder, TextEncoding,
};
use crate::error::{Error, Result};
use crate::mask::BinaryMask;
use crate::scalar::{l2_norm, Scalar};
use crate::seed::{derive_seed, normals};
use crate::tensor::{EmbeddingOrigin, ImageTensor, NoiseSchedule, Tensor, TokenEmbeddingMatrix};

pub const SIDE: usize = 16;
pub const CHANNELS: usize = 3;
pub const MAX_TOKENS: usize = 8;
pub const DIM: usize = 16;
pub const STRIP_WIDTH: usize = 2;
/// Values painted by one token: 16 rows × 2 columns × 3 channels.
pub const PATCH_VALUES: usize = SIDE * STRIP_WIDTH * CHANNELS;
const IMAGE_VALUES: usize = SIDE * SIDE * CHANNELS;
const SCHEDULE_STEPS: usize = 1000;

/// Splits text into lowercase alphanumeric words.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(str::to_lowercase)
        .collect()
}

/// Tensor index of value `j` of token `k`'s strip.
#[inline]
pub fn patch_index(k: usize, j: usize) -> usize {
    let y = j / (STRIP_WIDTH * CHANNELS);
    let rem = j % (STRIP_WIDTH * CHANNELS);
    let x = k * STRIP_WIDTH + rem / CHANNELS;
    (y * SIDE + x) * CHANNELS + rem % CHANNELS
}

#[derive(Debug, Clone)]
pub struct SyntheticBackend<T> {
    seed: u64,
    // MAX_TOKENS blocks of PATCH_VALUES × DIM, row-major.
    projections: Vec<Vec<T>>,
    // DIM × IMAGE_VALUES, row-major.
    image_projection: Vec<T>,
    schedule: NoiseSchedule<T>,
}

impl<T: Scalar> SyntheticBackend<T> {
    pub fn new(seed: u64) -> Self {
        let scale = 1.0 / (DIM as f64).sqrt();
        let mut projections = Vec::with_capacity(MAX_TOKENS);
        let mut image_projection = vec![T::zero(); DIM * IMAGE_VALUES];
        for k in 0..MAX_TOKENS {
            let raw: Vec<f64> = normals(derive_seed(seed, &format!("projection/{k}")), PATCH_VALUES * DIM);
            let mut a = DMatrix::from_row_slice(PATCH_VALUES, DIM, &raw) * scale;
            for mut col in a.column_iter_mut() {
                let mean = col.mean();
                col.add_scalar_mut(-mean);
            }
            let gram = a.transpose() * &a;
            let inv = gram
                .try_inverse()
                .expect("seeded 96x16 projection has full column rank");
            let block = inv * a.transpose() * 4.0;
            for d in 0..DIM {
                for j in 0..PATCH_VALUES {
                    image_projection[d * IMAGE_VALUES + patch_index(k, j)] = T::lit(block[(d, j)]);
                }
            }
            let mut flat = Vec::with_capacity(PATCH_VALUES * DIM);
            for r in 0..PATCH_VALUES {
                for c in 0..DIM {
                    flat.push(T::lit(a[(r, c)]));
                }
            }
            projections.push(flat);
        }
        Self {
            seed,
            projections,
            image_projection,
            schedule: NoiseSchedule::linear_betas(SCHEDULE_STEPS, 1e-4, 0.02)
                .expect("valid linear schedule"),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn schedule(&self) -> &NoiseSchedule<T> {
        &self.schedule
    }

    /// `A_k` as a row-major `PATCH_VALUES × DIM` slice.
    pub fn projection(&self, k: usize) -> &[T] {
        &self.projections[k]
    }

    /// Image encoder matrix, `DIM × (16·16·3)` row-major.
    pub fn image_projection(&self) -> &[T] {
        &self.image_projection
    }

    /// Embedding row for one (lowercase) word.
    pub fn word_row(&self, word: &str) -> Vec<T> {
        normals(derive_seed(self.seed, &format!("token/{word}")), DIM)
    }

    /// Mask covering token `k`'s strip.
    pub fn patch_mask(k: usize) -> BinaryMask {
        BinaryMask::rect(SIDE, SIDE, 0, SIDE, k * STRIP_WIDTH, (k + 1) * STRIP_WIDTH)
    }

    /// Embedding whose rows are the given words, without tokenization.
    pub fn embed_words(&self, words: &[&str]) -> Result<TokenEmbeddingMatrix<T>> {
        let rows = words.iter().flat_map(|w| self.word_row(w)).collect();
        TokenEmbeddingMatrix::new(
            words.len(),
            DIM,
            rows,
            words.iter().map(|w| w.to_string()).collect(),
            EmbeddingOrigin::Encoded,
        )
    }

    fn check_embedding(e: &TokenEmbeddingMatrix<T>) -> Result<()> {
        if e.dim() != DIM || e.n_tokens() > MAX_TOKENS {
            return Err(Error::shape(
                format!("at most {MAX_TOKENS} tokens of dim {DIM}"),
                format!("{} tokens of dim {}", e.n_tokens(), e.dim()),
            ));
        }
        Ok(())
    }

    fn check_image_shape(shape: (usize, usize, usize)) -> Result<()> {
        if shape != (SIDE, SIDE, CHANNELS) {
            return Err(Error::shape(
                format!("{:?}", (SIDE, SIDE, CHANNELS)),
                format!("{shape:?}"),
            ));
        }
        Ok(())
    }

    fn logits(&self, k: usize, row: &[T]) -> impl Iterator<Item = T> + '_ {
        let a = &self.projections[k];
        let row = row.to_vec();
        (0..PATCH_VALUES).map(move |j| {
            a[j * DIM..(j + 1) * DIM]
                .iter()
                .zip(&row)
                .map(|(&p, &v)| p * v)
                .sum()
        })
    }

    /// The image every token paints: the generator output for any noise.
    pub fn render(&self, e: &TokenEmbeddingMatrix<T>) -> Result<ImageTensor<T>> {
        Self::check_embedding(e)?;
        let mut data = vec![T::lit(0.5); IMAGE_VALUES];
        for k in 0..e.n_tokens() {
            for (j, z) in self.logits(k, e.row(k)).enumerate() {
                data[patch_index(k, j)] = z.sigmoid();
            }
        }
        ImageTensor::new(SIDE, SIDE, CHANNELS, data)
    }
}

impl<T: Scalar> TextEncoder<T> for SyntheticBackend<T> {
    fn encode_text(&self, text: &str) -> Result<TextEncoding<T>> {
        let mut words = tokenize(text);
        if words.is_empty() {
            return Err(Error::EmptyText);
        }
        let mut warnings = Vec::new();
        if words.len() > MAX_TOKENS {
            warnings.push(format!(
                "text has {} tokens; truncated to the first {MAX_TOKENS}",
                words.len()
            ));
            words.truncate(MAX_TOKENS);
        }
        let refs: Vec<&str> = words.iter().map(String::as_str).collect();
        Ok(TextEncoding {
            embedding: self.embed_words(&refs)?,
            warnings,
        })
    }
}

impl<T: Scalar> ImageEncoder<T> for SyntheticBackend<T> {
    fn embedding_dim(&self) -> usize {
        DIM
    }

    fn encode_image(&self, image: &ImageTensor<T>, mask: Option<&BinaryMask>) -> Result<Vec<T>> {
        Self::check_image_shape(image.shape())?;
        let masked;
        let pixels = match mask {
            Some(m) => {
                masked = image.masked(m)?;
                masked.data()
            }
            None => image.data(),
        };
        let mut v: Vec<T> = self
            .image_projection
            .chunks_exact(IMAGE_VALUES)
            .map(|w| w.iter().zip(pixels).map(|(&a, &b)| a * b).sum())
            .collect();
        let norm = l2_norm(&v);
        if norm > T::zero() {
            v.iter_mut().for_each(|x| *x = *x / norm);
        } else {
            // The zero image has no direction; report the first basis vector.
            v[0] = T::one();
        }
        Ok(v)
    }
}

impl<T: Scalar> Generator<T> for SyntheticBackend<T> {
    fn generate(&self, x_t: &Tensor<T>, e: &TokenEmbeddingMatrix<T>) -> Result<ImageTensor<T>> {
        Self::check_image_shape(x_t.shape())?;
        self.render(e)
    }

    fn generate_vjp(
        &self,
        x_t: &Tensor<T>,
        e: &TokenEmbeddingMatrix<T>,
        cotangent: &Tensor<T>,
    ) -> Result<TokenEmbeddingMatrix<T>> {
        Self::check_image_shape(x_t.shape())?;
        Self::check_image_shape(cotangent.shape())?;
        Self::check_embedding(e)?;
        let g = cotangent.data();
        let mut grad = vec![T::zero(); e.n_tokens() * DIM];
        for k in 0..e.n_tokens() {
            let a = &self.projections[k];
            let out = &mut grad[k * DIM..(k + 1) * DIM];
            for (j, z) in self.logits(k, e.row(k)).enumerate() {
                let s = z.sigmoid();
                let w = g[patch_index(k, j)] * s * (T::one() - s);
                for (o, &p) in out.iter_mut().zip(&a[j * DIM..(j + 1) * DIM]) {
                    *o = *o + w * p;
                }
            }
        }
        TokenEmbeddingMatrix::optimized(e.n_tokens(), DIM, grad)
    }
}

impl<T: Scalar> NoiseEstimator<T> for SyntheticBackend<T> {
    fn estimate_noise(
        &self,
        x_t: &Tensor<T>,
        t: usize,
        e: &TokenEmbeddingMatrix<T>,
        schedule: &NoiseSchedule<T>,
        _guidance_scale: T,
    ) -> Result<Tensor<T>> {
        Self::check_image_shape(x_t.shape())?;
        let alpha = schedule.alpha(t)?;
        if alpha >= T::one() {
            return Err(Error::NoiselessTimestep(t));
        }
        let x0 = self.render(e)?;
        let (a, b) = (alpha.sqrt(), (T::one() - alpha).sqrt());
        let data = x_t
            .data()
            .iter()
            .zip(x0.data())
            .map(|(&x, &r)| (x - a * r) / b)
            .collect();
        Tensor::new(SIDE, SIDE, CHANNELS, data)
    }
}

impl<T: Scalar> Inpainter<T> for SyntheticBackend<T> {
    fn inpaint(
        &self,
        image: &ImageTensor<T>,
        mask: &BinaryMask,
        e: &TokenEmbeddingMatrix<T>,
    ) -> Result<ImageTensor<T>> {
        Self::check_image_shape(image.shape())?;
        image.check_mask(mask)?;
        let fill = self.render(e)?;
        let mut data = image.data().to_vec();
        for (p, &bit) in mask.bits().iter().enumerate() {
            if bit {
                let r = p * CHANNELS..(p + 1) * CHANNELS;
                data[r.clone()].copy_from_slice(&fill.data()[r]);
            }
        }
        ImageTensor::new(SIDE, SIDE, CHANNELS, data)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn backend() -> SyntheticBackend<f64> {
        SyntheticBackend::new(42)
    }

    #[test]
    fn tokenize_lowercases_and_splits_punctuation() {
        assert_eq!(tokenize("A red-apple, ON tables!"), vec!["a", "red", "apple", "on", "tables"]);
        assert!(tokenize("  ,. ").is_empty());
    }

    #[test]
    fn patch_index_covers_each_strip_once() {
        let mut seen = vec![0u8; IMAGE_VALUES];
        for k in 0..MAX_TOKENS {
            for j in 0..PATCH_VALUES {
                seen[patch_index(k, j)] += 1;
            }
        }
        assert!(seen.iter().all(|&c| c == 1));
        // value 0 of strip 3 is pixel (0, 6), channel 0
        assert_eq!(patch_index(3, 0), 6 * CHANNELS);
    }

    #[test]
    fn projection_columns_sum_to_zero() {
        let b = backend();
        for k in 0..MAX_TOKENS {
            let a = b.projection(k);
            for c in 0..DIM {
                let s: f64 = (0..PATCH_VALUES).map(|j| a[j * DIM + c]).sum();
                assert!(s.abs() < 1e-12);
            }
        }
    }

    #[test]
    fn encode_text_truncates_with_warning() {
        let b = backend();
        let enc = b.encode_text("one two three four five six seven eight nine ten").unwrap();
        assert_eq!(enc.embedding.n_tokens(), MAX_TOKENS);
        assert_eq!(enc.warnings.len(), 1);
        assert!(b.encode_text("...").is_err());
        assert!(b.encode_text("a b c").unwrap().warnings.is_empty());
    }

    #[test]
    fn empty_strips_render_mid_gray() {
        let b = backend();
        let e = b.embed_words(&["dog"]).unwrap();
        let img = b.render(&e).unwrap();
        for y in 0..SIDE {
            for x in STRIP_WIDTH..SIDE {
                for c in 0..CHANNELS {
                    assert_eq!(img.get(y, x, c), 0.5);
                }
            }
        }
    }

    #[test]
    fn rejects_oversized_embedding() {
        let b = backend();
        let e = TokenEmbeddingMatrix::optimized(9, DIM, vec![0.0; 9 * DIM]).unwrap();
        assert!(b.render(&e).is_err());
        let e = TokenEmbeddingMatrix::optimized(2, 3, vec![0.0; 6]).unwrap();
        assert!(b.render(&e).is_err());
    }

    #[test]
    fn zero_image_encodes_to_first_basis_vector() {
        let b = backend();
        let img = ImageTensor::filled(SIDE, SIDE, CHANNELS, 0.3).unwrap();
        let v = b.encode_image(&img, Some(&BinaryMask::empty(SIDE, SIDE))).unwrap();
        assert_eq!(v[0], 1.0);
        assert!(v[1..].iter().all(|&x| x == 0.0));
    }

    #[test]
    fn rendered_image_encodes_near_token_sum() {
        let b = backend();
        let words = ["harbor", "lantern", "violin", "meadow", "rocket", "pepper", "glacier", "tulip"];
        let e = b.embed_words(&words).unwrap();
        let v = b.encode_image(&b.render(&e).unwrap(), None).unwrap();
        let pooled = e.mean_pooled();
        let c = crate::scalar::cosine(&v, &pooled).unwrap();
        assert!(c > 0.8, "cosine {c}");
    }

    #[test]
    fn works_in_single_precision() {
        let b = SyntheticBackend::<f32>::new(1);
        let e = b.embed_words(&["cat", "hat"]).unwrap();
        let img = b.render(&e).unwrap();
        let v = b.encode_image(&img, None).unwrap();
        assert!((crate::scalar::l2_norm(&v) - 1.0).abs() < 1e-5);
    }
}
