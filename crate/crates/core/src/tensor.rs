//! Dense tensors: raw float tensors, validated images, token embedding
//! matrices and noise schedules.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mask::BinaryMask;
use crate::scalar::Scalar;

/// Minimum spatial extent accepted for images.
pub const MIN_IMAGE_SIDE: usize = 8;

/// Unconstrained `height × width × channels` tensor, stored row-major with
/// the channel index fastest (HWC). Used for noise and noised samples.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != height * width * channels {
            return Err(Error::shape(
                format!("{height}x{width}x{channels} = {} values", height * width * channels),
                format!("{} values", data.len()),
            ));
        }
        Ok(Self {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: T) -> Self {
        Self {
            height,
            width,
            channels,
            data: vec![value; height * width * channels],
        }
    }

    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        Self::filled(height, width, channels, T::zero())
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.height, self.width, self.channels)
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn index(&self, y: usize, x: usize, c: usize) -> usize {
        (y * self.width + x) * self.channels + c
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> T {
        self.data[self.index(y, x, c)]
    }

    pub fn same_shape(&self, other: &Tensor<T>) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::shape(
                format!("{:?}", self.shape()),
                format!("{:?}", other.shape()),
            ));
        }
        Ok(())
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Image with every value in `[0, 1]` and both sides at least
/// [`MIN_IMAGE_SIDE`] pixels.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageTensor<T>(Tensor<T>);

impl<T: Scalar> ImageTensor<T> {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<T>) -> Result<Self> {
        Self::from_tensor(Tensor::new(height, width, channels, data)?)
    }

    pub fn from_tensor(tensor: Tensor<T>) -> Result<Self> {
        if tensor.height < MIN_IMAGE_SIDE || tensor.width < MIN_IMAGE_SIDE {
            return Err(Error::InvalidValue(format!(
                "image must be at least {MIN_IMAGE_SIDE}x{MIN_IMAGE_SIDE}, got {}x{}",
                tensor.height, tensor.width
            )));
        }
        if tensor.channels == 0 {
            return Err(Error::InvalidValue("image must have at least one channel".into()));
        }
        if let Some(bad) = tensor
            .data
            .iter()
            .find(|v| !(**v >= T::zero() && **v <= T::one()))
        {
            return Err(Error::InvalidValue(format!("pixel value {bad} outside [0, 1]")));
        }
        Ok(Self(tensor))
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: T) -> Result<Self> {
        Self::from_tensor(Tensor::filled(height, width, channels, value))
    }

    pub fn as_tensor(&self) -> &Tensor<T> {
        &self.0
    }

    pub fn into_tensor(self) -> Tensor<T> {
        self.0
    }

    pub fn height(&self) -> usize {
        self.0.height
    }

    pub fn width(&self) -> usize {
        self.0.width
    }

    pub fn channels(&self) -> usize {
        self.0.channels
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        self.0.shape()
    }

    pub fn data(&self) -> &[T] {
        &self.0.data
    }

    pub fn get(&self, y: usize, x: usize, c: usize) -> T {
        self.0.get(y, x, c)
    }

    pub fn check_mask(&self, mask: &BinaryMask) -> Result<()> {
        if mask.height() != self.height() || mask.width() != self.width() {
            return Err(Error::shape(
                format!("mask {}x{}", self.height(), self.width()),
                format!("mask {}x{}", mask.height(), mask.width()),
            ));
        }
        Ok(())
    }

    /// Copy with every pixel outside `mask` set to zero.
    pub fn masked(&self, mask: &BinaryMask) -> Result<Self> {
        self.check_mask(mask)?;
        let mut out = self.0.clone();
        let c = out.channels;
        for (p, bit) in mask.bits().iter().enumerate() {
            if !bit {
                out.data[p * c..(p + 1) * c].fill(T::zero());
            }
        }
        Ok(Self(out))
    }
}

/// Where a token embedding matrix came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmbeddingOrigin {
    Encoded,
    Optimized,
    Synthetic,
}

/// Per-token text embedding: `n_tokens × dim`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenEmbeddingMatrix<T> {
    n_tokens: usize,
    dim: usize,
    rows: Vec<T>,
    token_strings: Vec<String>,
    origin: EmbeddingOrigin,
}

impl<T: Scalar> TokenEmbeddingMatrix<T> {
    pub fn new(
        n_tokens: usize,
        dim: usize,
        rows: Vec<T>,
        token_strings: Vec<String>,
        origin: EmbeddingOrigin,
    ) -> Result<Self> {
        if n_tokens == 0 || dim == 0 {
            return Err(Error::InvalidValue(format!(
                "embedding must be at least 1x1, got {n_tokens}x{dim}"
            )));
        }
        if rows.len() != n_tokens * dim {
            return Err(Error::shape(
                format!("{n_tokens}x{dim} = {} values", n_tokens * dim),
                format!("{} values", rows.len()),
            ));
        }
        if !token_strings.is_empty() && token_strings.len() != n_tokens {
            return Err(Error::shape(
                format!("{n_tokens} token strings"),
                format!("{}", token_strings.len()),
            ));
        }
        if rows.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidValue("embedding contains non-finite entries".into()));
        }
        Ok(Self {
            n_tokens,
            dim,
            rows,
            token_strings,
            origin,
        })
    }

    /// Builds an `Optimized` matrix from raw values, dropping token strings.
    pub fn optimized(n_tokens: usize, dim: usize, rows: Vec<T>) -> Result<Self> {
        Self::new(n_tokens, dim, rows, Vec::new(), EmbeddingOrigin::Optimized)
    }

    pub fn n_tokens(&self) -> usize {
        self.n_tokens
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.n_tokens, self.dim)
    }

    pub fn as_slice(&self) -> &[T] {
        &self.rows
    }

    pub fn row(&self, k: usize) -> &[T] {
        &self.rows[k * self.dim..(k + 1) * self.dim]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[T]> {
        self.rows.chunks_exact(self.dim)
    }

    pub fn token_strings(&self) -> &[String] {
        &self.token_strings
    }

    pub fn origin(&self) -> EmbeddingOrigin {
        self.origin
    }

    /// Same values with a different origin tag.
    pub fn with_origin(mut self, origin: EmbeddingOrigin) -> Self {
        self.origin = origin;
        self
    }

    /// Copy with row `k` replaced.
    pub fn with_row(&self, k: usize, row: &[T]) -> Result<Self> {
        if k >= self.n_tokens || row.len() != self.dim {
            return Err(Error::shape(
                format!("row < {} of length {}", self.n_tokens, self.dim),
                format!("row {k} of length {}", row.len()),
            ));
        }
        let mut out = self.clone();
        out.rows[k * self.dim..(k + 1) * self.dim].copy_from_slice(row);
        Ok(out)
    }

    pub fn same_shape(&self, other: &Self) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::shape(
                format!("{:?}", self.shape()),
                format!("{:?}", other.shape()),
            ));
        }
        Ok(())
    }

    /// Frobenius norm of `self − other`.
    pub fn frobenius_distance(&self, other: &Self) -> Result<T> {
        self.same_shape(other)?;
        Ok(self
            .rows
            .iter()
            .zip(&other.rows)
            .map(|(&a, &b)| (a - b) * (a - b))
            .sum::<T>()
            .sqrt())
    }

    /// Column-wise mean of the rows.
    pub fn mean_pooled(&self) -> Vec<T> {
        let mut acc = vec![T::zero(); self.dim];
        for row in self.rows() {
            for (a, &v) in acc.iter_mut().zip(row) {
                *a = *a + v;
            }
        }
        let n = T::from_usize(self.n_tokens).unwrap();
        acc.into_iter().map(|v| v / n).collect()
    }
}

/// Cumulative noise levels `alpha_t`, one per timestep.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule<T> {
    alphas: Vec<T>,
}

impl<T: Scalar> NoiseSchedule<T> {
    pub fn new(alphas: Vec<T>) -> Result<Self> {
        if alphas.is_empty() {
            return Err(Error::InvalidValue("noise schedule is empty".into()));
        }
        if let Some(a) = alphas.iter().find(|&&a| !(a > T::zero() && a <= T::one())) {
            return Err(Error::InvalidValue(format!("alpha_t = {a} outside (0, 1]")));
        }
        Ok(Self { alphas })
    }

    /// Cumulative products of `1 − beta` for betas spaced linearly over
    /// `[beta_start, beta_end]`.
    pub fn linear_betas(steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if steps == 0 {
            return Err(Error::InvalidValue("noise schedule is empty".into()));
        }
        let mut acc = 1.0_f64;
        let alphas = (0..steps)
            .map(|i| {
                let frac = if steps == 1 {
                    0.0
                } else {
                    i as f64 / (steps - 1) as f64
                };
                acc *= 1.0 - (beta_start + frac * (beta_end - beta_start));
                T::lit(acc)
            })
            .collect();
        Self::new(alphas)
    }

    pub fn len(&self) -> usize {
        self.alphas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.alphas.is_empty()
    }

    pub fn alphas(&self) -> &[T] {
        &self.alphas
    }

    pub fn alpha(&self, t: usize) -> Result<T> {
        self.alphas.get(t).copied().ok_or(Error::TimestepOutOfRange {
            t,
            len: self.alphas.len(),
        })
    }

    /// `count` indices evenly spaced over the central `fraction` of the schedule.
    pub fn central_timesteps(&self, count: usize, fraction: f64) -> Vec<usize> {
        let last = (self.len() - 1) as f64;
        let margin = (1.0 - fraction.clamp(0.0, 1.0)) / 2.0;
        let lo = margin * last;
        let hi = (1.0 - margin) * last;
        match count {
            0 => Vec::new(),
            1 => vec![((lo + hi) / 2.0).round() as usize],
            n => (0..n)
                .map(|i| (lo + (hi - lo) * i as f64 / (n - 1) as f64).round() as usize)
                .collect(),
        }
    }
}
