//! Noise-difference maps and their binarization.
//!
//! Two conditioning embeddings are compared by estimating the noise in the
//! same noised inputs under each, taking the per-pixel absolute difference,
//! and averaging over several noise draws and timesteps. The averaged map
//! is clamped to percentile bounds, min-max normalized, thresholded, and
//! reduced to its largest 4-connected regions.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::backends::BackendBundle;
use crate::error::{Error, Result};
use crate::mask::{BinaryMask, DiffMap};
use crate::scalar::Scalar;
use crate::seed::{derive_seed, normal_tensor};
use crate::tensor::{ImageTensor, NoiseSchedule, TokenEmbeddingMatrix};

/// Which timesteps the noise estimates are taken at.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TimestepSelection {
    /// `count` indices evenly spaced over the central `fraction` of the schedule.
    Central { count: usize, fraction: f64 },
    Explicit(Vec<usize>),
}

impl Default for TimestepSelection {
    fn default() -> Self {
        TimestepSelection::Central {
            count: 5,
            fraction: 0.6,
        }
    }
}

impl TimestepSelection {
    pub fn resolve<T: Scalar>(&self, schedule: &NoiseSchedule<T>) -> Result<Vec<usize>> {
        let steps = match self {
            TimestepSelection::Central { count, fraction } => {
                schedule.central_timesteps(*count, *fraction)
            }
            TimestepSelection::Explicit(v) => v.clone(),
        };
        if steps.is_empty() {
            return Err(Error::InvalidConfig("no timesteps selected".into()));
        }
        if let Some(&t) = steps.iter().find(|&&t| t >= schedule.len()) {
            return Err(Error::TimestepOutOfRange {
                t,
                len: schedule.len(),
            });
        }
        Ok(steps)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ThresholdStrategy<T> {
    /// Mean of the normalized map.
    Mean,
    Fixed(T),
}

impl<T: Scalar> ThresholdStrategy<T> {
    /// Parses `mean` or a number.
    pub fn parse(s: &str) -> Result<Self> {
        let s = s.trim();
        if s.eq_ignore_ascii_case("mean") {
            return Ok(ThresholdStrategy::Mean);
        }
        s.parse::<f64>()
            .ok()
            .filter(|v| v.is_finite())
            .map(|v| ThresholdStrategy::Fixed(T::lit(v)))
            .ok_or_else(|| Error::InvalidConfig(format!("unknown threshold strategy `{s}`")))
    }

    pub fn label(&self) -> String {
        match self {
            ThresholdStrategy::Mean => "mean".to_string(),
            ThresholdStrategy::Fixed(v) => format!("{v}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MaskGenConfig<T> {
    pub n_noises: usize,
    pub timesteps: TimestepSelection,
    pub seed: u64,
    /// Lower and upper clamping percentiles, in `[0, 100]`.
    pub outlier_percentiles: (f64, f64),
    pub threshold: ThresholdStrategy<T>,
    pub max_components: usize,
    /// Averaged maps whose clamped dynamic range is below this value are
    /// treated as constant (no inconsistency), so numerical noise is never
    /// stretched to full scale by normalization.
    pub noise_floor: T,
}

impl<T: Scalar> Default for MaskGenConfig<T> {
    fn default() -> Self {
        Self {
            n_noises: 10,
            timesteps: TimestepSelection::default(),
            seed: 0,
            outlier_percentiles: (0.5, 99.5),
            threshold: ThresholdStrategy::Mean,
            max_components: 3,
            noise_floor: T::lit(1e-3),
        }
    }
}

impl<T: Scalar> MaskGenConfig<T> {
    pub fn validate(&self) -> Result<()> {
        if self.n_noises == 0 {
            return Err(Error::InvalidConfig("n_noises must be >= 1".into()));
        }
        let (lo, hi) = self.outlier_percentiles;
        if !(0.0 <= lo && lo < hi && hi <= 100.0) {
            return Err(Error::InvalidConfig(format!(
                "outlier percentiles must satisfy 0 <= low < high <= 100, got ({lo}, {hi})"
            )));
        }
        if !(self.noise_floor >= T::zero()) {
            return Err(Error::InvalidConfig("noise_floor must be >= 0".into()));
        }
        Ok(())
    }
}

/// Linear-interpolated percentile of `sorted` (ascending, non-empty).
pub fn percentile<T: Scalar>(sorted: &[T], p: f64) -> T {
    let rank = (p / 100.0).clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = rank.ceil() as usize;
    let frac = T::lit(rank - lo as f64);
    sorted[lo] + (sorted[hi] - sorted[lo]) * frac
}

/// Unnormalized map: channel-mean absolute difference of the two noise
/// estimates, averaged over noise draws and timesteps.
pub fn raw_difference_map<T: Scalar>(
    image: &ImageTensor<T>,
    e_ref: &TokenEmbeddingMatrix<T>,
    e_tgt: &TokenEmbeddingMatrix<T>,
    bundle: &BackendBundle<T>,
    cfg: &MaskGenConfig<T>,
) -> Result<DiffMap<T>> {
    cfg.validate()?;
    let steps = cfg.timesteps.resolve(&bundle.schedule)?;
    let (h, w, c) = image.shape();

    let per_noise = |i: usize| -> Result<Vec<T>> {
        // Both conditionings see the same noise draw.
        let eps = normal_tensor(derive_seed(cfg.seed, &format!("maskgen/noise/{i}")), h, w, c);
        let mut acc = vec![T::zero(); h * w];
        for &t in &steps {
            let x_t = bundle.forward_noise(image, t, &eps)?;
            let a = bundle.estimate_noise(&x_t, t, e_ref)?;
            let b = bundle.estimate_noise(&x_t, t, e_tgt)?;
            a.same_shape(&b)?;
            let cc = a.channels();
            let cn = T::from_usize(cc).unwrap();
            for (p, slot) in acc.iter_mut().enumerate() {
                let d: T = (0..cc)
                    .map(|k| (a.data()[p * cc + k] - b.data()[p * cc + k]).abs())
                    .sum();
                *slot = *slot + d / cn;
            }
        }
        Ok(acc)
    };

    let maps: Vec<Vec<T>> = if bundle.capabilities.concurrent_inference {
        (0..cfg.n_noises).into_par_iter().map(per_noise).collect::<Result<_>>()?
    } else {
        (0..cfg.n_noises).map(per_noise).collect::<Result<_>>()?
    };

    // Fixed summation order keeps the result bitwise reproducible.
    let mut total = vec![T::zero(); h * w];
    for m in &maps {
        for (t, &v) in total.iter_mut().zip(m) {
            *t = *t + v;
        }
    }
    let denom = T::from_usize(cfg.n_noises * steps.len()).unwrap();
    DiffMap::new(h, w, total.into_iter().map(|v| v / denom).collect())
}

/// Clamps to the configured percentiles and rescales to `[0, 1]`. Maps
/// whose clamped range is below the noise floor become all-zero.
pub fn normalize_map<T: Scalar>(raw: &DiffMap<T>, cfg: &MaskGenConfig<T>) -> DiffMap<T> {
    let mut sorted = raw.values().to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("finite map values"));
    let lo = percentile(&sorted, cfg.outlier_percentiles.0);
    let hi = percentile(&sorted, cfg.outlier_percentiles.1);
    let range = hi - lo;
    if !(range > cfg.noise_floor) || range <= T::zero() {
        return DiffMap::zeros(raw.height(), raw.width());
    }
    let values = raw
        .values()
        .iter()
        .map(|&v| (v.max(lo).min(hi) - lo) / range)
        .collect();
    DiffMap::new(raw.height(), raw.width(), values).expect("normalized values are finite")
}

/// Normalized noise-difference map between two conditionings.
pub fn noise_difference_map<T: Scalar>(
    image: &ImageTensor<T>,
    e_ref: &TokenEmbeddingMatrix<T>,
    e_tgt: &TokenEmbeddingMatrix<T>,
    bundle: &BackendBundle<T>,
    cfg: &MaskGenConfig<T>,
) -> Result<DiffMap<T>> {
    let raw = raw_difference_map(image, e_ref, e_tgt, bundle, cfg)?;
    Ok(normalize_map(&raw, cfg))
}

/// Thresholds the map (strictly above) and keeps the largest regions.
pub fn binarize_mask<T: Scalar>(map: &DiffMap<T>, cfg: &MaskGenConfig<T>) -> BinaryMask {
    let threshold = match cfg.threshold {
        ThresholdStrategy::Mean => map.mean(),
        ThresholdStrategy::Fixed(v) => v,
    };
    map.above(threshold).retain_largest(cfg.max_components)
}

/// Difference map and binary mask in one call.
pub fn generate_mask<T: Scalar>(
    image: &ImageTensor<T>,
    e_ref: &TokenEmbeddingMatrix<T>,
    e_tgt: &TokenEmbeddingMatrix<T>,
    bundle: &BackendBundle<T>,
    cfg: &MaskGenConfig<T>,
) -> Result<(DiffMap<T>, BinaryMask)> {
    let map = noise_difference_map(image, e_ref, e_tgt, bundle, cfg)?;
    let mask = binarize_mask(&map, cfg);
    Ok((map, mask))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> MaskGenConfig<f64> {
        MaskGenConfig::default()
    }

    #[test]
    fn percentile_interpolates() {
        let v = [0.0_f64, 1.0, 2.0, 3.0, 4.0];
        assert_eq!(percentile(&v, 0.0), 0.0);
        assert_eq!(percentile(&v, 100.0), 4.0);
        assert_eq!(percentile(&v, 50.0), 2.0);
        assert!((percentile(&v, 12.5) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn block_over_mean_threshold() {
        let mut values = vec![0.1_f64; 16];
        for &(y, x) in &[(1, 1), (1, 2), (2, 1), (2, 2)] {
            values[y * 4 + x] = 0.9;
        }
        let map = DiffMap::new(4, 4, values).unwrap();
        assert!((map.mean() - 0.3).abs() < 1e-12);
        let m = binarize_mask(&map, &cfg());
        assert_eq!(m, BinaryMask::rect(4, 4, 1, 3, 1, 3));
        assert_eq!(m.components().len(), 1);
    }

    #[test]
    fn zero_map_gives_empty_mask() {
        let m = binarize_mask(&DiffMap::<f64>::zeros(5, 5), &cfg());
        assert!(m.is_empty());
    }

    #[test]
    fn keeps_three_largest_blobs() {
        // five horizontal blobs of areas 10, 8, 6, 4, 2 on separate rows
        let (h, w) = (9, 10);
        let mut values = vec![0.0; h * w];
        for (i, len) in [10usize, 8, 6, 4, 2].iter().enumerate() {
            for x in 0..*len {
                values[(2 * i) * w + x] = 1.0;
            }
        }
        let m = binarize_mask(&DiffMap::new(h, w, values).unwrap(), &cfg());
        let mut areas: Vec<usize> = m.components().iter().map(|c| c.area()).collect();
        areas.sort_unstable();
        assert_eq!(areas, vec![6, 8, 10]);
    }

    #[test]
    fn normalization_clamps_and_scales() {
        let mut values: Vec<f64> = (0..200).map(|i| i as f64 / 199.0).collect();
        values[0] = -50.0;
        values[199] = 1e6;
        let raw = DiffMap::new(10, 20, values).unwrap();
        let n = normalize_map(&raw, &cfg());
        assert!(n.is_normalized());
        assert_eq!(n.values()[0], 0.0);
        assert_eq!(n.values()[199], 1.0);
    }

    #[test]
    fn constant_and_sub_floor_maps_normalize_to_zero() {
        let raw = DiffMap::new(3, 3, vec![2.0; 9]).unwrap();
        assert!(normalize_map(&raw, &cfg()).values().iter().all(|&v| v == 0.0));
        let mut tiny = vec![0.0; 9];
        tiny[4] = 1e-6;
        let raw = DiffMap::new(3, 3, tiny).unwrap();
        let c = MaskGenConfig {
            outlier_percentiles: (0.0, 100.0),
            ..cfg()
        };
        assert!(normalize_map(&raw, &c).values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn threshold_parse() {
        assert_eq!(ThresholdStrategy::<f64>::parse("mean").unwrap(), ThresholdStrategy::Mean);
        assert_eq!(ThresholdStrategy::<f64>::parse(" 0.2").unwrap(), ThresholdStrategy::Fixed(0.2));
        assert!(ThresholdStrategy::<f64>::parse("median").is_err());
        assert_eq!(ThresholdStrategy::Fixed(0.3_f64).label(), "0.3");
    }

    #[test]
    fn config_validation() {
        assert!(cfg().validate().is_ok());
        let bad = MaskGenConfig {
            outlier_percentiles: (50.0, 50.0),
            ..cfg()
        };
        assert!(bad.validate().is_err());
        let bad = MaskGenConfig { n_noises: 0, ..cfg() };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn explicit_timesteps_are_range_checked() {
        let s = NoiseSchedule::<f64>::new(vec![0.9, 0.5]).unwrap();
        assert_eq!(TimestepSelection::Explicit(vec![1]).resolve(&s).unwrap(), vec![1]);
        assert!(TimestepSelection::Explicit(vec![2]).resolve(&s).is_err());
        assert!(TimestepSelection::Explicit(vec![]).resolve(&s).is_err());
    }
}
