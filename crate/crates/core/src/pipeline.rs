//! End-to-end analysis (alignment, editing, realignment, localization) and
//! binary detection on top of the consistency score.

use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::align::{align_embedding, AlignConfig, AlignResult};
use crate::backends::BackendBundle;
use crate::dataset::Label;
use crate::edit::edit_image;
use crate::error::{Error, Result, Stage, StageExt};
use crate::localize::{consistency_score, final_mask, localize_words, AnalysisMetadata, AnalysisResult};
use crate::maskgen::{MaskGenConfig, ThresholdStrategy, TimestepSelection};
use crate::metrics::accuracy_at_best_threshold;
use crate::scalar::Scalar;
use crate::seed::{derive_seed, normals};
use crate::tensor::{EmbeddingOrigin, ImageTensor, TokenEmbeddingMatrix};

/// How the alignment is initialized and constrained.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InitVariant {
    /// Start at the caption embedding, constrained to the ball around it.
    Default,
    /// Start at the caption embedding without the ball constraint.
    NoConstraint,
    /// Start at (and constrain around) a random embedding of the same shape.
    RandomInit,
}

impl InitVariant {
    pub const ALL: [InitVariant; 3] = [InitVariant::RandomInit, InitVariant::NoConstraint, InitVariant::Default];

    pub fn label(&self) -> &'static str {
        match self {
            InitVariant::Default => "default",
            InitVariant::NoConstraint => "no-constraint",
            InitVariant::RandomInit => "random-init",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig<T> {
    pub align: AlignConfig<T>,
    pub mask: MaskGenConfig<T>,
    pub top_k: usize,
    pub init: InitVariant,
}

impl<T: Scalar> Default for PipelineConfig<T> {
    fn default() -> Self {
        Self {
            align: AlignConfig::default(),
            mask: MaskGenConfig::default(),
            top_k: 1,
            init: InitVariant::Default,
        }
    }
}

impl<T: Scalar> PipelineConfig<T> {
    /// Defaults with the learning rate tuned for the synthetic backend.
    pub fn synthetic() -> Self {
        Self {
            align: AlignConfig::synthetic(),
            ..Self::default()
        }
    }

    /// Copy whose alignment and mask seeds derive from `seed`.
    pub fn seeded(&self, seed: u64) -> Self {
        let mut cfg = self.clone();
        cfg.align.seed = derive_seed(seed, "align");
        cfg.mask.seed = derive_seed(seed, "mask");
        cfg
    }

    pub fn validate(&self) -> Result<()> {
        self.align.validate()?;
        self.mask.validate()
    }

    pub fn to_json(&self) -> serde_json::Value {
        let timesteps = match &self.mask.timesteps {
            TimestepSelection::Central { count, fraction } => {
                serde_json::json!({ "central": { "count": count, "fraction": fraction } })
            }
            TimestepSelection::Explicit(v) => serde_json::json!({ "explicit": v }),
        };
        let threshold = match self.mask.threshold {
            ThresholdStrategy::Mean => serde_json::json!("mean"),
            ThresholdStrategy::Fixed(v) => serde_json::json!(v.as_f64()),
        };
        serde_json::json!({
            "align": {
                "gamma": self.align.gamma.as_f64(),
                "iterations": self.align.iterations,
                "learning_rate": self.align.learning_rate.as_f64(),
                "seed": self.align.seed,
            },
            "mask": {
                "n_noises": self.mask.n_noises,
                "timesteps": timesteps,
                "seed": self.mask.seed,
                "outlier_percentiles": [self.mask.outlier_percentiles.0, self.mask.outlier_percentiles.1],
                "threshold": threshold,
                "max_components": self.mask.max_components,
                "noise_floor": self.mask.noise_floor.as_f64(),
            },
            "top_k": self.top_k,
            "init": self.init.label(),
        })
    }
}

fn initial_embedding<T: Scalar>(
    e0: &TokenEmbeddingMatrix<T>,
    cfg: &PipelineConfig<T>,
) -> Result<(TokenEmbeddingMatrix<T>, AlignConfig<T>)> {
    let mut align = cfg.align.clone();
    let init = match cfg.init {
        InitVariant::Default => e0.clone(),
        InitVariant::NoConstraint => {
            align.gamma = T::infinity();
            e0.clone()
        }
        InitVariant::RandomInit => {
            let (n, d) = e0.shape();
            let rows = normals(derive_seed(cfg.align.seed, "random-init"), n * d);
            TokenEmbeddingMatrix::new(n, d, rows, Vec::new(), EmbeddingOrigin::Synthetic)?
        }
    };
    Ok((init, align))
}

fn timed<R>(millis: &mut Vec<(String, f64)>, stage: Stage, f: impl FnOnce() -> Result<R>) -> Result<R> {
    let start = Instant::now();
    let out = f().stage(stage);
    millis.push((stage.to_string(), start.elapsed().as_secs_f64() * 1e3));
    out
}

/// Runs the four steps on one image-text pair.
pub fn analyze<T: Scalar>(
    image: &ImageTensor<T>,
    text: &str,
    bundle: &BackendBundle<T>,
    cfg: &PipelineConfig<T>,
) -> Result<AnalysisResult<T>> {
    cfg.validate()?;
    let started_at = chrono::Utc::now().to_rfc3339();
    let mut millis = Vec::new();

    let encoding = timed(&mut millis, Stage::EncodeText, || bundle.encode_text(text))?;
    let e0 = encoding.embedding;
    let (init, align_cfg) = initial_embedding(&e0, cfg)?;

    // Step 1: align to the input image.
    let aligned: AlignResult<T> = timed(&mut millis, Stage::AlignInput, || {
        align_embedding(image, &init, bundle, &align_cfg)
    })?;

    // Step 2: edit the image toward the caption.
    let edit = timed(&mut millis, Stage::Edit, || {
        edit_image(image, &e0, &aligned.embedding, bundle, &cfg.mask)
    })?;

    // Step 3: align to the edited image.
    let denoised = timed(&mut millis, Stage::AlignEdited, || {
        align_embedding(&edit.edited, &init, bundle, &align_cfg)
    })?;

    // Step 4: final mask, words, score.
    let (final_map, mask) = timed(&mut millis, Stage::FinalMask, || {
        final_mask(image, &aligned.embedding, &denoised.embedding, bundle, &cfg.mask)
    })?;
    let words = if mask.is_empty() {
        Vec::new()
    } else {
        timed(&mut millis, Stage::LocalizeWords, || {
            localize_words(text, &edit.edited, &mask, bundle, cfg.top_k)
        })?
    };
    let score = timed(&mut millis, Stage::Score, || {
        consistency_score(image, &mask, &e0.mean_pooled(), bundle)
    })?;

    let metadata = AnalysisMetadata {
        backend_id: bundle.id.clone(),
        seed: cfg.align.seed,
        config: cfg.to_json(),
        no_edit: edit.no_edit,
        score_from_full_image: score.full_image,
        warnings: encoding.warnings,
        stage_millis: millis.into_iter().collect(),
        started_at,
    };
    Ok(AnalysisResult {
        text: text.to_string(),
        e0,
        init,
        aligned,
        intermediate_map: edit.map,
        intermediate_mask: edit.mask,
        edited_image: edit.edited,
        denoised,
        final_map,
        mask,
        words,
        score: score.value,
        metadata,
    })
}

/// `Inconsistent` iff `score < threshold`.
pub fn detect<T: Scalar>(score: T, threshold: T) -> Label {
    if score < threshold {
        Label::Inconsistent
    } else {
        Label::Consistent
    }
}

/// Detection threshold maximizing accuracy on a calibration split.
pub fn calibrate_threshold<T: Scalar>(scores: &[T], labels: &[Label]) -> Result<T> {
    let consistent: Vec<bool> = labels.iter().map(|l| *l == Label::Consistent).collect();
    Ok(accuracy_at_best_threshold(scores, &consistent)?.1)
}

/// Seed for one pair of a batch.
pub fn pair_seed(global_seed: u64, pair_id: &str) -> u64 {
    derive_seed(global_seed, pair_id)
}

/// One pair submitted to [`analyze_batch`].
#[derive(Debug, Clone)]
pub struct BatchItem<T> {
    pub id: String,
    pub image: ImageTensor<T>,
    pub text: String,
}

/// Analyzes pairs independently, each seeded from `pair_seed(global_seed, id)`.
/// Runs concurrently on up to `parallelism` threads when the backend allows
/// it; results keep input order.
pub fn analyze_batch<T: Scalar>(
    items: &[BatchItem<T>],
    bundle: &BackendBundle<T>,
    cfg: &PipelineConfig<T>,
    global_seed: u64,
    parallelism: usize,
) -> Vec<Result<AnalysisResult<T>>> {
    let run = |item: &BatchItem<T>| {
        let seeded = cfg.seeded(pair_seed(global_seed, &item.id));
        analyze(&item.image, &item.text, bundle, &seeded)
    };
    if !bundle.capabilities.concurrent_inference || parallelism <= 1 {
        return items.iter().map(run).collect();
    }
    match rayon::ThreadPoolBuilder::new().num_threads(parallelism).build() {
        Ok(pool) => pool.install(|| items.par_iter().map(run).collect()),
        Err(e) => {
            log::warn!("thread pool unavailable ({e}); running sequentially");
            items.iter().map(run).collect()
        }
    }
}

/// Errors from a batch, keyed by pair id.
pub fn batch_errors<T>(items: &[BatchItem<T>], results: &[Result<AnalysisResult<T>>]) -> Vec<(String, String)> {
    items
        .iter()
        .zip(results)
        .filter_map(|(i, r)| r.as_ref().err().map(|e: &Error| (i.id.clone(), e.to_string())))
        .collect()
}
