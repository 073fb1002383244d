//! Final mask, inconsistent-word localization and the consistency score.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::align::AlignResult;
use crate::backends::BackendBundle;
use crate::error::{Error, Result};
use crate::mask::{BinaryMask, DiffMap};
use crate::maskgen::{generate_mask, MaskGenConfig};
use crate::scalar::{cosine, Scalar};
use crate::tensor::{ImageTensor, TokenEmbeddingMatrix};

/// Prompt template used to embed candidate word spans.
pub const WORD_TEMPLATE: &str = "A photo of {words}";

const STOPWORDS: &[&str] = &[
    "a", "about", "above", "after", "again", "against", "all", "am", "an", "and", "any", "are",
    "as", "at", "be", "because", "been", "before", "being", "below", "between", "both", "but",
    "by", "can", "could", "did", "do", "does", "doing", "down", "during", "each", "few", "for",
    "from", "further", "had", "has", "have", "having", "he", "her", "here", "hers", "herself",
    "him", "himself", "his", "how", "i", "if", "in", "into", "is", "it", "its", "itself", "just",
    "me", "more", "most", "my", "myself", "near", "no", "nor", "not", "now", "of", "off", "on",
    "once", "only", "or", "other", "our", "ours", "ourselves", "out", "over", "own", "same",
    "she", "should", "so", "some", "such", "than", "that", "the", "their", "theirs", "them",
    "themselves", "then", "there", "these", "they", "this", "those", "through", "to", "too",
    "under", "until", "up", "very", "was", "we", "were", "what", "when", "where", "which",
    "while", "who", "whom", "why", "will", "with", "would", "you", "your", "yours", "yourself",
    "yourselves",
];

pub fn is_stopword(word: &str) -> bool {
    let w = word.to_lowercase();
    STOPWORDS.binary_search(&w.as_str()).is_ok()
}

/// A span of the input text, in character (not byte) offsets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WordSpan {
    pub start: usize,
    pub end: usize,
    pub surface: String,
    #[serde(default)]
    pub similarity: f64,
}

impl WordSpan {
    /// Span `[start, end)` of `text`; fails when out of range or empty.
    pub fn from_text(text: &str, start: usize, end: usize) -> Result<Self> {
        let surface = slice_chars(text, start, end).ok_or_else(|| {
            Error::InvalidValue(format!("span [{start}, {end}) invalid for text of length {}", text.chars().count()))
        })?;
        Ok(Self {
            start,
            end,
            surface,
            similarity: 0.0,
        })
    }

    pub fn overlaps(&self, other: &WordSpan) -> bool {
        self.start < other.end && other.start < self.end
    }

    /// Offsets are valid for `text` and slice it to `surface`.
    pub fn is_valid_for(&self, text: &str) -> bool {
        slice_chars(text, self.start, self.end).as_deref() == Some(self.surface.as_str())
    }
}

/// Characters `[start, end)` of `text`, or `None` if the range is empty or
/// out of bounds.
pub fn slice_chars(text: &str, start: usize, end: usize) -> Option<String> {
    if start >= end || end > text.chars().count() {
        return None;
    }
    Some(text.chars().skip(start).take(end - start).collect())
}

#[derive(Debug, Clone, PartialEq)]
struct Word {
    start: usize,
    end: usize,
    content: bool,
}

fn words(text: &str) -> Vec<(Word, bool)> {
    // (word, joined_to_previous): joined when only spaces, hyphens or
    // apostrophes separate it from the previous word.
    let chars: Vec<char> = text.chars().collect();
    let mut out = Vec::new();
    let mut i = 0;
    let mut gap_breaks = false;
    while i < chars.len() {
        if chars[i].is_alphanumeric() {
            let start = i;
            while i < chars.len() && chars[i].is_alphanumeric() {
                i += 1;
            }
            let surface: String = chars[start..i].iter().collect();
            let joined = !out.is_empty() && !gap_breaks;
            out.push((
                Word {
                    start,
                    end: i,
                    content: !is_stopword(&surface),
                },
                joined,
            ));
            gap_breaks = false;
        } else {
            if !(chars[i].is_whitespace() || chars[i] == '-' || chars[i] == '\'') {
                gap_breaks = true;
            }
            i += 1;
        }
    }
    out
}

/// Contiguous n-grams (1 ≤ n ≤ `max_n`) made only of content words.
pub fn candidate_spans(text: &str, max_n: usize) -> Vec<WordSpan> {
    let ws = words(text);
    let mut out = Vec::new();
    for i in 0..ws.len() {
        if !ws[i].0.content {
            continue;
        }
        let mut j = i;
        while j < ws.len() && j - i < max_n {
            if j > i && (!ws[j].1 || !ws[j].0.content) {
                break;
            }
            out.push(
                WordSpan::from_text(text, ws[i].0.start, ws[j].0.end)
                    .expect("word offsets lie inside the text"),
            );
            j += 1;
        }
    }
    out
}

/// `100 · clamp(cos, 0, 1)`.
pub fn rescale_cosine<T: Scalar>(cos: T) -> T {
    T::lit(100.0) * cos.max(T::zero()).min(T::one())
}

/// Final mask from the two aligned embeddings; same procedure as the
/// intermediate mask.
pub fn final_mask<T: Scalar>(
    image: &ImageTensor<T>,
    e_aln: &TokenEmbeddingMatrix<T>,
    e_dnt: &TokenEmbeddingMatrix<T>,
    bundle: &BackendBundle<T>,
    cfg: &MaskGenConfig<T>,
) -> Result<(DiffMap<T>, BinaryMask)> {
    generate_mask(image, e_aln, e_dnt, bundle, cfg)
}

/// Mean-pooled text embedding of `text` through the bundle's encoder.
pub fn pooled_text<T: Scalar>(bundle: &BackendBundle<T>, text: &str) -> Result<Vec<T>> {
    Ok(bundle.encode_text(text)?.embedding.mean_pooled())
}

/// Ranks candidate spans of `text` by cosine similarity between the
/// template-embedded span and the edited image restricted to `mask`, and
/// returns up to `top_k` non-overlapping spans.
pub fn localize_words<T: Scalar>(
    text: &str,
    edited: &ImageTensor<T>,
    mask: &BinaryMask,
    bundle: &BackendBundle<T>,
    top_k: usize,
) -> Result<Vec<WordSpan>> {
    if text.trim().is_empty() {
        return Err(Error::EmptyText);
    }
    let candidates = candidate_spans(text, 4);
    if candidates.is_empty() || top_k == 0 {
        return Ok(Vec::new());
    }
    let image_vec = bundle.encode_image(edited, Some(mask))?;
    let score = |span: &WordSpan| -> Result<Option<WordSpan>> {
        let prompt = WORD_TEMPLATE.replace("{words}", &span.surface);
        let pooled = pooled_text(bundle, &prompt)?;
        if pooled.len() != image_vec.len() {
            return Err(Error::shape(
                format!("text vector of dim {}", image_vec.len()),
                pooled.len(),
            ));
        }
        Ok(cosine(&pooled, &image_vec).map(|c| WordSpan {
            similarity: c.as_f64(),
            ..span.clone()
        }))
    };
    let scored: Vec<Option<WordSpan>> = if bundle.capabilities.concurrent_inference {
        candidates.par_iter().map(score).collect::<Result<_>>()?
    } else {
        candidates.iter().map(score).collect::<Result<_>>()?
    };
    let mut ranked: Vec<WordSpan> = scored.into_iter().flatten().collect();
    ranked.sort_by(|a, b| {
        b.similarity
            .total_cmp(&a.similarity)
            .then(a.start.cmp(&b.start))
            .then(a.end.cmp(&b.end))
    });
    let mut kept: Vec<WordSpan> = Vec::new();
    for span in ranked {
        if kept.len() == top_k {
            break;
        }
        if kept.iter().all(|k| !k.overlaps(&span)) {
            kept.push(span);
        }
    }
    Ok(kept)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Score<T> {
    pub value: T,
    pub cosine: T,
    /// The mask was empty, so the whole image was encoded.
    pub full_image: bool,
}

/// Consistency score in `[0, 100]` of `image` restricted to `mask` against a
/// pooled text vector.
pub fn consistency_score<T: Scalar>(
    image: &ImageTensor<T>,
    mask: &BinaryMask,
    text_vec: &[T],
    bundle: &BackendBundle<T>,
) -> Result<Score<T>> {
    image.check_mask(mask)?;
    if text_vec.iter().all(|&v| v == T::zero()) {
        return Err(Error::ZeroTextVector);
    }
    let full_image = mask.is_empty();
    let v = if full_image {
        bundle.encode_image(image, None)?
    } else {
        bundle.encode_image(image, Some(mask))?
    };
    if v.len() != text_vec.len() {
        return Err(Error::shape(format!("text vector of dim {}", v.len()), text_vec.len()));
    }
    let c = cosine(&v, text_vec).ok_or(Error::ZeroTextVector)?;
    Ok(Score {
        value: rescale_cosine(c),
        cosine: c,
        full_image,
    })
}

/// Run information kept alongside an analysis.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct AnalysisMetadata {
    pub backend_id: String,
    pub seed: u64,
    pub config: serde_json::Value,
    /// The intermediate mask was empty, so no edit was made.
    pub no_edit: bool,
    /// The final mask was empty, so the score used the whole image.
    pub score_from_full_image: bool,
    pub warnings: Vec<String>,
    /// Wall-clock milliseconds per stage.
    pub stage_millis: BTreeMap<String, f64>,
    /// RFC 3339 time the analysis started.
    pub started_at: String,
}

/// Everything produced by one analysis, including intermediates.
#[derive(Debug, Clone, PartialEq)]
pub struct AnalysisResult<T> {
    pub text: String,
    pub e0: TokenEmbeddingMatrix<T>,
    pub init: TokenEmbeddingMatrix<T>,
    pub aligned: AlignResult<T>,
    pub intermediate_map: DiffMap<T>,
    pub intermediate_mask: BinaryMask,
    pub edited_image: ImageTensor<T>,
    pub denoised: AlignResult<T>,
    pub final_map: DiffMap<T>,
    pub mask: BinaryMask,
    /// Ranked by similarity, highest first.
    pub words: Vec<WordSpan>,
    pub score: T,
    pub metadata: AnalysisMetadata,
}

impl<T: Scalar> AnalysisResult<T> {
    /// The result document written next to the mask and edited image.
    /// Wall-clock fields live under `metadata.timestamp`.
    pub fn report_json(&self, mask_path: &str, edited_image_path: &str) -> serde_json::Value {
        let m = &self.metadata;
        serde_json::json!({
            "score": self.score.as_f64(),
            "words": self.words,
            "mask_path": mask_path,
            "edited_image_path": edited_image_path,
            "metadata": {
                "backend_id": m.backend_id,
                "seed": m.seed,
                "config": m.config,
                "no_edit": m.no_edit,
                "score_from_full_image": m.score_from_full_image,
                "warnings": m.warnings,
                "final_mask_area": self.mask.area(),
                "intermediate_mask_area": self.intermediate_mask.area(),
                "timestamp": {
                    "started_at": m.started_at,
                    "stage_millis": m.stage_millis,
                },
            },
        })
    }
}
