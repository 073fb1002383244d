//! Localization and detection metrics, batch evaluation and the ablation
//! harness.

mod ablation;

pub use ablation::{run_ablations, AblationAxis, AblationGrid, AblationReport, AblationRow, AblationTable};

use std::collections::HashMap;
use std::path::Path;

use serde::Serialize;

use crate::backends::BackendBundle;
use crate::dataset::{resolve, whole_image_score, DatasetRecord, Label};
use crate::error::{Error, Result};
use crate::io;
use crate::localize::{AnalysisResult, WordSpan};
use crate::mask::BinaryMask;
use crate::pipeline::{analyze_batch, BatchItem, PipelineConfig};
use crate::scalar::Scalar;
use crate::tensor::ImageTensor;

/// Mean of the foreground and background IoU. A class absent from both
/// masks scores 1, absent from exactly one scores 0.
pub fn miou(pred: &BinaryMask, gt: &BinaryMask) -> Result<f64> {
    pred.same_size(gt)?;
    let n = pred.bits().len();
    let fg_inter = pred.intersection_count(gt);
    let fg_union = pred.area() + gt.area() - fg_inter;
    let bg_inter = n - fg_union;
    let bg_union = n - fg_inter;
    let iou = |inter: usize, union: usize| if union == 0 { 1.0 } else { inter as f64 / union as f64 };
    Ok(0.5 * (iou(fg_inter, fg_union) + iou(bg_inter, bg_union)))
}

/// Unweighted mean of per-pair mIoU over `truths`. Every truth id needs a
/// prediction.
pub fn dataset_miou(predictions: &HashMap<String, BinaryMask>, truths: &[(String, BinaryMask)]) -> Result<f64> {
    if truths.is_empty() {
        return Err(Error::Precondition("no inconsistent pairs to evaluate".into()));
    }
    let missing: Vec<String> = truths
        .iter()
        .filter(|(id, _)| !predictions.contains_key(id))
        .map(|(id, _)| id.clone())
        .collect();
    if !missing.is_empty() {
        return Err(Error::MissingPredictions(missing));
    }
    let mut total = 0.0;
    for (id, gt) in truths {
        total += miou(&predictions[id], gt)?;
    }
    Ok(total / truths.len() as f64)
}

/// Area under the ROC curve with consistent (`true`) as the positive class,
/// via midranks: exactly `P(pos > neg) + ½·P(pos = neg)`.
pub fn roc_auc<T: Scalar>(scores: &[T], positive: &[bool]) -> Result<f64> {
    check_lengths(scores, positive)?;
    let n_pos = positive.iter().filter(|&&p| p).count();
    let n_neg = positive.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::Precondition("AUC needs both classes".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).expect("finite scores"));
    // Twice the midrank sum stays integral.
    let mut twice_rank_sum: u128 = 0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i + 1;
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            j += 1;
        }
        // Ranks i+1..=j share the midrank (i+1+j)/2.
        let twice_mid = (i + 1 + j) as u128;
        let pos_in_tie = order[i..j].iter().filter(|&&k| positive[k]).count() as u128;
        twice_rank_sum += twice_mid * pos_in_tie;
        i = j;
    }
    let np = n_pos as u128;
    let twice_u = twice_rank_sum - np * (np + 1);
    Ok(twice_u as f64 / (2.0 * n_pos as f64 * n_neg as f64))
}

/// Best accuracy of the rule `consistent iff score ≥ threshold` over the
/// minimum score, the midpoints of sorted unique scores, and max + 1, with
/// the smallest threshold reaching it.
pub fn accuracy_at_best_threshold<T: Scalar>(scores: &[T], positive: &[bool]) -> Result<(f64, T)> {
    check_lengths(scores, positive)?;
    if scores.is_empty() {
        return Err(Error::Precondition("no scores".into()));
    }
    let mut pairs: Vec<(T, bool)> = scores.iter().copied().zip(positive.iter().copied()).collect();
    pairs.sort_by(|a, b| a.0.partial_cmp(&b.0).expect("finite scores"));
    let n = pairs.len();
    let n_pos = pairs.iter().filter(|p| p.1).count();

    // Threshold at the minimum: everything predicted consistent.
    let mut best = (n_pos, pairs[0].0);
    let mut neg_below = 0;
    let mut pos_below = 0;
    let mut i = 0;
    while i < n {
        let v = pairs[i].0;
        while i < n && pairs[i].0 == v {
            if pairs[i].1 {
                pos_below += 1;
            } else {
                neg_below += 1;
            }
            i += 1;
        }
        let thr = if i < n {
            (v + pairs[i].0) / T::lit(2.0)
        } else {
            v + T::one()
        };
        let correct = neg_below + (n_pos - pos_below);
        if correct > best.0 {
            best = (correct, thr);
        }
    }
    Ok((best.0 as f64 / n as f64, best.1))
}

fn check_lengths<T: Scalar>(scores: &[T], labels: &[bool]) -> Result<()> {
    if scores.len() != labels.len() {
        return Err(Error::shape(format!("{} labels", scores.len()), labels.len()));
    }
    if let Some(i) = (0..scores.len()).find(|&i| !scores[i].is_finite()) {
        return Err(Error::InvalidValue(format!("score {i} is not finite")));
    }
    Ok(())
}

/// AUC, accuracy and threshold of one detector.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Detection {
    pub auc: f64,
    pub accuracy: f64,
    pub threshold: f64,
}

pub fn detection<T: Scalar>(scores: &[T], labels: &[Label]) -> Result<Detection> {
    let positive: Vec<bool> = labels.iter().map(|l| *l == Label::Consistent).collect();
    let auc = roc_auc(scores, &positive)?;
    let (accuracy, threshold) = accuracy_at_best_threshold(scores, &positive)?;
    Ok(Detection {
        auc,
        accuracy,
        threshold: threshold.as_f64(),
    })
}

/// One labelled pair ready for evaluation.
#[derive(Debug, Clone)]
pub struct EvalPair<T> {
    pub id: String,
    pub image: ImageTensor<T>,
    pub caption: String,
    pub label: Label,
    /// Ground-truth region for inconsistent pairs.
    pub gt_mask: Option<BinaryMask>,
}

/// Loads the images and ground-truth masks named by `records`, resolving
/// relative paths against `base_dir`.
pub fn load_pairs<T: Scalar>(records: &[DatasetRecord], base_dir: &Path) -> Result<Vec<EvalPair<T>>> {
    records
        .iter()
        .map(|r| {
            let image = io::read_image(&resolve(base_dir, &r.image_path))?;
            let gt_mask = match &r.gt_mask_path {
                Some(p) => {
                    let m = io::read_mask(&resolve(base_dir, p))?;
                    image.check_mask(&m)?;
                    Some(m)
                }
                None => None,
            };
            Ok(EvalPair {
                id: r.id.clone(),
                image,
                caption: r.caption.clone(),
                label: r.label,
                gt_mask,
            })
        })
        .collect()
}

/// Whole-image cosine×100 per pair as the detection score.
pub fn baseline_clip_detect<T: Scalar>(pairs: &[EvalPair<T>], bundle: &BackendBundle<T>) -> Result<Detection> {
    if pairs.is_empty() {
        return Err(Error::Precondition("no pairs".into()));
    }
    let scores = pairs
        .iter()
        .map(|p| whole_image_score(bundle, &p.image, &p.caption))
        .collect::<Result<Vec<f64>>>()?;
    let labels: Vec<Label> = pairs.iter().map(|p| p.label).collect();
    detection(&scores, &labels)
}

/// Per-pair row of an evaluation.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PairRow {
    pub id: String,
    pub label: Label,
    pub score: f64,
    pub miou: Option<f64>,
    pub miou_intermediate: Option<f64>,
    pub mask_area: usize,
    pub words: Vec<WordSpan>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Evaluation {
    /// Mean mIoU of the final mask over inconsistent pairs with ground truth.
    pub miou: Option<f64>,
    /// Same for the intermediate mask.
    pub miou_intermediate: Option<f64>,
    /// Present when both labels occur.
    pub detection: Option<Detection>,
    pub rows: Vec<PairRow>,
}

/// Runs the pipeline on every pair and scores masks and detection.
/// Pairs that fail to analyze abort the evaluation with their id.
pub fn evaluate<T: Scalar>(
    pairs: &[EvalPair<T>],
    bundle: &BackendBundle<T>,
    cfg: &PipelineConfig<T>,
    global_seed: u64,
    parallelism: usize,
) -> Result<Evaluation> {
    let results = analyze_pairs(pairs, bundle, cfg, global_seed, parallelism)?;
    summarize(pairs, &results)
}

pub(crate) fn analyze_pairs<T: Scalar>(
    pairs: &[EvalPair<T>],
    bundle: &BackendBundle<T>,
    cfg: &PipelineConfig<T>,
    global_seed: u64,
    parallelism: usize,
) -> Result<Vec<AnalysisResult<T>>> {
    if pairs.is_empty() {
        return Err(Error::Precondition("no pairs".into()));
    }
    let items: Vec<BatchItem<T>> = pairs
        .iter()
        .map(|p| BatchItem {
            id: p.id.clone(),
            image: p.image.clone(),
            text: p.caption.clone(),
        })
        .collect();
    analyze_batch(&items, bundle, cfg, global_seed, parallelism)
        .into_iter()
        .zip(pairs)
        .map(|(r, p)| r.map_err(|e| Error::InvalidValue(format!("pair {}: {e}", p.id))))
        .collect()
}

pub(crate) fn summarize<T: Scalar>(pairs: &[EvalPair<T>], results: &[AnalysisResult<T>]) -> Result<Evaluation> {
    let mut rows = Vec::with_capacity(pairs.len());
    let (mut sum, mut sum_int, mut n) = (0.0, 0.0, 0usize);
    for (p, r) in pairs.iter().zip(results) {
        let (m, mi) = match (&p.gt_mask, p.label) {
            (Some(gt), Label::Inconsistent) => {
                let m = miou(&r.mask, gt)?;
                let mi = miou(&r.intermediate_mask, gt)?;
                sum += m;
                sum_int += mi;
                n += 1;
                (Some(m), Some(mi))
            }
            _ => (None, None),
        };
        rows.push(PairRow {
            id: p.id.clone(),
            label: p.label,
            score: r.score.as_f64(),
            miou: m,
            miou_intermediate: mi,
            mask_area: r.mask.area(),
            words: r.words.clone(),
        });
    }
    let scores: Vec<f64> = rows.iter().map(|r| r.score).collect();
    let labels: Vec<Label> = rows.iter().map(|r| r.label).collect();
    let both = labels.contains(&Label::Consistent) && labels.contains(&Label::Inconsistent);
    Ok(Evaluation {
        miou: (n > 0).then(|| sum / n as f64),
        miou_intermediate: (n > 0).then(|| sum_int / n as f64),
        detection: if both { Some(detection(&scores, &labels)?) } else { None },
        rows,
    })
}

/// The metrics report document.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricReport<V: Serialize> {
    pub metric: String,
    pub value: V,
    pub config: serde_json::Value,
    pub seed: u64,
    pub backend_id: String,
    pub timestamp: String,
}

impl<V: Serialize> MetricReport<V> {
    pub fn new(metric: &str, value: V, config: serde_json::Value, seed: u64, backend_id: &str) -> Self {
        Self {
            metric: metric.to_string(),
            value,
            config,
            seed,
            backend_id: backend_id.to_string(),
            timestamp: chrono::Utc::now().to_rfc3339(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn miou_hand_cases() {
        let n = 8;
        let top = BinaryMask::rect(n, n, 0, n / 2, 0, n);
        let left = BinaryMask::rect(n, n, 0, n, 0, n / 2);
        assert!((miou(&top, &left).unwrap() - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(miou(&top, &top).unwrap(), 1.0);
        assert_eq!(miou(&BinaryMask::empty(n, n), &BinaryMask::empty(n, n)).unwrap(), 1.0);
        let full = BinaryMask::full(n, n);
        assert_eq!(miou(&full, &full).unwrap(), 1.0);
        assert_eq!(miou(&BinaryMask::empty(n, n), &full).unwrap(), 0.0);
        assert!(miou(&top, &BinaryMask::empty(4, 4)).is_err());
    }

    #[test]
    fn dataset_miou_mean_and_missing() {
        let n = 10;
        let gt = BinaryMask::rect(n, n, 0, 10, 0, 5);
        let mut preds = HashMap::new();
        preds.insert("a".to_string(), gt.clone());
        assert_eq!(dataset_miou(&preds, &[("a".into(), gt.clone())]).unwrap(), 1.0);
        let err = dataset_miou(&preds, &[("a".into(), gt.clone()), ("b".into(), gt)]).unwrap_err();
        assert!(matches!(err, Error::MissingPredictions(ref v) if v == &["b".to_string()]));
    }

    #[test]
    fn auc_cases() {
        assert_eq!(roc_auc(&[1.0_f64, 2.0, 3.0, 4.0], &[false, false, true, true]).unwrap(), 1.0);
        assert_eq!(roc_auc(&[5.0_f64; 6], &[true, false, true, false, true, false]).unwrap(), 0.5);
        assert_eq!(roc_auc(&[1.0_f64, 2.0], &[false, true]).unwrap(), 1.0);
        assert_eq!(roc_auc(&[2.0_f64, 1.0], &[false, true]).unwrap(), 0.0);
        assert!(roc_auc(&[1.0_f64, 2.0], &[true, true]).is_err());
        assert!(roc_auc(&[1.0_f64], &[true, false]).is_err());
    }

    #[test]
    fn accuracy_hand_instance() {
        let (acc, thr) =
            accuracy_at_best_threshold(&[10.0_f64, 20.0, 80.0, 90.0], &[false, false, true, true]).unwrap();
        assert_eq!(acc, 1.0);
        assert_eq!(thr, 50.0);
        let (acc, thr) = accuracy_at_best_threshold(&[3.0_f64, 3.0], &[true, true]).unwrap();
        assert_eq!((acc, thr), (1.0, 3.0));
        let (acc, thr) = accuracy_at_best_threshold(&[3.0_f64, 3.0], &[false, false]).unwrap();
        assert_eq!((acc, thr), (1.0, 4.0));
        assert!(accuracy_at_best_threshold::<f64>(&[], &[]).is_err());
    }
}
