//! Planted-inconsistency benchmark on the synthetic backend: rendered
//! captions with one content word replaced per edit.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;

use crate::backends::synthetic::{SyntheticBackend, CHANNELS, SIDE};
use crate::backends::BackendBundle;
use crate::dataset::{generate_pairs, write_manifest, DatasetRecord, EditSpec, Label, RegionBucket, Source, PairType};
use crate::error::{Error, Result};
use crate::io;
use crate::mask::BinaryMask;
use crate::metrics::EvalPair;
use crate::scalar::{l2_norm, Scalar};
use crate::seed::{derive_seed, rng};
use crate::tensor::{ImageTensor, Tensor};

/// Content words used to build captions.
pub const VOCABULARY: &[&str] = &[
    "red", "blue", "green", "yellow", "black", "white", "small", "large", "old", "young", "wooden", "shiny",
    "dog", "cat", "horse", "bird", "car", "boat", "tree", "house", "chair", "table", "bottle", "lamp",
    "apple", "banana", "guitar", "bicycle", "flower", "window", "river", "mountain",
];

/// Caption shape: content words at every slot except the two connectives.
const CONNECTIVES: [(usize, &str); 2] = [(2, "with"), (5, "near")];
const CAPTION_LEN: usize = 8;

/// Slots holding content words.
pub fn content_slots() -> Vec<usize> {
    (0..CAPTION_LEN).filter(|k| CONNECTIVES.iter().all(|(c, _)| c != k)).collect()
}

/// An in-memory benchmark: records plus the images and masks they name.
#[derive(Debug, Clone)]
pub struct Benchmark<T> {
    pub records: Vec<DatasetRecord>,
    pub images: BTreeMap<PathBuf, ImageTensor<T>>,
    pub masks: BTreeMap<PathBuf, BinaryMask>,
}

impl<T: Scalar> Benchmark<T> {
    pub fn pairs(&self) -> Result<Vec<EvalPair<T>>> {
        self.records
            .iter()
            .map(|r| {
                let image = self
                    .images
                    .get(&r.image_path)
                    .ok_or_else(|| Error::InvalidValue(format!("no image for {}", r.id)))?
                    .clone();
                let gt_mask = r.gt_mask_path.as_ref().and_then(|p| self.masks.get(p)).cloned();
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

    pub fn count(&self, label: Label) -> usize {
        self.records.iter().filter(|r| r.label == label).count()
    }

    /// Writes images, masks and `manifest.jsonl` under `dir`; returns the
    /// manifest path. Paths in the manifest are relative to `dir`.
    pub fn write(&self, dir: &Path) -> Result<PathBuf> {
        for sub in ["images", "masks"] {
            let d = dir.join(sub);
            fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
        }
        for (p, img) in &self.images {
            io::write_image(&dir.join(p), img)?;
        }
        for (p, m) in &self.masks {
            io::write_mask(&dir.join(p), m)?;
        }
        let manifest = dir.join("manifest.jsonl");
        write_manifest(&manifest, &self.records)?;
        Ok(manifest)
    }
}

fn render<T: Scalar>(bundle: &BackendBundle<T>, caption: &str) -> Result<ImageTensor<T>> {
    let e = bundle.encode_text(caption)?.embedding;
    bundle.generate(&Tensor::zeros(SIDE, SIDE, CHANNELS), &e)
}

/// Builds `n_edits` edits, four records each. Every replacement keeps the
/// caption embedding within `gamma` of the original.
pub fn synthetic_benchmark<T: Scalar>(
    bundle: &BackendBundle<T>,
    n_edits: usize,
    gamma: f64,
    seed: u64,
) -> Result<Benchmark<T>> {
    if n_edits == 0 {
        return Err(Error::InvalidConfig("benchmark needs at least one edit".into()));
    }
    let mut r = rng(derive_seed(seed, "benchmark"));
    let slots = content_slots();
    let mut out = Benchmark {
        records: Vec::new(),
        images: BTreeMap::new(),
        masks: BTreeMap::new(),
    };
    for i in 0..n_edits {
        let mut words: Vec<&str> = VOCABULARY.choose_multiple(&mut r, slots.len()).copied().collect();
        let mut caption_words = Vec::with_capacity(CAPTION_LEN);
        for k in 0..CAPTION_LEN {
            match CONNECTIVES.iter().find(|(c, _)| *c == k) {
                Some((_, w)) => caption_words.push(*w),
                None => caption_words.push(words.remove(0)),
            }
        }
        let caption = caption_words.join(" ");
        let slot = slots[r.random_range(0..slots.len())];
        let original = caption_words[slot];
        let e0 = bundle.encode_text(&caption)?.embedding;
        let replacement = replacement_for(bundle, &caption_words, slot, &e0, gamma, &mut r)?
            .ok_or_else(|| Error::InvalidConfig(format!("no replacement for `{original}` within gamma {gamma}")))?;

        let base_id = format!("syn{i:03}");
        let image_path = PathBuf::from(format!("images/{base_id}.png"));
        let edited_path = PathBuf::from(format!("images/{base_id}_edit.png"));
        let mask_path = PathBuf::from(format!("masks/{base_id}.png"));
        let image = render(bundle, &caption)?;
        let region = SyntheticBackend::<T>::patch_mask(slot);
        let base = DatasetRecord {
            id: base_id.clone(),
            image_path: image_path.clone(),
            caption: caption.clone(),
            pair_type: PairType::OrigOrig,
            label: Label::Consistent,
            gt_mask_path: None,
            gt_spans: Vec::new(),
            source: Source::Real,
            region_bucket: RegionBucket::None,
        };
        let spec = EditSpec {
            base_record: base_id,
            region_mask: mask_path.clone(),
            original_term: original.to_string(),
            replacement_term: replacement.to_string(),
        };
        let generated = generate_pairs(&base, &image, &region, &spec, bundle, &edited_path)?;
        out.records.extend(generated.records);
        out.images.insert(image_path, image);
        out.images.insert(edited_path, generated.edited_image);
        out.masks.insert(mask_path, region);
    }
    Ok(out)
}

fn replacement_for<'a, T: Scalar>(
    bundle: &BackendBundle<T>,
    words: &[&str],
    slot: usize,
    e0: &crate::tensor::TokenEmbeddingMatrix<T>,
    gamma: f64,
    r: &mut impl Rng,
) -> Result<Option<&'a str>> {
    let mut candidates: Vec<&'a str> = VOCABULARY.iter().copied().filter(|w| !words.contains(w)).collect();
    // Seeded order, first candidate within the ball wins.
    candidates.shuffle(r);
    for cand in candidates {
        let mut edited: Vec<&str> = words.to_vec();
        edited[slot] = cand;
        let e = bundle.encode_text(&edited.join(" "))?.embedding;
        let diff: Vec<T> = e.as_slice().iter().zip(e0.as_slice()).map(|(a, b)| *a - *b).collect();
        if l2_norm(&diff).as_f64() <= gamma {
            return Ok(Some(cand));
        }
    }
    Ok(None)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn benchmark_shape() {
        let bundle = BackendBundle::<f64>::synthetic(3);
        let b = synthetic_benchmark(&bundle, 4, 8.0, 11).unwrap();
        assert_eq!(b.records.len(), 16);
        assert_eq!(b.count(Label::Consistent), 8);
        assert_eq!(b.count(Label::Inconsistent), 8);
        assert_eq!(b.images.len(), 8);
        assert_eq!(b.masks.len(), 4);
        for r in &b.records {
            r.validate().unwrap();
            assert_eq!(r.caption.split(' ').count(), CAPTION_LEN);
        }
        let again = synthetic_benchmark(&bundle, 4, 8.0, 11).unwrap();
        assert_eq!(again.records, b.records);
    }

    #[test]
    fn edited_image_differs_only_in_region() {
        let bundle = BackendBundle::<f64>::synthetic(3);
        let b = synthetic_benchmark(&bundle, 2, 8.0, 5).unwrap();
        let orig = &b.images[Path::new("images/syn000.png")];
        let edit = &b.images[Path::new("images/syn000_edit.png")];
        let mask = &b.masks[Path::new("masks/syn000.png")];
        let mut changed = 0;
        for y in 0..SIDE {
            for x in 0..SIDE {
                let differs = (0..CHANNELS).any(|c| orig.get(y, x, c) != edit.get(y, x, c));
                if differs {
                    assert!(mask.get(y, x));
                    changed += 1;
                }
            }
        }
        assert!(changed > 0);
    }
}
