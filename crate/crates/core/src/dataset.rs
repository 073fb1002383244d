//! Inconsistency dataset records: JSON-lines manifests, four-way pair
//! generation from one edit, score tables and count statistics.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::backends::BackendBundle;
use crate::error::{Error, Result};
use crate::localize::{pooled_text, WordSpan};
use crate::mask::BinaryMask;
use crate::scalar::{cosine, Scalar};
use crate::seed::rng;
use crate::tensor::ImageTensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum PairType {
    /// Original image, original text.
    #[serde(rename = "orig_orig")]
    OrigOrig,
    /// Edited image, edited text.
    #[serde(rename = "edit_editText")]
    EditEditText,
    /// Original image, edited text.
    #[serde(rename = "orig_editText")]
    OrigEditText,
    /// Edited image, original text.
    #[serde(rename = "edit_origText")]
    EditOrigText,
}

impl PairType {
    pub const ALL: [PairType; 4] = [
        PairType::OrigOrig,
        PairType::EditEditText,
        PairType::OrigEditText,
        PairType::EditOrigText,
    ];

    /// The label this pair type implies.
    pub fn label(self) -> Label {
        match self {
            PairType::OrigOrig | PairType::EditEditText => Label::Consistent,
            PairType::OrigEditText | PairType::EditOrigText => Label::Inconsistent,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            PairType::OrigOrig => "orig_orig",
            PairType::EditEditText => "edit_editText",
            PairType::OrigEditText => "orig_editText",
            PairType::EditOrigText => "edit_origText",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Label {
    Consistent,
    Inconsistent,
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Label::Consistent => "consistent",
            Label::Inconsistent => "inconsistent",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Source {
    Real,
    Generated,
}

/// Size class of the inconsistent region.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RegionBucket {
    Large,
    Medium,
    Small,
    None,
}

impl RegionBucket {
    /// `large` above 200×200 pixels, `medium` from 100×100 to 200×200
    /// inclusive, `small` below, `none` for no region.
    pub fn for_area(area: usize) -> Self {
        match area {
            0 => RegionBucket::None,
            a if a > 200 * 200 => RegionBucket::Large,
            a if a >= 100 * 100 => RegionBucket::Medium,
            _ => RegionBucket::Small,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            RegionBucket::Large => "large",
            RegionBucket::Medium => "medium",
            RegionBucket::Small => "small",
            RegionBucket::None => "none",
        }
    }
}

/// One image-text pair of a manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetRecord {
    pub id: String,
    pub image_path: PathBuf,
    pub caption: String,
    pub pair_type: PairType,
    pub label: Label,
    #[serde(default)]
    pub gt_mask_path: Option<PathBuf>,
    #[serde(default)]
    pub gt_spans: Vec<WordSpan>,
    pub source: Source,
    pub region_bucket: RegionBucket,
}

impl DatasetRecord {
    pub fn validate(&self) -> Result<()> {
        if self.id.is_empty() {
            return Err(Error::InvalidValue("record id is empty".into()));
        }
        if self.caption.trim().is_empty() {
            return Err(Error::InvalidValue(format!("record {}: empty caption", self.id)));
        }
        if self.label != self.pair_type.label() {
            return Err(Error::InvalidValue(format!(
                "record {}: label {} contradicts pair type {}",
                self.id,
                self.label,
                self.pair_type.as_str()
            )));
        }
        if self.label == Label::Inconsistent
            && self.gt_mask_path.is_none()
            && self.gt_spans.is_empty()
        {
            return Err(Error::InvalidValue(format!(
                "record {}: inconsistent record without ground-truth mask or spans",
                self.id
            )));
        }
        if let Some(bad) = self.gt_spans.iter().find(|s| !s.is_valid_for(&self.caption)) {
            return Err(Error::InvalidValue(format!(
                "record {}: span [{}, {}) does not slice the caption to `{}`",
                self.id, bad.start, bad.end, bad.surface
            )));
        }
        Ok(())
    }
}

/// A manifest line that failed to parse or validate.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LineError {
    pub line: usize,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Manifest {
    pub records: Vec<DatasetRecord>,
    /// Lines skipped because they were malformed.
    pub errors: Vec<LineError>,
}

/// Reads a JSON-lines manifest. Blank lines are ignored; malformed or
/// invalid lines (including duplicate ids) are skipped and reported.
pub fn load_manifest(path: &Path) -> Result<Manifest> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Manifest::default();
    let mut seen = HashSet::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let parsed = serde_json::from_str::<DatasetRecord>(&line)
            .map_err(Error::from)
            .and_then(|r| r.validate().map(|_| r));
        match parsed {
            Ok(r) if !seen.insert(r.id.clone()) => out.errors.push(LineError {
                line: i + 1,
                message: format!("duplicate record id `{}`", r.id),
            }),
            Ok(r) => out.records.push(r),
            Err(e) => out.errors.push(LineError {
                line: i + 1,
                message: e.to_string(),
            }),
        }
    }
    Ok(out)
}

pub fn write_manifest(path: &Path, records: &[DatasetRecord]) -> Result<()> {
    let mut buf = Vec::new();
    for r in records {
        serde_json::to_writer(&mut buf, r)?;
        buf.push(b'\n');
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&buf).map_err(|e| Error::io(path, e))
}

/// Resolves a manifest path relative to the manifest's directory.
pub fn resolve(base_dir: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base_dir.join(p)
    }
}

/// One object-level edit of a base record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EditSpec {
    pub base_record: String,
    pub region_mask: PathBuf,
    pub original_term: String,
    pub replacement_term: String,
}

impl EditSpec {
    pub fn validate(&self) -> Result<()> {
        if self.original_term.trim().is_empty() || self.replacement_term.trim().is_empty() {
            return Err(Error::Precondition("edit terms must be non-empty".into()));
        }
        if self.original_term == self.replacement_term {
            return Err(Error::Precondition(format!(
                "replacement term equals original term `{}`",
                self.original_term
            )));
        }
        Ok(())
    }
}

pub fn load_edits(path: &Path) -> Result<Vec<EditSpec>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

/// Character range of the first whole-word, case-insensitive occurrence of
/// `term` in `text`.
pub fn find_term(text: &str, term: &str) -> Option<(usize, usize)> {
    let hay: Vec<char> = text.chars().flat_map(char::to_lowercase).collect();
    let needle: Vec<char> = term.chars().flat_map(char::to_lowercase).collect();
    // Lowercasing can change lengths; only use it when it does not.
    if hay.len() != text.chars().count() || needle.len() != term.chars().count() || needle.is_empty() {
        return None;
    }
    (0..hay.len().saturating_sub(needle.len() - 1)).find_map(|i| {
        let end = i + needle.len();
        let boundary_left = i == 0 || !hay[i - 1].is_alphanumeric();
        let boundary_right = end == hay.len() || !hay[end].is_alphanumeric();
        (hay[i..end] == needle[..] && boundary_left && boundary_right).then_some((i, end))
    })
}

/// The four records produced by one edit, plus the edited image.
#[derive(Debug, Clone)]
pub struct GeneratedPairs<T> {
    pub records: Vec<DatasetRecord>,
    pub edited_image: ImageTensor<T>,
    pub edited_caption: String,
}

/// Builds `{I,T}`, `{I_e,T_m}` (consistent) and `{I,T_m}`, `{I_e,T}`
/// (inconsistent) from a consistent base record and an edit. `I_e` is the
/// base image inpainted inside the region with the edited caption.
/// Inconsistent records carry the region mask and the edited term's span
/// in their caption.
pub fn generate_pairs<T: Scalar>(
    record: &DatasetRecord,
    image: &ImageTensor<T>,
    region: &BinaryMask,
    spec: &EditSpec,
    bundle: &BackendBundle<T>,
    edited_image_path: &Path,
) -> Result<GeneratedPairs<T>> {
    spec.validate()?;
    if record.label != Label::Consistent {
        return Err(Error::Precondition(format!(
            "base record {} must be consistent",
            record.id
        )));
    }
    image.check_mask(region)?;
    if region.is_empty() {
        return Err(Error::Precondition("edit region is empty".into()));
    }
    let (start, end) = find_term(&record.caption, &spec.original_term).ok_or_else(|| {
        Error::Precondition(format!(
            "term `{}` not found in caption of {}",
            spec.original_term, record.id
        ))
    })?;
    let chars: Vec<char> = record.caption.chars().collect();
    let prefix: String = chars[..start].iter().collect();
    let suffix: String = chars[end..].iter().collect();
    let edited_caption = format!("{prefix}{}{suffix}", spec.replacement_term);
    let rep_end = start + spec.replacement_term.chars().count();

    let orig_span = WordSpan::from_text(&record.caption, start, end)?;
    let rep_span = WordSpan::from_text(&edited_caption, start, rep_end)?;

    let embedding = bundle.encode_text(&edited_caption)?.embedding;
    let edited_image = bundle.inpaint(image, region, &embedding)?;

    let bucket = RegionBucket::for_area(region.area());
    let base = &record.id;
    let make = |pair_type: PairType, image_path: &Path, caption: &str, spans: Vec<WordSpan>| DatasetRecord {
        id: format!("{base}-{}", pair_type.as_str()),
        image_path: image_path.to_path_buf(),
        caption: caption.to_string(),
        pair_type,
        label: pair_type.label(),
        gt_mask_path: (pair_type.label() == Label::Inconsistent).then(|| spec.region_mask.clone()),
        gt_spans: spans,
        source: if pair_type == PairType::OrigOrig {
            record.source
        } else {
            Source::Generated
        },
        region_bucket: if pair_type.label() == Label::Inconsistent {
            bucket
        } else {
            RegionBucket::None
        },
    };
    let records = vec![
        make(PairType::OrigOrig, &record.image_path, &record.caption, Vec::new()),
        make(PairType::EditEditText, edited_image_path, &edited_caption, Vec::new()),
        make(PairType::OrigEditText, &record.image_path, &edited_caption, vec![rep_span]),
        make(PairType::EditOrigText, edited_image_path, &record.caption, vec![orig_span]),
    ];
    for r in &records {
        r.validate()?;
    }
    Ok(GeneratedPairs {
        records,
        edited_image,
        edited_caption,
    })
}

/// Score group of [`clip_score_table`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreGroup {
    RealConsistent,
    GeneratedConsistent,
    RandomSwap,
    GeneratedInconsistent,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScoreRow {
    pub group: ScoreGroup,
    pub count: usize,
    pub mean: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScoreTable {
    pub rows: Vec<ScoreRow>,
    pub notes: Vec<String>,
}

impl ScoreTable {
    pub fn mean(&self, group: ScoreGroup) -> Option<f64> {
        self.rows.iter().find(|r| r.group == group).map(|r| r.mean)
    }
}

/// `100 · cos(image, caption)` over the whole image.
pub fn whole_image_score<T: Scalar>(
    bundle: &BackendBundle<T>,
    image: &ImageTensor<T>,
    caption: &str,
) -> Result<f64> {
    let v = bundle.encode_image(image, None)?;
    let t = pooled_text(bundle, caption)?;
    if t.len() != v.len() {
        return Err(Error::shape(format!("text vector of dim {}", v.len()), t.len()));
    }
    let c = cosine(&v, &t).ok_or(Error::ZeroTextVector)?;
    Ok(100.0 * c.as_f64())
}

/// Mean whole-image scores per group. The random-swap group pairs each
/// real consistent image with another such record's caption under a seeded
/// derangement.
pub fn clip_score_table<T: Scalar>(
    items: &[(DatasetRecord, ImageTensor<T>)],
    bundle: &BackendBundle<T>,
    seed: u64,
) -> Result<ScoreTable> {
    if items.is_empty() {
        return Err(Error::Precondition("no records to score".into()));
    }
    let mut groups: BTreeMap<ScoreGroup, Vec<f64>> = BTreeMap::new();
    let mut real = Vec::new();
    for (i, (rec, img)) in items.iter().enumerate() {
        let group = match (rec.source, rec.label) {
            (Source::Real, Label::Consistent) => {
                real.push(i);
                ScoreGroup::RealConsistent
            }
            (Source::Generated, Label::Consistent) => ScoreGroup::GeneratedConsistent,
            (Source::Generated, Label::Inconsistent) => ScoreGroup::GeneratedInconsistent,
            (Source::Real, Label::Inconsistent) => continue,
        };
        groups
            .entry(group)
            .or_default()
            .push(whole_image_score(bundle, img, &rec.caption)?);
    }
    let mut notes = Vec::new();
    if real.len() >= 2 {
        let mut order = real.clone();
        order.shuffle(&mut rng(seed));
        let mut swapped = Vec::with_capacity(order.len());
        for (pos, &i) in order.iter().enumerate() {
            let donor = order[(pos + 1) % order.len()];
            swapped.push(whole_image_score(bundle, &items[i].1, &items[donor].0.caption)?);
        }
        groups.insert(ScoreGroup::RandomSwap, swapped);
    }
    let all = [
        ScoreGroup::RealConsistent,
        ScoreGroup::GeneratedConsistent,
        ScoreGroup::RandomSwap,
        ScoreGroup::GeneratedInconsistent,
    ];
    let mut rows = Vec::new();
    for g in all {
        match groups.get(&g) {
            Some(v) if !v.is_empty() => rows.push(ScoreRow {
                group: g,
                count: v.len(),
                mean: v.iter().sum::<f64>() / v.len() as f64,
            }),
            _ => notes.push(format!("group {g:?} has no members; omitted")),
        }
    }
    Ok(ScoreTable { rows, notes })
}

/// Record counts by label, pair type, region bucket and source.
#[derive(Debug, Clone, PartialEq, Default, Serialize)]
pub struct StatsReport {
    pub total: usize,
    pub by_label: BTreeMap<String, usize>,
    pub by_pair_type: BTreeMap<String, usize>,
    pub by_region_bucket: BTreeMap<String, usize>,
    pub by_source: BTreeMap<String, usize>,
}

pub fn validate_stats(records: &[DatasetRecord]) -> StatsReport {
    let mut r = StatsReport {
        total: records.len(),
        ..Default::default()
    };
    for l in [Label::Consistent, Label::Inconsistent] {
        r.by_label.insert(l.to_string(), 0);
    }
    for p in PairType::ALL {
        r.by_pair_type.insert(p.as_str().to_string(), 0);
    }
    for b in [RegionBucket::Large, RegionBucket::Medium, RegionBucket::Small, RegionBucket::None] {
        r.by_region_bucket.insert(b.as_str().to_string(), 0);
    }
    for s in ["real", "generated"] {
        r.by_source.insert(s.to_string(), 0);
    }
    for rec in records {
        *r.by_label.entry(rec.label.to_string()).or_default() += 1;
        *r.by_pair_type.entry(rec.pair_type.as_str().to_string()).or_default() += 1;
        *r.by_region_bucket.entry(rec.region_bucket.as_str().to_string()).or_default() += 1;
        let s = match rec.source {
            Source::Real => "real",
            Source::Generated => "generated",
        };
        *r.by_source.entry(s.to_string()).or_default() += 1;
    }
    r
}
