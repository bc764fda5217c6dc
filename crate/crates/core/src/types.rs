//! Domain types shared by every stage of the pipeline.
//!
//! Images are stored planar (channel, row, column). Rows are indexed by `m`
//! in `[0, M)` and columns by `h` in `[0, H)`.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Tolerance on the sum of a multiclass proportion vector.
pub const SIMPLEX_TOLERANCE: f64 = 1e-6;

/// Smallest patch side accepted anywhere in the pipeline.
pub const MIN_PATCH_SIDE: usize = 8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelMode {
    /// `C >= 2` mutually exclusive classes, one per pixel.
    Multiclass,
    /// A single foreground channel.
    Binary,
}

impl fmt::Display for LabelMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LabelMode::Multiclass => f.write_str("multiclass"),
            LabelMode::Binary => f.write_str("binary"),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImagePatch {
    id: String,
    rows: usize,
    cols: usize,
    channels: usize,
    pixels: Vec<f32>,
}

impl ImagePatch {
    /// Builds a patch from planar `channels x rows x cols` pixel data.
    pub fn new(
        id: impl Into<String>,
        rows: usize,
        cols: usize,
        channels: usize,
        pixels: Vec<f32>,
    ) -> Result<Self> {
        let patch = Self::new_unchecked(id, rows, cols, channels, pixels)?;
        if let Some(v) = patch.violations().into_iter().next() {
            return Err(Error::Invariant(v.to_string()));
        }
        Ok(patch)
    }

    /// Only the buffer length is checked. Use [`validate_dataset`] to audit.
    pub fn new_unchecked(
        id: impl Into<String>,
        rows: usize,
        cols: usize,
        channels: usize,
        pixels: Vec<f32>,
    ) -> Result<Self> {
        if pixels.len() != rows * cols * channels {
            return Err(Error::Shape(format!(
                "pixel buffer has {} values, expected {channels}x{rows}x{cols}",
                pixels.len()
            )));
        }
        Ok(Self {
            id: id.into(),
            rows,
            cols,
            channels,
            pixels,
        })
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn pixels(&self) -> &[f32] {
        &self.pixels
    }

    pub fn get(&self, c: usize, m: usize, h: usize) -> f32 {
        self.pixels[(c * self.rows + m) * self.cols + h]
    }

    fn violations(&self) -> Vec<Violation> {
        let mut out = Vec::new();
        if self.channels != 1 && self.channels != 3 {
            out.push(Violation::new(
                Some(&self.id),
                "channels",
                format!("{} channels, expected 1 or 3", self.channels),
            ));
        }
        if self.rows < MIN_PATCH_SIDE || self.cols < MIN_PATCH_SIDE {
            out.push(Violation::new(
                Some(&self.id),
                "min_size",
                format!(
                    "{}x{} is below the {MIN_PATCH_SIDE}x{MIN_PATCH_SIDE} minimum",
                    self.rows, self.cols
                ),
            ));
        }
        if let Some(bad) = self
            .pixels
            .iter()
            .find(|v| !v.is_finite() || **v < 0.0 || **v > 1.0)
        {
            out.push(Violation::new(
                Some(&self.id),
                "pixel_range",
                format!("pixel value {bad} outside [0, 1]"),
            ));
        }
        out
    }
}

/// Per-class binary maps stored as one label per pixel.
///
/// In multiclass mode the label is the class index, which makes the
/// per-pixel one-hot property structural. In binary mode the label is the
/// foreground bit and `classes() == 1`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaskStack {
    mode: LabelMode,
    classes: usize,
    rows: usize,
    cols: usize,
    labels: Vec<u8>,
}

impl MaskStack {
    pub fn multiclass(classes: usize, rows: usize, cols: usize, labels: Vec<u8>) -> Result<Self> {
        if !(2..=256).contains(&classes) {
            return Err(Error::invalid(format!(
                "multiclass mask needs 2..=256 classes, got {classes}"
            )));
        }
        if labels.len() != rows * cols {
            return Err(Error::Shape(format!(
                "label buffer has {} values, expected {rows}x{cols}",
                labels.len()
            )));
        }
        if let Some(bad) = labels.iter().find(|&&l| l as usize >= classes) {
            return Err(Error::Invariant(format!(
                "label {bad} out of range for {classes} classes"
            )));
        }
        Ok(Self {
            mode: LabelMode::Multiclass,
            classes,
            rows,
            cols,
            labels,
        })
    }

    pub fn binary(rows: usize, cols: usize, bits: Vec<u8>) -> Result<Self> {
        if bits.len() != rows * cols {
            return Err(Error::Shape(format!(
                "mask buffer has {} values, expected {rows}x{cols}",
                bits.len()
            )));
        }
        if let Some(bad) = bits.iter().find(|&&b| b > 1) {
            return Err(Error::Invariant(format!("binary mask value {bad} not in {{0,1}}")));
        }
        Ok(Self {
            mode: LabelMode::Binary,
            classes: 1,
            rows,
            cols,
            labels: bits,
        })
    }

    /// Builds a mask from `classes x rows x cols` binary planes, checking the
    /// one-hot constraint in multiclass mode.
    pub fn from_planes(
        mode: LabelMode,
        classes: usize,
        rows: usize,
        cols: usize,
        planes: &[u8],
    ) -> Result<Self> {
        let px = rows * cols;
        if planes.len() != classes * px {
            return Err(Error::Shape(format!(
                "plane buffer has {} values, expected {classes}x{rows}x{cols}",
                planes.len()
            )));
        }
        if let Some(bad) = planes.iter().find(|&&b| b > 1) {
            return Err(Error::Invariant(format!("mask value {bad} not in {{0,1}}")));
        }
        match mode {
            LabelMode::Binary => {
                if classes != 1 {
                    return Err(Error::invalid("binary mask must have exactly one plane"));
                }
                Self::binary(rows, cols, planes.to_vec())
            }
            LabelMode::Multiclass => {
                let mut labels = vec![0u8; px];
                for (p, label) in labels.iter_mut().enumerate() {
                    let hot: Vec<usize> = (0..classes).filter(|&j| planes[j * px + p] == 1).collect();
                    if hot.len() != 1 {
                        return Err(Error::Invariant(format!(
                            "pixel ({}, {}) has {} active classes, expected exactly one",
                            p / cols,
                            p % cols,
                            hot.len()
                        )));
                    }
                    *label = hot[0] as u8;
                }
                Self::multiclass(classes, rows, cols, labels)
            }
        }
    }

    pub fn mode(&self) -> LabelMode {
        self.mode
    }

    /// Number of planes `C` (1 in binary mode).
    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    /// Raw per-pixel labels (class index, or foreground bit in binary mode).
    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    /// Value of plane `j` at `(m, h)`.
    pub fn get(&self, j: usize, m: usize, h: usize) -> u8 {
        let label = self.labels[m * self.cols + h];
        match self.mode {
            LabelMode::Multiclass => u8::from(label as usize == j),
            LabelMode::Binary => label,
        }
    }

    /// Dense `C x M x H` plane representation.
    pub fn planes(&self) -> Vec<u8> {
        let px = self.rows * self.cols;
        let mut out = vec![0u8; self.classes * px];
        match self.mode {
            LabelMode::Binary => out.copy_from_slice(&self.labels),
            LabelMode::Multiclass => {
                for (p, &l) in self.labels.iter().enumerate() {
                    out[l as usize * px + p] = 1;
                }
            }
        }
        out
    }

    /// Label used for confusion counting: class index in multiclass mode,
    /// 0 (background) or 1 (foreground) in binary mode.
    pub fn eval_label(&self, m: usize, h: usize) -> usize {
        self.labels[m * self.cols + h] as usize
    }

    /// Number of positive pixels in plane `j`.
    pub fn count(&self, j: usize) -> usize {
        match self.mode {
            LabelMode::Multiclass => self.labels.iter().filter(|&&l| l as usize == j).count(),
            LabelMode::Binary => self.labels.iter().filter(|&&l| l == 1).count(),
        }
    }

    pub fn crop(&self, row0: usize, col0: usize, rows: usize, cols: usize) -> Result<Self> {
        if row0 + rows > self.rows || col0 + cols > self.cols {
            return Err(Error::Shape(format!(
                "crop {rows}x{cols} at ({row0}, {col0}) exceeds mask {}x{}",
                self.rows, self.cols
            )));
        }
        let mut labels = Vec::with_capacity(rows * cols);
        for m in row0..row0 + rows {
            let start = m * self.cols + col0;
            labels.extend_from_slice(&self.labels[start..start + cols]);
        }
        Ok(Self {
            mode: self.mode,
            classes: self.classes,
            rows,
            cols,
            labels,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProportionVector {
    mode: LabelMode,
    values: Vec<f64>,
}

impl ProportionVector {
    pub fn new(mode: LabelMode, values: Vec<f64>) -> Result<Self> {
        let pv = Self::new_unchecked(mode, values);
        if let Some(v) = pv.violations(None).into_iter().next() {
            return Err(Error::Invariant(v.to_string()));
        }
        Ok(pv)
    }

    /// Skips range and simplex checks. Used when reading annotation files,
    /// which are audited later by [`validate_dataset`].
    pub fn new_unchecked(mode: LabelMode, values: Vec<f64>) -> Self {
        Self { mode, values }
    }

    pub fn mode(&self) -> LabelMode {
        self.mode
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    fn violations(&self, image_id: Option<&str>) -> Vec<Violation> {
        let mut out = Vec::new();
        if self.values.is_empty() {
            out.push(Violation::new(image_id, "sp_empty", "proportion vector is empty"));
            return out;
        }
        if self.mode == LabelMode::Binary && self.values.len() != 1 {
            out.push(Violation::new(
                image_id,
                "sp_length",
                format!("binary proportions carry one value, got {}", self.values.len()),
            ));
        }
        if let Some(bad) = self
            .values
            .iter()
            .find(|v| !v.is_finite() || **v < 0.0 || **v > 1.0)
        {
            out.push(Violation::new(
                image_id,
                "sp_range",
                format!("proportion {bad} outside [0, 1]"),
            ));
        }
        if self.mode == LabelMode::Multiclass {
            let sum: f64 = self.values.iter().sum();
            if (sum - 1.0).abs() > SIMPLEX_TOLERANCE {
                out.push(Violation::new(
                    image_id,
                    "simplex",
                    format!("proportions sum to {sum}, expected 1"),
                ));
            }
        }
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Keypoint {
    pub row: usize,
    pub col: usize,
    pub value: u8,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct KeypointAnnotation {
    pub image_id: String,
    pub class_index: usize,
    pub points: Vec<Keypoint>,
}

impl KeypointAnnotation {
    /// Rejects empty point sets, duplicate coordinates and values outside {0,1}.
    /// Bounds depend on the image and are checked by [`validate_dataset`].
    pub fn new(image_id: impl Into<String>, class_index: usize, points: Vec<Keypoint>) -> Result<Self> {
        let ann = Self {
            image_id: image_id.into(),
            class_index,
            points,
        };
        if let Some(v) = ann.intrinsic_violations().into_iter().next() {
            return Err(Error::Invariant(v.to_string()));
        }
        Ok(ann)
    }

    fn intrinsic_violations(&self) -> Vec<Violation> {
        let id = Some(self.image_id.as_str());
        let mut out = Vec::new();
        if self.points.is_empty() {
            out.push(Violation::new(
                id,
                "keypoints_empty",
                format!("class {} has no keypoints", self.class_index),
            ));
        }
        let mut seen = BTreeSet::new();
        for p in &self.points {
            if !seen.insert((p.row, p.col)) {
                out.push(Violation::new(
                    id,
                    "keypoint_duplicate",
                    format!("duplicate keypoint ({}, {}) for class {}", p.row, p.col, self.class_index),
                ));
            }
            if p.value > 1 {
                out.push(Violation::new(
                    id,
                    "keypoint_value",
                    format!("keypoint value {} not in {{0,1}}", p.value),
                ));
            }
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnnotatedDataset {
    pub class_names: Vec<String>,
    pub mode: LabelMode,
    pub patches: Vec<ImagePatch>,
    pub sp: BTreeMap<String, ProportionVector>,
    pub keypoints: Vec<KeypointAnnotation>,
    pub gt_masks: BTreeMap<String, MaskStack>,
    pub split: BTreeMap<String, Split>,
    /// Train fraction the split was drawn with, if any.
    pub train_fraction: Option<f64>,
}

impl AnnotatedDataset {
    pub fn new(class_names: Vec<String>, mode: LabelMode, patches: Vec<ImagePatch>) -> Self {
        let split = patches.iter().map(|p| (p.id().to_string(), Split::Train)).collect();
        Self {
            class_names,
            mode,
            patches,
            sp: BTreeMap::new(),
            keypoints: Vec::new(),
            gt_masks: BTreeMap::new(),
            split,
            train_fraction: None,
        }
    }

    /// Number of output planes `C` (1 in binary mode).
    pub fn n_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn channels(&self) -> Option<usize> {
        self.patches.first().map(ImagePatch::channels)
    }

    pub fn patch(&self, id: &str) -> Option<&ImagePatch> {
        self.patches.iter().find(|p| p.id() == id)
    }

    fn ids_in(&self, which: Split) -> Vec<&str> {
        self.patches
            .iter()
            .filter(|p| self.split.get(p.id()) == Some(&which))
            .map(ImagePatch::id)
            .collect()
    }

    /// Train ids in patch order.
    pub fn train_ids(&self) -> Vec<&str> {
        self.ids_in(Split::Train)
    }

    /// Test ids in patch order.
    pub fn test_ids(&self) -> Vec<&str> {
        self.ids_in(Split::Test)
    }

    pub fn with_sp(mut self, sp: BTreeMap<String, ProportionVector>) -> Self {
        self.sp = sp;
        self
    }

    pub fn with_keypoints(mut self, keypoints: Vec<KeypointAnnotation>) -> Self {
        self.keypoints = keypoints;
        self
    }

    /// Class names used in reports: binary datasets gain an explicit
    /// background entry ahead of the foreground class.
    pub fn eval_class_names(&self) -> Vec<String> {
        match self.mode {
            LabelMode::Multiclass => self.class_names.clone(),
            LabelMode::Binary => {
                let mut names = vec!["background".to_string()];
                names.extend(self.class_names.iter().cloned());
                names
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Violation {
    pub image_id: Option<String>,
    pub rule: String,
    pub detail: String,
}

impl Violation {
    fn new(image_id: Option<&str>, rule: &str, detail: impl Into<String>) -> Self {
        Self {
            image_id: image_id.map(str::to_string),
            rule: rule.to_string(),
            detail: detail.into(),
        }
    }
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.image_id {
            Some(id) => write!(f, "[{}] {}: {}", self.rule, id, self.detail),
            None => write!(f, "[{}] {}", self.rule, self.detail),
        }
    }
}

/// Audits every invariant of the dataset and its annotations. Never fails;
/// an empty list means the dataset is well-formed.
pub fn validate_dataset(ds: &AnnotatedDataset) -> Vec<Violation> {
    let mut out = Vec::new();
    let c = ds.n_classes();

    match ds.mode {
        LabelMode::Binary if c != 1 => out.push(Violation::new(
            None,
            "class_names",
            format!("binary datasets name one class, got {c}"),
        )),
        LabelMode::Multiclass if c < 2 => out.push(Violation::new(
            None,
            "class_names",
            format!("multiclass datasets need at least two classes, got {c}"),
        )),
        _ => {}
    }

    let mut ids = BTreeSet::new();
    let mut channels = None;
    for p in &ds.patches {
        if !ids.insert(p.id()) {
            out.push(Violation::new(Some(p.id()), "duplicate_id", "patch id appears twice"));
        }
        out.extend(p.violations());
        match channels {
            None => channels = Some(p.channels()),
            Some(ch) if ch != p.channels() => out.push(Violation::new(
                Some(p.id()),
                "channels",
                format!("{} channels, dataset uses {ch}", p.channels()),
            )),
            _ => {}
        }
        match ds.split.get(p.id()) {
            None => out.push(Violation::new(Some(p.id()), "missing_split", "no split assignment")),
            Some(Split::Train) if !ds.sp.contains_key(p.id()) => out.push(Violation::new(
                Some(p.id()),
                "missing_sp",
                "train image has no proportion annotation",
            )),
            _ => {}
        }
    }
    for id in ds.split.keys().filter(|id| !ids.contains(id.as_str())) {
        out.push(Violation::new(Some(id), "unknown_id", "split entry for unknown patch"));
    }

    for (id, sp) in &ds.sp {
        if !ids.contains(id.as_str()) {
            out.push(Violation::new(Some(id), "unknown_id", "proportions for unknown patch"));
        }
        if sp.mode() != ds.mode {
            out.push(Violation::new(Some(id), "sp_mode", format!("{} proportions in {} dataset", sp.mode(), ds.mode)));
        }
        if sp.len() != c {
            out.push(Violation::new(Some(id), "sp_length", format!("{} values for {c} classes", sp.len())));
        }
        out.extend(sp.violations(Some(id)));
    }

    for (id, mask) in &ds.gt_masks {
        let Some(patch) = ds.patch(id) else {
            out.push(Violation::new(Some(id), "unknown_id", "mask for unknown patch"));
            continue;
        };
        if mask.rows() != patch.rows() || mask.cols() != patch.cols() {
            out.push(Violation::new(
                Some(id),
                "mask_shape",
                format!("mask {}x{} vs patch {}x{}", mask.rows(), mask.cols(), patch.rows(), patch.cols()),
            ));
        }
        if mask.mode() != ds.mode || mask.classes() != c {
            out.push(Violation::new(
                Some(id),
                "mask_classes",
                format!("{} mask with {} planes in {} dataset of {c}", mask.mode(), mask.classes(), ds.mode),
            ));
        }
    }

    let train: BTreeSet<&str> = ds.train_ids().into_iter().collect();
    let mut annotated = BTreeSet::new();
    let mut pairs = BTreeSet::new();
    for ann in &ds.keypoints {
        out.extend(ann.intrinsic_violations());
        let id = ann.image_id.as_str();
        annotated.insert(id);
        if !pairs.insert((id, ann.class_index)) {
            out.push(Violation::new(
                Some(id),
                "keypoint_duplicate",
                format!("class {} annotated twice", ann.class_index),
            ));
        }
        if !train.contains(id) {
            out.push(Violation::new(Some(id), "keypoint_not_train", "keypoints on a non-train image"));
        }
        if ann.class_index >= c {
            out.push(Violation::new(
                Some(id),
                "keypoint_class",
                format!("class index {} out of range for {c} classes", ann.class_index),
            ));
        }
        if let Some(patch) = ds.patch(id) {
            for p in ann.points.iter().filter(|p| p.row >= patch.rows() || p.col >= patch.cols()) {
                out.push(Violation::new(
                    Some(id),
                    "out_of_bounds",
                    format!(
                        "keypoint ({}, {}) outside {}x{}",
                        p.row,
                        p.col,
                        patch.rows(),
                        patch.cols()
                    ),
                ));
            }
        }
    }
    if annotated.len() > train.len() {
        out.push(Violation::new(
            None,
            "keypoint_count",
            format!("{} annotated images for {} train images", annotated.len(), train.len()),
        ));
    }

    if let Some(frac) = ds.train_fraction {
        let expected = frac * ds.patches.len() as f64;
        if (train.len() as f64 - expected).abs() > 1.0 {
            out.push(Violation::new(
                None,
                "split_ratio",
                format!("{} train images, expected about {expected:.1}", train.len()),
            ));
        }
    }
    out
}

/// Deterministically assigns every patch to train or test.
pub fn split_dataset(ds: &AnnotatedDataset, train_fraction: f64, seed: u64) -> Result<AnnotatedDataset> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::invalid(format!("train fraction {train_fraction} not in (0, 1)")));
    }
    let n = ds.patches.len();
    if n < 2 {
        return Err(Error::Unsplittable(format!("{n} image(s); need at least 2")));
    }
    let n_train = ((train_fraction * n as f64).round() as usize).clamp(1, n - 1);
    let mut ids: Vec<&str> = ds.patches.iter().map(ImagePatch::id).collect();
    ids.sort_unstable();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ids.shuffle(&mut rng);
    let split = ids
        .iter()
        .enumerate()
        .map(|(i, id)| (id.to_string(), if i < n_train { Split::Train } else { Split::Test }))
        .collect();
    Ok(AnnotatedDataset {
        split,
        train_fraction: Some(train_fraction),
        ..ds.clone()
    })
}
