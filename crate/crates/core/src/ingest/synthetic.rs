//! Seeded synthetic shape datasets: axis-aligned rectangles and discs of
//! class-specific colour on a noisy background.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::annotate::extract_sp;
use crate::error::{Error, Result};
use crate::types::{AnnotatedDataset, ImagePatch, LabelMode, MaskStack};

const PLACEMENT_ATTEMPTS: usize = 200;

/// Colours for three-channel images, background first.
const PALETTE: [[f32; 3]; 8] = [
    [0.45, 0.45, 0.45],
    [0.85, 0.25, 0.20],
    [0.20, 0.35, 0.85],
    [0.25, 0.80, 0.30],
    [0.90, 0.85, 0.20],
    [0.70, 0.30, 0.80],
    [0.20, 0.80, 0.80],
    [0.95, 0.60, 0.20],
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub n_images: usize,
    pub m: usize,
    pub h: usize,
    /// Output planes: classes including background in multiclass mode, 1 in
    /// binary mode.
    pub n_classes: usize,
    pub mode: LabelMode,
    /// Image channels (1 or 3).
    pub channels: usize,
    /// Inclusive range of the disc radius / rectangle half-side.
    pub radius_range: (usize, usize),
    /// Inclusive range of shapes per foreground class and image.
    pub count_range: (usize, usize),
    /// Cap on the foreground proportion of every image (binary mode).
    pub imbalance_ratio: Option<f64>,
    /// Standard deviation of the per-pixel Gaussian noise.
    pub noise_std: f64,
    pub seed: u64,
}

impl SyntheticSpec {
    pub fn multiclass(n_classes: usize, n_images: usize, size: usize, seed: u64) -> Self {
        Self {
            n_images,
            m: size,
            h: size,
            n_classes,
            mode: LabelMode::Multiclass,
            channels: 3,
            radius_range: ((size / 10).max(2), (size / 4).max(3)),
            count_range: (1, 3),
            imbalance_ratio: None,
            noise_std: 0.1,
            seed,
        }
    }

    /// Single-channel foreground/background images with the foreground
    /// proportion capped at `ratio`.
    pub fn binary_imbalanced(n_images: usize, size: usize, ratio: f64, seed: u64) -> Self {
        Self {
            n_images,
            m: size,
            h: size,
            n_classes: 1,
            mode: LabelMode::Binary,
            channels: 1,
            radius_range: ((size / 32).max(1), (size / 12).max(2)),
            count_range: (1, 3),
            imbalance_ratio: Some(ratio),
            noise_std: 0.1,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self.mode {
            LabelMode::Multiclass if !(2..=PALETTE.len()).contains(&self.n_classes) => {
                return Err(Error::invalid(format!(
                    "multiclass synthetic data needs 2..={} classes, got {}",
                    PALETTE.len(),
                    self.n_classes
                )))
            }
            LabelMode::Binary if self.n_classes != 1 => {
                return Err(Error::invalid("binary synthetic data has exactly one class plane"))
            }
            _ => {}
        }
        if self.m < 16 || self.h < 16 {
            return Err(Error::invalid(format!("image size {}x{} below 16x16", self.m, self.h)));
        }
        if self.channels != 1 && self.channels != 3 {
            return Err(Error::invalid("channels must be 1 or 3"));
        }
        let (r0, r1) = self.radius_range;
        let (c0, c1) = self.count_range;
        if r0 == 0 || r0 > r1 || c0 > c1 || c1 == 0 {
            return Err(Error::invalid("empty radius or count range"));
        }
        if let Some(r) = self.imbalance_ratio {
            if !(r > 0.0 && r <= 1.0) {
                return Err(Error::invalid(format!("imbalance ratio {r} outside (0, 1]")));
            }
        }
        if !(0.0..=1.0).contains(&self.noise_std) {
            return Err(Error::invalid("noise_std must lie in [0, 1]"));
        }
        if self.n_images == 0 {
            return Err(Error::invalid("n_images must be positive"));
        }
        Ok(())
    }

    fn class_names(&self) -> Vec<String> {
        match self.mode {
            LabelMode::Binary => vec!["foreground".into()],
            LabelMode::Multiclass => std::iter::once("background".to_string())
                .chain((1..self.n_classes).map(|j| format!("class{j}")))
                .collect(),
        }
    }

    /// Mean intensity of label `l` in channel `c`.
    fn colour(&self, l: usize, c: usize) -> f32 {
        match (self.mode, self.channels) {
            (_, 3) => PALETTE[l][c],
            (LabelMode::Binary, _) => [0.35, 0.65][l],
            (LabelMode::Multiclass, _) => 0.2 + 0.6 * l as f32 / (self.n_classes - 1) as f32,
        }
    }
}

#[derive(Clone, Copy)]
enum Shape {
    Rect { m0: usize, h0: usize, m1: usize, h1: usize },
    Disc { cm: usize, ch: usize, r: usize },
}

impl Shape {
    fn contains(&self, m: usize, h: usize) -> bool {
        match *self {
            Shape::Rect { m0, h0, m1, h1 } => (m0..=m1).contains(&m) && (h0..=h1).contains(&h),
            Shape::Disc { cm, ch, r } => {
                let (dm, dh) = (m as i64 - cm as i64, h as i64 - ch as i64);
                dm * dm + dh * dh <= (r * r) as i64
            }
        }
    }

    fn bbox(&self) -> (usize, usize, usize, usize) {
        match *self {
            Shape::Rect { m0, h0, m1, h1 } => (m0, h0, m1, h1),
            Shape::Disc { cm, ch, r } => (cm - r, ch - r, cm + r, ch + r),
        }
    }
}

fn random_shape(rng: &mut ChaCha8Rng, spec: &SyntheticSpec, max_r: usize) -> Option<Shape> {
    let r = rng.random_range(spec.radius_range.0..=max_r.max(spec.radius_range.0));
    if 2 * r + 1 > spec.m || 2 * r + 1 > spec.h {
        return None;
    }
    let cm = rng.random_range(r..spec.m - r);
    let ch = rng.random_range(r..spec.h - r);
    Some(if rng.random_bool(0.5) {
        let rh = rng.random_range(spec.radius_range.0..=r);
        let (hm, hh) = if rng.random_bool(0.5) { (r, rh) } else { (rh, r) };
        Shape::Rect { m0: cm - hm, h0: ch - hh, m1: cm + hm, h1: ch + hh }
    } else {
        Shape::Disc { cm, ch, r }
    })
}

/// Draws one image. `max_count` caps the shapes per class below `count_range`.
fn generate_one(rng: &mut ChaCha8Rng, spec: &SyntheticSpec, index: usize, max_count: Option<usize>) -> Result<(ImagePatch, MaskStack)> {
    let (rows, cols) = (spec.m, spec.h);
    let mut labels = vec![0u8; rows * cols];
    // pixels already taken, including a one-pixel halo so shapes never touch
    let mut blocked = vec![false; rows * cols];
    let budget = spec.imbalance_ratio.map(|r| (r * (rows * cols) as f64).floor() as usize);
    let mut used = 0usize;
    let fg_labels: Vec<u8> = match spec.mode {
        LabelMode::Binary => vec![1],
        LabelMode::Multiclass => (1..spec.n_classes as u8).collect(),
    };
    for &label in &fg_labels {
        let count = rng.random_range(spec.count_range.0..=spec.count_range.1);
        let count = max_count.map_or(count, |c| count.min(c));
        let mut placed = 0;
        let mut attempts = 0;
        while placed < count {
            attempts += 1;
            if attempts > PLACEMENT_ATTEMPTS {
                if placed > 0 {
                    break;
                }
                return Err(Error::Placement(format!(
                    "image {index}: no room for class {label} after {PLACEMENT_ATTEMPTS} attempts"
                )));
            }
            // shrink the largest admissible size as failed attempts accumulate
            let (r0, r1) = spec.radius_range;
            let max_r = r1 - (r1 - r0) * attempts / PLACEMENT_ATTEMPTS;
            let Some(shape) = random_shape(rng, spec, max_r) else {
                continue;
            };
            let (m0, h0, m1, h1) = shape.bbox();
            let pixels: Vec<usize> = (m0..=m1)
                .flat_map(|m| (h0..=h1).map(move |h| (m, h)))
                .filter(|&(m, h)| shape.contains(m, h))
                .map(|(m, h)| m * cols + h)
                .collect();
            if pixels.iter().any(|&p| blocked[p]) {
                continue;
            }
            if budget.is_some_and(|b| used + pixels.len() > b) {
                continue;
            }
            for &p in &pixels {
                labels[p] = label;
                let (m, h) = (p / cols, p % cols);
                for dm in m.saturating_sub(1)..=(m + 1).min(rows - 1) {
                    for dh in h.saturating_sub(1)..=(h + 1).min(cols - 1) {
                        blocked[dm * cols + dh] = true;
                    }
                }
            }
            used += pixels.len();
            placed += 1;
        }
    }
    let noise = Normal::new(0.0, spec.noise_std).map_err(|e| Error::invalid(e.to_string()))?;
    let mut pixels = Vec::with_capacity(spec.channels * rows * cols);
    for c in 0..spec.channels {
        for &l in &labels {
            let v = f64::from(spec.colour(l as usize, c)) + noise.sample(rng);
            pixels.push(v.clamp(0.0, 1.0) as f32);
        }
    }
    let patch = ImagePatch::new(format!("syn_{index:05}"), rows, cols, spec.channels, pixels)?;
    let mask = match spec.mode {
        LabelMode::Binary => MaskStack::binary(rows, cols, labels)?,
        LabelMode::Multiclass => MaskStack::multiclass(spec.n_classes, rows, cols, labels)?,
    };
    Ok((patch, mask))
}

/// Generates `spec.n_images` images with ground-truth masks and exact
/// proportions. Every image is initially assigned to the train split.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<AnnotatedDataset> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut patches = Vec::with_capacity(spec.n_images);
    let mut masks = Vec::with_capacity(spec.n_images);
    for i in 0..spec.n_images {
        // early classes can crowd out later ones on small canvases; redraw
        // such an image with a single shape per class before giving up
        let (p, m) = match generate_one(&mut rng, spec, i, None) {
            Err(Error::Placement(_)) => generate_one(&mut rng, spec, i, Some(1))?,
            other => other?,
        };
        patches.push(p);
        masks.push(m);
    }
    let mut ds = AnnotatedDataset::new(spec.class_names(), spec.mode, patches);
    for (p, m) in ds.patches.iter().zip(masks) {
        ds.sp.insert(p.id().to_string(), extract_sp(&m));
        ds.gt_masks.insert(p.id().to_string(), m);
    }
    Ok(ds)
}
