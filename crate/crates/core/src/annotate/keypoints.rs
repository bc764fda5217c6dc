//! Keypoint sampling with square dilation.

use std::collections::BTreeSet;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::{AnnotatedDataset, Keypoint, KeypointAnnotation, MaskStack};

/// Union of the L-infinity balls of `radius` around each point, clipped to
/// `bounds = (rows, cols)`.
pub fn dilate_points(points: &BTreeSet<(usize, usize)>, radius: usize, bounds: (usize, usize)) -> BTreeSet<(usize, usize)> {
    let mut out = BTreeSet::new();
    for &(m, h) in points {
        let (r0, r1) = (m.saturating_sub(radius), (m + radius).min(bounds.0.saturating_sub(1)));
        let (c0, c1) = (h.saturating_sub(radius), (h + radius).min(bounds.1.saturating_sub(1)));
        for r in r0..=r1 {
            for c in c0..=c1 {
                out.insert((r, c));
            }
        }
    }
    out
}

/// Draws `n_seeds` positive pixels per requested class, dilates them and
/// keeps the part of the dilation inside the class region.
pub fn sample_keypoints(
    image_id: &str,
    mask: &MaskStack,
    class_indices: &[usize],
    n_seeds: usize,
    dilation_radius: usize,
    seed: u64,
) -> Result<Vec<KeypointAnnotation>> {
    if n_seeds == 0 {
        return Err(Error::invalid("n_seeds must be positive"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let bounds = (mask.rows(), mask.cols());
    let mut out = Vec::with_capacity(class_indices.len());
    for &j in class_indices {
        if j >= mask.classes() {
            return Err(Error::invalid(format!("class {j} out of range for {} planes", mask.classes())));
        }
        let positives: Vec<(usize, usize)> = (0..mask.rows())
            .flat_map(|m| (0..mask.cols()).map(move |h| (m, h)))
            .filter(|&(m, h)| mask.get(j, m, h) == 1)
            .collect();
        if positives.is_empty() {
            return Err(Error::MissingAnnotation(format!("{image_id}: class {j} has no positive pixels")));
        }
        if positives.len() < n_seeds {
            return Err(Error::invalid(format!(
                "{image_id}: class {j} has {} positive pixels, fewer than {n_seeds} seeds",
                positives.len()
            )));
        }
        let seeds: BTreeSet<(usize, usize)> = index::sample(&mut rng, positives.len(), n_seeds)
            .into_iter()
            .map(|i| positives[i])
            .collect();
        let points = dilate_points(&seeds, dilation_radius, bounds)
            .into_iter()
            .filter(|&(m, h)| mask.get(j, m, h) == 1)
            .map(|(row, col)| Keypoint { row, col, value: 1 })
            .collect();
        out.push(KeypointAnnotation::new(image_id, j, points)?);
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KeypointPlan {
    pub classes: Vec<usize>,
    pub n_seeds: usize,
    pub radius: usize,
    /// Annotate at most this many train images (in id order); all when `None`.
    pub max_images: Option<usize>,
    pub seed: u64,
}

impl Default for KeypointPlan {
    fn default() -> Self {
        Self {
            classes: Vec::new(),
            n_seeds: 3,
            radius: 2,
            max_images: None,
            seed: 0,
        }
    }
}

/// Samples keypoints over the train split from the ground-truth masks.
/// Images lacking a class are skipped for that class; classes smaller than
/// `n_seeds` pixels get one seed per pixel.
pub fn annotate_dataset_keypoints(ds: &AnnotatedDataset, plan: &KeypointPlan) -> Result<Vec<KeypointAnnotation>> {
    let mut ids: Vec<&str> = ds.train_ids();
    ids.sort_unstable();
    let mut rng = ChaCha8Rng::seed_from_u64(plan.seed);
    let mut out = Vec::new();
    let mut annotated = 0;
    for id in ids {
        let sub_seed: u64 = rng.random();
        if plan.max_images.is_some_and(|n| annotated >= n) {
            break;
        }
        let mask = ds
            .gt_masks
            .get(id)
            .ok_or_else(|| Error::MissingAnnotation(format!("{id} has no ground-truth mask")))?;
        let mut any = false;
        for (k, &j) in plan.classes.iter().enumerate() {
            let count = if j < mask.classes() { mask.count(j) } else { 0 };
            if count == 0 {
                continue;
            }
            let n = plan.n_seeds.min(count);
            out.extend(sample_keypoints(id, mask, &[j], n, plan.radius, sub_seed.wrapping_add(k as u64))?);
            any = true;
        }
        annotated += usize::from(any);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dilation_sizes() {
        let one = |m, h| BTreeSet::from([(m, h)]);
        assert_eq!(dilate_points(&one(2, 2), 0, (4, 4)), one(2, 2));
        // corner point, radius 1: (0..=1) x (0..=1)
        assert_eq!(dilate_points(&one(0, 0), 1, (4, 4)).len(), 4);
        assert_eq!(dilate_points(&one(5, 5), 2, (10, 10)).len(), 25);
        assert!(dilate_points(&one(3, 3), 3, (4, 4)).iter().all(|&(m, h)| m < 4 && h < 4));
    }

    #[test]
    fn radius_zero_gives_true_positive_seeds() {
        let labels: Vec<u8> = (0..64).map(|p| if p % 8 < 4 { 1 } else { 2 }).collect();
        let mask = MaskStack::multiclass(3, 8, 8, labels).unwrap();
        let anns = sample_keypoints("x", &mask, &[1, 2], 2, 0, 7).unwrap();
        assert_eq!(anns.len(), 2);
        for a in &anns {
            assert_eq!(a.points.len(), 2);
            assert!(a.points.iter().all(|p| mask.get(a.class_index, p.row, p.col) == 1 && p.value == 1));
        }
        assert_eq!(anns, sample_keypoints("x", &mask, &[1, 2], 2, 0, 7).unwrap());
        assert!(sample_keypoints("x", &mask, &[0], 1, 0, 7).is_err());
    }

    #[test]
    fn interior_seed_dilates_to_full_ball() {
        let mask = MaskStack::binary(9, 9, vec![1; 81]).unwrap();
        let anns = sample_keypoints("x", &mask, &[0], 1, 1, 3).unwrap();
        let p = anns[0].points.iter().map(|p| (p.row, p.col)).collect::<BTreeSet<_>>();
        let interior = p.len() == 9;
        let touches_edge = p.iter().any(|&(m, h)| m == 0 || h == 0 || m == 8 || h == 8);
        assert!(interior || touches_edge);
        // a seed strictly inside yields exactly nine points
        let mut bits = vec![0u8; 81];
        bits[4 * 9 + 4] = 1;
        let single = MaskStack::binary(9, 9, bits).unwrap();
        let full = MaskStack::binary(9, 9, vec![1; 81]).unwrap();
        let seed_pt = sample_keypoints("x", &single, &[0], 1, 0, 0).unwrap()[0].points[0];
        let ball = dilate_points(&BTreeSet::from([(seed_pt.row, seed_pt.col)]), 1, (9, 9));
        assert_eq!(ball.iter().filter(|&&(m, h)| full.get(0, m, h) == 1).count(), 9);
    }

    #[test]
    fn dilation_is_clipped_to_class_region() {
        let mut bits = vec![0u8; 64];
        for h in 0..8 {
            bits[3 * 8 + h] = 1;
        }
        let mask = MaskStack::binary(8, 8, bits).unwrap();
        let anns = sample_keypoints("x", &mask, &[0], 1, 2, 1).unwrap();
        assert!(anns[0].points.iter().all(|p| p.row == 3));
        assert!(anns[0].points.len() >= 3);
    }
}
