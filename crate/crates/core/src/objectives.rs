//! Training objectives: proportion loss, per-pixel BCE, keypoint loss,
//! their weighted combination, and the per-pixel cross-entropy used by the
//! fully supervised benchmark.
//!
//! Every loss has a companion returning its derivative with respect to the
//! quantity the network produces (pooled proportions, score maps or logits).

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{HeadActivation, Real, ScoreMaps};
use crate::types::{KeypointAnnotation, MaskStack, ProportionVector};

pub const DEFAULT_BCE_EPSILON: f64 = 1e-7;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    /// Weight of the proportion loss; `1 - alpha` weighs the keypoint loss.
    pub alpha: f64,
    pub bce_epsilon: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            alpha: 0.5,
            bce_epsilon: DEFAULT_BCE_EPSILON,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::invalid(format!("alpha {} not in [0, 1]", self.alpha)));
        }
        if !(self.bce_epsilon > 0.0 && self.bce_epsilon < 1e-3) {
            return Err(Error::invalid(format!("bce_epsilon {} not in (0, 1e-3)", self.bce_epsilon)));
        }
        Ok(())
    }
}

fn check_pairs(pred: &[ProportionVector], target: &[ProportionVector]) -> Result<()> {
    if pred.is_empty() || pred.len() != target.len() {
        return Err(Error::Shape(format!(
            "{} predictions for {} targets",
            pred.len(),
            target.len()
        )));
    }
    for (i, (p, t)) in pred.iter().zip(target).enumerate() {
        if p.len() != t.len() {
            return Err(Error::Shape(format!(
                "element {i}: {} predicted classes vs {} target classes",
                p.len(),
                t.len()
            )));
        }
    }
    Ok(())
}

/// Mean over the batch of the squared Euclidean distance between predicted
/// and target proportions.
pub fn loss_sp(pred: &[ProportionVector], target: &[ProportionVector]) -> Result<f64> {
    check_pairs(pred, target)?;
    let total: f64 = pred
        .iter()
        .zip(target)
        .map(|(p, t)| p.values().iter().zip(t.values()).map(|(a, b)| (a - b).powi(2)).sum::<f64>())
        .sum();
    Ok(total / pred.len() as f64)
}

/// Derivative of [`loss_sp`] with respect to each predicted component:
/// `2 (rho - rho*) / B`.
pub fn loss_sp_grad(pred: &[ProportionVector], target: &[ProportionVector]) -> Result<Vec<Vec<f64>>> {
    check_pairs(pred, target)?;
    let scale = 2.0 / pred.len() as f64;
    Ok(pred
        .iter()
        .zip(target)
        .map(|(p, t)| p.values().iter().zip(t.values()).map(|(a, b)| scale * (a - b)).collect())
        .collect())
}

/// Binary cross-entropy of one pixel with the prediction clipped to
/// `[eps, 1 - eps]`.
pub fn bce_pixel(y_true: u8, y_pred: f64, eps: f64) -> f64 {
    let p = y_pred.clamp(eps, 1.0 - eps);
    if y_true == 1 {
        -p.ln()
    } else {
        -(1.0 - p).ln()
    }
}

/// Derivative of [`bce_pixel`] in `y_pred`; zero where the clip is active.
pub fn bce_pixel_grad(y_true: u8, y_pred: f64, eps: f64) -> f64 {
    if y_pred < eps || y_pred > 1.0 - eps {
        return 0.0;
    }
    if y_true == 1 {
        -1.0 / y_pred
    } else {
        1.0 / (1.0 - y_pred)
    }
}

fn lookup<'a, T>(maps: &'a BTreeMap<&str, &ScoreMaps<T>>, ann: &KeypointAnnotation) -> Result<&'a ScoreMaps<T>>
where
    T: Real,
{
    let m = maps
        .get(ann.image_id.as_str())
        .ok_or_else(|| Error::MissingAnnotation(format!("no prediction for keypoint image {}", ann.image_id)))?;
    if ann.class_index >= m.n_out() {
        return Err(Error::Shape(format!(
            "{}: keypoint class {} but {} score channels",
            ann.image_id,
            ann.class_index,
            m.n_out()
        )));
    }
    if ann.points.is_empty() {
        return Err(Error::Invariant(format!("{}: empty keypoint set", ann.image_id)));
    }
    if let Some(p) = ann.points.iter().find(|p| p.row >= m.rows() || p.col >= m.cols()) {
        return Err(Error::Shape(format!(
            "{}: keypoint ({}, {}) outside {}x{}",
            ann.image_id,
            p.row,
            p.col,
            m.rows(),
            m.cols()
        )));
    }
    Ok(m)
}

/// Keypoint loss: summed over annotated images and classes, averaged over
/// the points within each annotation.
pub fn loss_sk<T: Real>(pred_maps: &BTreeMap<&str, &ScoreMaps<T>>, keypoints: &[KeypointAnnotation], eps: f64) -> Result<f64> {
    let mut total = 0.0;
    for ann in keypoints {
        let m = lookup(pred_maps, ann)?;
        let s: f64 = ann
            .points
            .iter()
            .map(|p| bce_pixel(p.value, m.get(ann.class_index, p.row, p.col).f64(), eps))
            .sum();
        total += s / ann.points.len() as f64;
    }
    Ok(total)
}

/// Derivative of [`loss_sk`] with respect to the score maps, as dense
/// `n_out x M x H` buffers keyed by image id (only annotated images appear).
pub fn loss_sk_grad<T: Real>(
    pred_maps: &BTreeMap<&str, &ScoreMaps<T>>,
    keypoints: &[KeypointAnnotation],
    eps: f64,
) -> Result<BTreeMap<String, Vec<f64>>> {
    let mut out: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for ann in keypoints {
        let m = lookup(pred_maps, ann)?;
        let buf = out
            .entry(ann.image_id.clone())
            .or_insert_with(|| vec![0.0; m.values().len()]);
        let w = 1.0 / ann.points.len() as f64;
        for p in &ann.points {
            let y = m.get(ann.class_index, p.row, p.col).f64();
            buf[(ann.class_index * m.rows() + p.row) * m.cols() + p.col] += w * bce_pixel_grad(p.value, y, eps);
        }
    }
    Ok(out)
}

pub fn loss_total(lsp: f64, lsk: f64, cfg: &LossConfig) -> f64 {
    if cfg.alpha == 1.0 {
        lsp
    } else if cfg.alpha == 0.0 {
        lsk
    } else {
        cfg.alpha * lsp + (1.0 - cfg.alpha) * lsk
    }
}

/// Per-pixel cross-entropy against ground-truth masks, averaged over pixels
/// and batch, evaluated from logits (log-softmax, or log-sigmoid for a single
/// channel). Returns the loss and its derivative with respect to each
/// sample's logits.
pub fn pixel_cross_entropy<T: Real>(
    logits: &[&[T]],
    activation: HeadActivation,
    truth: &[&MaskStack],
) -> Result<(f64, Vec<Vec<T>>)> {
    if logits.is_empty() || logits.len() != truth.len() {
        return Err(Error::Shape(format!("{} logit maps for {} masks", logits.len(), truth.len())));
    }
    let b = logits.len() as f64;
    let mut loss = 0.0;
    let mut grads = Vec::with_capacity(logits.len());
    for (z, mask) in logits.iter().zip(truth) {
        let px = mask.rows() * mask.cols();
        let n = mask.classes();
        if z.len() != n * px {
            return Err(Error::Shape(format!("{} logits for {n}x{px} mask", z.len())));
        }
        let scale = 1.0 / (b * px as f64);
        let mut g = vec![T::zero(); z.len()];
        match activation {
            HeadActivation::Sigmoid => {
                for p in 0..px {
                    let x = z[p].f64();
                    let y = f64::from(mask.labels()[p]);
                    // softplus(x) - y x
                    let sp = x.max(0.0) + (-x.abs()).exp().ln_1p();
                    loss += (sp - y * x) * scale;
                    let s = 1.0 / (1.0 + (-x).exp());
                    g[p] = T::of((s - y) * scale);
                }
            }
            HeadActivation::SoftmaxOverClasses => {
                for p in 0..px {
                    let max = (0..n).map(|j| z[j * px + p].f64()).fold(f64::NEG_INFINITY, f64::max);
                    let sum: f64 = (0..n).map(|j| (z[j * px + p].f64() - max).exp()).sum();
                    let lse = max + sum.ln();
                    let label = mask.labels()[p] as usize;
                    loss += (lse - z[label * px + p].f64()) * scale;
                    for j in 0..n {
                        let prob = (z[j * px + p].f64() - lse).exp();
                        let y = if j == label { 1.0 } else { 0.0 };
                        g[j * px + p] = T::of((prob - y) * scale);
                    }
                }
            }
        }
        grads.push(g);
    }
    Ok((loss, grads))
}
