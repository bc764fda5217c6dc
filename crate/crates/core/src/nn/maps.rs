//! Score maps produced by the backbone, global average pooling and mask
//! prediction.

use serde::{Deserialize, Serialize};

use super::real::Real;
use crate::error::{Error, Result};
use crate::types::{LabelMode, MaskStack, ProportionVector};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadActivation {
    SoftmaxOverClasses,
    Sigmoid,
}

/// Per-class score maps `n_out x M x H`, after the head activation.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoreMaps<T> {
    n_out: usize,
    rows: usize,
    cols: usize,
    activation: HeadActivation,
    values: Vec<T>,
}

impl<T: Real> ScoreMaps<T> {
    pub fn new(n_out: usize, rows: usize, cols: usize, activation: HeadActivation, values: Vec<T>) -> Result<Self> {
        if values.len() != n_out * rows * cols {
            return Err(Error::Shape(format!(
                "{} score values for {n_out}x{rows}x{cols}",
                values.len()
            )));
        }
        Ok(Self {
            n_out,
            rows,
            cols,
            activation,
            values,
        })
    }

    pub fn n_out(&self) -> usize {
        self.n_out
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn activation(&self) -> HeadActivation {
        self.activation
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }

    pub fn get(&self, j: usize, m: usize, h: usize) -> T {
        self.values[(j * self.rows + m) * self.cols + h]
    }

    pub fn plane(&self, j: usize) -> &[T] {
        let px = self.rows * self.cols;
        &self.values[j * px..(j + 1) * px]
    }

    fn mode(&self) -> LabelMode {
        match self.activation {
            HeadActivation::Sigmoid => LabelMode::Binary,
            HeadActivation::SoftmaxOverClasses => LabelMode::Multiclass,
        }
    }
}

/// Global average pooling: the mean of each channel.
pub fn gap<T: Real>(maps: &ScoreMaps<T>) -> ProportionVector {
    let px = (maps.rows * maps.cols) as f64;
    let values = (0..maps.n_out)
        .map(|j| {
            let s: f64 = maps.plane(j).iter().map(|v| v.f64()).sum();
            (s / px).clamp(0.0, 1.0)
        })
        .collect();
    ProportionVector::new_unchecked(maps.mode(), values)
}

/// Spreads a gradient with respect to the pooled proportions back over the
/// maps: every pixel of channel `j` receives `d_rho[j] / (M*H)`.
pub fn gap_backward<T: Real>(maps: &ScoreMaps<T>, d_rho: &[f64]) -> Vec<T> {
    let px = maps.rows * maps.cols;
    let mut out = Vec::with_capacity(maps.values.len());
    for &d in d_rho {
        out.extend(std::iter::repeat_n(T::of(d / px as f64), px));
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "t")]
pub enum MaskRule {
    Argmax,
    /// Foreground iff score >= t.
    Threshold(f64),
}

impl MaskRule {
    /// Argmax for multi-channel heads, threshold 0.5 for a single channel.
    pub fn default_for(n_out: usize) -> Self {
        if n_out == 1 {
            MaskRule::Threshold(0.5)
        } else {
            MaskRule::Argmax
        }
    }
}

pub fn predict_masks<T: Real>(maps: &ScoreMaps<T>, rule: MaskRule) -> Result<MaskStack> {
    let px = maps.rows * maps.cols;
    match rule {
        MaskRule::Argmax => {
            if maps.n_out < 2 {
                return Err(Error::invalid("argmax needs at least two score channels"));
            }
            let labels = (0..px)
                .map(|p| {
                    let mut best = 0;
                    for j in 1..maps.n_out {
                        if maps.values[j * px + p] > maps.values[best * px + p] {
                            best = j;
                        }
                    }
                    best as u8
                })
                .collect();
            MaskStack::multiclass(maps.n_out, maps.rows, maps.cols, labels)
        }
        MaskRule::Threshold(t) => {
            if maps.n_out != 1 {
                return Err(Error::invalid(format!(
                    "threshold needs exactly one score channel, got {}",
                    maps.n_out
                )));
            }
            let bits = maps.values.iter().map(|v| u8::from(v.f64() >= t)).collect();
            MaskStack::binary(maps.rows, maps.cols, bits)
        }
    }
}
