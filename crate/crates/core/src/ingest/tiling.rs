//! Cutting full-size images (and their masks) into fixed-size patches.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::{ImagePatch, LabelMode, MaskStack};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EdgePolicy {
    /// Tiles that would cross the border are skipped.
    DropPartial,
    /// Border tiles are completed by mirror reflection.
    PadReflect,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TilingSpec {
    pub patch_m: usize,
    pub patch_h: usize,
    pub stride_m: usize,
    pub stride_h: usize,
    pub edge_policy: EdgePolicy,
}

impl TilingSpec {
    /// Square non-overlapping tiles, dropping partial ones.
    pub fn square(size: usize) -> Self {
        Self {
            patch_m: size,
            patch_h: size,
            stride_m: size,
            stride_h: size,
            edge_policy: EdgePolicy::DropPartial,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch_m < 8 || self.patch_h < 8 {
            return Err(Error::invalid(format!(
                "patch {}x{} is below the 8x8 minimum",
                self.patch_m, self.patch_h
            )));
        }
        if self.stride_m == 0 || self.stride_h == 0 {
            return Err(Error::invalid("tiling strides must be at least 1"));
        }
        Ok(())
    }

    /// Tile origins along one axis of length `len`.
    fn origins(&self, len: usize, patch: usize, stride: usize) -> Vec<usize> {
        match self.edge_policy {
            EdgePolicy::DropPartial if len < patch => Vec::new(),
            EdgePolicy::DropPartial => (0..=(len - patch) / stride).map(|k| k * stride).collect(),
            EdgePolicy::PadReflect => {
                let mut out = vec![0];
                while out[out.len() - 1] + patch < len {
                    out.push(out[out.len() - 1] + stride);
                }
                out
            }
        }
    }

    /// Number of tiles produced for a `rows x cols` image.
    pub fn count(&self, rows: usize, cols: usize) -> usize {
        self.origins(rows, self.patch_m, self.stride_m).len() * self.origins(cols, self.patch_h, self.stride_h).len()
    }
}

/// Mirror index without repeating the edge sample: -1 maps to 1, `len`
/// maps to `len - 2`.
fn reflect(i: usize, len: usize) -> usize {
    if len == 1 {
        return 0;
    }
    let period = 2 * (len - 1);
    let r = i % period;
    if r < len {
        r
    } else {
        period - r
    }
}

/// Tiles `image` on the stride grid in row-major order. Patch ids are
/// `<image id>_<tile index>`.
pub fn tile_image(image: &ImagePatch, mask: Option<&MaskStack>, spec: &TilingSpec) -> Result<Vec<(ImagePatch, Option<MaskStack>)>> {
    spec.validate()?;
    if let Some(m) = mask {
        if m.rows() != image.rows() || m.cols() != image.cols() {
            return Err(Error::Shape(format!(
                "mask {}x{} does not match image {}x{}",
                m.rows(),
                m.cols(),
                image.rows(),
                image.cols()
            )));
        }
    }
    let rows = spec.origins(image.rows(), spec.patch_m, spec.stride_m);
    let cols = spec.origins(image.cols(), spec.patch_h, spec.stride_h);
    if rows.is_empty() || cols.is_empty() {
        return Err(Error::ImageTooSmall {
            width: image.cols(),
            height: image.rows(),
            patch_w: spec.patch_h,
            patch_h: spec.patch_m,
        });
    }
    let (pm, ph, ch) = (spec.patch_m, spec.patch_h, image.channels());
    let mut out = Vec::with_capacity(rows.len() * cols.len());
    for &r0 in &rows {
        for &c0 in &cols {
            let src_r = |m: usize| reflect(r0 + m, image.rows());
            let src_c = |h: usize| reflect(c0 + h, image.cols());
            let mut pixels = Vec::with_capacity(ch * pm * ph);
            for c in 0..ch {
                for m in 0..pm {
                    pixels.extend((0..ph).map(|h| image.get(c, src_r(m), src_c(h))));
                }
            }
            let id = format!("{}_{:04}", image.id(), out.len());
            let patch = ImagePatch::new_unchecked(id, pm, ph, ch, pixels)?;
            let mask_patch = match mask {
                None => None,
                Some(mk) => {
                    let labels: Vec<u8> = (0..pm)
                        .flat_map(|m| (0..ph).map(move |h| (m, h)))
                        .map(|(m, h)| mk.labels()[src_r(m) * mk.cols() + src_c(h)])
                        .collect();
                    Some(match mk.mode() {
                        LabelMode::Binary => MaskStack::binary(pm, ph, labels)?,
                        LabelMode::Multiclass => MaskStack::multiclass(mk.classes(), pm, ph, labels)?,
                    })
                }
            };
            out.push((patch, mask_patch));
        }
    }
    Ok(out)
}
