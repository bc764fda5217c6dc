//! PNG export of score maps and masks for qualitative inspection.

use std::path::{Path, PathBuf};

use image::{GrayImage, Luma};

use super::maps::ScoreMaps;
use super::real::Real;
use crate::error::Result;
use crate::types::{LabelMode, MaskStack};

/// Writes one 8-bit greyscale PNG per channel (`<stem>_<class>.png`), with
/// scores in [0,1] mapped linearly to 0..=255.
pub fn write_score_pngs<T: Real>(dir: &Path, stem: &str, maps: &ScoreMaps<T>, class_names: &[String]) -> Result<Vec<PathBuf>> {
    let mut written = Vec::with_capacity(maps.n_out());
    for j in 0..maps.n_out() {
        let plane = maps.plane(j);
        let img = GrayImage::from_fn(maps.cols() as u32, maps.rows() as u32, |x, y| {
            let v = plane[y as usize * maps.cols() + x as usize].f64();
            Luma([(v.clamp(0.0, 1.0) * 255.0).round() as u8])
        });
        let name = class_names.get(j).map_or_else(|| j.to_string(), |n| sanitize(n));
        let path = dir.join(format!("{stem}_{name}.png"));
        img.save(&path)?;
        written.push(path);
    }
    Ok(written)
}

/// Writes a predicted mask as a greyscale PNG with classes spread evenly
/// over 0..=255.
pub fn write_mask_preview(path: &Path, mask: &MaskStack) -> Result<()> {
    let levels = match mask.mode() {
        LabelMode::Binary => 1,
        LabelMode::Multiclass => mask.classes() - 1,
    }
    .max(1);
    let img = GrayImage::from_fn(mask.cols() as u32, mask.rows() as u32, |x, y| {
        let l = mask.eval_label(y as usize, x as usize);
        Luma([(l * 255 / levels) as u8])
    });
    img.save(path)?;
    Ok(())
}

fn sanitize(name: &str) -> String {
    name.chars().map(|c| if c.is_ascii_alphanumeric() { c } else { '_' }).collect()
}
