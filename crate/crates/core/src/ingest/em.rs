//! Loader for the mitochondria electron-microscopy stack. Accepts either
//! paired `images/` and `masks/` directories or the multi-page
//! `training.tif` / `training_groundtruth.tif` volumes.

use std::fs::File;
use std::io::BufReader;
use std::path::Path;

use tiff::decoder::{Decoder, DecodingResult};

use crate::annotate::extract_sp;
use crate::error::{Error, Result};
use crate::types::{AnnotatedDataset, ImagePatch, LabelMode, MaskStack};

use super::aerial::{is_image, sanitize, sorted_entries};
use super::tiling::{tile_image, TilingSpec};

pub const EM_VOLUME: &str = "training.tif";
pub const EM_GROUNDTRUTH: &str = "training_groundtruth.tif";

/// 256x256 non-overlapping tiles: twelve per 768x1024 slice.
pub fn em_default_tiling() -> TilingSpec {
    TilingSpec::square(256)
}

/// A greyscale page: (rows, cols, 8-bit values).
type Page = (usize, usize, Vec<u8>);

fn tiff_error(path: &Path, e: impl std::fmt::Display) -> Error {
    Error::Decode {
        path: path.to_path_buf(),
        message: e.to_string(),
    }
}

/// Reads every page of a greyscale TIFF, scaling 16-bit data to 8 bits.
pub fn read_tiff_pages(path: &Path) -> Result<Vec<Page>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut dec = Decoder::new(BufReader::new(file)).map_err(|e| tiff_error(path, e))?;
    let mut pages = Vec::new();
    loop {
        let (w, h) = dec.dimensions().map_err(|e| tiff_error(path, e))?;
        let data = match dec.read_image().map_err(|e| tiff_error(path, e))? {
            DecodingResult::U8(v) => v,
            DecodingResult::U16(v) => v.into_iter().map(|x| (x >> 8) as u8).collect(),
            _ => return Err(tiff_error(path, "unsupported sample format; expected 8 or 16-bit grey")),
        };
        if data.len() != (w * h) as usize {
            return Err(tiff_error(path, "expected a single-channel page"));
        }
        pages.push((h as usize, w as usize, data));
        if !dec.more_images() {
            break;
        }
        dec.next_image().map_err(|e| tiff_error(path, e))?;
    }
    Ok(pages)
}

fn binary_mask(path: &Path, (rows, cols, data): Page) -> Result<MaskStack> {
    let bits = data
        .into_iter()
        .map(|v| match v {
            0 => Ok(0),
            255 => Ok(1),
            other => Err(tiff_error(path, format!("mask value {other} not in {{0,255}}"))),
        })
        .collect::<Result<Vec<u8>>>()?;
    MaskStack::binary(rows, cols, bits)
}

fn grey_patch(id: String, (rows, cols, data): Page) -> Result<ImagePatch> {
    ImagePatch::new(id, rows, cols, 1, data.into_iter().map(|v| f32::from(v) / 255.0).collect())
}

fn load_slices(root: &Path) -> Result<Vec<(ImagePatch, MaskStack)>> {
    let volume = root.join(EM_VOLUME);
    if volume.is_file() {
        let truth = root.join(EM_GROUNDTRUTH);
        if !truth.is_file() {
            return Err(Error::MissingAnnotation(format!("{} has no {EM_GROUNDTRUTH}", volume.display())));
        }
        let images = read_tiff_pages(&volume)?;
        let masks = read_tiff_pages(&truth)?;
        if images.len() != masks.len() {
            return Err(tiff_error(&truth, format!("{} mask pages for {} slices", masks.len(), images.len())));
        }
        return images
            .into_iter()
            .zip(masks)
            .enumerate()
            .map(|(i, (img, mk))| Ok((grey_patch(format!("slice{i:04}"), img)?, binary_mask(&truth, mk)?)))
            .collect();
    }
    let images_dir = root.join("images");
    if !images_dir.is_dir() {
        return Err(Error::invalid(format!(
            "{} holds neither {EM_VOLUME} nor an images/ directory",
            root.display()
        )));
    }
    let mut out = Vec::new();
    for path in sorted_entries(&images_dir)?.into_iter().filter(|p| is_image(p)) {
        let stem = path.file_stem().unwrap_or_default().to_string_lossy().into_owned();
        let mask_path = ["png", "tif", "tiff"]
            .iter()
            .map(|ext| root.join("masks").join(format!("{stem}.{ext}")))
            .find(|p| p.is_file())
            .ok_or_else(|| Error::MissingAnnotation(format!("no mask for image {}", path.display())))?;
        let img = image::open(&path)?.to_luma8();
        let page = (img.height() as usize, img.width() as usize, img.into_raw());
        let mk = image::open(&mask_path)?.to_luma8();
        let mk_page = (mk.height() as usize, mk.width() as usize, mk.into_raw());
        out.push((grey_patch(sanitize(&stem), page)?, binary_mask(&mask_path, mk_page)?));
    }
    Ok(out)
}

pub fn load_electron_microscopy(root: &Path, spec: &TilingSpec) -> Result<AnnotatedDataset> {
    spec.validate()?;
    let slices = load_slices(root)?;
    if slices.is_empty() {
        return Err(Error::invalid(format!("no microscopy slices under {}", root.display())));
    }
    let mut patches = Vec::new();
    let mut masks = Vec::new();
    for (img, mk) in &slices {
        for (p, m) in tile_image(img, Some(mk), spec)? {
            patches.push(p);
            masks.push(m.expect("mask was supplied"));
        }
    }
    let mut ds = AnnotatedDataset::new(vec!["mitochondria".into()], LabelMode::Binary, patches);
    for (p, m) in ds.patches.iter().zip(masks) {
        ds.sp.insert(p.id().to_string(), extract_sp(&m));
        ds.gt_masks.insert(p.id().to_string(), m);
    }
    Ok(ds)
}
