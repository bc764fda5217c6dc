//! Loader for the Dubai aerial imagery corpus: `Tile N/images/*.jpg` with
//! colour-coded `Tile N/masks/*.png`.

use std::fs;
use std::path::{Path, PathBuf};

use crate::annotate::extract_sp;
use crate::error::{Error, Result};
use crate::types::{AnnotatedDataset, ImagePatch, LabelMode, MaskStack};

use super::tiling::{tile_image, TilingSpec};

pub const AERIAL_CLASSES: [&str; 6] = ["building", "land", "road", "vegetation", "water", "unlabeled"];

/// Published mask colours, in class order.
pub const AERIAL_LEGEND: [[u8; 3]; 6] = [
    [60, 16, 152],
    [132, 41, 246],
    [110, 193, 228],
    [254, 221, 58],
    [226, 169, 41],
    [155, 155, 155],
];

pub(crate) fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .map(|e| e.map(|e| e.path()).map_err(|err| Error::io(dir, err)))
        .collect::<Result<_>>()?;
    out.sort();
    Ok(out)
}

pub(crate) fn sanitize(s: &str) -> String {
    s.chars().map(|c| if c.is_ascii_alphanumeric() || c == '-' { c } else { '_' }).collect()
}

fn stem(path: &Path) -> String {
    path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}

pub(crate) fn is_image(path: &Path) -> bool {
    matches!(
        path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref(),
        Some("jpg" | "jpeg" | "png" | "tif" | "tiff")
    )
}

/// Maps each mask pixel to the legend entry within `tolerance` per channel.
pub fn decode_colour_mask(path: &Path, tolerance: u8) -> Result<MaskStack> {
    let img = image::open(path)?.to_rgb8();
    let (cols, rows) = (img.width() as usize, img.height() as usize);
    let mut labels = Vec::with_capacity(rows * cols);
    for px in img.pixels() {
        let rgb = px.0;
        let hit = AERIAL_LEGEND
            .iter()
            .position(|c| c.iter().zip(&rgb).all(|(a, b)| a.abs_diff(*b) <= tolerance));
        match hit {
            Some(j) => labels.push(j as u8),
            None => {
                return Err(Error::Decode {
                    path: path.to_path_buf(),
                    message: format!("unknown mask colour ({}, {}, {})", rgb[0], rgb[1], rgb[2]),
                })
            }
        }
    }
    MaskStack::multiclass(AERIAL_CLASSES.len(), rows, cols, labels)
}

fn read_rgb(path: &Path, id: String) -> Result<ImagePatch> {
    let img = image::open(path)?.to_rgb8();
    let (cols, rows) = (img.width() as usize, img.height() as usize);
    let raw = img.into_raw();
    let mut pixels = vec![0f32; 3 * rows * cols];
    for (p, rgb) in raw.chunks_exact(3).enumerate() {
        for c in 0..3 {
            pixels[c * rows * cols + p] = f32::from(rgb[c]) / 255.0;
        }
    }
    ImagePatch::new(id, rows, cols, 3, pixels)
}

pub fn load_aerial_dubai(root: &Path, spec: &TilingSpec) -> Result<AnnotatedDataset> {
    load_aerial_dubai_with(root, spec, 0)
}

/// As [`load_aerial_dubai`] with a per-channel colour tolerance for the
/// mask legend.
pub fn load_aerial_dubai_with(root: &Path, spec: &TilingSpec, tolerance: u8) -> Result<AnnotatedDataset> {
    spec.validate()?;
    let mut patches = Vec::new();
    let mut masks = Vec::new();
    for tile in sorted_entries(root)?.into_iter().filter(|p| p.is_dir()) {
        let images_dir = tile.join("images");
        if !images_dir.is_dir() {
            continue;
        }
        let tile_name = sanitize(&tile.file_name().unwrap_or_default().to_string_lossy());
        for img_path in sorted_entries(&images_dir)?.into_iter().filter(|p| is_image(p)) {
            let s = stem(&img_path);
            let mask_path = tile.join("masks").join(format!("{s}.png"));
            if !mask_path.is_file() {
                return Err(Error::MissingAnnotation(format!(
                    "no mask for image {}",
                    img_path.display()
                )));
            }
            let image = read_rgb(&img_path, format!("{tile_name}_{}", sanitize(&s)))?;
            let mask = decode_colour_mask(&mask_path, tolerance)?;
            for (p, m) in tile_image(&image, Some(&mask), spec)? {
                patches.push(p);
                masks.push(m.expect("mask was supplied"));
            }
        }
    }
    if patches.is_empty() {
        return Err(Error::invalid(format!("no aerial tiles found under {}", root.display())));
    }
    let names = AERIAL_CLASSES.iter().map(|s| s.to_string()).collect();
    let mut ds = AnnotatedDataset::new(names, LabelMode::Multiclass, patches);
    for (p, m) in ds.patches.iter().zip(masks) {
        ds.sp.insert(p.id().to_string(), extract_sp(&m));
        ds.gt_masks.insert(p.id().to_string(), m);
    }
    Ok(ds)
}

#[cfg(test)]
mod tests {
    use super::*;
    use image::{Rgb, RgbImage};

    fn fixture(root: &Path, bad_colour: bool, with_mask: bool) {
        let tile = root.join("Tile 1");
        fs::create_dir_all(tile.join("images")).unwrap();
        fs::create_dir_all(tile.join("masks")).unwrap();
        let img = RgbImage::from_fn(32, 20, |x, y| Rgb([(x * 7) as u8, (y * 9) as u8, 90]));
        img.save(tile.join("images/image_part_001.png")).unwrap();
        if with_mask {
            let mask = RgbImage::from_fn(32, 20, |x, y| {
                if bad_colour && x == 3 && y == 4 {
                    Rgb([1, 2, 3])
                } else {
                    Rgb(AERIAL_LEGEND[((x / 8) as usize + y as usize) % 6])
                }
            });
            mask.save(tile.join("masks/image_part_001.png")).unwrap();
        }
    }

    #[test]
    fn loads_six_class_dataset() {
        let dir = tempfile::tempdir().unwrap();
        fixture(dir.path(), false, true);
        let ds = load_aerial_dubai(dir.path(), &TilingSpec::square(16)).unwrap();
        assert_eq!(ds.class_names, AERIAL_CLASSES.map(String::from).to_vec());
        assert_eq!(ds.patches.len(), 2);
        assert_eq!(ds.patches[0].id(), "Tile_1_image_part_001_0000");
        let m = &ds.gt_masks[ds.patches[1].id()];
        assert_eq!(m.eval_label(0, 0), 2);
        assert!(crate::types::validate_dataset(&ds).is_empty());
    }

    #[test]
    fn unknown_colour_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        fixture(dir.path(), true, true);
        let msg = load_aerial_dubai(dir.path(), &TilingSpec::square(16)).unwrap_err().to_string();
        assert!(msg.contains("(1, 2, 3)") && msg.contains("image_part_001.png"), "{msg}");
        // a generous tolerance still refuses a far-off colour
        assert!(load_aerial_dubai_with(dir.path(), &TilingSpec::square(16), 5).is_err());
    }

    #[test]
    fn missing_mask_names_image() {
        let dir = tempfile::tempdir().unwrap();
        fixture(dir.path(), false, false);
        let msg = load_aerial_dubai(dir.path(), &TilingSpec::square(16)).unwrap_err().to_string();
        assert!(msg.contains("image_part_001"), "{msg}");
    }
}
