//! On-disk formats: proportion CSV, keypoint CSV, dataset manifest and the
//! patch/mask files it references.

use std::collections::BTreeMap;
use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use image::{GrayImage, Luma};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::{
    AnnotatedDataset, ImagePatch, Keypoint, KeypointAnnotation, LabelMode, MaskStack, ProportionVector, Split,
};

const PATCH_MAGIC: &[u8; 4] = b"SPXP";
const PATCH_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const SP_FILE: &str = "sp.csv";
pub const KEYPOINT_FILE: &str = "keypoints.csv";

pub fn write_sp_csv(path: &Path, class_names: &[String], sp: &BTreeMap<String, ProportionVector>) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["image_id".to_string()];
    header.extend(class_names.iter().cloned());
    w.write_record(&header)?;
    for (id, pv) in sp {
        if pv.len() != class_names.len() {
            return Err(Error::Shape(format!(
                "{id}: {} proportions for {} classes",
                pv.len(),
                class_names.len()
            )));
        }
        let mut row = vec![id.clone()];
        row.extend(pv.values().iter().map(|v| v.to_string()));
        w.write_record(&row)?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// Reads an SP CSV. Returns the class names from the header and the
/// proportions, unchecked (audit with `validate_dataset`).
pub fn read_sp_csv(path: &Path, mode: LabelMode) -> Result<(Vec<String>, BTreeMap<String, ProportionVector>)> {
    let mut r = csv::Reader::from_path(path)?;
    let header = r.headers()?.clone();
    if header.get(0) != Some("image_id") || header.len() < 2 {
        return Err(Error::Decode {
            path: path.to_path_buf(),
            message: "expected header image_id,<class_0>,...".into(),
        });
    }
    let classes: Vec<String> = header.iter().skip(1).map(str::to_string).collect();
    let mut out = BTreeMap::new();
    for (line, rec) in r.records().enumerate() {
        let rec = rec?;
        if rec.len() != header.len() {
            return Err(Error::Decode {
                path: path.to_path_buf(),
                message: format!("row {} has {} fields, expected {}", line + 2, rec.len(), header.len()),
            });
        }
        let values = rec
            .iter()
            .skip(1)
            .map(|s| {
                s.trim().parse::<f64>().map_err(|e| Error::Decode {
                    path: path.to_path_buf(),
                    message: format!("row {}: {s:?}: {e}", line + 2),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        out.insert(rec[0].to_string(), ProportionVector::new_unchecked(mode, values));
    }
    Ok((classes, out))
}

#[derive(Debug, Serialize, Deserialize)]
struct KeypointRow {
    image_id: String,
    class_index: usize,
    row: usize,
    col: usize,
    value: u8,
}

pub fn write_keypoint_csv(path: &Path, keypoints: &[KeypointAnnotation]) -> Result<()> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_path(path)?;
    w.write_record(["image_id", "class_index", "row", "col", "value"])?;
    for ann in keypoints {
        for p in &ann.points {
            w.serialize(KeypointRow {
                image_id: ann.image_id.clone(),
                class_index: ann.class_index,
                row: p.row,
                col: p.col,
                value: p.value,
            })?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// Groups rows by `(image_id, class_index)` in order of first appearance.
pub fn read_keypoint_csv(path: &Path) -> Result<Vec<KeypointAnnotation>> {
    let mut r = csv::Reader::from_path(path)?;
    let mut out: Vec<KeypointAnnotation> = Vec::new();
    let mut index: BTreeMap<(String, usize), usize> = BTreeMap::new();
    for rec in r.deserialize::<KeypointRow>() {
        let rec = rec?;
        let key = (rec.image_id.clone(), rec.class_index);
        let slot = *index.entry(key).or_insert_with(|| {
            out.push(KeypointAnnotation {
                image_id: rec.image_id.clone(),
                class_index: rec.class_index,
                points: Vec::new(),
            });
            out.len() - 1
        });
        out[slot].points.push(Keypoint {
            row: rec.row,
            col: rec.col,
            value: rec.value,
        });
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub split: Split,
    pub rows: usize,
    pub cols: usize,
    pub pixels: PathBuf,
    pub mask: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub class_names: Vec<String>,
    pub mode: LabelMode,
    pub channels: usize,
    pub train_fraction: Option<f64>,
    pub sp_file: Option<PathBuf>,
    pub keypoint_file: Option<PathBuf>,
    pub patches: Vec<ManifestEntry>,
    /// Free-form record of how the dataset was produced (tiling, synthetic spec).
    #[serde(default)]
    pub provenance: serde_json::Value,
}

pub fn write_patch(path: &Path, patch: &ImagePatch) -> Result<()> {
    let mut buf = Vec::with_capacity(20 + patch.pixels().len() * 4);
    buf.extend_from_slice(PATCH_MAGIC);
    for v in [PATCH_VERSION, patch.channels() as u32, patch.rows() as u32, patch.cols() as u32] {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    for v in patch.pixels() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn read_patch(path: &Path, id: &str) -> Result<ImagePatch> {
    let mut bytes = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    let bad = |message: &str| Error::Decode {
        path: path.to_path_buf(),
        message: message.to_string(),
    };
    if bytes.len() < 20 || &bytes[..4] != PATCH_MAGIC {
        return Err(bad("not a patch file"));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap()) as usize;
    if word(0) != PATCH_VERSION as usize {
        return Err(bad("unsupported patch version"));
    }
    let (ch, rows, cols) = (word(1), word(2), word(3));
    let body = &bytes[20..];
    if body.len() != ch * rows * cols * 4 {
        return Err(bad("truncated pixel data"));
    }
    let pixels = body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    ImagePatch::new_unchecked(id, rows, cols, ch, pixels)
}

/// Multiclass masks store the class index as the grey level; binary masks
/// store 0/255.
pub fn write_mask_png(path: &Path, mask: &MaskStack) -> Result<()> {
    let img = GrayImage::from_fn(mask.cols() as u32, mask.rows() as u32, |x, y| {
        let l = mask.labels()[y as usize * mask.cols() + x as usize];
        Luma([match mask.mode() {
            LabelMode::Binary => l * 255,
            LabelMode::Multiclass => l,
        }])
    });
    img.save(path)?;
    Ok(())
}

pub fn read_mask_png(path: &Path, mode: LabelMode, classes: usize) -> Result<MaskStack> {
    let img = image::open(path)?.to_luma8();
    let (cols, rows) = (img.width() as usize, img.height() as usize);
    let raw = img.into_raw();
    match mode {
        LabelMode::Binary => {
            let bits = raw
                .iter()
                .map(|&v| match v {
                    0 => Ok(0),
                    255 => Ok(1),
                    other => Err(Error::Decode {
                        path: path.to_path_buf(),
                        message: format!("binary mask value {other} not in {{0,255}}"),
                    }),
                })
                .collect::<Result<Vec<u8>>>()?;
            MaskStack::binary(rows, cols, bits)
        }
        LabelMode::Multiclass => MaskStack::multiclass(classes, rows, cols, raw),
    }
}

fn ensure_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

fn file_stem(id: &str) -> String {
    id.chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' || c == '.' { c } else { '_' })
        .collect()
}

/// Writes the dataset under `dir`: manifest, patch files, mask PNGs and
/// annotation CSVs.
pub fn save_dataset(dir: &Path, ds: &AnnotatedDataset, provenance: serde_json::Value) -> Result<Manifest> {
    ensure_dir(&dir.join("patches"))?;
    if !ds.gt_masks.is_empty() {
        ensure_dir(&dir.join("masks"))?;
    }
    let mut entries = Vec::with_capacity(ds.patches.len());
    for p in &ds.patches {
        let stem = file_stem(p.id());
        let pixels = PathBuf::from("patches").join(format!("{stem}.bin"));
        write_patch(&dir.join(&pixels), p)?;
        let mask = match ds.gt_masks.get(p.id()) {
            Some(m) => {
                let rel = PathBuf::from("masks").join(format!("{stem}.png"));
                write_mask_png(&dir.join(&rel), m)?;
                Some(rel)
            }
            None => None,
        };
        entries.push(ManifestEntry {
            id: p.id().to_string(),
            split: ds.split.get(p.id()).copied().unwrap_or(Split::Train),
            rows: p.rows(),
            cols: p.cols(),
            pixels,
            mask,
        });
    }
    let sp_file = if ds.sp.is_empty() {
        None
    } else {
        write_sp_csv(&dir.join(SP_FILE), &ds.class_names, &ds.sp)?;
        Some(PathBuf::from(SP_FILE))
    };
    let keypoint_file = if ds.keypoints.is_empty() {
        None
    } else {
        write_keypoint_csv(&dir.join(KEYPOINT_FILE), &ds.keypoints)?;
        Some(PathBuf::from(KEYPOINT_FILE))
    };
    let manifest = Manifest {
        format_version: 1,
        class_names: ds.class_names.clone(),
        mode: ds.mode,
        channels: ds.channels().unwrap_or(1),
        train_fraction: ds.train_fraction,
        sp_file,
        keypoint_file,
        patches: entries,
        provenance,
    };
    write_json(&dir.join(MANIFEST_FILE), &manifest)?;
    Ok(manifest)
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    read_json(&dir.join(MANIFEST_FILE))
}

pub fn load_dataset(dir: &Path) -> Result<(AnnotatedDataset, Manifest)> {
    let manifest = read_manifest(dir)?;
    let mut patches = Vec::with_capacity(manifest.patches.len());
    let mut split = BTreeMap::new();
    let mut gt_masks = BTreeMap::new();
    for e in &manifest.patches {
        patches.push(read_patch(&dir.join(&e.pixels), &e.id)?);
        split.insert(e.id.clone(), e.split);
        if let Some(mask) = &e.mask {
            gt_masks.insert(
                e.id.clone(),
                read_mask_png(&dir.join(mask), manifest.mode, manifest.class_names.len())?,
            );
        }
    }
    let sp = match &manifest.sp_file {
        Some(f) => read_sp_csv(&dir.join(f), manifest.mode)?.1,
        None => BTreeMap::new(),
    };
    let keypoints = match &manifest.keypoint_file {
        Some(f) => read_keypoint_csv(&dir.join(f))?,
        None => Vec::new(),
    };
    let ds = AnnotatedDataset {
        class_names: manifest.class_names.clone(),
        mode: manifest.mode,
        patches,
        sp,
        keypoints,
        gt_masks,
        split,
        train_fraction: manifest.train_fraction,
    };
    Ok((ds, manifest))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    serde_json::to_writer_pretty(&mut f, value)?;
    f.write_all(b"\n").map_err(|e| Error::io(path, e))
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_reader(std::io::BufReader::new(f))?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn keypoint_csv_groups_by_image_and_class() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("k.csv");
        let anns = vec![
            KeypointAnnotation::new("b", 1, vec![Keypoint { row: 0, col: 1, value: 1 }, Keypoint { row: 2, col: 2, value: 0 }]).unwrap(),
            KeypointAnnotation::new("a", 0, vec![Keypoint { row: 3, col: 3, value: 1 }]).unwrap(),
        ];
        write_keypoint_csv(&path, &anns).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("image_id,class_index,row,col,value\n"));
        assert_eq!(read_keypoint_csv(&path).unwrap(), anns);
    }

    #[test]
    fn sp_csv_header_and_exact_values() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("sp.csv");
        let names = vec!["bg".to_string(), "fg".to_string()];
        let mut sp = BTreeMap::new();
        sp.insert("x".to_string(), ProportionVector::new(LabelMode::Multiclass, vec![0.1 + 0.2, 1.0 - (0.1 + 0.2)]).unwrap());
        write_sp_csv(&path, &names, &sp).unwrap();
        let (read_names, read) = read_sp_csv(&path, LabelMode::Multiclass).unwrap();
        assert_eq!(read_names, names);
        assert_eq!(read, sp);
    }

    #[test]
    fn binary_mask_rejects_grey_levels() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.png");
        GrayImage::from_fn(4, 4, |x, _| Luma([if x == 0 { 128 } else { 0 }])).save(&path).unwrap();
        assert!(matches!(read_mask_png(&path, LabelMode::Binary, 1), Err(Error::Decode { .. })));
    }
}
