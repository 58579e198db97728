use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::synthdata::{AnnotatedImage, Dataset, GeneratorConfig, PartAnnotation, Point, Split, SyntheticDataset};

pub const MANIFEST_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PartRecord {
    pub id: usize,
    pub x: Option<f64>,
    pub y: Option<f64>,
    pub visible: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ItemRecord {
    pub file: String,
    pub label: usize,
    pub sha256: String,
    pub parts: Vec<PartRecord>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitRecord {
    pub name: Split,
    pub items: Vec<ItemRecord>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub version: u32,
    pub tool_version: String,
    #[serde(rename = "K")]
    pub classes: usize,
    #[serde(rename = "C")]
    pub parts: usize,
    pub image_size: usize,
    pub seed: u64,
    pub generator: GeneratorConfig,
    pub splits: Vec<SplitRecord>,
}

fn part_record(p: &PartAnnotation) -> PartRecord {
    PartRecord { id: p.id, x: p.location.map(|l| l.x), y: p.location.map(|l| l.y), visible: p.visible() }
}

fn encode_png(raw: &[u8], size: usize) -> Result<Vec<u8>> {
    let plane = size * size;
    let mut interleaved = Vec::with_capacity(3 * plane);
    for i in 0..plane {
        interleaved.extend([raw[i], raw[plane + i], raw[2 * plane + i]]);
    }
    let img = image::RgbImage::from_raw(size as u32, size as u32, interleaved)
        .ok_or_else(|| Error::shape("pixel buffer does not match image size"))?;
    let mut bytes = Vec::new();
    img.write_to(&mut std::io::Cursor::new(&mut bytes), image::ImageFormat::Png)?;
    Ok(bytes)
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub(crate) fn write(ds: &SyntheticDataset, dir: &Path) -> Result<DatasetManifest> {
    let cfg = &ds.config;
    let mut splits = Vec::new();
    let mut raw = ds.raw().iter();
    for split in [Split::Train, Split::Test] {
        let mut items = Vec::new();
        for (i, img) in ds.dataset.split(split).iter().enumerate() {
            let file = format!("{}/{:05}.png", split.name(), i);
            let png = encode_png(raw.next().expect("one raw buffer per image"), cfg.image_size)?;
            write_file(&dir.join(&file), &png)?;
            items.push(ItemRecord {
                file,
                label: img.label,
                sha256: hex::encode(Sha256::digest(&png)),
                parts: img.parts.iter().map(part_record).collect(),
            });
        }
        splits.push(SplitRecord { name: split, items });
    }
    let manifest = DatasetManifest {
        version: MANIFEST_VERSION,
        tool_version: crate::TOOL_VERSION.to_string(),
        classes: cfg.classes,
        parts: cfg.parts,
        image_size: cfg.image_size,
        seed: cfg.seed,
        generator: cfg.clone(),
        splits,
    };
    let json = serde_json::to_string_pretty(&manifest)?;
    write_file(&dir.join("manifest.json"), json.as_bytes())?;
    Ok(manifest)
}

fn decode_png(path: &Path, bytes: &[u8], size: usize) -> Result<Vec<u8>> {
    let img = image::load_from_memory_with_format(bytes, image::ImageFormat::Png)
        .map_err(|e| Error::data(path, format!("cannot decode PNG: {e}")))?;
    if img.width() as usize != size || img.height() as usize != size {
        return Err(Error::data(
            path,
            format!("image is {}x{}, manifest declares {size}x{size}", img.width(), img.height()),
        ));
    }
    let rgb = img.as_rgb8().ok_or_else(|| Error::data(path, "expected an 8-bit RGB PNG"))?;
    let plane = size * size;
    let mut out = vec![0u8; 3 * plane];
    for (i, px) in rgb.pixels().enumerate() {
        for ch in 0..3 {
            out[ch * plane + i] = px.0[ch];
        }
    }
    Ok(out)
}

fn parse_parts(path: &Path, m: &DatasetManifest, records: &[PartRecord]) -> Result<Vec<PartAnnotation>> {
    let mut seen = vec![false; m.parts];
    let mut parts = Vec::with_capacity(records.len());
    for r in records {
        if r.id >= m.parts || std::mem::replace(&mut seen[r.id], true) {
            return Err(Error::data(path, format!("bad or duplicate part id {}", r.id)));
        }
        let location = match (r.visible, r.x, r.y) {
            (true, Some(x), Some(y)) => {
                let s = m.image_size as f64;
                if !(0.0..s).contains(&x) || !(0.0..s).contains(&y) {
                    return Err(Error::data(path, format!("part {} at ({x}, {y}) outside the image", r.id)));
                }
                Some(Point::new(x, y))
            }
            (false, _, _) => None,
            _ => return Err(Error::data(path, format!("visible part {} lacks coordinates", r.id))),
        };
        parts.push(PartAnnotation { id: r.id, location });
    }
    Ok(parts)
}

pub(crate) fn load(manifest_path: &Path) -> Result<Dataset> {
    let text = fs::read_to_string(manifest_path).map_err(|e| Error::io(manifest_path, e))?;
    let m: DatasetManifest =
        serde_json::from_str(&text).map_err(|e| Error::data(manifest_path, format!("invalid manifest: {e}")))?;
    if m.version != MANIFEST_VERSION {
        return Err(Error::data(
            manifest_path,
            format!("manifest version {} is not supported (expected {MANIFEST_VERSION})", m.version),
        ));
    }
    let root: PathBuf = manifest_path.parent().map(Path::to_path_buf).unwrap_or_default();
    let mut images = Vec::new();
    for split in &m.splits {
        for item in &split.items {
            let path = root.join(&item.file);
            let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
            let digest = hex::encode(Sha256::digest(&bytes));
            if digest != item.sha256 {
                return Err(Error::data(&path, "checksum mismatch"));
            }
            if item.label >= m.classes {
                return Err(Error::data(&path, format!("label {} >= K = {}", item.label, m.classes)));
            }
            let raw = decode_png(&path, &bytes, m.image_size)?;
            let parts = parse_parts(&path, &m, &item.parts)?;
            images.push(AnnotatedImage::from_u8(&raw, m.image_size, item.label, parts, split.name)?);
        }
    }
    Dataset::from_images(m.classes, m.parts, m.image_size, images)
}
