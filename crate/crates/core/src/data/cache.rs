//! On-disk dataset cache: one directory per split with a JSON manifest,
//! raw float images and 8-bit PNG label masks.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::image::{Image, Mask};
use super::splits::{make_splits, SplitMode};
use super::synthetic::{generate_sample, SyntheticSpec};
use super::{Dataset, Sample};
use crate::error::{Error, Result};

pub const MANIFEST: &str = "manifest.json";
pub const MANIFEST_VERSION: u32 = 1;
const IMAGE_MAGIC: &[u8; 8] = b"RSIMG001";

/// Input of `gen-data`: what to generate and how to split it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataSpec {
    pub synthetic: SyntheticSpec,
    pub count: usize,
    #[serde(default)]
    pub split: Option<SplitMode>,
    #[serde(default)]
    pub split_seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestItem {
    pub id: String,
    pub index: u64,
    pub seed: u64,
    pub image: String,
    pub mask: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub spec: SyntheticSpec,
    pub spec_hash: String,
    pub items: Vec<ManifestItem>,
}

pub fn write_image(path: &Path, img: &Image) -> Result<()> {
    let mut buf = Vec::with_capacity(20 + img.data.len() * 4);
    buf.extend_from_slice(IMAGE_MAGIC);
    for d in [3u32, img.h as u32, img.w as u32] {
        buf.extend_from_slice(&d.to_le_bytes());
    }
    for v in &img.data {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn read_image(path: &Path) -> Result<Image> {
    let mut buf = Vec::new();
    File::open(path)
        .and_then(|mut f| f.read_to_end(&mut buf))
        .map_err(|e| Error::io(path, e))?;
    let bad = || Error::Serde(format!("{}: not a float image", path.display()));
    if buf.len() < 20 || &buf[..8] != IMAGE_MAGIC {
        return Err(bad());
    }
    let dim = |k: usize| u32::from_le_bytes(buf[8 + 4 * k..12 + 4 * k].try_into().expect("4 bytes")) as usize;
    let (c, h, w) = (dim(0), dim(1), dim(2));
    if c != 3 || buf.len() != 20 + 4 * c * h * w {
        return Err(bad());
    }
    let data = buf[20..]
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
        .collect();
    Ok(Image { h, w, data })
}

pub fn write_mask(path: &Path, mask: &Mask) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut enc = png::Encoder::new(BufWriter::new(file), mask.w as u32, mask.h as u32);
    enc.set_color(png::ColorType::Grayscale);
    enc.set_depth(png::BitDepth::Eight);
    let png_err = |e: png::EncodingError| Error::Serde(format!("{}: {e}", path.display()));
    let mut writer = enc.write_header().map_err(png_err)?;
    writer.write_image_data(&mask.labels).map_err(png_err)?;
    writer.finish().map_err(png_err)
}

pub fn read_mask(path: &Path) -> Result<Mask> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let png_err = |e: png::DecodingError| Error::Serde(format!("{}: {e}", path.display()));
    let mut reader = png::Decoder::new(BufReader::new(file)).read_info().map_err(png_err)?;
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| Error::Serde(format!("{}: image too large", path.display())))?;
    let mut buf = vec![0; size];
    let info = reader.next_frame(&mut buf).map_err(png_err)?;
    if info.color_type != png::ColorType::Grayscale || info.bit_depth != png::BitDepth::Eight {
        return Err(Error::Serde(format!("{}: expected 8-bit grayscale", path.display())));
    }
    buf.truncate(info.buffer_size());
    Ok(Mask {
        h: info.height as usize,
        w: info.width as usize,
        labels: buf,
    })
}

/// Writes `indices` of the spec's sample stream into `dir`.
pub fn write_split(dir: &Path, spec: &SyntheticSpec, indices: &[usize]) -> Result<Manifest> {
    for sub in ["images", "masks"] {
        fs::create_dir_all(dir.join(sub)).map_err(|e| Error::io(dir.join(sub), e))?;
    }
    let mut items = Vec::with_capacity(indices.len());
    for &i in indices {
        let id = format!("{i:05}");
        let (image, mask) = generate_sample(spec, i as u64);
        let item = ManifestItem {
            image: format!("images/{id}.f32"),
            mask: format!("masks/{id}.png"),
            id,
            index: i as u64,
            seed: spec.seed,
        };
        write_image(&dir.join(&item.image), &image)?;
        write_mask(&dir.join(&item.mask), &mask)?;
        items.push(item);
    }
    let manifest = Manifest {
        version: MANIFEST_VERSION,
        spec: spec.clone(),
        spec_hash: spec.hash(),
        items,
    };
    let path = dir.join(MANIFEST);
    let json = serde_json::to_string_pretty(&manifest).map_err(|e| Error::Serde(e.to_string()))?;
    let mut f = File::create(&path).map_err(|e| Error::io(&path, e))?;
    f.write_all(json.as_bytes()).map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

/// Generates the dataset described by `spec` under `out`. Returns the split
/// directories: `all`, or `train`/`test` for a holdout, or `fold{i}` holding
/// each fold's test indices.
pub fn generate_dataset(spec: &DataSpec, out: &Path) -> Result<Vec<PathBuf>> {
    spec.synthetic.validate()?;
    let groups: Vec<(String, Vec<usize>)> = match spec.split {
        None => vec![("all".into(), (0..spec.count).collect())],
        Some(mode @ SplitMode::Holdout { .. }) => {
            let s = make_splits(spec.count, mode, spec.split_seed)?.remove(0);
            vec![("train".into(), s.train), ("test".into(), s.test)]
        }
        Some(mode @ SplitMode::Kfold { .. }) => make_splits(spec.count, mode, spec.split_seed)?
            .into_iter()
            .enumerate()
            .map(|(f, s)| (format!("fold{f}"), s.test))
            .collect(),
    };
    let mut dirs = Vec::new();
    for (name, idx) in groups {
        let dir = out.join(name);
        write_split(&dir, &spec.synthetic, &idx)?;
        dirs.push(dir);
    }
    Ok(dirs)
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let m: Manifest = serde_json::from_str(&text).map_err(|e| Error::Serde(format!("{}: {e}", path.display())))?;
    if m.version != MANIFEST_VERSION {
        return Err(Error::Serde(format!("manifest version {} unsupported", m.version)));
    }
    if m.spec.hash() != m.spec_hash {
        return Err(Error::HashMismatch {
            expected: m.spec_hash.clone(),
            actual: m.spec.hash(),
        });
    }
    Ok(m)
}

/// Loads a split directory written by [`write_split`].
pub fn load_split(dir: &Path) -> Result<Dataset> {
    let m = read_manifest(dir)?;
    let classes = m.spec.classes();
    let mut samples = Vec::with_capacity(m.items.len());
    for item in &m.items {
        let image = read_image(&dir.join(&item.image))?;
        let mask = read_mask(&dir.join(&item.mask))?;
        if let Some(&l) = mask.labels.iter().find(|&&l| l as usize > classes) {
            return Err(Error::LabelOutOfRange { label: l, classes: classes + 1 });
        }
        samples.push(Sample {
            id: item.id.clone(),
            image,
            mask,
        });
    }
    Ok(Dataset { classes, samples })
}
