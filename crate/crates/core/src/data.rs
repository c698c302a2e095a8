//! Fashion-MNIST ingestion (IDX files), the train/validation split and
//! amplitude encoding of images into input fields.

use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use byteorder::{BigEndian, ReadBytesExt, WriteBytesExt};
use flate2::read::GzDecoder;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{config_err, Error, Result};
use crate::field::{ComplexField, GridSpec};
use crate::Complex;

pub const IMAGE_SIDE: usize = 28;
pub const IMAGE_PIXELS: usize = IMAGE_SIDE * IMAGE_SIDE;
pub const IMAGES_MAGIC: u32 = 0x0000_0803;
pub const LABELS_MAGIC: u32 = 0x0000_0801;
pub const TRAIN_SIZE: usize = 55_000;
pub const VALIDATION_SIZE: usize = 5_000;

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct LabeledImage {
    /// 28×28 grayscale, row-major.
    pub pixels: Vec<u8>,
    pub label: u8,
}

#[derive(Debug, Clone, Default)]
pub struct DatasetSplit {
    pub train: Vec<LabeledImage>,
    pub validation: Vec<LabeledImage>,
    pub test: Vec<LabeledImage>,
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    let mut raw = Vec::new();
    File::open(path)
        .map_err(|e| Error::Dataset(format!("cannot open {}: {e}", path.display())))?
        .read_to_end(&mut raw)?;
    if raw.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        GzDecoder::new(raw.as_slice())
            .read_to_end(&mut out)
            .map_err(|e| Error::Format { path: path.to_path_buf(), reason: format!("bad gzip stream: {e}") })?;
        return Ok(out);
    }
    Ok(raw)
}

fn format_err(path: &Path, reason: impl Into<String>) -> Error {
    Error::Format { path: path.to_path_buf(), reason: reason.into() }
}

fn read_header(bytes: &[u8], path: &Path, magic: u32, dims: usize) -> Result<Vec<usize>> {
    let mut cur = bytes;
    let trunc = |_| format_err(path, "truncated header");
    let found = cur.read_u32::<BigEndian>().map_err(trunc)?;
    if found != magic {
        return Err(format_err(path, format!("bad magic 0x{found:08x}, expected 0x{magic:08x}")));
    }
    (0..dims).map(|_| cur.read_u32::<BigEndian>().map(|d| d as usize).map_err(trunc)).collect()
}

pub fn read_idx_images(path: &Path) -> Result<Vec<Vec<u8>>> {
    let bytes = read_file(path)?;
    let dims = read_header(&bytes, path, IMAGES_MAGIC, 3)?;
    if dims[1] != IMAGE_SIDE || dims[2] != IMAGE_SIDE {
        return Err(format_err(path, format!("images are {}x{}, expected 28x28", dims[1], dims[2])));
    }
    let body = &bytes[16..];
    let n = dims[0];
    if body.len() < n * IMAGE_PIXELS {
        return Err(format_err(path, format!("truncated: header declares {n} images, file holds {}", body.len() / IMAGE_PIXELS)));
    }
    Ok(body[..n * IMAGE_PIXELS].chunks_exact(IMAGE_PIXELS).map(<[u8]>::to_vec).collect())
}

pub fn read_idx_labels(path: &Path) -> Result<Vec<u8>> {
    let bytes = read_file(path)?;
    let dims = read_header(&bytes, path, LABELS_MAGIC, 1)?;
    let body = &bytes[8..];
    let n = dims[0];
    if body.len() < n {
        return Err(format_err(path, format!("truncated: header declares {n} labels, file holds {}", body.len())));
    }
    if let Some(bad) = body[..n].iter().find(|&&l| l > 9) {
        return Err(format_err(path, format!("label {bad} out of range 0..=9")));
    }
    Ok(body[..n].to_vec())
}

/// Reads an images/labels IDX pair (optionally gzip-compressed).
pub fn load_idx(images: &Path, labels: &Path) -> Result<Vec<LabeledImage>> {
    let imgs = read_idx_images(images)?;
    let labs = read_idx_labels(labels)?;
    if imgs.len() != labs.len() {
        return Err(Error::Dataset(format!(
            "count mismatch: {} has {} images, {} has {} labels",
            images.display(),
            imgs.len(),
            labels.display(),
            labs.len()
        )));
    }
    Ok(imgs.into_iter().zip(labs).map(|(pixels, label)| LabeledImage { pixels, label }).collect())
}

/// Writes an uncompressed IDX pair.
pub fn write_idx(images: &Path, labels: &Path, items: &[LabeledImage]) -> Result<()> {
    let mut w = BufWriter::new(File::create(images)?);
    w.write_u32::<BigEndian>(IMAGES_MAGIC)?;
    w.write_u32::<BigEndian>(items.len() as u32)?;
    w.write_u32::<BigEndian>(IMAGE_SIDE as u32)?;
    w.write_u32::<BigEndian>(IMAGE_SIDE as u32)?;
    for it in items {
        if it.pixels.len() != IMAGE_PIXELS {
            return config_err("image does not have 784 pixels");
        }
        w.write_all(&it.pixels)?;
    }
    w.flush()?;
    let mut w = BufWriter::new(File::create(labels)?);
    w.write_u32::<BigEndian>(LABELS_MAGIC)?;
    w.write_u32::<BigEndian>(items.len() as u32)?;
    for it in items {
        w.write_u8(it.label)?;
    }
    w.flush()?;
    Ok(())
}

/// Seeded shuffle of the 60,000 training images into 55,000 train and
/// 5,000 validation items.
pub fn split_train_val(train: Vec<LabeledImage>, seed: u64) -> Result<(Vec<LabeledImage>, Vec<LabeledImage>)> {
    if train.len() != TRAIN_SIZE + VALIDATION_SIZE {
        return Err(Error::Dataset(format!(
            "expected {} training images, got {}",
            TRAIN_SIZE + VALIDATION_SIZE,
            train.len()
        )));
    }
    let mut items = train;
    items.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let validation = items.split_off(TRAIN_SIZE);
    Ok((items, validation))
}

/// Integer upscaling factor and offset placing the image in the central
/// 80% of the grid (at least 1×).
fn placement(grid: GridSpec) -> (usize, usize, usize) {
    let side = grid.nx.min(grid.ny);
    let scale = ((0.8 * side as f64) as usize / IMAGE_SIDE).max(1);
    let span = scale * IMAGE_SIDE;
    (scale, (grid.nx - span) / 2, (grid.ny - span) / 2)
}

/// Amplitude pattern of an image: pixel/255 with zero phase, nearest-
/// neighbor upscaled, normalized to unit energy (left at zero when dark).
pub fn encode_pattern(image: &LabeledImage, grid: GridSpec) -> Result<Vec<Complex>> {
    if grid.nx < IMAGE_SIDE || grid.ny < IMAGE_SIDE {
        return config_err(format!("grid {}x{} is smaller than 28x28", grid.nx, grid.ny));
    }
    if image.pixels.len() != IMAGE_PIXELS {
        return config_err("image does not have 784 pixels");
    }
    let (scale, ox, oy) = placement(grid);
    let mut out = vec![Complex::default(); grid.len()];
    let mut energy = 0.0;
    for r in 0..IMAGE_SIDE {
        for c in 0..IMAGE_SIDE {
            let a = image.pixels[r * IMAGE_SIDE + c] as f64 / 255.0;
            if a == 0.0 {
                continue;
            }
            for dy in 0..scale {
                let row = (oy + r * scale + dy) * grid.nx;
                for dx in 0..scale {
                    out[row + ox + c * scale + dx] = Complex::new(a, 0.0);
                }
            }
            energy += a * a * (scale * scale) as f64;
        }
    }
    if energy > 0.0 {
        let s = 1.0 / energy.sqrt();
        out.iter_mut().for_each(|v| *v *= s);
    }
    Ok(out)
}

pub fn encode_image(image: &LabeledImage, grid: GridSpec, wavelength: f64) -> Result<ComplexField> {
    let samples = encode_pattern(image, grid)?;
    ComplexField::new(grid, wavelength, samples)
}
