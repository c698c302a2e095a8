//! 8-bit grayscale heatmaps with min-max normalization.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use anyhow::Context;
use serde::Serialize;

#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct Bounds {
    pub file: String,
    pub min: f64,
    pub max: f64,
}

/// Maps `values` onto 0..=255. A constant map renders white when its value
/// is positive and black otherwise.
pub fn normalize(values: &[f64]) -> (Vec<u8>, f64, f64) {
    let min = values.iter().copied().fold(f64::INFINITY, f64::min);
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if values.is_empty() {
        return (Vec::new(), 0.0, 0.0);
    }
    let px = if max > min {
        values.iter().map(|v| ((v - min) / (max - min) * 255.0).round() as u8).collect()
    } else {
        vec![if max > 0.0 { 255 } else { 0 }; values.len()]
    };
    (px, min, max)
}

pub fn pgm_bytes(px: &[u8], width: usize, height: usize) -> Vec<u8> {
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(px);
    out
}

fn write_png(path: &Path, px: &[u8], width: usize, height: usize) -> anyhow::Result<()> {
    let w = BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?);
    let mut enc = png::Encoder::new(w, width as u32, height as u32);
    enc.set_color(png::ColorType::Grayscale);
    enc.set_depth(png::BitDepth::Eight);
    let mut writer = enc.write_header()?;
    writer.write_image_data(px)?;
    writer.finish()?;
    Ok(())
}

/// Writes `<stem>.pgm` (and `<stem>.png`) under `dir`, returning the bounds.
pub fn write_map(dir: &Path, stem: &str, values: &[f64], width: usize, height: usize, png: bool) -> anyhow::Result<Bounds> {
    let (px, min, max) = normalize(values);
    let pgm = dir.join(format!("{stem}.pgm"));
    let mut f = File::create(&pgm).with_context(|| format!("creating {}", pgm.display()))?;
    f.write_all(&pgm_bytes(&px, width, height))?;
    if png {
        write_png(&dir.join(format!("{stem}.png")), &px, width, height)?;
    }
    Ok(Bounds { file: format!("{stem}.pgm"), min, max })
}
