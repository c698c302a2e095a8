//! Complex scalar fields on uniform grids, the 2D DFT convention and
//! intensity extraction.
//!
//! Samples are stored row-major: index `y * nx + x`. The forward transform
//! is unnormalized, the inverse carries the `1/(nx*ny)` factor, and the DC
//! bin sits at index `(0, 0)`.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use serde::{Deserialize, Serialize};

use crate::error::{config_err, Error, Result};
use crate::fft;
use crate::Complex;

pub const FIELD_MAGIC: &[u8; 4] = b"BSF1";

/// Sampling grid: `nx` columns, `ny` rows, square pixels of `pitch` micrometers.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    pub nx: usize,
    pub ny: usize,
    /// Pixel pitch in micrometers.
    pub pitch: f64,
}

impl GridSpec {
    pub fn new(nx: usize, ny: usize, pitch: f64) -> Result<Self> {
        let g = GridSpec { nx, ny, pitch };
        g.validate()?;
        Ok(g)
    }

    pub fn validate(&self) -> Result<()> {
        if self.nx < 2 || self.ny < 2 {
            return config_err(format!("grid {}x{} is smaller than 2x2", self.nx, self.ny));
        }
        if self.nx % 2 != 0 || self.ny % 2 != 0 {
            return config_err(format!("grid {}x{} must have even dimensions", self.nx, self.ny));
        }
        if !(self.pitch > 0.0 && self.pitch.is_finite()) {
            return config_err(format!("pitch {} must be positive", self.pitch));
        }
        Ok(())
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.nx * self.ny
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Grid twice as large in each direction, same pitch.
    pub fn padded(&self) -> GridSpec {
        GridSpec { nx: 2 * self.nx, ny: 2 * self.ny, pitch: self.pitch }
    }

    /// Spatial frequency (cycles per micrometer) of DFT bin `i` along an
    /// axis of `n` samples.
    pub fn freq(n: usize, pitch: f64, i: usize) -> f64 {
        let k = if i < n / 2 { i as i64 } else { i as i64 - n as i64 };
        k as f64 / (n as f64 * pitch)
    }

    /// Physical coordinate of sample `i` on a zero-centered axis, in the
    /// wrapped (DFT) ordering: index 0 is the origin.
    pub fn wrapped_coord(n: usize, pitch: f64, i: usize) -> f64 {
        let k = if i < n / 2 { i as i64 } else { i as i64 - n as i64 };
        k as f64 * pitch
    }
}

/// A monochromatic complex amplitude on a grid.
#[derive(Debug, Clone, PartialEq)]
pub struct ComplexField {
    pub grid: GridSpec,
    /// Wavelength in micrometers.
    pub wavelength: f64,
    pub samples: Vec<Complex>,
}

impl ComplexField {
    pub fn new(grid: GridSpec, wavelength: f64, samples: Vec<Complex>) -> Result<Self> {
        grid.validate()?;
        if samples.len() != grid.len() {
            return config_err(format!(
                "field has {} samples, grid {}x{} needs {}",
                samples.len(),
                grid.nx,
                grid.ny,
                grid.len()
            ));
        }
        if !(wavelength > 0.0 && wavelength.is_finite()) {
            return config_err(format!("wavelength {wavelength} must be positive"));
        }
        if samples.iter().any(|c| !c.re.is_finite() || !c.im.is_finite()) {
            return Err(Error::Numeric("field contains non-finite samples".into()));
        }
        Ok(ComplexField { grid, wavelength, samples })
    }

    pub fn zeros(grid: GridSpec, wavelength: f64) -> Self {
        ComplexField { grid, wavelength, samples: vec![Complex::default(); grid.len()] }
    }

    pub fn from_fn(grid: GridSpec, wavelength: f64, mut f: impl FnMut(usize, usize) -> Complex) -> Self {
        let mut samples = Vec::with_capacity(grid.len());
        for y in 0..grid.ny {
            for x in 0..grid.nx {
                samples.push(f(x, y));
            }
        }
        ComplexField { grid, wavelength, samples }
    }

    #[inline]
    pub fn at(&self, x: usize, y: usize) -> Complex {
        self.samples[y * self.grid.nx + x]
    }

    /// Same samples, different wavelength tag.
    pub fn retagged(&self, wavelength: f64) -> Self {
        ComplexField { grid: self.grid, wavelength, samples: self.samples.clone() }
    }

    /// Sum of squared moduli.
    pub fn energy(&self) -> f64 {
        self.samples.iter().map(|c| c.norm_sqr()).sum()
    }

    pub fn scaled(&self, s: Complex) -> Self {
        ComplexField {
            grid: self.grid,
            wavelength: self.wavelength,
            samples: self.samples.iter().map(|c| c * s).collect(),
        }
    }

    /// `⟨self, other⟩ = Σ conj(self)·other`.
    pub fn inner(&self, other: &ComplexField) -> Complex {
        self.samples.iter().zip(&other.samples).map(|(a, b)| a.conj() * b).sum()
    }

    /// Spectrum with DC moved to the grid center.
    pub fn centered(&self) -> Self {
        let (nx, ny) = (self.grid.nx, self.grid.ny);
        Self::from_fn(self.grid, self.wavelength, |x, y| {
            self.at((x + nx / 2) % nx, (y + ny / 2) % ny)
        })
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        w.write_all(FIELD_MAGIC)?;
        w.write_u32::<LittleEndian>(self.grid.nx as u32)?;
        w.write_u32::<LittleEndian>(self.grid.ny as u32)?;
        w.write_f64::<LittleEndian>(self.grid.pitch)?;
        w.write_f64::<LittleEndian>(self.wavelength)?;
        for c in &self.samples {
            w.write_f64::<LittleEndian>(c.re)?;
            w.write_f64::<LittleEndian>(c.im)?;
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl Read, path: &Path) -> Result<Self> {
        let fmt = |reason: String| Error::Format { path: path.to_path_buf(), reason };
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).map_err(|e| fmt(format!("missing header: {e}")))?;
        if &magic != FIELD_MAGIC {
            return Err(fmt(format!("bad magic {magic:?}, expected BSF1")));
        }
        let read = |r: &mut dyn Read| -> std::io::Result<(u32, u32, f64, f64)> {
            Ok((
                r.read_u32::<LittleEndian>()?,
                r.read_u32::<LittleEndian>()?,
                r.read_f64::<LittleEndian>()?,
                r.read_f64::<LittleEndian>()?,
            ))
        };
        let (nx, ny, pitch, wavelength) = read(r).map_err(|e| fmt(format!("truncated header: {e}")))?;
        let grid = GridSpec::new(nx as usize, ny as usize, pitch).map_err(|e| fmt(e.to_string()))?;
        let mut samples = Vec::with_capacity(grid.len());
        for _ in 0..grid.len() {
            let re = r.read_f64::<LittleEndian>().map_err(|e| fmt(format!("truncated samples: {e}")))?;
            let im = r.read_f64::<LittleEndian>().map_err(|e| fmt(format!("truncated samples: {e}")))?;
            samples.push(Complex::new(re, im));
        }
        ComplexField::new(grid, wavelength, samples).map_err(|e| fmt(e.to_string()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut r = BufReader::new(File::open(path)?);
        Self::read_from(&mut r, path)
    }
}

/// Non-negative real map on a grid, typically `|field|²`.
#[derive(Debug, Clone, PartialEq)]
pub struct IntensityMap {
    pub grid: GridSpec,
    pub values: Vec<f64>,
}

impl IntensityMap {
    pub fn zeros(grid: GridSpec) -> Self {
        IntensityMap { grid, values: vec![0.0; grid.len()] }
    }

    #[inline]
    pub fn at(&self, x: usize, y: usize) -> f64 {
        self.values[y * self.grid.nx + x]
    }

    pub fn total(&self) -> f64 {
        self.values.iter().sum()
    }
}

/// Sorted set of working wavelengths (micrometers).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct ChannelSet {
    wavelengths: Vec<f64>,
}

impl ChannelSet {
    pub fn new(wavelengths: Vec<f64>) -> Result<Self> {
        if wavelengths.is_empty() {
            return config_err("channel set is empty");
        }
        if wavelengths.iter().any(|&l| !(l > 0.0 && l.is_finite())) {
            return config_err(format!("wavelengths must be positive: {wavelengths:?}"));
        }
        if wavelengths.windows(2).any(|w| w[0] >= w[1]) {
            return config_err(format!("wavelengths must be strictly increasing: {wavelengths:?}"));
        }
        Ok(ChannelSet { wavelengths })
    }

    pub fn wavelengths(&self) -> &[f64] {
        &self.wavelengths
    }

    pub fn len(&self) -> usize {
        self.wavelengths.len()
    }

    pub fn is_empty(&self) -> bool {
        self.wavelengths.is_empty()
    }

    pub fn max(&self) -> f64 {
        *self.wavelengths.last().unwrap()
    }

    /// Middle element; the lower-middle one when the count is even.
    pub fn median(&self) -> f64 {
        self.wavelengths[(self.wavelengths.len() - 1) / 2]
    }

    pub fn index_of(&self, wavelength: f64) -> Option<usize> {
        self.wavelengths.iter().position(|&l| l == wavelength)
    }
}

impl TryFrom<Vec<f64>> for ChannelSet {
    type Error = Error;
    fn try_from(v: Vec<f64>) -> Result<Self> {
        ChannelSet::new(v)
    }
}

impl From<ChannelSet> for Vec<f64> {
    fn from(c: ChannelSet) -> Self {
        c.wavelengths
    }
}

pub fn dft2_forward(field: &ComplexField) -> ComplexField {
    let mut out = field.clone();
    fft::forward_in_place(&mut out.samples, field.grid.nx, field.grid.ny);
    out
}

pub fn dft2_inverse(spectrum: &ComplexField) -> ComplexField {
    let mut out = spectrum.clone();
    fft::inverse_in_place(&mut out.samples, spectrum.grid.nx, spectrum.grid.ny);
    out
}

pub fn intensity(field: &ComplexField) -> IntensityMap {
    IntensityMap { grid: field.grid, values: field.samples.iter().map(|c| c.norm_sqr()).collect() }
}
