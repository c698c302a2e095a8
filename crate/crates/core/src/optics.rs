//! Free-space propagation and dispersive phase masks.
//!
//! Two transfer functions realize the same scalar diffraction operator:
//! the FFT of the sampled Rayleigh-Sommerfeld kernel, and the analytic
//! angular-spectrum multiplier. Both act on spectra laid out with DC at
//! index `(0, 0)`.

use std::f64::consts::PI;
use std::io::{Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{config_err, Error, Result};
use crate::fft;
use crate::field::{ComplexField, GridSpec};
use crate::Complex;

pub const MASK_MAGIC: &[u8; 4] = b"BSM1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scheme {
    RsKernelFft,
    AngularSpectrum,
}

/// Frequency-domain multiplier for one (wavelength, distance) pair.
#[derive(Debug, Clone, PartialEq)]
pub struct TransferFunction {
    pub grid: GridSpec,
    pub wavelength: f64,
    pub distance: f64,
    pub values: Vec<Complex>,
    pub scheme: Scheme,
}

fn check_propagation_args(wavelength: f64, z: f64, n_medium: f64) -> Result<()> {
    if !(wavelength > 0.0 && wavelength.is_finite()) {
        return config_err(format!("wavelength {wavelength} must be positive"));
    }
    if !(z > 0.0 && z.is_finite()) {
        return config_err(format!("propagation distance {z} must be positive"));
    }
    if !(n_medium > 0.0 && n_medium.is_finite()) {
        return config_err(format!("medium index {n_medium} must be positive"));
    }
    Ok(())
}

/// Spatial Rayleigh-Sommerfeld kernel `z·exp(jkr)/(jλr²)` at the pixel
/// centers of a zero-centered grid (origin at index 0), weighted by the
/// pixel area.
pub fn rs_kernel(grid: GridSpec, wavelength: f64, z: f64, n_medium: f64) -> Vec<Complex> {
    let k = 2.0 * PI * n_medium / wavelength;
    let area = grid.pitch * grid.pitch;
    let mut h = Vec::with_capacity(grid.len());
    for iy in 0..grid.ny {
        let y = GridSpec::wrapped_coord(grid.ny, grid.pitch, iy);
        for ix in 0..grid.nx {
            let x = GridSpec::wrapped_coord(grid.nx, grid.pitch, ix);
            let r2 = x * x + y * y + z * z;
            let r = r2.sqrt();
            let amp = z * area / (wavelength * r2);
            // 1/j = -j
            h.push(Complex::from_polar(amp, k * r) * Complex::new(0.0, -1.0));
        }
    }
    h
}

pub fn build_transfer_rs(grid: GridSpec, wavelength: f64, z: f64, n_medium: f64) -> Result<TransferFunction> {
    grid.validate()?;
    check_propagation_args(wavelength, z, n_medium)?;
    let mut values = rs_kernel(grid, wavelength, z, n_medium);
    fft::forward_in_place(&mut values, grid.nx, grid.ny);
    Ok(TransferFunction { grid, wavelength, distance: z, values, scheme: Scheme::RsKernelFft })
}

pub fn build_transfer_as(grid: GridSpec, wavelength: f64, z: f64, n_medium: f64) -> Result<TransferFunction> {
    grid.validate()?;
    check_propagation_args(wavelength, z, n_medium)?;
    let k = 2.0 * PI * n_medium / wavelength;
    let mut values = Vec::with_capacity(grid.len());
    for iy in 0..grid.ny {
        let fy = GridSpec::freq(grid.ny, grid.pitch, iy) * wavelength / n_medium;
        for ix in 0..grid.nx {
            let fx = GridSpec::freq(grid.nx, grid.pitch, ix) * wavelength / n_medium;
            let arg = 1.0 - fx * fx - fy * fy;
            values.push(if arg >= 0.0 {
                Complex::from_polar(1.0, k * z * arg.sqrt())
            } else {
                Complex::new((-k * z * (-arg).sqrt()).exp(), 0.0)
            });
        }
    }
    Ok(TransferFunction { grid, wavelength, distance: z, values, scheme: Scheme::AngularSpectrum })
}

pub fn build_transfer(scheme: Scheme, grid: GridSpec, wavelength: f64, z: f64, n_medium: f64) -> Result<TransferFunction> {
    match scheme {
        Scheme::RsKernelFft => build_transfer_rs(grid, wavelength, z, n_medium),
        Scheme::AngularSpectrum => build_transfer_as(grid, wavelength, z, n_medium),
    }
}

fn check_match(field: &ComplexField, tf: &TransferFunction) -> Result<()> {
    if field.grid != tf.grid {
        return config_err(format!("field grid {:?} does not match transfer grid {:?}", field.grid, tf.grid));
    }
    if field.wavelength != tf.wavelength {
        return config_err(format!(
            "field wavelength {} does not match transfer wavelength {}",
            field.wavelength, tf.wavelength
        ));
    }
    Ok(())
}

fn filter_in_place(data: &mut [Complex], grid: GridSpec, values: &[Complex], conjugate: bool) {
    fft::forward_in_place(data, grid.nx, grid.ny);
    if conjugate {
        data.iter_mut().zip(values).for_each(|(d, h)| *d *= h.conj());
    } else {
        data.iter_mut().zip(values).for_each(|(d, h)| *d *= h);
    }
    fft::inverse_in_place(data, grid.nx, grid.ny);
}

/// `F⁻¹[F[field]·H]`.
pub fn propagate(field: &ComplexField, tf: &TransferFunction) -> Result<ComplexField> {
    check_match(field, tf)?;
    let mut out = field.clone();
    filter_in_place(&mut out.samples, tf.grid, &tf.values, false);
    Ok(out)
}

/// Adjoint of [`propagate`]: `F⁻¹[F[cotangent]·conj(H)]`.
pub fn adjoint_propagate(cotangent: &ComplexField, tf: &TransferFunction) -> Result<ComplexField> {
    check_match(cotangent, tf)?;
    let mut out = cotangent.clone();
    filter_in_place(&mut out.samples, tf.grid, &tf.values, true);
    Ok(out)
}

/// A propagation step on a fixed grid, optionally evaluated on a 2×
/// zero-padded grid to suppress circular wrap-around.
#[derive(Debug, Clone)]
pub struct Propagator {
    grid: GridSpec,
    padded: bool,
    tf: TransferFunction,
}

impl Propagator {
    pub fn new(scheme: Scheme, grid: GridSpec, wavelength: f64, z: f64, n_medium: f64, padded: bool) -> Result<Self> {
        let tf_grid = if padded { grid.padded() } else { grid };
        let tf = build_transfer(scheme, tf_grid, wavelength, z, n_medium)?;
        Ok(Propagator { grid, padded, tf })
    }

    pub fn transfer(&self) -> &TransferFunction {
        &self.tf
    }

    pub fn grid(&self) -> GridSpec {
        self.grid
    }

    fn run(&self, data: &mut [Complex], conjugate: bool) {
        debug_assert_eq!(data.len(), self.grid.len());
        if !self.padded {
            filter_in_place(data, self.grid, &self.tf.values, conjugate);
            return;
        }
        let (nx, ny) = (self.grid.nx, self.grid.ny);
        let big = self.tf.grid;
        let (ox, oy) = (nx / 2, ny / 2);
        let mut buf = vec![Complex::default(); big.len()];
        for y in 0..ny {
            buf[(y + oy) * big.nx + ox..(y + oy) * big.nx + ox + nx].copy_from_slice(&data[y * nx..(y + 1) * nx]);
        }
        filter_in_place(&mut buf, big, &self.tf.values, conjugate);
        for y in 0..ny {
            data[y * nx..(y + 1) * nx].copy_from_slice(&buf[(y + oy) * big.nx + ox..(y + oy) * big.nx + ox + nx]);
        }
    }

    pub fn apply_in_place(&self, data: &mut [Complex]) {
        self.run(data, false);
    }

    pub fn adjoint_in_place(&self, data: &mut [Complex]) {
        self.run(data, true);
    }

    pub fn apply(&self, field: &ComplexField) -> Result<ComplexField> {
        self.check(field)?;
        let mut out = field.clone();
        self.apply_in_place(&mut out.samples);
        Ok(out)
    }

    pub fn adjoint(&self, field: &ComplexField) -> Result<ComplexField> {
        self.check(field)?;
        let mut out = field.clone();
        self.adjoint_in_place(&mut out.samples);
        Ok(out)
    }

    fn check(&self, field: &ComplexField) -> Result<()> {
        if field.grid != self.grid || field.wavelength != self.tf.wavelength {
            return config_err("field does not match propagator grid/wavelength");
        }
        Ok(())
    }
}

/// Refractive index of the mask material.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum DispersionKind {
    Constant { n: f64 },
    /// `(wavelength_um, n)` pairs, linearly interpolated, no extrapolation.
    Table { points: Vec<(f64, f64)> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DispersionModel {
    pub kind: DispersionKind,
    pub n_air: f64,
}

impl Default for DispersionModel {
    fn default() -> Self {
        DispersionModel { kind: DispersionKind::Constant { n: 1.5 }, n_air: 1.0 }
    }
}

impl DispersionModel {
    pub fn validate(&self) -> Result<()> {
        if !(self.n_air >= 1.0 && self.n_air.is_finite()) {
            return config_err(format!("n_air {} must be >= 1", self.n_air));
        }
        match &self.kind {
            DispersionKind::Constant { n } => {
                if !(*n > self.n_air && n.is_finite()) {
                    return config_err(format!("material index {n} must exceed n_air {}", self.n_air));
                }
            }
            DispersionKind::Table { points } => {
                if points.len() < 2 {
                    return config_err("dispersion table needs at least two points");
                }
                if points.windows(2).any(|w| w[0].0 >= w[1].0) {
                    return config_err("dispersion table wavelengths must be strictly increasing");
                }
                if points.iter().any(|&(l, n)| !(l > 0.0 && n > self.n_air && n.is_finite())) {
                    return config_err("dispersion table entries must have n > n_air and positive wavelength");
                }
            }
        }
        Ok(())
    }

    /// Material index at `wavelength`.
    pub fn index(&self, wavelength: f64) -> Result<f64> {
        match &self.kind {
            DispersionKind::Constant { n } => Ok(*n),
            DispersionKind::Table { points } => {
                let (first, last) = (points[0].0, points[points.len() - 1].0);
                if wavelength < first || wavelength > last {
                    return config_err(format!(
                        "wavelength {wavelength} um outside dispersion table range [{first}, {last}]"
                    ));
                }
                let i = points.partition_point(|p| p.0 <= wavelength).clamp(1, points.len() - 1);
                let (l0, n0) = points[i - 1];
                let (l1, n1) = points[i];
                Ok(n0 + (n1 - n0) * (wavelength - l0) / (l1 - l0))
            }
        }
    }

    /// Phase per micrometer of height, `2π(n(λ) − n_air)/λ`.
    pub fn phase_per_height(&self, wavelength: f64) -> Result<f64> {
        Ok(2.0 * PI * (self.index(wavelength)? - self.n_air) / wavelength)
    }

    fn write_to(&self, w: &mut impl Write) -> std::io::Result<()> {
        w.write_f64::<LittleEndian>(self.n_air)?;
        match &self.kind {
            DispersionKind::Constant { n } => {
                w.write_u8(0)?;
                w.write_f64::<LittleEndian>(*n)?;
            }
            DispersionKind::Table { points } => {
                w.write_u8(1)?;
                w.write_u32::<LittleEndian>(points.len() as u32)?;
                for &(l, n) in points {
                    w.write_f64::<LittleEndian>(l)?;
                    w.write_f64::<LittleEndian>(n)?;
                }
            }
        }
        Ok(())
    }

    fn read_from(r: &mut impl Read) -> std::io::Result<std::result::Result<Self, String>> {
        let n_air = r.read_f64::<LittleEndian>()?;
        let kind = match r.read_u8()? {
            0 => DispersionKind::Constant { n: r.read_f64::<LittleEndian>()? },
            1 => {
                let count = r.read_u32::<LittleEndian>()? as usize;
                if count > 1 << 20 {
                    return Ok(Err(format!("implausible dispersion table size {count}")));
                }
                let mut points = Vec::with_capacity(count);
                for _ in 0..count {
                    points.push((r.read_f64::<LittleEndian>()?, r.read_f64::<LittleEndian>()?));
                }
                DispersionKind::Table { points }
            }
            other => return Ok(Err(format!("unknown dispersion kind {other}"))),
        };
        Ok(Ok(DispersionModel { kind, n_air }))
    }
}

/// Trainable relative height map of one diffractive layer.
#[derive(Debug, Clone, PartialEq)]
pub struct PhaseMask {
    pub grid: GridSpec,
    /// Heights in micrometers, row-major, within `[0, max_height]`.
    pub heights: Vec<f64>,
    pub dispersion: DispersionModel,
    pub max_height: f64,
}

impl PhaseMask {
    pub fn zeros(grid: GridSpec, dispersion: DispersionModel, max_height: f64) -> Self {
        PhaseMask { grid, heights: vec![0.0; grid.len()], dispersion, max_height }
    }

    /// Heights drawn uniformly from `[0, init_max]`.
    pub fn random(grid: GridSpec, dispersion: DispersionModel, max_height: f64, init_max: f64, rng: &mut impl Rng) -> Self {
        let hi = init_max.min(max_height);
        let heights = (0..grid.len()).map(|_| rng.gen::<f64>() * hi).collect();
        PhaseMask { grid, heights, dispersion, max_height }
    }

    pub fn validate(&self) -> Result<()> {
        self.grid.validate()?;
        self.dispersion.validate()?;
        if self.heights.len() != self.grid.len() {
            return config_err("mask height count does not match grid");
        }
        if !(self.max_height > 0.0 && self.max_height.is_finite()) {
            return config_err(format!("max_height {} must be positive", self.max_height));
        }
        if self.heights.iter().any(|&h| !(0.0..=self.max_height).contains(&h)) {
            return config_err("mask heights outside [0, max_height]");
        }
        Ok(())
    }

    pub fn clamp(&mut self) {
        let hi = self.max_height;
        self.heights.iter_mut().for_each(|h| *h = h.clamp(0.0, hi));
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        w.write_all(MASK_MAGIC)?;
        w.write_u32::<LittleEndian>(self.grid.nx as u32)?;
        w.write_u32::<LittleEndian>(self.grid.ny as u32)?;
        w.write_f64::<LittleEndian>(self.grid.pitch)?;
        w.write_f64::<LittleEndian>(self.max_height)?;
        self.dispersion.write_to(w)?;
        for &h in &self.heights {
            w.write_f64::<LittleEndian>(h)?;
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl Read, path: &Path) -> Result<Self> {
        let fmt = |reason: String| Error::Format { path: path.to_path_buf(), reason };
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).map_err(|e| fmt(format!("missing mask header: {e}")))?;
        if &magic != MASK_MAGIC {
            return Err(fmt(format!("bad magic {magic:?}, expected BSM1")));
        }
        let trunc = |e: std::io::Error| fmt(format!("truncated mask block: {e}"));
        let nx = r.read_u32::<LittleEndian>().map_err(trunc)? as usize;
        let ny = r.read_u32::<LittleEndian>().map_err(trunc)? as usize;
        let pitch = r.read_f64::<LittleEndian>().map_err(trunc)?;
        let max_height = r.read_f64::<LittleEndian>().map_err(trunc)?;
        let dispersion = DispersionModel::read_from(r).map_err(trunc)?.map_err(fmt)?;
        let grid = GridSpec::new(nx, ny, pitch).map_err(|e| fmt(e.to_string()))?;
        let mut heights = Vec::with_capacity(grid.len());
        for _ in 0..grid.len() {
            heights.push(r.read_f64::<LittleEndian>().map_err(trunc)?);
        }
        let mask = PhaseMask { grid, heights, dispersion, max_height };
        mask.validate().map_err(|e| fmt(e.to_string()))?;
        Ok(mask)
    }
}

/// Per-pixel phase delay `w = 2π(n(λ) − n_air)·Δv/λ` in radians.
pub fn phase_coefficients(mask: &PhaseMask, wavelength: f64) -> Result<Vec<f64>> {
    let kappa = mask.dispersion.phase_per_height(wavelength)?;
    Ok(mask.heights.iter().map(|h| kappa * h).collect())
}

/// Unit phasors `exp(j·w)` for a mask at one wavelength.
pub fn mask_phasors(mask: &PhaseMask, wavelength: f64) -> Result<Vec<Complex>> {
    Ok(phase_coefficients(mask, wavelength)?
        .into_iter()
        .map(|w| Complex::from_polar(1.0, w))
        .collect())
}

/// Phase-only modulation `U·exp(j·w)`.
pub fn apply_mask(field: &ComplexField, mask: &PhaseMask) -> Result<ComplexField> {
    if field.grid != mask.grid {
        return config_err("field grid does not match mask grid");
    }
    let phasors = mask_phasors(mask, field.wavelength)?;
    let mut out = field.clone();
    out.samples.iter_mut().zip(&phasors).for_each(|(s, p)| *s *= p);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn grid(n: usize, pitch: f64) -> GridSpec {
        GridSpec::new(n, n, pitch).unwrap()
    }

    fn random_field(g: GridSpec, wavelength: f64, seed: u64) -> ComplexField {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ComplexField::from_fn(g, wavelength, |_, _| Complex::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)))
    }

    /// Random field whose spectrum is confined to propagating frequencies.
    fn band_limited(g: GridSpec, wavelength: f64, seed: u64) -> ComplexField {
        let mut spec = crate::field::dft2_forward(&random_field(g, wavelength, seed));
        for iy in 0..g.ny {
            for ix in 0..g.nx {
                let fx = GridSpec::freq(g.nx, g.pitch, ix) * wavelength;
                let fy = GridSpec::freq(g.ny, g.pitch, iy) * wavelength;
                if fx * fx + fy * fy > 0.8 {
                    spec.samples[iy * g.nx + ix] = Complex::default();
                }
            }
        }
        crate::field::dft2_inverse(&spec)
    }

    fn rel(a: Complex, b: Complex) -> f64 {
        (a - b).norm() / b.norm().max(1e-300)
    }

    fn rel_vec(a: &[Complex], b: &[Complex]) -> f64 {
        let num: f64 = a.iter().zip(b).map(|(x, y)| (x - y).norm_sqr()).sum();
        let den: f64 = b.iter().map(|y| y.norm_sqr()).sum();
        (num / den).sqrt()
    }

    #[test]
    fn rejects_bad_distance_and_wavelength() {
        let g = grid(8, 1.0);
        assert!(build_transfer_as(g, 1.0, 0.0, 1.0).is_err());
        assert!(build_transfer_rs(g, 1.0, -1.0, 1.0).is_err());
        assert!(build_transfer_rs(g, 0.0, 1.0, 1.0).is_err());
    }

    #[test]
    fn rs_kernel_center_value() {
        let g = grid(16, 0.9);
        let (lambda, z) = (1.8, 45.0);
        let h = rs_kernel(g, lambda, z, 1.0);
        let expected = 0.9 * 0.9 / (lambda * z);
        assert!((h[0].norm() - expected).abs() < 1e-15);
        let k = 2.0 * PI / lambda;
        assert!(rel(h[0], Complex::from_polar(expected, k * z - PI / 2.0)) < 1e-12);
    }

    #[test]
    fn angular_spectrum_basics() {
        let g = grid(32, 0.9);
        let (lambda, z) = (1.8, 45.0);
        let tf = build_transfer_as(g, lambda, z, 1.0).unwrap();
        let k = 2.0 * PI / lambda;
        assert!(rel(tf.values[0], Complex::from_polar(1.0, k * z)) < 1e-14);
        for iy in 0..g.ny {
            for ix in 0..g.nx {
                let fx = GridSpec::freq(g.nx, g.pitch, ix) * lambda;
                let fy = GridSpec::freq(g.ny, g.pitch, iy) * lambda;
                let m = tf.values[iy * g.nx + ix].norm();
                if fx * fx + fy * fy <= 1.0 {
                    assert!((m - 1.0).abs() < 1e-12);
                } else {
                    assert!(m < 1.0);
                }
            }
        }
        let a = build_transfer_as(g, lambda, 12.5, 1.0).unwrap();
        let b = build_transfer_as(g, lambda, 32.5, 1.0).unwrap();
        for ((x, y), t) in a.values.iter().zip(&b.values).zip(&tf.values) {
            assert!(rel(x * y, *t) < 1e-12);
        }
    }

    #[test]
    fn rs_matches_as_on_padded_default_grid() {
        // 112x112 at 0.9 um, median channel of the three-wavelength set, 25λ spacing.
        let g = grid(112, 0.9).padded();
        let (lambda, z) = (1.8, 25.0 * 1.8);
        assert_eq!(z, 45.0);
        let rs = build_transfer_rs(g, lambda, z, 1.0).unwrap();
        let an = build_transfer_as(g, lambda, z, 1.0).unwrap();
        let mut worst: f64 = 0.0;
        for iy in 0..g.ny {
            for ix in 0..g.nx {
                let fx = GridSpec::freq(g.nx, g.pitch, ix) * lambda;
                let fy = GridSpec::freq(g.ny, g.pitch, iy) * lambda;
                if (fx * fx + fy * fy).sqrt() < 0.2 {
                    let i = iy * g.nx + ix;
                    worst = worst.max(rel(rs.values[i], an.values[i]));
                }
            }
        }
        assert!(worst < 0.02, "worst paraxial mismatch {worst}");
    }

    #[test]
    fn uniform_field_picks_up_dc_phase() {
        let g = grid(16, 0.9);
        let tf = build_transfer_as(g, 1.5, 20.0, 1.0).unwrap();
        let a = Complex::new(0.4, 0.2);
        let f = ComplexField::from_fn(g, 1.5, |_, _| a);
        let out = propagate(&f, &tf).unwrap();
        let want = a * Complex::from_polar(1.0, 2.0 * PI / 1.5 * 20.0);
        assert!(out.samples.iter().all(|s| rel(*s, want) < 1e-12));
    }

    #[test]
    fn propagation_conserves_energy_and_composes() {
        let g = grid(32, 0.9);
        let f = band_limited(g, 1.8, 5);
        let tf = build_transfer_as(g, 1.8, 45.0, 1.0).unwrap();
        let out = propagate(&f, &tf).unwrap();
        assert!((out.energy() - f.energy()).abs() / f.energy() < 1e-10);

        let t1 = build_transfer_as(g, 1.8, 10.0, 1.0).unwrap();
        let t2 = build_transfer_as(g, 1.8, 35.0, 1.0).unwrap();
        let two = propagate(&propagate(&f, &t1).unwrap(), &t2).unwrap();
        assert!(rel_vec(&two.samples, &out.samples) < 1e-10);

        let back = adjoint_propagate(&out, &tf).unwrap();
        assert!(rel_vec(&back.samples, &f.samples) < 1e-10);
    }

    #[test]
    fn propagate_rejects_mismatch() {
        let g = grid(8, 1.0);
        let tf = build_transfer_as(g, 1.5, 10.0, 1.0).unwrap();
        assert!(propagate(&ComplexField::zeros(g, 1.8), &tf).is_err());
        assert!(propagate(&ComplexField::zeros(grid(10, 1.0), 1.5), &tf).is_err());
        assert!(adjoint_propagate(&ComplexField::zeros(g, 1.8), &tf).is_err());
        let zero = adjoint_propagate(&ComplexField::zeros(g, 1.5), &tf).unwrap();
        assert!(zero.samples.iter().all(|c| c.norm() == 0.0));
    }

    #[test]
    fn padded_adjoint_dot_product() {
        let g = grid(16, 0.9);
        for scheme in [Scheme::AngularSpectrum, Scheme::RsKernelFft] {
            let p = Propagator::new(scheme, g, 1.8, 30.0, 1.0, true).unwrap();
            let u = random_field(g, 1.8, 1);
            let v = random_field(g, 1.8, 2);
            let lhs = p.apply(&u).unwrap().inner(&v);
            let rhs = u.inner(&p.adjoint(&v).unwrap());
            assert!(rel(lhs, rhs) < 1e-10);
        }
    }

    #[test]
    fn phase_coefficient_examples() {
        let g = grid(4, 1.0);
        let disp = DispersionModel::default();
        let zero = PhaseMask::zeros(g, disp.clone(), 10.0);
        assert!(phase_coefficients(&zero, 1.8).unwrap().iter().all(|&w| w == 0.0));

        let mut m = PhaseMask::zeros(g, disp, 10.0);
        m.heights.iter_mut().for_each(|h| *h = 1.8);
        let w = phase_coefficients(&m, 1.8).unwrap();
        assert!(w.iter().all(|&x| (x - PI).abs() < 1e-14));

        let wa = phase_coefficients(&m, 1.5).unwrap()[0];
        let wb = phase_coefficients(&m, 2.2).unwrap()[0];
        assert!((wa / wb - 2.2 / 1.5).abs() < 1e-14);
    }

    #[test]
    fn table_dispersion_interpolates_without_extrapolating() {
        let d = DispersionModel {
            kind: DispersionKind::Table { points: vec![(1.0, 1.6), (2.0, 1.5), (3.0, 1.45)] },
            n_air: 1.0,
        };
        d.validate().unwrap();
        assert!((d.index(1.5).unwrap() - 1.55).abs() < 1e-15);
        assert_eq!(d.index(2.0).unwrap(), 1.5);
        assert_eq!(d.index(3.0).unwrap(), 1.45);
        assert!(matches!(d.index(0.9), Err(Error::Config(_))));
        assert!(d.index(3.1).is_err());
        let ratio = d.phase_per_height(1.5).unwrap() / d.phase_per_height(2.5).unwrap();
        let expect = (1.55 - 1.0) * 2.5 / ((1.475 - 1.0) * 1.5);
        assert!((ratio - expect).abs() < 1e-12);

        let bad = DispersionModel { kind: DispersionKind::Constant { n: 0.9 }, n_air: 1.0 };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn dispersion_makes_channels_differ() {
        let g = grid(8, 1.0);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mask = PhaseMask::random(g, DispersionModel::default(), 5.0, 2.0, &mut rng);
        let f = random_field(g, 1.5, 3);
        let a = apply_mask(&f, &mask).unwrap();
        let b = apply_mask(&f.retagged(2.2), &mask).unwrap();
        assert_ne!(a.samples, b.samples);
        for i in 0..g.len() {
            let pa = (a.samples[i] / f.samples[i]).arg();
            let pb = (b.samples[i] / f.samples[i]).arg();
            let wa = 2.0 * PI * 0.5 * mask.heights[i] / 1.5;
            let wb = 2.0 * PI * 0.5 * mask.heights[i] / 2.2;
            assert!((Complex::from_polar(1.0, pa) - Complex::from_polar(1.0, wa)).norm() < 1e-12);
            assert!((Complex::from_polar(1.0, pb) - Complex::from_polar(1.0, wb)).norm() < 1e-12);
        }
        let zero = PhaseMask::zeros(g, DispersionModel::default(), 5.0);
        assert_eq!(apply_mask(&f, &zero).unwrap().samples, f.samples);
    }

    #[test]
    fn mask_file_round_trip() {
        let g = grid(6, 0.7);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let disp = DispersionModel { kind: DispersionKind::Table { points: vec![(1.0, 1.6), (3.0, 1.4)] }, n_air: 1.0003 };
        let m = PhaseMask::random(g, disp, 4.0, 4.0, &mut rng);
        let mut buf = Vec::new();
        m.write_to(&mut buf).unwrap();
        let back = PhaseMask::read_from(&mut buf.as_slice(), Path::new("mem")).unwrap();
        assert_eq!(back, m);
        let mut again = Vec::new();
        back.write_to(&mut again).unwrap();
        assert_eq!(buf, again);
        assert!(PhaseMask::read_from(&mut &buf[..buf.len() - 1], Path::new("mem")).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn adjoint_dot_product(h in 2usize..=32, z in 1.0f64..200.0, lambda in 0.5f64..3.0,
                               rs in any::<bool>(), seed in any::<u64>()) {
            let g = grid(2 * h, 0.9);
            let tf = if rs { build_transfer_rs(g, lambda, z, 1.0) } else { build_transfer_as(g, lambda, z, 1.0) }.unwrap();
            let u = random_field(g, lambda, seed);
            let v = random_field(g, lambda, seed ^ 0xABCD);
            let lhs = propagate(&u, &tf).unwrap().inner(&v);
            let rhs = u.inner(&adjoint_propagate(&v, &tf).unwrap());
            let scale = (u.energy() * v.energy()).sqrt();
            prop_assert!((lhs - rhs).norm() / scale < 1e-9);
        }

        #[test]
        fn masks_preserve_intensity(seed in any::<u64>(), lambda in 1.0f64..2.5) {
            let g = grid(8, 1.0);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mask = PhaseMask::random(g, DispersionModel::default(), 8.0, 8.0, &mut rng);
            let f = random_field(g, lambda, seed);
            let out = apply_mask(&f, &mask).unwrap();
            for (a, b) in out.samples.iter().zip(&f.samples) {
                prop_assert!((a.norm_sqr() - b.norm_sqr()).abs() <= 1e-12 * b.norm_sqr().max(1e-300));
            }
        }

        #[test]
        fn constant_dispersion_phase_decreases_with_wavelength(h in 0.01f64..10.0, la in 0.5f64..3.0, dl in 0.01f64..1.0) {
            let d = DispersionModel::default();
            let wa = d.phase_per_height(la).unwrap() * h;
            let wb = d.phase_per_height(la + dl).unwrap() * h;
            prop_assert!(wa > wb);
        }
    }
}
