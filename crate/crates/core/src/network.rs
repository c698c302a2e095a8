//! Multi-wavelength forward pass through a shared stack of phase masks,
//! the aggregation heads and the ten-region detector readout.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{config_err, Result};
use crate::field::{ChannelSet, ComplexField, GridSpec, IntensityMap};
use crate::optics::{DispersionModel, PhaseMask, Propagator, Scheme};
use crate::Complex;

pub const NUM_CLASSES: usize = 10;
/// Side of the square pooling lattice feeding the FC head.
pub const POOL_SIDE: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Head {
    Sum,
    Maxout,
    MaxoutFc,
}

/// Half-open pixel rectangle `[x0, x1) × [y0, y1)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Region {
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
}

impl Region {
    pub fn contains(&self, x: usize, y: usize) -> bool {
        x >= self.x0 && x < self.x1 && y >= self.y0 && y < self.y1
    }

    pub fn width(&self) -> usize {
        self.x1 - self.x0
    }

    pub fn height(&self) -> usize {
        self.y1 - self.y0
    }

    fn overlaps(&self, o: &Region) -> bool {
        self.x0 < o.x1 && o.x0 < self.x1 && self.y0 < o.y1 && o.y0 < self.y1
    }
}

/// Ten class regions on the output plane; region `c` scores class `c`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct DetectorLayout {
    pub regions: Vec<Region>,
}

impl DetectorLayout {
    /// 2 columns × 5 rows of equal squares, centered, filling the central
    /// 60% of the plane. Grids too small for 4×4 squares at 60% widen the
    /// lattice to 80% and then to the full plane before accepting smaller
    /// squares.
    pub fn lattice(grid: GridSpec) -> Self {
        let build = |frac: f64| {
            let span_x = (frac * grid.nx as f64).floor() as usize;
            let span_y = (frac * grid.ny as f64).floor() as usize;
            let cell_w = span_x / 2;
            let cell_h = span_y / 5;
            let side = ((cell_w.min(cell_h) as f64) * 0.75).floor().max(1.0) as usize;
            (cell_w, cell_h, side)
        };
        let (cell_w, cell_h, side) = [0.6, 0.8, 1.0]
            .into_iter()
            .map(build)
            .find(|&(_, _, side)| side >= 4)
            .unwrap_or_else(|| build(1.0));
        let ox = (grid.nx - 2 * cell_w) / 2;
        let oy = (grid.ny - 5 * cell_h) / 2;
        let mut regions = Vec::with_capacity(NUM_CLASSES);
        for row in 0..5 {
            for col in 0..2 {
                let x0 = ox + col * cell_w + (cell_w - side) / 2;
                let y0 = oy + row * cell_h + (cell_h - side) / 2;
                regions.push(Region { x0, y0, x1: x0 + side, y1: y0 + side });
            }
        }
        DetectorLayout { regions }
    }

    pub fn validate(&self, grid: GridSpec) -> Result<()> {
        if self.regions.len() != NUM_CLASSES {
            return config_err(format!("detector needs {NUM_CLASSES} regions, got {}", self.regions.len()));
        }
        for (i, r) in self.regions.iter().enumerate() {
            if r.x1 <= r.x0 || r.y1 <= r.y0 || r.x1 > grid.nx || r.y1 > grid.ny {
                return config_err(format!("detector region {i} {r:?} is empty or outside the grid"));
            }
            for (j, o) in self.regions.iter().enumerate().skip(i + 1) {
                if r.overlaps(o) {
                    return config_err(format!("detector regions {i} and {j} overlap"));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkConfig {
    pub layers: usize,
    pub channels: ChannelSet,
    /// Gap between consecutive planes, micrometers.
    pub layer_spacing: f64,
    pub grid: GridSpec,
    pub head: Head,
    pub detector: DetectorLayout,
    pub scheme: Scheme,
    /// Evaluate propagation on a 2× zero-padded grid.
    pub padded: bool,
    /// Multiplier applied to energy fractions before the softmax.
    pub logit_scale: f64,
    pub dispersion: DispersionModel,
    pub max_height: f64,
}

impl NetworkConfig {
    /// Five layers, `25·median` spacing, angular spectrum, lattice detector.
    pub fn new(grid: GridSpec, channels: ChannelSet, head: Head) -> Result<Self> {
        grid.validate()?;
        let dispersion = DispersionModel::default();
        let max_height = default_max_height(&channels, &dispersion)?;
        let cfg = NetworkConfig {
            layers: 5,
            layer_spacing: 25.0 * channels.median(),
            detector: DetectorLayout::lattice(grid),
            channels,
            grid,
            head,
            scheme: Scheme::AngularSpectrum,
            padded: false,
            logit_scale: 10.0,
            dispersion,
            max_height,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.grid.validate()?;
        self.dispersion.validate()?;
        self.detector.validate(self.grid)?;
        if self.layers == 0 {
            return config_err("network needs at least one layer");
        }
        if !(self.layer_spacing > 0.0 && self.layer_spacing.is_finite()) {
            return config_err(format!("layer spacing {} must be positive", self.layer_spacing));
        }
        if !(self.max_height > 0.0 && self.max_height.is_finite()) {
            return config_err(format!("max_height {} must be positive", self.max_height));
        }
        if !(self.logit_scale > 0.0 && self.logit_scale.is_finite()) {
            return config_err(format!("logit_scale {} must be positive", self.logit_scale));
        }
        for &l in self.channels.wavelengths() {
            self.dispersion.index(l)?;
        }
        if self.head == Head::MaxoutFc && (self.grid.nx < POOL_SIDE || self.grid.ny < POOL_SIDE) {
            return config_err("the FC head needs a grid of at least 10x10");
        }
        Ok(())
    }

    /// Upper bound of the random height initialization: about half a wave
    /// of phase at the median channel.
    pub fn init_height(&self) -> Result<f64> {
        let m = self.channels.median();
        Ok(m / (2.0 * (self.dispersion.index(m)? - self.dispersion.n_air)))
    }
}

/// Room for two full phase wraps at the longest wavelength.
pub fn default_max_height(channels: &ChannelSet, dispersion: &DispersionModel) -> Result<f64> {
    let l = channels.max();
    Ok(2.0 * l / (dispersion.index(l)? - dispersion.n_air))
}

/// Dense layer `logits = W·features + b`; `weights` is row-major `outputs × inputs`.
#[derive(Debug, Clone, PartialEq)]
pub struct FcWeights {
    pub inputs: usize,
    pub outputs: usize,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl FcWeights {
    pub fn zeros(inputs: usize, outputs: usize) -> Self {
        FcWeights { inputs, outputs, weights: vec![0.0; inputs * outputs], bias: vec![0.0; outputs] }
    }

    pub fn random(inputs: usize, outputs: usize, rng: &mut impl Rng) -> Self {
        let r = 1.0 / (inputs as f64).sqrt();
        let weights = (0..inputs * outputs).map(|_| rng.gen_range(-r..r)).collect();
        FcWeights { inputs, outputs, weights, bias: vec![0.0; outputs] }
    }

    pub fn validate(&self) -> Result<()> {
        if self.weights.len() != self.inputs * self.outputs || self.bias.len() != self.outputs {
            return config_err("FC weight shapes are inconsistent");
        }
        Ok(())
    }
}

/// Model parameters together with the architecture they belong to.
#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    pub config: NetworkConfig,
    pub masks: Vec<PhaseMask>,
    pub fc: Option<FcWeights>,
}

impl Network {
    /// Random heights in `[0, init_height]` and, for the FC head, random FC weights.
    pub fn init(config: NetworkConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let init = config.init_height()?;
        let masks = (0..config.layers)
            .map(|_| PhaseMask::random(config.grid, config.dispersion.clone(), config.max_height, init, rng))
            .collect();
        let fc = (config.head == Head::MaxoutFc).then(|| FcWeights::random(POOL_SIDE * POOL_SIDE, NUM_CLASSES, rng));
        Ok(Network { config, masks, fc })
    }

    pub fn zero_heights(config: NetworkConfig) -> Result<Self> {
        config.validate()?;
        let masks = (0..config.layers)
            .map(|_| PhaseMask::zeros(config.grid, config.dispersion.clone(), config.max_height))
            .collect();
        let fc = (config.head == Head::MaxoutFc).then(|| FcWeights::zeros(POOL_SIDE * POOL_SIDE, NUM_CLASSES));
        Ok(Network { config, masks, fc })
    }

    pub fn validate(&self) -> Result<()> {
        self.config.validate()?;
        if self.masks.len() != self.config.layers {
            return config_err(format!("expected {} masks, got {}", self.config.layers, self.masks.len()));
        }
        for m in &self.masks {
            m.validate()?;
            if m.grid != self.config.grid {
                return config_err("mask grid does not match network grid");
            }
        }
        match (&self.fc, self.config.head) {
            (None, Head::MaxoutFc) => return config_err("the FC head requires FC weights"),
            (Some(fc), Head::MaxoutFc) => {
                fc.validate()?;
                if fc.inputs != POOL_SIDE * POOL_SIDE || fc.outputs != NUM_CLASSES {
                    return config_err("FC weights must map 100 pooled features to 10 logits");
                }
            }
            _ => {}
        }
        Ok(())
    }
}

/// Propagation plumbing for one wavelength.
#[derive(Debug, Clone)]
pub struct ChannelOptics {
    pub wavelength: f64,
    /// `2π(n(λ) − n_air)/λ`, radians per micrometer of height.
    pub phase_per_height: f64,
    pub propagator: Propagator,
}

/// Transfer functions for every channel of a configuration, built once.
#[derive(Debug, Clone)]
pub struct Simulator {
    pub config: NetworkConfig,
    pub channels: Vec<ChannelOptics>,
}

impl Simulator {
    pub fn new(config: &NetworkConfig) -> Result<Self> {
        Self::for_wavelengths(config, config.channels.wavelengths())
    }

    /// Same geometry, evaluated at arbitrary wavelengths.
    pub fn for_wavelengths(config: &NetworkConfig, wavelengths: &[f64]) -> Result<Self> {
        config.validate()?;
        let channels = wavelengths
            .iter()
            .map(|&l| {
                Ok(ChannelOptics {
                    wavelength: l,
                    phase_per_height: config.dispersion.phase_per_height(l)?,
                    propagator: Propagator::new(config.scheme, config.grid, l, config.layer_spacing, config.dispersion.n_air, config.padded)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Simulator { config: config.clone(), channels })
    }

    /// Freezes mask phasors for every channel.
    pub fn snapshot<'a>(&'a self, net: &'a Network) -> Result<Snapshot<'a>> {
        net.validate()?;
        if net.config.grid != self.config.grid || net.config.layers != self.config.layers {
            return config_err("network does not match simulator geometry");
        }
        let phasors = self
            .channels
            .iter()
            .map(|ch| {
                net.masks
                    .iter()
                    .map(|m| m.heights.iter().map(|h| Complex::from_polar(1.0, ch.phase_per_height * h)).collect())
                    .collect()
            })
            .collect();
        Ok(Snapshot { sim: self, net, phasors })
    }
}

/// Fields recorded for one channel during a training-mode forward pass.
#[derive(Debug, Clone)]
pub struct ChannelTrace {
    /// Field leaving mask `i`.
    pub leaving: Vec<Vec<Complex>>,
    /// Field at the detector plane.
    pub output: Vec<Complex>,
}

/// Everything the backward pass needs.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    /// Channel indices (into the simulator) that took part.
    pub active: Vec<usize>,
    pub channels: Vec<ChannelTrace>,
    pub intensities: Vec<IntensityMap>,
    pub aggregate: IntensityMap,
    /// Winning position within `active` per pixel (Maxout heads).
    pub argmax: Option<Vec<usize>>,
    /// Pooled FC inputs (FC head).
    pub features: Option<Vec<f64>>,
    pub scores: ClassScores,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClassScores {
    /// Raw detector energies.
    pub energies: [f64; NUM_CLASSES],
    pub logits: [f64; NUM_CLASSES],
    pub probabilities: [f64; NUM_CLASSES],
}

impl ClassScores {
    pub fn from_logits(energies: [f64; NUM_CLASSES], logits: [f64; NUM_CLASSES]) -> Self {
        ClassScores { energies, logits, probabilities: softmax(&logits) }
    }

    /// Highest logit, ties toward the lowest class index.
    pub fn predicted(&self) -> usize {
        argmax(&self.logits)
    }
}

pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

pub fn softmax(logits: &[f64; NUM_CLASSES]) -> [f64; NUM_CLASSES] {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut p = [0.0; NUM_CLASSES];
    let mut s = 0.0;
    for (pi, &z) in p.iter_mut().zip(logits) {
        *pi = (z - m).exp();
        s += *pi;
    }
    p.iter_mut().for_each(|x| *x /= s);
    p
}

/// `scale · E_c / ΣE`, or all zeros when the detector is dark.
pub fn normalized_logits(energies: &[f64; NUM_CLASSES], scale: f64) -> [f64; NUM_CLASSES] {
    let total: f64 = energies.iter().sum();
    let mut z = [0.0; NUM_CLASSES];
    if total > 0.0 {
        for (zi, e) in z.iter_mut().zip(energies) {
            *zi = scale * e / total;
        }
    }
    z
}

fn check_same_grid(maps: &[IntensityMap]) -> Result<GridSpec> {
    let first = maps.first().ok_or_else(|| crate::Error::Config("no channel intensities to aggregate".into()))?;
    if maps.iter().any(|m| m.grid != first.grid) {
        return config_err("channel intensities live on different grids");
    }
    Ok(first.grid)
}

/// Pixelwise sum over channels.
pub fn aggregate_sum(channel_intensities: &[IntensityMap]) -> Result<IntensityMap> {
    check_same_grid(channel_intensities)?;
    let mut out = channel_intensities[0].clone();
    for m in &channel_intensities[1..] {
        out.values.iter_mut().zip(&m.values).for_each(|(o, v)| *o += v);
    }
    Ok(out)
}

/// Pixelwise maximum over channels plus the winning channel per pixel
/// (lowest index on ties).
pub fn aggregate_maxout(channel_intensities: &[IntensityMap]) -> Result<(IntensityMap, Vec<usize>)> {
    check_same_grid(channel_intensities)?;
    let mut out = channel_intensities[0].clone();
    let mut idx = vec![0usize; out.values.len()];
    for (t, m) in channel_intensities.iter().enumerate().skip(1) {
        for ((o, i), &v) in out.values.iter_mut().zip(idx.iter_mut()).zip(&m.values) {
            if v > *o {
                *o = v;
                *i = t;
            }
        }
    }
    Ok((out, idx))
}

pub fn detect_regions(map: &IntensityMap, layout: &DetectorLayout) -> Result<[f64; NUM_CLASSES]> {
    layout.validate(map.grid)?;
    let nx = map.grid.nx;
    let mut e = [0.0; NUM_CLASSES];
    for (c, r) in layout.regions.iter().enumerate() {
        for y in r.y0..r.y1 {
            e[c] += map.values[y * nx + r.x0..y * nx + r.x1].iter().sum::<f64>();
        }
    }
    Ok(e)
}

/// Block geometry of the 10×10 pooling lattice.
#[derive(Debug, Clone, Copy)]
pub struct PoolLayout {
    pub block_x: usize,
    pub block_y: usize,
    pub offset_x: usize,
    pub offset_y: usize,
    /// Factor turning a block sum into a block average times the pixel count.
    pub weight: f64,
}

impl PoolLayout {
    pub fn new(grid: GridSpec) -> Self {
        let block_x = (grid.nx / POOL_SIDE).max(1);
        let block_y = (grid.ny / POOL_SIDE).max(1);
        PoolLayout {
            block_x,
            block_y,
            offset_x: grid.nx.saturating_sub(POOL_SIDE * block_x) / 2,
            offset_y: grid.ny.saturating_sub(POOL_SIDE * block_y) / 2,
            weight: grid.len() as f64 / (block_x * block_y) as f64,
        }
    }

    /// Feature index of pixel `(x, y)`, if it falls inside the lattice.
    pub fn cell(&self, x: usize, y: usize) -> Option<usize> {
        let (cx, cy) = (x.checked_sub(self.offset_x)? / self.block_x, y.checked_sub(self.offset_y)? / self.block_y);
        (cx < POOL_SIDE && cy < POOL_SIDE).then_some(cy * POOL_SIDE + cx)
    }
}

/// Block averages of the map over the centered 10×10 partition, scaled by
/// the pixel count so a uniform unit-energy map yields all-ones features.
pub fn pool_features(map: &IntensityMap) -> Vec<f64> {
    let pool = PoolLayout::new(map.grid);
    let mut f = vec![0.0; POOL_SIDE * POOL_SIDE];
    for y in 0..map.grid.ny {
        for x in 0..map.grid.nx {
            if let Some(k) = pool.cell(x, y) {
                f[k] += map.at(x, y);
            }
        }
    }
    f.iter_mut().for_each(|v| *v *= pool.weight);
    f
}

pub fn fc_head(features: &[f64], weights: &FcWeights) -> Result<[f64; NUM_CLASSES]> {
    weights.validate()?;
    if features.len() != weights.inputs || weights.outputs != NUM_CLASSES {
        return config_err(format!(
            "FC expects {} features -> {NUM_CLASSES} logits, got {} features and {} outputs",
            weights.inputs,
            features.len(),
            weights.outputs
        ));
    }
    let mut z = [0.0; NUM_CLASSES];
    for (o, zo) in z.iter_mut().enumerate() {
        let row = &weights.weights[o * weights.inputs..(o + 1) * weights.inputs];
        *zo = weights.bias[o] + row.iter().zip(features).map(|(w, f)| w * f).sum::<f64>();
    }
    Ok(z)
}

/// Mask phasors for every (channel, layer) pair at a fixed parameter state.
pub struct Snapshot<'a> {
    pub sim: &'a Simulator,
    pub net: &'a Network,
    /// `[channel][layer][pixel]`
    phasors: Vec<Vec<Vec<Complex>>>,
}

impl<'a> Snapshot<'a> {
    /// `exp(j·w)` of mask `layer` at channel `channel`.
    pub fn phasor(&self, channel: usize, layer: usize) -> &[Complex] {
        &self.phasors[channel][layer]
    }

    /// Propagate, modulate, repeat; one last propagation to the detector.
    pub fn forward_channel(&self, channel: usize, input: &[Complex], record: bool) -> (Vec<Complex>, Option<ChannelTrace>) {
        let prop = &self.sim.channels[channel].propagator;
        let mut u = input.to_vec();
        let mut leaving = Vec::new();
        for ph in &self.phasors[channel] {
            prop.apply_in_place(&mut u);
            u.iter_mut().zip(ph).for_each(|(s, p)| *s *= p);
            if record {
                leaving.push(u.clone());
            }
        }
        prop.apply_in_place(&mut u);
        let trace = record.then(|| ChannelTrace { leaving, output: u.clone() });
        (u, trace)
    }

    /// Runs the channels in `active`, aggregates per the configured head
    /// and reads out class scores. The input pattern is shared by every
    /// channel.
    pub fn forward_subset(&self, pattern: &[Complex], active: &[usize], record: bool) -> Result<ForwardTrace> {
        let cfg = &self.sim.config;
        if pattern.len() != cfg.grid.len() {
            return config_err("input pattern does not match the network grid");
        }
        if active.is_empty() || active.iter().any(|&c| c >= self.sim.channels.len()) {
            return config_err("invalid active channel selection");
        }
        let runs: Vec<(Vec<Complex>, Option<ChannelTrace>)> =
            active.par_iter().map(|&c| self.forward_channel(c, pattern, record)).collect();
        let intensities: Vec<IntensityMap> = runs
            .iter()
            .map(|(out, _)| IntensityMap { grid: cfg.grid, values: out.iter().map(|c| c.norm_sqr()).collect() })
            .collect();
        let (aggregate, argmax) = match cfg.head {
            Head::Sum => (aggregate_sum(&intensities)?, None),
            Head::Maxout | Head::MaxoutFc => {
                let (m, i) = aggregate_maxout(&intensities)?;
                (m, Some(i))
            }
        };
        let energies = detect_regions(&aggregate, &cfg.detector)?;
        let (logits, features) = match cfg.head {
            Head::MaxoutFc => {
                let f = pool_features(&aggregate);
                let fc = self.net.fc.as_ref().ok_or_else(|| crate::Error::Config("missing FC weights".into()))?;
                (fc_head(&f, fc)?, Some(f))
            }
            _ => (normalized_logits(&energies, cfg.logit_scale), None),
        };
        let scores = ClassScores::from_logits(energies, logits);
        let (channels, intensities) = if record {
            (runs.into_iter().map(|(_, t)| t.unwrap()).collect(), intensities)
        } else {
            (Vec::new(), Vec::new())
        };
        Ok(ForwardTrace { active: active.to_vec(), channels, intensities, aggregate, argmax, features, scores })
    }

    pub fn forward(&self, pattern: &[Complex], record: bool) -> Result<ForwardTrace> {
        let all: Vec<usize> = (0..self.sim.channels.len()).collect();
        self.forward_subset(pattern, &all, record)
    }

    pub fn predict(&self, pattern: &[Complex]) -> Result<(usize, ClassScores)> {
        let t = self.forward(pattern, false)?;
        Ok((t.scores.predicted(), t.scores))
    }
}

/// Single-channel forward pass for a standalone field.
pub fn forward_channel(input: &ComplexField, masks: &[PhaseMask], config: &NetworkConfig) -> Result<ComplexField> {
    if input.grid != config.grid {
        return config_err("input grid does not match the network grid");
    }
    if config.channels.index_of(input.wavelength).is_none() {
        return config_err(format!("wavelength {} is not a configured channel", input.wavelength));
    }
    if masks.len() != config.layers || masks.iter().any(|m| m.grid != config.grid) {
        return config_err("masks do not match the network configuration");
    }
    let kappa = config.dispersion.phase_per_height(input.wavelength)?;
    let prop = Propagator::new(config.scheme, config.grid, input.wavelength, config.layer_spacing, config.dispersion.n_air, config.padded)?;
    let mut u = input.samples.clone();
    for m in masks {
        prop.apply_in_place(&mut u);
        u.iter_mut().zip(&m.heights).for_each(|(s, h)| *s *= Complex::from_polar(1.0, kappa * h));
    }
    prop.apply_in_place(&mut u);
    Ok(ComplexField { grid: input.grid, wavelength: input.wavelength, samples: u })
}

/// Full prediction for one input, given either a single spatial pattern
/// (used for every channel) or one field per channel in channel order.
pub fn predict(net: &Network, fields: &[ComplexField]) -> Result<(usize, ClassScores)> {
    let sim = Simulator::new(&net.config)?;
    let snap = sim.snapshot(net)?;
    match fields {
        [single] => {
            if single.grid != net.config.grid {
                return config_err("input grid does not match the network grid");
            }
            snap.predict(&single.samples)
        }
        many => {
            if many.len() != sim.channels.len() {
                return config_err("need one input field per channel");
            }
            for (f, ch) in many.iter().zip(&sim.channels) {
                if f.grid != net.config.grid || f.wavelength != ch.wavelength {
                    return config_err("input fields must match the channel wavelengths in order");
                }
            }
            let runs: Vec<IntensityMap> = many
                .iter()
                .enumerate()
                .map(|(c, f)| {
                    let (out, _) = snap.forward_channel(c, &f.samples, false);
                    IntensityMap { grid: f.grid, values: out.iter().map(|s| s.norm_sqr()).collect() }
                })
                .collect();
            let cfg = &net.config;
            let aggregate = match cfg.head {
                Head::Sum => aggregate_sum(&runs)?,
                _ => aggregate_maxout(&runs)?.0,
            };
            let energies = detect_regions(&aggregate, &cfg.detector)?;
            let logits = match cfg.head {
                Head::MaxoutFc => fc_head(&pool_features(&aggregate), net.fc.as_ref().unwrap())?,
                _ => normalized_logits(&energies, cfg.logit_scale),
            };
            let s = ClassScores::from_logits(energies, logits);
            Ok((s.predicted(), s))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::{intensity, ChannelSet};
    use crate::optics::{build_transfer_as, propagate};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn map(grid: GridSpec, v: f64) -> IntensityMap {
        IntensityMap { grid, values: vec![v; grid.len()] }
    }

    fn small_config(n: usize, wavelengths: Vec<f64>, head: Head) -> NetworkConfig {
        let mut cfg = NetworkConfig::new(GridSpec::new(n, n, 0.9).unwrap(), ChannelSet::new(wavelengths).unwrap(), head).unwrap();
        cfg.layers = 3;
        cfg
    }

    fn random_pattern(grid: GridSpec, seed: u64) -> Vec<Complex> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..grid.len()).map(|_| Complex::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0))).collect()
    }

    #[test]
    fn default_lattice_geometry() {
        let g = GridSpec::new(112, 112, 0.9).unwrap();
        let d = DetectorLayout::lattice(g);
        d.validate(g).unwrap();
        for r in &d.regions {
            assert!(r.width() >= 4 && r.height() >= 4);
            assert_eq!(r.width(), r.height());
            // within the central 60% band
            assert!(r.x0 as f64 >= 0.2 * 112.0 - 1.0 && r.x1 as f64 <= 0.8 * 112.0 + 1.0);
            assert!(r.y0 as f64 >= 0.2 * 112.0 - 1.0 && r.y1 as f64 <= 0.8 * 112.0 + 1.0);
        }
        // class 0 top-left, class 1 top-right
        assert!(d.regions[0].x0 < d.regions[1].x0 && d.regions[0].y0 == d.regions[1].y0);
        let small = GridSpec::new(32, 32, 1.0).unwrap();
        let d = DetectorLayout::lattice(small);
        d.validate(small).unwrap();
        assert!(d.regions.iter().all(|r| r.width() >= 4));
        let tiny = GridSpec::new(16, 16, 1.0).unwrap();
        DetectorLayout::lattice(tiny).validate(tiny).unwrap();
    }

    #[test]
    fn detector_validation_catches_overlap() {
        let g = GridSpec::new(32, 32, 1.0).unwrap();
        let mut d = DetectorLayout::lattice(g);
        d.regions[1] = d.regions[0];
        assert!(d.validate(g).is_err());
        let mut d = DetectorLayout::lattice(g);
        d.regions[9].x1 = 40;
        assert!(d.validate(g).is_err());
        d.regions.pop();
        assert!(d.validate(g).is_err());
    }

    #[test]
    fn aggregation_examples() {
        let g = GridSpec::new(2, 2, 1.0).unwrap();
        let maps = vec![map(g, 1.0), map(g, 2.0), map(g, 3.0)];
        assert!(aggregate_sum(&maps).unwrap().values.iter().all(|&v| v == 6.0));
        let (m, i) = aggregate_maxout(&maps).unwrap();
        assert!(m.values.iter().all(|&v| v == 3.0));
        assert!(i.iter().all(|&k| k == 2));

        let single = vec![map(g, 4.5)];
        assert_eq!(aggregate_sum(&single).unwrap(), single[0]);
        assert_eq!(aggregate_maxout(&single).unwrap().0, single[0]);

        let (m, i) = aggregate_maxout(&[map(g, 5.0), map(g, 5.0)]).unwrap();
        assert!(m.values.iter().all(|&v| v == 5.0) && i.iter().all(|&k| k == 0));

        let permuted = vec![maps[2].clone(), maps[0].clone(), maps[1].clone()];
        assert_eq!(aggregate_sum(&permuted).unwrap(), aggregate_sum(&maps).unwrap());
        assert!(aggregate_sum(&[]).is_err());
        assert!(aggregate_maxout(&[map(g, 1.0), map(GridSpec::new(4, 4, 1.0).unwrap(), 1.0)]).is_err());
    }

    #[test]
    fn detector_examples() {
        let g = GridSpec::new(112, 112, 1.0).unwrap();
        let mut layout = DetectorLayout::lattice(g);
        // force 8x8 regions
        for r in &mut layout.regions {
            r.x1 = r.x0 + 8;
            r.y1 = r.y0 + 8;
        }
        let e = detect_regions(&map(g, 1.0), &layout).unwrap();
        assert!(e.iter().all(|&v| v == 64.0));

        let mut m = IntensityMap::zeros(g);
        let r3 = layout.regions[3];
        for y in 0..g.ny {
            for x in 0..g.nx {
                let inside_any = layout.regions.iter().any(|r| r.contains(x, y));
                if r3.contains(x, y) {
                    m.values[y * g.nx + x] = 2.0;
                } else if !inside_any {
                    m.values[y * g.nx + x] = 7.0 * (x + y) as f64;
                }
            }
        }
        let e = detect_regions(&m, &layout).unwrap();
        for (c, &v) in e.iter().enumerate() {
            assert_eq!(v, if c == 3 { 128.0 } else { 0.0 });
        }
        assert!(e.iter().sum::<f64>() <= m.total());
    }

    #[test]
    fn fc_examples() {
        let mut w = FcWeights::zeros(100, 10);
        w.bias = (0..10).map(|i| i as f64 * 0.5).collect();
        let z = fc_head(&[1.0; 100], &w).unwrap();
        assert_eq!(z.to_vec(), w.bias);

        let mut id = FcWeights::zeros(100, 10);
        for o in 0..10 {
            id.weights[o * 100 + o] = 1.0;
        }
        let mut f = vec![0.0; 100];
        f[4] = 3.5;
        let z = fc_head(&f, &id).unwrap();
        assert_eq!(z[4], 3.5);
        assert!(z.iter().enumerate().all(|(i, &v)| i == 4 || v == 0.0));
        assert!(fc_head(&[1.0; 99], &id).is_err());
    }

    #[test]
    fn pooled_features_of_uniform_unit_energy_map() {
        let g = GridSpec::new(40, 40, 1.0).unwrap();
        let f = pool_features(&map(g, 1.0 / 1600.0));
        assert!(f.iter().all(|&v| (v - 1.0).abs() < 1e-12));
    }

    #[test]
    fn zero_heights_equal_one_long_propagation() {
        let cfg = small_config(32, vec![1.5, 1.8], Head::Sum);
        let net = Network::zero_heights(cfg.clone()).unwrap();
        let pattern = random_pattern(cfg.grid, 1);
        let input = ComplexField { grid: cfg.grid, wavelength: 1.5, samples: pattern };
        let out = forward_channel(&input, &net.masks, &cfg).unwrap();
        let tf = build_transfer_as(cfg.grid, 1.5, 4.0 * cfg.layer_spacing, 1.0).unwrap();
        let direct = propagate(&input, &tf).unwrap();
        let num: f64 = out.samples.iter().zip(&direct.samples).map(|(a, b)| (a - b).norm_sqr()).sum();
        assert!((num / direct.energy()).sqrt() < 1e-10);
    }

    #[test]
    fn forward_is_linear_and_channels_differ() {
        let cfg = small_config(16, vec![1.5, 2.2], Head::Sum);
        let net = Network::init(cfg.clone(), &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let u = ComplexField { grid: cfg.grid, wavelength: 1.5, samples: random_pattern(cfg.grid, 1) };
        let v = ComplexField { grid: cfg.grid, wavelength: 1.5, samples: random_pattern(cfg.grid, 2) };
        let (a, b) = (Complex::new(0.3, -1.1), Complex::new(2.0, 0.4));
        let mix = ComplexField {
            grid: cfg.grid,
            wavelength: 1.5,
            samples: u.samples.iter().zip(&v.samples).map(|(x, y)| a * x + b * y).collect(),
        };
        let fu = forward_channel(&u, &net.masks, &cfg).unwrap();
        let fv = forward_channel(&v, &net.masks, &cfg).unwrap();
        let fm = forward_channel(&mix, &net.masks, &cfg).unwrap();
        let want: Vec<Complex> = fu.samples.iter().zip(&fv.samples).map(|(x, y)| a * x + b * y).collect();
        let num: f64 = fm.samples.iter().zip(&want).map(|(x, y)| (x - y).norm_sqr()).sum();
        let den: f64 = want.iter().map(|y| y.norm_sqr()).sum();
        assert!((num / den).sqrt() < 1e-10);

        let other = forward_channel(&u.retagged(2.2), &net.masks, &cfg).unwrap();
        assert_ne!(intensity(&other).values, intensity(&fu).values);
        assert!(forward_channel(&u.retagged(1.7), &net.masks, &cfg).is_err());
    }

    #[test]
    fn energy_preserved_through_stack() {
        let cfg = small_config(32, vec![1.8], Head::Sum);
        let net = Network::init(cfg.clone(), &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        // smooth input: mostly propagating content
        let input = ComplexField::from_fn(cfg.grid, 1.8, |x, y| {
            let (dx, dy) = (x as f64 - 16.0, y as f64 - 16.0);
            Complex::new((-(dx * dx + dy * dy) / 30.0).exp(), 0.0)
        });
        // the masks scatter into evanescent bins, so compare against a stack
        // whose propagation is exactly unitary: pitch wide enough that no bin
        // is evanescent
        let mut wide = cfg.clone();
        wide.grid = GridSpec::new(32, 32, 2.0).unwrap();
        wide.detector = DetectorLayout::lattice(wide.grid);
        let net_wide = Network {
            config: wide.clone(),
            masks: net.masks.iter().map(|m| PhaseMask { grid: wide.grid, ..m.clone() }).collect(),
            fc: None,
        };
        let input = ComplexField { grid: wide.grid, ..input };
        let out = forward_channel(&input, &net_wide.masks, &wide).unwrap();
        assert!((out.energy() - input.energy()).abs() / input.energy() < 1e-9);
    }

    #[test]
    fn dark_input_predicts_class_zero_uniformly() {
        let cfg = small_config(16, vec![1.5, 1.8, 2.2], Head::Sum);
        let net = Network::init(cfg.clone(), &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let (c, s) = predict(&net, &[ComplexField::zeros(cfg.grid, 1.8)]).unwrap();
        assert_eq!(c, 0);
        assert!(s.probabilities.iter().all(|&p| (p - 0.1).abs() < 1e-15));
        assert!(s.energies.iter().all(|&e| e == 0.0));
    }

    #[test]
    fn single_channel_heads_coincide() {
        let sum_cfg = small_config(16, vec![2.2], Head::Sum);
        let max_cfg = NetworkConfig { head: Head::Maxout, ..sum_cfg.clone() };
        let sum_net = Network::init(sum_cfg, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        let max_net = Network { config: max_cfg, ..sum_net.clone() };
        let f = ComplexField { grid: sum_net.config.grid, wavelength: 2.2, samples: random_pattern(sum_net.config.grid, 9) };
        let a = predict(&sum_net, &[f.clone()]).unwrap();
        let b = predict(&max_net, &[f]).unwrap();
        assert_eq!(a.0, b.0);
        assert_eq!(a.1, b.1);
    }

    #[test]
    fn channel_permutation_and_scaling() {
        let cfg = small_config(16, vec![1.5, 1.8, 2.2], Head::Sum);
        let net = Network::init(cfg.clone(), &mut ChaCha8Rng::seed_from_u64(8)).unwrap();
        let sim = Simulator::new(&cfg).unwrap();
        let snap = sim.snapshot(&net).unwrap();
        let p = random_pattern(cfg.grid, 4);
        let a = snap.forward_subset(&p, &[0, 1, 2], false).unwrap();
        let b = snap.forward_subset(&p, &[2, 0, 1], false).unwrap();
        let max_val = |t: &ForwardTrace| t.aggregate.values.clone();
        // sums of the same three terms in a different order agree to rounding
        for (x, y) in max_val(&a).iter().zip(&max_val(&b)) {
            assert!((x - y).abs() <= 1e-15 * x.abs().max(1e-300) * 4.0);
        }
        let mcfg = NetworkConfig { head: Head::Maxout, ..cfg.clone() };
        let mnet = Network { config: mcfg.clone(), ..net.clone() };
        let msim = Simulator::new(&mcfg).unwrap();
        let msnap = msim.snapshot(&mnet).unwrap();
        let a = msnap.forward_subset(&p, &[0, 1, 2], false).unwrap();
        let b = msnap.forward_subset(&p, &[2, 0, 1], false).unwrap();
        assert_eq!(a.aggregate, b.aggregate);
        let (ia, ib) = (a.argmax.unwrap(), b.argmax.unwrap());
        let order = [2usize, 0, 1];
        assert!(ia.iter().zip(&ib).all(|(&x, &y)| x == order[y]));

        let scaled: Vec<Complex> = p.iter().map(|c| c * 3.0).collect();
        let s1 = snap.forward(&p, false).unwrap().scores;
        let s3 = snap.forward(&scaled, false).unwrap().scores;
        for (e1, e3) in s1.energies.iter().zip(&s3.energies) {
            assert!((e3 - 9.0 * e1).abs() <= 1e-12 * e3.abs());
        }
        assert_eq!(argmax(&s1.energies), argmax(&s3.energies));
        assert_eq!(s1.predicted(), s3.predicted());
    }

    #[test]
    fn predict_accepts_per_channel_fields() {
        let cfg = small_config(16, vec![1.5, 2.2], Head::Maxout);
        let net = Network::init(cfg.clone(), &mut ChaCha8Rng::seed_from_u64(6)).unwrap();
        let p = ComplexField { grid: cfg.grid, wavelength: 1.5, samples: random_pattern(cfg.grid, 2) };
        let shared = predict(&net, &[p.clone()]).unwrap();
        let split = predict(&net, &[p.clone(), p.retagged(2.2)]).unwrap();
        assert_eq!(shared, split);
        assert!(predict(&net, &[p.retagged(2.2), p.clone()]).is_err());
        let s: f64 = shared.1.probabilities.iter().sum();
        assert!((s - 1.0).abs() < 1e-12);
    }

    #[test]
    fn fc_head_needs_weights() {
        let cfg = small_config(16, vec![1.5, 2.2], Head::MaxoutFc);
        let mut net = Network::init(cfg, &mut ChaCha8Rng::seed_from_u64(6)).unwrap();
        assert!(net.validate().is_ok());
        net.fc = None;
        assert!(net.validate().is_err());
    }
}
