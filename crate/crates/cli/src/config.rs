//! Run configuration: defaults, named presets, a TOML (or resolved JSON)
//! file and command-line overrides, layered in that order.

use std::path::{Path, PathBuf};

use bsd2nn::network::{default_max_height, DetectorLayout, Head};
use bsd2nn::optics::{DispersionModel, Scheme};
use bsd2nn::training::Hyperparams;
use bsd2nn::{ChannelSet, GridSpec, NetworkConfig};
use serde::{Deserialize, Serialize};

use crate::error::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub out: PathBuf,
    pub data: DataConfig,
    pub network: NetworkSection,
    pub train: Hyperparams,
    pub sweep: SweepConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Directory holding the four uncompressed or gzipped IDX files.
    pub dir: PathBuf,
    /// Seed of the 55k/5k train/validation shuffle.
    pub split_seed: u64,
    pub train_limit: Option<usize>,
    pub val_limit: Option<usize>,
    pub test_limit: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetworkSection {
    pub grid: GridSpec,
    pub channels: Vec<f64>,
    pub layers: usize,
    /// Layer spacing as a multiple of the median wavelength.
    pub spacing_factor: f64,
    /// Explicit spacing in micrometers; overrides `spacing_factor`.
    pub layer_spacing: Option<f64>,
    pub head: Head,
    pub scheme: Scheme,
    pub padded: bool,
    pub logit_scale: f64,
    pub dispersion: DispersionModel,
    pub max_height: Option<f64>,
    pub detector: Option<DetectorLayout>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    pub min_um: f64,
    pub max_um: f64,
    pub points: usize,
    pub subset: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            out: PathBuf::from("runs/default"),
            data: DataConfig::default(),
            network: NetworkSection::default(),
            train: Hyperparams::default(),
            sweep: SweepConfig::default(),
        }
    }
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig { dir: PathBuf::from("data/fashion-mnist"), split_seed: 0, train_limit: None, val_limit: None, test_limit: None }
    }
}

impl Default for NetworkSection {
    fn default() -> Self {
        NetworkSection {
            grid: GridSpec { nx: 112, ny: 112, pitch: 0.9 },
            channels: vec![1.5, 1.8, 2.2],
            layers: 5,
            spacing_factor: 25.0,
            layer_spacing: None,
            head: Head::Sum,
            scheme: Scheme::AngularSpectrum,
            padded: false,
            logit_scale: 10.0,
            dispersion: DispersionModel::default(),
            max_height: None,
            detector: None,
        }
    }
}

impl Default for SweepConfig {
    fn default() -> Self {
        SweepConfig { min_um: 1.1, max_um: 2.5, points: 28, subset: 1000 }
    }
}

pub const PRESETS: &[(&str, &str)] = &[
    ("plain-2.2", "[network]\nchannels = [2.2]\nhead = \"sum\"\n"),
    ("c3-sum", "[network]\nchannels = [1.5, 1.8, 2.2]\nhead = \"sum\"\n"),
    ("c5-sum", "[network]\nchannels = [1.3, 1.5, 1.8, 2.0, 2.2]\nhead = \"sum\"\n"),
    ("c3-maxout", "[network]\nchannels = [1.5, 1.8, 2.2]\nhead = \"maxout\"\n"),
    ("c5-maxout", "[network]\nchannels = [1.3, 1.5, 1.8, 2.0, 2.2]\nhead = \"maxout\"\n"),
    ("c3-fc", "[network]\nchannels = [1.5, 1.8, 2.2]\nhead = \"maxout_fc\"\n"),
    (
        "desk",
        "[data]\ntrain_limit = 10000\nval_limit = 1000\ntest_limit = 1000\n\
         [train]\nepochs = 10\nlearning_rate = 10.0\n",
    ),
];

pub fn preset(name: &str) -> Result<toml::Table, CliError> {
    let (_, text) = PRESETS
        .iter()
        .find(|(n, _)| *n == name)
        .ok_or_else(|| CliError::Config(format!("unknown preset '{name}' (known: {})", preset_names())))?;
    Ok(text.parse().expect("built-in preset parses"))
}

fn preset_names() -> String {
    PRESETS.iter().map(|(n, _)| *n).collect::<Vec<_>>().join(", ")
}

/// Recursive table merge; `over` wins on conflicts.
pub fn merge(base: &mut toml::Table, over: toml::Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

/// Reads a config file: `.json` files are resolved configs, anything else is TOML.
pub fn read_layer(path: &Path) -> Result<toml::Table, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    if path.extension().is_some_and(|e| e == "json") {
        let v: serde_json::Value = serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        json_to_toml(v)
            .and_then(|t| t.as_table().cloned())
            .ok_or_else(|| CliError::Config(format!("{}: expected a JSON object", path.display())))
    } else {
        text.parse().map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
    }
}

fn json_to_toml(v: serde_json::Value) -> Option<toml::Value> {
    use serde_json::Value as J;
    Some(match v {
        J::Null => return None,
        J::Bool(b) => toml::Value::Boolean(b),
        J::Number(n) => match n.as_i64() {
            Some(i) => toml::Value::Integer(i),
            None => toml::Value::Float(n.as_f64()?),
        },
        J::String(s) => toml::Value::String(s),
        J::Array(a) => toml::Value::Array(a.into_iter().filter_map(json_to_toml).collect()),
        J::Object(o) => toml::Value::Table(o.into_iter().filter_map(|(k, v)| Some((k, json_to_toml(v)?))).collect()),
    })
}

/// Applies presets, then the file, then `overrides`, onto the defaults.
pub fn resolve(presets: &[String], file: Option<&Path>, overrides: toml::Table) -> Result<RunConfig, CliError> {
    let mut layered = toml::Table::new();
    for p in presets {
        merge(&mut layered, preset(p)?);
    }
    if let Some(f) = file {
        merge(&mut layered, read_layer(f)?);
    }
    merge(&mut layered, overrides);
    let cfg: RunConfig = toml::Value::Table(layered).try_into().map_err(|e: toml::de::Error| CliError::Config(e.to_string()))?;
    cfg.validate()?;
    Ok(cfg)
}

impl RunConfig {
    pub fn validate(&self) -> Result<(), CliError> {
        self.network_config()?;
        self.train.validate()?;
        let s = &self.sweep;
        if !(s.min_um > 0.0 && s.min_um < s.max_um) || s.points < 2 || s.subset == 0 {
            return Err(CliError::Config("sweep needs 0 < min_um < max_um, points >= 2 and subset >= 1".into()));
        }
        Ok(())
    }

    pub fn network_config(&self) -> Result<NetworkConfig, CliError> {
        let n = &self.network;
        let channels = ChannelSet::new(n.channels.clone())?;
        let mut cfg = NetworkConfig::new(n.grid, channels, n.head)?;
        cfg.layers = n.layers;
        cfg.layer_spacing = n.layer_spacing.unwrap_or(n.spacing_factor * cfg.channels.median());
        cfg.scheme = n.scheme;
        cfg.padded = n.padded;
        cfg.logit_scale = n.logit_scale;
        cfg.dispersion = n.dispersion.clone();
        cfg.max_height = match n.max_height {
            Some(h) => h,
            None => default_max_height(&cfg.channels, &cfg.dispersion)?,
        };
        if let Some(d) = &n.detector {
            cfg.detector = d.clone();
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Canonical JSON form of the fully resolved configuration.
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("config serializes");
        s.push('\n');
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_select_channels_and_heads() {
        let c = resolve(&["c5-maxout".into()], None, toml::Table::new()).unwrap();
        assert_eq!(c.network.channels, vec![1.3, 1.5, 1.8, 2.0, 2.2]);
        assert_eq!(c.network.head, Head::Maxout);
        let c = resolve(&["plain-2.2".into(), "desk".into()], None, toml::Table::new()).unwrap();
        assert_eq!(c.network.channels, vec![2.2]);
        assert_eq!(c.data.train_limit, Some(10000));
        assert_eq!(c.train.epochs, 10);
        let nc = c.network_config().unwrap();
        assert!((nc.layer_spacing - 55.0).abs() < 1e-12);
        assert!(resolve(&["c7".into()], None, toml::Table::new()).is_err());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let mut t = toml::Table::new();
        t.insert("bogus".into(), toml::Value::Integer(1));
        assert!(matches!(resolve(&[], None, t), Err(CliError::Config(_))));
        let nested: toml::Table = "[network]\nlayer = 3\n".parse().unwrap();
        assert!(resolve(&[], None, nested).is_err());
    }

    #[test]
    fn resolved_json_reproduces_the_config() {
        let dir = tempfile::tempdir().unwrap();
        let over: toml::Table = "[network]\nlayers = 2\nmax_height = 3.0\n[train]\nseed = 9\n".parse().unwrap();
        let c = resolve(&["c3-fc".into()], None, over).unwrap();
        let p = dir.path().join("config.json");
        std::fs::write(&p, c.to_json()).unwrap();
        let back = resolve(&[], Some(&p), toml::Table::new()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.to_json(), c.to_json());
    }

    #[test]
    fn invalid_values_fail_validation() {
        let bad: toml::Table = "[network]\nchannels = [2.2, 1.5]\n".parse().unwrap();
        assert!(resolve(&[], None, bad).is_err());
        let bad: toml::Table = "[sweep]\npoints = 1\n".parse().unwrap();
        assert!(resolve(&[], None, bad).is_err());
    }
}
