use std::fs::{self, File};
use std::io::{BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use anyhow::Context;
use bsd2nn::data::{encode_pattern, LabeledImage};
use bsd2nn::optics::PhaseMask;
use bsd2nn::training::{base_learner_report, evaluate_channels, BaseLearnerReport, Trainer};
use bsd2nn::{ComplexField, Network, Simulator};
use serde_json::json;

use crate::config::RunConfig;
use crate::dataset::{load_test, load_train_val};
use crate::error::CliError;
use crate::render::{write_map, Bounds};
use crate::report::{base_learners_csv, evaluation_csv, sweep_csv};

pub const MODEL_FILE: &str = "model.bsn";

fn out_dir(cfg: &RunConfig) -> Result<PathBuf, CliError> {
    fs::create_dir_all(&cfg.out).with_context(|| format!("creating {}", cfg.out.display()))?;
    Ok(cfg.out.clone())
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<(), CliError> {
    fs::write(path, contents).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

fn load_checkpoint(path: &Path) -> Result<Network, CliError> {
    Network::load(path).map_err(|e| match e {
        bsd2nn::Error::Io(io) => CliError::Config(format!("cannot read checkpoint {}: {io}", path.display())),
        other => CliError::from(other),
    })
}

pub struct TrainSummary {
    pub model: PathBuf,
    pub best_val_acc: f64,
    pub test: BaseLearnerReport,
}

/// Trains, keeps the best-validation parameters and evaluates them on the
/// test split. Writes `config.json`, `metrics.jsonl`, `model.bsn`,
/// `report.csv` and `base_learners.csv` into the output directory.
pub fn train(cfg: &RunConfig) -> Result<TrainSummary, CliError> {
    let net_cfg = cfg.network_config()?;
    let (train_set, val_set) = load_train_val(&cfg.data)?;
    let test_set = load_test(&cfg.data)?;
    let dir = out_dir(cfg)?;
    write(&dir.join("config.json"), cfg.to_json())?;

    let metrics_path = dir.join("metrics.jsonl");
    let mut metrics = BufWriter::new(File::create(&metrics_path).with_context(|| format!("creating {}", metrics_path.display()))?);
    let deterministic = cfg.train.deterministic;
    let epochs = cfg.train.epochs;
    let mut trainer = Trainer::from_config(net_cfg, cfg.train.clone())?;
    let outcome = trainer.run(&train_set, &val_set, |m, _| {
        let mut m = m.clone();
        if deterministic {
            m.wall_seconds = 0.0;
        }
        let line = serde_json::to_string(&m)?;
        writeln!(metrics, "{line}")?;
        metrics.flush()?;
        eprintln!("epoch {}/{epochs}  loss {:.4}  val_acc {:.4}  lr {}", m.epoch, m.train_loss, m.val_acc, m.lr);
        Ok(())
    })?;
    drop(metrics);

    let model = dir.join(MODEL_FILE);
    outcome.best.save(&model)?;
    let test = base_learner_report(&outcome.best, &test_set)?;
    write(&dir.join("report.csv"), evaluation_csv(&test.ensemble))?;
    write(&dir.join("base_learners.csv"), base_learners_csv(&test))?;
    Ok(TrainSummary { model, best_val_acc: outcome.best_val_acc, test })
}

/// Writes `eval_report.csv` and `base_learners.csv` for a checkpoint.
pub fn eval(cfg: &RunConfig, checkpoint: &Path) -> Result<BaseLearnerReport, CliError> {
    let net = load_checkpoint(checkpoint)?;
    let test_set = load_test(&cfg.data)?;
    let report = base_learner_report(&net, &test_set)?;
    let dir = out_dir(cfg)?;
    write(&dir.join("eval_report.csv"), evaluation_csv(&report.ensemble))?;
    write(&dir.join("base_learners.csv"), base_learners_csv(&report))?;
    Ok(report)
}

/// `points` evenly spaced wavelengths from `min` to `max` inclusive.
pub fn sweep_wavelengths(min: f64, max: f64, points: usize) -> Vec<f64> {
    let step = (max - min) / (points - 1) as f64;
    (0..points).map(|i| if i + 1 == points { max } else { min + step * i as f64 }).collect()
}

/// Accuracy of the fixed masks illuminated by a single wavelength at a time.
pub fn sweep_network(net: &Network, images: &[LabeledImage], wavelengths: &[f64]) -> Result<Vec<(f64, f64)>, CliError> {
    wavelengths
        .iter()
        .map(|&l| {
            let sim = Simulator::for_wavelengths(&net.config, &[l])?;
            let snap = sim.snapshot(net)?;
            Ok((l, evaluate_channels(&snap, images, &[0])?.accuracy()))
        })
        .collect()
}

/// Writes `sweep.csv`.
pub fn sweep(cfg: &RunConfig, checkpoint: &Path) -> Result<Vec<(f64, f64)>, CliError> {
    let net = load_checkpoint(checkpoint)?;
    let mut test_set = load_test(&cfg.data)?;
    test_set.truncate(cfg.sweep.subset);
    let s = &cfg.sweep;
    let rows = sweep_network(&net, &test_set, &sweep_wavelengths(s.min_um, s.max_um, s.points))?;
    let dir = out_dir(cfg)?;
    write(&dir.join("sweep.csv"), sweep_csv(&rows))?;
    Ok(rows)
}

pub enum RenderSource<'a> {
    /// Mask height maps, plus the detector-plane maps for one test image.
    Checkpoint { path: &'a Path, sample: Option<usize> },
    /// Intensity of a stored field.
    Field(&'a Path),
}

/// Writes PGM (optionally PNG) heatmaps and `render.json` with their bounds.
pub fn render(cfg: &RunConfig, source: RenderSource<'_>, png: bool) -> Result<Vec<Bounds>, CliError> {
    let mut bounds = Vec::new();
    match source {
        RenderSource::Field(path) => {
            let f = ComplexField::load(path)?;
            let dir = out_dir(cfg)?;
            let values: Vec<f64> = f.samples.iter().map(|c| c.norm_sqr()).collect();
            bounds.push(write_map(&dir, "intensity", &values, f.grid.nx, f.grid.ny, png)?);
        }
        RenderSource::Checkpoint { path, sample } => {
            let net = load_checkpoint(path)?;
            let (nx, ny) = (net.config.grid.nx, net.config.grid.ny);
            let image = match sample {
                Some(i) => Some(
                    load_test(&cfg.data)?
                        .into_iter()
                        .nth(i)
                        .ok_or_else(|| CliError::Dataset(format!("test sample {i} out of range")))?,
                ),
                None => None,
            };
            let dir = out_dir(cfg)?;
            for (i, m) in net.masks.iter().enumerate() {
                bounds.push(write_map(&dir, &format!("mask_{i}"), &m.heights, nx, ny, png)?);
            }
            if let (Some(i), Some(img)) = (sample, image) {
                let sim = Simulator::new(&net.config)?;
                let snap = sim.snapshot(&net)?;
                let trace = snap.forward(&encode_pattern(&img, net.config.grid)?, true)?;
                bounds.push(write_map(&dir, &format!("output_{i}"), &trace.aggregate.values, nx, ny, png)?);
                for (t, map) in trace.intensities.iter().enumerate() {
                    bounds.push(write_map(&dir, &format!("output_{i}_ch{t}"), &map.values, nx, ny, png)?);
                }
            }
        }
    }
    let dir = out_dir(cfg)?;
    let mut sidecar = serde_json::to_string_pretty(&bounds).context("serializing bounds")?;
    sidecar.push('\n');
    write(&dir.join("render.json"), sidecar)?;
    Ok(bounds)
}

fn stats(v: &[f64]) -> serde_json::Value {
    let min = v.iter().copied().fold(f64::INFINITY, f64::min);
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mean = v.iter().sum::<f64>() / v.len().max(1) as f64;
    json!({ "min": min, "max": max, "mean": mean })
}

/// Metadata of a BSN1, BSM1 or BSF1 file as pretty JSON.
pub fn inspect(path: &Path) -> Result<String, CliError> {
    let mut magic = [0u8; 4];
    File::open(path)
        .and_then(|mut f| f.read_exact(&mut magic))
        .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
    let v = match &magic {
        b"BSN1" => {
            let net = load_checkpoint(path)?;
            json!({
                "format": "BSN1",
                "config": net.config,
                "masks": net.masks.iter().map(|m| stats(&m.heights)).collect::<Vec<_>>(),
                "fc": net.fc.as_ref().map(|f| json!({ "inputs": f.inputs, "outputs": f.outputs })),
            })
        }
        b"BSM1" => {
            let mut r = std::io::BufReader::new(File::open(path)?);
            let m = PhaseMask::read_from(&mut r, path)?;
            json!({
                "format": "BSM1",
                "grid": m.grid,
                "max_height": m.max_height,
                "dispersion": m.dispersion,
                "heights": stats(&m.heights),
            })
        }
        b"BSF1" => {
            let f = ComplexField::load(path)?;
            json!({ "format": "BSF1", "grid": f.grid, "wavelength": f.wavelength, "energy": f.energy() })
        }
        other => return Err(CliError::Config(format!("{}: unrecognized magic {other:?}", path.display()))),
    };
    let mut s = serde_json::to_string_pretty(&v).context("serializing metadata")?;
    s.push('\n');
    Ok(s)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sweep_grid_hits_both_ends() {
        let w = sweep_wavelengths(1.1, 2.5, 28);
        assert_eq!(w.len(), 28);
        assert_eq!((w[0], w[27]), (1.1, 2.5));
        assert!(w.windows(2).all(|p| p[1] > p[0]));
        assert_eq!(sweep_wavelengths(1.1, 2.5, 2), vec![1.1, 2.5]);
    }
}
