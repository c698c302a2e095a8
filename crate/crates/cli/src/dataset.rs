use std::path::{Path, PathBuf};

use bsd2nn::data::{load_idx, split_train_val, LabeledImage};

use crate::config::DataConfig;
use crate::error::CliError;

fn locate(dir: &Path, name: &str) -> Result<PathBuf, CliError> {
    let plain = dir.join(name);
    if plain.exists() {
        return Ok(plain);
    }
    let gz = dir.join(format!("{name}.gz"));
    if gz.exists() {
        return Ok(gz);
    }
    Err(CliError::Dataset(format!("{} not found (also tried .gz)", plain.display())))
}

fn limit(mut v: Vec<LabeledImage>, n: Option<usize>) -> Vec<LabeledImage> {
    if let Some(n) = n {
        v.truncate(n);
    }
    v
}

pub fn load_test(cfg: &DataConfig) -> Result<Vec<LabeledImage>, CliError> {
    let images = locate(&cfg.dir, "t10k-images-idx3-ubyte")?;
    let labels = locate(&cfg.dir, "t10k-labels-idx1-ubyte")?;
    Ok(limit(load_idx(&images, &labels).map_err(CliError::dataset)?, cfg.test_limit))
}

/// Seeded 55k/5k split of the training file, each part truncated to its limit.
pub fn load_train_val(cfg: &DataConfig) -> Result<(Vec<LabeledImage>, Vec<LabeledImage>), CliError> {
    let images = locate(&cfg.dir, "train-images-idx3-ubyte")?;
    let labels = locate(&cfg.dir, "train-labels-idx1-ubyte")?;
    let all = load_idx(&images, &labels).map_err(CliError::dataset)?;
    let (train, val) = split_train_val(all, cfg.split_seed).map_err(CliError::dataset)?;
    Ok((limit(train, cfg.train_limit), limit(val, cfg.val_limit)))
}
