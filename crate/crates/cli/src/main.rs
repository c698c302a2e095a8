use std::path::PathBuf;
use std::process::ExitCode;

use bsd2nn_cli::commands::{self, RenderSource};
use bsd2nn_cli::config::resolve;
use bsd2nn_cli::{CliError, RunConfig};
use clap::{Parser, Subcommand};

/// Broad-spectrum diffractive deep neural network experiments.
#[derive(Parser)]
#[command(name = "bsd2nn", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// TOML run configuration (or a resolved `config.json`).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Named preset; repeatable, applied in order before the config file.
    #[arg(long = "preset", global = true)]
    presets: Vec<String>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (defaults to all cores).
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// Ordered reductions and zeroed timings for byte-identical outputs.
    #[arg(long, global = true)]
    deterministic: bool,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Train a network and evaluate the best-validation checkpoint.
    Train,
    /// Evaluate a checkpoint, including per-wavelength base learners.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Accuracy under single-wavelength illumination across a band.
    Sweep {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        min: Option<f64>,
        #[arg(long)]
        max: Option<f64>,
        #[arg(long)]
        points: Option<usize>,
        /// Number of test images.
        #[arg(long)]
        subset: Option<usize>,
    },
    /// Grayscale heatmaps of masks, output planes or stored fields.
    Render {
        #[arg(long, conflicts_with = "field", required_unless_present = "field")]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        field: Option<PathBuf>,
        /// Also render the detector plane for this test image.
        #[arg(long, requires = "checkpoint")]
        sample: Option<usize>,
        #[arg(long)]
        png: bool,
    },
    /// Print checkpoint, mask or field metadata.
    Inspect { path: PathBuf },
}

fn overrides(cli: &Cli) -> toml::Table {
    let mut t = toml::Table::new();
    let mut train = toml::Table::new();
    let mut sweep = toml::Table::new();
    if let Some(s) = cli.seed {
        train.insert("seed".into(), toml::Value::Integer(s as i64));
    }
    if cli.deterministic {
        train.insert("deterministic".into(), toml::Value::Boolean(true));
    }
    if let Some(o) = &cli.out {
        t.insert("out".into(), toml::Value::String(o.to_string_lossy().into_owned()));
    }
    if let Command::Sweep { min, max, points, subset, .. } = &cli.command {
        let mut put = |k: &str, v: Option<toml::Value>| {
            if let Some(v) = v {
                sweep.insert(k.into(), v);
            }
        };
        put("min_um", min.map(toml::Value::Float));
        put("max_um", max.map(toml::Value::Float));
        put("points", points.map(|p| toml::Value::Integer(p as i64)));
        put("subset", subset.map(|p| toml::Value::Integer(p as i64)));
    }
    if !train.is_empty() {
        t.insert("train".into(), toml::Value::Table(train));
    }
    if !sweep.is_empty() {
        t.insert("sweep".into(), toml::Value::Table(sweep));
    }
    t
}

fn run(cli: Cli) -> Result<(), CliError> {
    if let Some(n) = cli.workers {
        if n == 0 {
            return Err(CliError::Config("--workers must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global().map_err(|e| CliError::Other(e.into()))?;
    }
    if let Command::Inspect { path } = &cli.command {
        print!("{}", commands::inspect(path)?);
        return Ok(());
    }
    let cfg: RunConfig = resolve(&cli.presets, cli.config.as_deref(), overrides(&cli))?;
    match &cli.command {
        Command::Train => {
            let s = commands::train(&cfg)?;
            println!("best validation accuracy {:.4}", s.best_val_acc);
            println!("test accuracy {:.4} ({} images)", s.test.ensemble.accuracy(), s.test.ensemble.count);
            println!("checkpoint {}", s.model.display());
        }
        Command::Eval { checkpoint } => {
            let r = commands::eval(&cfg, checkpoint)?;
            for (l, e) in r.wavelengths.iter().zip(&r.base) {
                println!("base {l} um: {:.4}", e.accuracy());
            }
            println!("ensemble: {:.4} ({} images)", r.ensemble.accuracy(), r.ensemble.count);
        }
        Command::Sweep { checkpoint, .. } => {
            for (l, a) in commands::sweep(&cfg, checkpoint)? {
                println!("{l:.4} um  {a:.4}");
            }
        }
        Command::Render { checkpoint, field, sample, png } => {
            let source = match (checkpoint, field) {
                (Some(path), _) => RenderSource::Checkpoint { path, sample: *sample },
                (None, Some(f)) => RenderSource::Field(f),
                (None, None) => unreachable!("clap requires one source"),
            };
            for b in commands::render(&cfg, source, *png)? {
                println!("{}  [{}, {}]", b.file, b.min, b.max);
            }
        }
        Command::Inspect { .. } => unreachable!(),
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
