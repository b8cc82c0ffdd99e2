//! `projlearn {prepare|train|evaluate|scan|render}`.
//!
//! Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure.

mod commands;
pub mod manifest;

use std::ffi::OsString;
use std::path::PathBuf;
use std::str::FromStr;

use clap::{Args, Parser, Subcommand};

use crate::architectures::ArchitectureTag;
use crate::error::{Error, Result};

pub use manifest::{Located, RunManifest, MANIFEST_FILE};

#[derive(Debug, Parser)]
#[command(name = "projlearn", version, about = "Learn parametric and inverse 2D projections")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Load or generate a dataset, compute or attach its projection, write a manifest.
    Prepare(PrepareArgs),
    /// Train ensembles of one or more architectures.
    Train(TrainArgs),
    /// Compute test metrics, gradient maps, scatter plots and interpolation strips.
    Evaluate(EvaluateArgs),
    /// Train and evaluate over a grid of loss weights.
    Scan(ScanArgs),
    /// Draw the reference projection and the parametric projections of trained models.
    Render(RenderArgs),
}

/// `pr`, `ael`, `vael` or `all`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ArchChoice {
    One(ArchitectureTag),
    All,
}

impl ArchChoice {
    pub fn tags(self) -> Vec<ArchitectureTag> {
        match self {
            ArchChoice::One(t) => vec![t],
            ArchChoice::All => ArchitectureTag::ALL.to_vec(),
        }
    }
}

impl FromStr for ArchChoice {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        if s.eq_ignore_ascii_case("all") {
            return Ok(ArchChoice::All);
        }
        s.parse().map(ArchChoice::One).map_err(|e: Error| e.to_string())
    }
}

/// `WxH`, e.g. `256x256`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Size2 {
    pub width: usize,
    pub height: usize,
}

impl FromStr for Size2 {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        let (w, h) = s
            .split_once(['x', 'X'])
            .ok_or_else(|| format!("expected WxH, got {s:?}"))?;
        let parse = |v: &str| v.trim().parse::<usize>().map_err(|_| format!("bad size {s:?}"));
        Ok(Size2 {
            width: parse(w)?,
            height: parse(h)?,
        })
    }
}

/// `x,y`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Point2(pub f64, pub f64);

impl FromStr for Point2 {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        let (x, y) = s.split_once(',').ok_or_else(|| format!("expected x,y, got {s:?}"))?;
        let parse = |v: &str| v.trim().parse::<f64>().map_err(|_| format!("bad coordinate in {s:?}"));
        Ok(Point2(parse(x)?, parse(y)?))
    }
}

#[derive(Debug, Args)]
pub struct PrepareArgs {
    /// Generate the three linked rings.
    #[arg(long, conflicts_with_all = ["csv", "idx_images"])]
    pub rings: bool,
    /// Points per ring.
    #[arg(long, default_value_t = 60, requires = "rings")]
    pub points: usize,
    /// Numeric CSV with one sample per row.
    #[arg(long, value_name = "FILE", conflicts_with = "idx_images")]
    pub csv: Option<PathBuf>,
    /// The CSV's last column holds integer class labels.
    #[arg(long, requires = "csv")]
    pub has_labels: bool,
    /// Skip the CSV's first line.
    #[arg(long, requires = "csv")]
    pub skip_header: bool,
    /// Image shape `RxC` of CSV samples, used for interpolation strips.
    #[arg(long, value_name = "RxC", requires = "csv")]
    pub image_shape: Option<Size2>,
    /// IDX image file (optionally gzipped).
    #[arg(long, value_name = "FILE", requires = "idx_labels")]
    pub idx_images: Option<PathBuf>,
    /// IDX label file (optionally gzipped).
    #[arg(long, value_name = "FILE", requires = "idx_images")]
    pub idx_labels: Option<PathBuf>,
    /// Keep only the first N samples.
    #[arg(long, value_name = "N")]
    pub limit: Option<usize>,
    /// Use this 2-column CSV as the projection instead of running t-SNE.
    #[arg(long, value_name = "FILE")]
    pub projection: Option<PathBuf>,
    /// t-SNE perplexity.
    #[arg(long, default_value_t = 30.0)]
    pub perplexity: f64,
    /// Seed for data generation, t-SNE and (by default) training.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
}

/// Overrides of the training defaults.
#[derive(Debug, Args, Clone)]
pub struct TrainingFlags {
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub dropout: Option<f64>,
    /// Encoder hidden widths, e.g. `256,128,64`.
    #[arg(long, value_delimiter = ',')]
    pub encoder_widths: Option<Vec<usize>>,
    /// Decoder hidden widths, e.g. `64,128,256`.
    #[arg(long, value_delimiter = ',')]
    pub decoder_widths: Option<Vec<usize>>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Manifest file or the directory holding it.
    #[arg(long, value_name = "PATH", default_value = ".")]
    pub dataset: PathBuf,
    #[arg(long, default_value = "all")]
    pub arch: ArchChoice,
    #[arg(long, default_value_t = 10)]
    pub runs: usize,
    /// Base seed; defaults to the manifest's seed.
    #[arg(long)]
    pub seed: Option<u64>,
    #[command(flatten)]
    pub training: TrainingFlags,
    /// AEL latent weight.
    #[arg(long, allow_negative_numbers = true)]
    pub omega: Option<f64>,
    /// VAEL latent weight.
    #[arg(long, allow_negative_numbers = true)]
    pub alpha: Option<f64>,
    /// VAEL KL weight.
    #[arg(long, allow_negative_numbers = true)]
    pub beta: Option<f64>,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long, value_name = "PATH", default_value = ".")]
    pub dataset: PathBuf,
    /// Architectures to evaluate; defaults to all trained ones.
    #[arg(long)]
    pub arch: Option<ArchChoice>,
    /// Output directory; defaults to the manifest's directory.
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,
    /// Write a gradient map of each architecture's first run.
    #[arg(long, value_name = "WxH")]
    pub gradient_map: Option<Size2>,
    /// Decode samples on the segment between two projection points.
    #[arg(long, num_args = 2, value_names = ["X0,Y0", "X1,Y1"], allow_hyphen_values = true)]
    pub interpolate: Option<Vec<Point2>>,
    #[arg(long, default_value_t = 10)]
    pub samples: usize,
    /// Report errors in original rather than standardized units.
    #[arg(long)]
    pub original_units: bool,
    /// Scatter plot size in pixels.
    #[arg(long, default_value_t = 512)]
    pub size: usize,
    /// Leave timing columns empty so output is reproducible byte for byte.
    #[arg(long)]
    pub no_timing: bool,
}

#[derive(Debug, Args)]
pub struct ScanArgs {
    #[arg(long, value_name = "PATH", default_value = ".")]
    pub dataset: PathBuf,
    #[arg(long, default_value = "ael")]
    pub arch: ArchChoice,
    /// Runs per grid point.
    #[arg(long, default_value_t = 3)]
    pub runs: usize,
    #[arg(long)]
    pub seed: Option<u64>,
    #[command(flatten)]
    pub training: TrainingFlags,
    /// ω values, comma separated.
    #[arg(long, value_delimiter = ',', allow_negative_numbers = true)]
    pub omega: Option<Vec<f64>>,
    /// α values, comma separated.
    #[arg(long, value_delimiter = ',', allow_negative_numbers = true)]
    pub alpha: Option<Vec<f64>>,
    /// β values, comma separated.
    #[arg(long, value_delimiter = ',', allow_negative_numbers = true)]
    pub beta: Option<Vec<f64>>,
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct RenderArgs {
    #[arg(long, value_name = "PATH", default_value = ".")]
    pub dataset: PathBuf,
    /// Render a different projection CSV (row-aligned with the dataset).
    #[arg(long, value_name = "FILE")]
    pub projection: Option<PathBuf>,
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,
    #[arg(long, default_value_t = 512)]
    pub size: usize,
}

/// Applies `PROJLEARN_THREADS` to the global thread pool.
fn configure_threads() -> Result<()> {
    if let Ok(v) = std::env::var("PROJLEARN_THREADS") {
        let n: usize = v
            .trim()
            .parse()
            .ok()
            .filter(|&n| n > 0)
            .ok_or_else(|| Error::InvalidArgument(format!("PROJLEARN_THREADS must be a positive integer, got {v:?}")))?;
        // Fails only if the pool already exists, e.g. when called twice in tests.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    Ok(())
}

pub fn execute(cli: Cli) -> Result<()> {
    configure_threads()?;
    match cli.command {
        Command::Prepare(a) => commands::prepare(&a),
        Command::Train(a) => commands::train(&a),
        Command::Evaluate(a) => commands::evaluate(&a),
        Command::Scan(a) => commands::scan(&a),
        Command::Render(a) => commands::render(&a),
    }
}

/// Parses `args` (including the program name), runs the command and returns the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn value_parsers() {
        assert_eq!("256x128".parse::<Size2>().unwrap(), Size2 { width: 256, height: 128 });
        assert!("256".parse::<Size2>().is_err());
        assert_eq!("-1.5,2".parse::<Point2>().unwrap(), Point2(-1.5, 2.0));
        assert_eq!("all".parse::<ArchChoice>().unwrap(), ArchChoice::All);
        assert_eq!("vael".parse::<ArchChoice>().unwrap(), ArchChoice::One(ArchitectureTag::Vael));
        assert!("pca".parse::<ArchChoice>().is_err());
    }

    #[test]
    fn usage_errors_exit_with_one() {
        assert_eq!(run(["projlearn", "frobnicate"]), 1);
        assert_eq!(run(["projlearn", "train", "--runs", "many"]), 1);
        assert_eq!(run(["projlearn", "prepare", "--rings", "--csv", "x.csv", "--out", "o"]), 1);
        assert_eq!(run(["projlearn", "--help"]), 0);
    }

    #[test]
    fn interpolate_takes_two_points() {
        let cli = Cli::try_parse_from(["projlearn", "evaluate", "--interpolate", "-0.5,0", "-9,1.5"]).unwrap();
        match cli.command {
            Command::Evaluate(a) => assert_eq!(a.interpolate.unwrap(), vec![Point2(-0.5, 0.0), Point2(-9.0, 1.5)]),
            _ => unreachable!(),
        }
        assert!(Cli::try_parse_from(["projlearn", "evaluate", "--interpolate", "0,0"]).is_err());
    }
}
