use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use rayon::prelude::*;

use super::manifest::{DatasetEntry, Located, ModelEntry, ProjectionEntry, ProjectionSource, RunManifest, TrainingEntry, MANIFEST_VERSION};
use super::{ArchChoice, EvaluateArgs, PrepareArgs, RenderArgs, ScanArgs, TrainArgs, TrainingFlags};
use crate::architectures::{ArchitectureSpec, ArchitectureTag, DEFAULT_ALPHA, DEFAULT_BETA, DEFAULT_OMEGA};
use crate::data::{generate_rings, load_csv, load_idx, Dataset};
use crate::error::{Error, Result};
use crate::evaluation::{
    evaluate_ensemble, gradient_map, metrics_csv, parameter_scan, scan_csv, MetricsReport, Units, Weights,
    DEFAULT_MAP_MARGIN,
};
use crate::io::{matrix_to_csv, write_atomic, write_atomic_str};
use crate::projection::{load_projection, tsne_embed, ProjectionPair, TsneConfig};
use crate::render::{gradient_map_pgm, image_strip_pgm, render_scatter};
use crate::training::{load_model, save_model, train_ensemble, EnsembleRun, TrainedModel, TrainingConfig};

const DATASET_FILE: &str = "dataset.csv";
const LABELS_FILE: &str = "labels.csv";
const PROJECTION_FILE: &str = "projection.csv";

fn usage(msg: impl Into<String>) -> Error {
    Error::InvalidArgument(msg.into())
}

fn labels_csv(labels: &[i64]) -> String {
    labels.iter().map(|l| format!("{l}\n")).collect()
}

fn file_stem(p: &Path) -> String {
    let name = p.file_name().and_then(|s| s.to_str()).unwrap_or("dataset");
    name.split('.').next().unwrap_or(name).to_string()
}

pub(super) fn prepare(a: &PrepareArgs) -> Result<()> {
    let sources = [a.rings, a.csv.is_some(), a.idx_images.is_some()];
    if sources.iter().filter(|&&s| s).count() != 1 {
        return Err(usage("choose exactly one of --rings, --csv or --idx-images/--idx-labels"));
    }
    if a.limit == Some(0) {
        return Err(usage("--limit must be at least 1"));
    }
    let (mut dataset, image_shape) = if a.rings {
        (generate_rings(a.points, a.seed)?, None)
    } else if let Some(csv) = &a.csv {
        let ds = load_csv(csv, a.has_labels, a.skip_header)?;
        let ds = Dataset::new(ds.values().clone(), ds.labels().map(<[i64]>::to_vec), file_stem(csv))?;
        let shape = a.image_shape.map(|s| (s.width, s.height));
        if let Some((r, c)) = shape {
            if r * c != ds.d() {
                return Err(usage(format!("image shape {r}x{c} does not match {} columns", ds.d())));
            }
        }
        (ds, shape)
    } else {
        let images = a.idx_images.as_ref().expect("checked above");
        let labels = a.idx_labels.as_ref().ok_or_else(|| usage("--idx-images needs --idx-labels"))?;
        let (ds, shape) = load_idx(images, labels)?;
        let ds = Dataset::new(ds.values().clone(), ds.labels().map(<[i64]>::to_vec), file_stem(images))?;
        (ds, Some(shape))
    };
    if let Some(limit) = a.limit {
        if limit < dataset.n() {
            dataset = dataset.select(&(0..limit).collect::<Vec<_>>());
        }
    }

    let (pair, source) = match &a.projection {
        Some(p) => (
            load_projection(dataset, p)?,
            ProjectionSource::File {
                original: p.display().to_string(),
            },
        ),
        None => {
            let config = TsneConfig {
                perplexity: a.perplexity,
                ..TsneConfig::with_seed(a.seed)
            };
            let outcome = tsne_embed(&dataset, &config)?;
            let final_kl = outcome.final_kl();
            (outcome.pair, ProjectionSource::Tsne { config, final_kl })
        }
    };

    let data = pair.data();
    write_atomic_str(&a.out.join(DATASET_FILE), &matrix_to_csv(data.values()))?;
    if let Some(l) = data.labels() {
        write_atomic_str(&a.out.join(LABELS_FILE), &labels_csv(l))?;
    }
    write_atomic_str(&a.out.join(PROJECTION_FILE), &matrix_to_csv(pair.coords()))?;
    let located = Located {
        dir: a.out.clone(),
        manifest: RunManifest {
            version: MANIFEST_VERSION,
            seed: a.seed,
            dataset: DatasetEntry {
                name: data.name().to_string(),
                values: DATASET_FILE.into(),
                labels: data.labels().map(|_| LABELS_FILE.into()),
                image_shape,
                n: data.n(),
                d: data.d(),
            },
            projection: ProjectionEntry {
                path: PROJECTION_FILE.into(),
                source,
            },
            training: BTreeMap::new(),
        },
    };
    located.save()?;
    println!(
        "prepared {} ({} rows, {} dims) in {}",
        data.name(),
        data.n(),
        data.d(),
        a.out.display()
    );
    Ok(())
}

fn base_config(tag: ArchitectureTag, d: usize, seed: u64, flags: &TrainingFlags) -> TrainingConfig {
    let mut spec = ArchitectureSpec::new(tag, d);
    if let Some(w) = &flags.encoder_widths {
        spec.encoder_hidden = w.clone();
    }
    if let Some(w) = &flags.decoder_widths {
        spec.decoder_hidden = w.clone();
    }
    let mut cfg = TrainingConfig::new(spec, seed);
    if let Some(e) = flags.epochs {
        cfg.epochs = e;
    }
    if let Some(b) = flags.batch {
        cfg.batch_size = b;
    }
    if let Some(lr) = flags.lr {
        cfg.learning_rate = lr;
    }
    if let Some(p) = flags.dropout {
        cfg.dropout_rate = p;
    }
    cfg
}

fn run_stem(k: usize) -> String {
    format!("run{k:02}")
}

pub(super) fn train(a: &TrainArgs) -> Result<()> {
    if a.runs == 0 {
        return Err(usage("--runs must be at least 1"));
    }
    let mut located = Located::load(&a.dataset)?;
    let seed = a.seed.unwrap_or(located.manifest.seed);
    let d = located.manifest.dataset.d;

    // Every configuration is validated before any training starts.
    let mut configs = Vec::new();
    for tag in a.arch.tags() {
        let mut cfg = base_config(tag, d, seed, &a.training);
        let spec = &mut cfg.architecture;
        spec.omega = a.omega.unwrap_or(DEFAULT_OMEGA);
        spec.alpha = a.alpha.unwrap_or(DEFAULT_ALPHA);
        spec.beta = a.beta.unwrap_or(DEFAULT_BETA);
        cfg.validate()?;
        configs.push(cfg);
    }

    let pair = located.load_pair()?;
    for cfg in configs {
        let tag = cfg.architecture.tag;
        let runs = train_ensemble(&pair, &cfg, a.runs)?;
        let mut entries = Vec::with_capacity(runs.len());
        for (k, run) in runs.iter().enumerate() {
            let model = format!("models/{tag}/{}.json", run_stem(k));
            let log = format!("logs/{tag}/{}.csv", run_stem(k));
            save_model(&run.model, &located.resolve(&model))?;
            write_atomic_str(&located.resolve(&log), &run.model.training_log_csv())?;
            entries.push(ModelEntry {
                run: k,
                seed: run.model.seed,
                model,
                log,
                split: run.split.clone(),
            });
        }
        let final_losses: Vec<f64> = runs
            .iter()
            .filter_map(|r| r.model.loss_history.last().map(|p| p.total))
            .collect();
        println!(
            "{tag}: trained {} runs, mean final loss {:.6}",
            runs.len(),
            final_losses.iter().sum::<f64>() / final_losses.len() as f64
        );
        located.manifest.training.insert(tag, TrainingEntry { config: cfg, runs: entries });
        located.save()?;
    }
    Ok(())
}

fn trained_tags(located: &Located, choice: Option<ArchChoice>) -> Result<Vec<ArchitectureTag>> {
    let trained: Vec<ArchitectureTag> = located.manifest.training.keys().copied().collect();
    let tags = match choice {
        Some(c) => c.tags(),
        None => trained.clone(),
    };
    if tags.is_empty() {
        return Err(usage("no trained models; run `projlearn train` first"));
    }
    if let Some(t) = tags.iter().find(|t| !trained.contains(t)) {
        return Err(usage(format!("architecture {t} has not been trained")));
    }
    Ok(tags)
}

fn load_runs(located: &Located, tag: ArchitectureTag) -> Result<Vec<EnsembleRun>> {
    let entry = &located.manifest.training[&tag];
    entry
        .runs
        .par_iter()
        .map(|r| {
            Ok(EnsembleRun {
                model: load_model(&located.resolve(&r.model))?,
                split: r.split.clone(),
            })
        })
        .collect()
}

fn write_scatter(path: &Path, coords: &Array2<f64>, data: &Dataset, size: usize) -> Result<()> {
    let img = render_scatter(coords, data.labels(), size)?;
    write_atomic(path, &img.to_ppm())
}

fn parametric_scatter(model: &TrainedModel, pair: &ProjectionPair, out: &Path, tag: ArchitectureTag, size: usize) -> Result<()> {
    let coords = model.encode(pair.data().values())?;
    write_scatter(&out.join(format!("scatter_{tag}.ppm")), &coords, pair.data(), size)
}

pub(super) fn evaluate(a: &EvaluateArgs) -> Result<()> {
    let located = Located::load(&a.dataset)?;
    let tags = trained_tags(&located, a.arch)?;
    if let Some(s) = a.gradient_map {
        if s.width < 3 || s.height < 3 {
            return Err(usage(format!("gradient map must be at least 3x3, got {}x{}", s.width, s.height)));
        }
    }
    if a.interpolate.is_some() && a.samples < 2 {
        return Err(usage("--samples must be at least 2"));
    }
    let out = a.out.clone().unwrap_or_else(|| located.dir.clone());
    let pair = located.load_pair()?;
    let units = if a.original_units {
        Units::Original
    } else {
        Units::Standardized
    };

    let mut reports: Vec<MetricsReport> = Vec::new();
    for &tag in &tags {
        let runs = load_runs(&located, tag)?;
        let mut report = evaluate_ensemble(&runs, &pair, units)?;
        if a.no_timing {
            report = report.without_timing();
        }
        println!(
            "{tag}: parametric {:.6} (sd {:.6})  inverse {:.6} (sd {:.6})  over {} runs",
            report.parametric.mean,
            report.parametric.sd,
            report.inverse.mean,
            report.inverse.sd,
            report.runs.len()
        );
        reports.push(report);

        let first = &runs[0].model;
        parametric_scatter(first, &pair, &out, tag, a.size)?;
        if let Some(s) = a.gradient_map {
            let map = gradient_map(first, &pair, s.width, s.height, DEFAULT_MAP_MARGIN)?;
            write_atomic(&out.join(format!("gradient_{tag}.pgm")), &gradient_map_pgm(&map))?;
            write_atomic_str(&out.join(format!("gradient_{tag}.json")), &(map.sidecar_json() + "\n"))?;
            println!(
                "{tag}: gradient map {}x{} max {:.6} avg {:.6}",
                map.width, map.height, map.max_gradient, map.avg_gradient
            );
        }
        if let Some(pts) = &a.interpolate {
            let (p, q) = (pts[0], pts[1]);
            let strip = crate::evaluation::interpolation_strip(first, (p.0, p.1), (q.0, q.1), a.samples)?;
            write_atomic_str(&out.join(format!("strip_{tag}.csv")), &matrix_to_csv(&strip))?;
            if let Some(shape) = located.manifest.dataset.image_shape {
                write_atomic(&out.join(format!("strip_{tag}.pgm")), &image_strip_pgm(&strip, shape)?)?;
            }
        }
    }
    write_scatter(&out.join("scatter_reference.ppm"), pair.coords(), pair.data(), a.size)?;
    write_atomic_str(&out.join("metrics.csv"), &metrics_csv(&reports))?;
    let json = serde_json::to_string_pretty(&reports).expect("plain data");
    write_atomic_str(&out.join("metrics.json"), &(json + "\n"))?;
    Ok(())
}

fn scan_grid(tag: ArchitectureTag, a: &ScanArgs) -> Result<Vec<Weights>> {
    let list = |v: &Option<Vec<f64>>, default: f64| v.clone().unwrap_or_else(|| vec![default]);
    let grid: Vec<Weights> = match tag {
        ArchitectureTag::Ael => list(&a.omega, DEFAULT_OMEGA)
            .into_iter()
            .map(|omega| Weights {
                omega,
                alpha: DEFAULT_ALPHA,
                beta: DEFAULT_BETA,
            })
            .collect(),
        ArchitectureTag::Vael => {
            let mut g = Vec::new();
            for alpha in list(&a.alpha, DEFAULT_ALPHA) {
                for beta in list(&a.beta, DEFAULT_BETA) {
                    g.push(Weights {
                        omega: DEFAULT_OMEGA,
                        alpha,
                        beta,
                    });
                }
            }
            g
        }
        ArchitectureTag::Pr => return Err(usage("P&R has no loss weights to scan")),
    };
    if grid.is_empty() {
        return Err(usage("empty parameter grid"));
    }
    Ok(grid)
}

pub(super) fn scan(a: &ScanArgs) -> Result<()> {
    let tag = match a.arch {
        ArchChoice::One(t) => t,
        ArchChoice::All => return Err(usage("scan takes a single architecture (ael or vael)")),
    };
    if a.runs == 0 {
        return Err(usage("--runs must be at least 1"));
    }
    let located = Located::load(&a.dataset)?;
    let seed = a.seed.unwrap_or(located.manifest.seed);
    let base = base_config(tag, located.manifest.dataset.d, seed, &a.training);
    let grid = scan_grid(tag, a)?;
    for w in &grid {
        let mut cfg = base.clone();
        cfg.architecture.omega = w.omega;
        cfg.architecture.alpha = w.alpha;
        cfg.architecture.beta = w.beta;
        cfg.validate()?;
    }
    let pair = located.load_pair()?;
    let rows = parameter_scan(&pair, &base, &grid, a.runs)?;
    let out = a.out.clone().unwrap_or_else(|| located.dir.clone());
    write_atomic_str(&out.join(format!("scan_{tag}.csv")), &scan_csv(&rows))?;
    let json = serde_json::to_string_pretty(&rows).expect("plain data");
    write_atomic_str(&out.join(format!("scan_{tag}.json")), &(json + "\n"))?;
    for r in &rows {
        println!(
            "{tag} omega={} alpha={} beta={}: parametric {:.6} inverse {:.6} reconstruction {:.6}",
            r.weights.omega, r.weights.alpha, r.weights.beta, r.parametric.mean, r.inverse.mean, r.reconstruction.mean
        );
    }
    Ok(())
}

pub(super) fn render(a: &RenderArgs) -> Result<()> {
    let located = Located::load(&a.dataset)?;
    let out: PathBuf = a.out.clone().unwrap_or_else(|| located.dir.clone());
    let pair = match &a.projection {
        Some(p) => {
            let pair = load_projection(located.load_dataset()?, p)?;
            write_scatter(&out.join(format!("scatter_{}.ppm", file_stem(p))), pair.coords(), pair.data(), a.size)?;
            pair
        }
        None => {
            let pair = located.load_pair()?;
            write_scatter(&out.join("scatter_reference.ppm"), pair.coords(), pair.data(), a.size)?;
            pair
        }
    };
    for (&tag, entry) in &located.manifest.training {
        if let Some(first) = entry.runs.first() {
            let model = load_model(&located.resolve(&first.model))?;
            parametric_scatter(&model, &pair, &out, tag, a.size)?;
        }
    }
    println!("rendered scatter plots to {}", out.display());
    Ok(())
}
