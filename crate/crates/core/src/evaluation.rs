//! Test-set errors, gradient maps, interpolation strips and ensemble reports.

use std::time::Instant;

use ndarray::{s, Array2, ArrayView1, ArrayView2, Axis};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::architectures::{mse, ArchitectureTag};
use crate::error::{Error, Result};
use crate::projection::ProjectionPair;
use crate::training::{train_ensemble, EnsembleRun, TrainedModel, TrainingConfig};

pub const DEFAULT_MAP_SIZE: usize = 256;
pub const DEFAULT_MAP_MARGIN: f64 = 0.05;

/// Space in which squared errors are measured.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Units {
    /// Per-dimension z-scores from the model's training-split standardizers.
    #[default]
    Standardized,
    Original,
}

fn test_rows(pair: &ProjectionPair, test: &[usize]) -> Result<(Array2<f64>, Array2<f64>)> {
    if test.is_empty() {
        return Err(Error::InvalidArgument("empty test set".into()));
    }
    let n = pair.data().n();
    if let Some(&bad) = test.iter().find(|&&i| i >= n) {
        return Err(Error::InvalidArgument(format!("test index {bad} out of range for {n} rows")));
    }
    Ok((
        pair.data().values().select(Axis(0), test),
        pair.coords().select(Axis(0), test),
    ))
}

/// Mean over test rows of `‖encode(x) − P(x)‖²`.
pub fn parametric_mse(model: &TrainedModel, pair: &ProjectionPair, test: &[usize]) -> Result<f64> {
    parametric_mse_in(model, pair, test, Units::Standardized)
}

/// Mean over test rows of `‖decode(P(x)) − x‖²`.
pub fn inverse_mse(model: &TrainedModel, pair: &ProjectionPair, test: &[usize]) -> Result<f64> {
    inverse_mse_in(model, pair, test, Units::Standardized)
}

/// Mean over test rows of `‖decode(encode(x)) − x‖²` in standardized units:
/// the autoencoder's own round trip, which bypasses the reference projection.
pub fn reconstruction_mse(model: &TrainedModel, pair: &ProjectionPair, test: &[usize]) -> Result<f64> {
    let (x, _) = test_rows(pair, test)?;
    let xs = model.data_standardizer.apply(&x)?;
    let latent = model.encode_standardized(&xs)?;
    mse(&model.decode_standardized(&latent)?, &xs)
}

pub fn parametric_mse_in(model: &TrainedModel, pair: &ProjectionPair, test: &[usize], units: Units) -> Result<f64> {
    let (x, y) = test_rows(pair, test)?;
    match units {
        Units::Standardized => {
            let xs = model.data_standardizer.apply(&x)?;
            let ys = model.projection_standardizer.apply(&y)?;
            mse(&model.encode_standardized(&xs)?, &ys)
        }
        Units::Original => mse(&model.encode(&x)?, &y),
    }
}

pub fn inverse_mse_in(model: &TrainedModel, pair: &ProjectionPair, test: &[usize], units: Units) -> Result<f64> {
    let (x, y) = test_rows(pair, test)?;
    match units {
        Units::Standardized => {
            let xs = model.data_standardizer.apply(&x)?;
            let ys = model.projection_standardizer.apply(&y)?;
            mse(&model.decode_standardized(&ys)?, &xs)
        }
        Units::Original => mse(&model.decode(&y)?, &x),
    }
}

/// Raster of the inverse projection's pseudo-derivative
/// `G(ŷ) = √(‖P⁻¹(ŷ_left) − P⁻¹(ŷ_right)‖² + ‖P⁻¹(ŷ_up) − P⁻¹(ŷ_down)‖²)`.
///
/// `values[[r, c]]` belongs to the pixel centred at
/// `(x_min + (c + ½)·h_x, y_max − (r + ½)·h_y)`; row 0 is the top of the image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradientMap {
    pub width: usize,
    pub height: usize,
    #[serde(skip)]
    pub values: Array2<f64>,
    pub x_range: (f64, f64),
    pub y_range: (f64, f64),
    pub max_gradient: f64,
    pub avg_gradient: f64,
}

impl GradientMap {
    pub fn pixel_size(&self) -> (f64, f64) {
        (
            (self.x_range.1 - self.x_range.0) / self.width as f64,
            (self.y_range.1 - self.y_range.0) / self.height as f64,
        )
    }

    pub fn pixel_center(&self, row: usize, col: usize) -> (f64, f64) {
        pixel_center(self.x_range, self.y_range, self.width, self.height, row, col)
    }

    /// Pixels with all four neighbours inside the grid.
    pub fn interior(&self) -> ArrayView2<'_, f64> {
        self.values.slice(s![1..self.height - 1, 1..self.width - 1])
    }

    /// JSON with ranges and statistics (the raster itself is stored separately).
    pub fn sidecar_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("plain data")
    }
}

fn pixel_center(xr: (f64, f64), yr: (f64, f64), w: usize, h: usize, row: usize, col: usize) -> (f64, f64) {
    let hx = (xr.1 - xr.0) / w as f64;
    let hy = (yr.1 - yr.0) / h as f64;
    (xr.0 + (col as f64 + 0.5) * hx, yr.1 - (row as f64 + 0.5) * hy)
}

/// Bounding box of `coords` grown by `margin` times its extent on every side.
pub fn expanded_bounds(coords: &Array2<f64>, margin: f64) -> Result<((f64, f64), (f64, f64))> {
    if coords.nrows() == 0 || coords.ncols() != 2 {
        return Err(Error::Shape(format!("expected n×2 coordinates, got {:?}", coords.dim())));
    }
    if !(margin >= 0.0 && margin.is_finite()) {
        return Err(Error::InvalidArgument(format!("margin must be >= 0, got {margin}")));
    }
    let range = |col: ArrayView1<f64>| {
        let lo = col.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = col.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        (lo, hi)
    };
    let (x0, x1) = range(coords.column(0));
    let (y0, y1) = range(coords.column(1));
    if x1 - x0 <= 0.0 || y1 - y0 <= 0.0 {
        return Err(Error::InvalidArgument(
            "projection bounding box has zero extent".into(),
        ));
    }
    let (mx, my) = (margin * (x1 - x0), margin * (y1 - y0));
    Ok(((x0 - mx, x1 + mx), (y0 - my, y1 + my)))
}

/// Gradient map of `model.decode` (original units) over the projection's
/// bounding box.
pub fn gradient_map(
    model: &TrainedModel,
    pair: &ProjectionPair,
    width: usize,
    height: usize,
    margin: f64,
) -> Result<GradientMap> {
    let (xr, yr) = expanded_bounds(pair.coords(), margin)?;
    gradient_map_of(|y| model.decode(y), xr, yr, width, height)
}

/// Rows of pixels handled per parallel task.
const MAP_BAND: usize = 16;

/// Gradient map of an arbitrary decoder over the given ranges.
///
/// Border pixels substitute the pixel itself for the missing neighbour.
pub fn gradient_map_of<F>(decode: F, x_range: (f64, f64), y_range: (f64, f64), width: usize, height: usize) -> Result<GradientMap>
where
    F: Fn(&Array2<f64>) -> Result<Array2<f64>> + Sync,
{
    if width < 3 || height < 3 {
        return Err(Error::InvalidArgument(format!(
            "gradient map must be at least 3x3, got {width}x{height}"
        )));
    }
    if !(x_range.1 > x_range.0 && y_range.1 > y_range.0) {
        return Err(Error::InvalidArgument("gradient map ranges have zero extent".into()));
    }
    let decode_row = |r: usize| -> Result<Array2<f64>> {
        let pts = Array2::from_shape_fn((width, 2), |(c, k)| {
            let (x, y) = pixel_center(x_range, y_range, width, height, r, c);
            if k == 0 {
                x
            } else {
                y
            }
        });
        decode(&pts)
    };
    let starts: Vec<usize> = (0..height).step_by(MAP_BAND).collect();
    let bands: Vec<Array2<f64>> = starts
        .par_iter()
        .map(|&r0| -> Result<Array2<f64>> {
            let r1 = (r0 + MAP_BAND).min(height);
            let lo = r0.saturating_sub(1);
            let hi = (r1 + 1).min(height);
            let decoded: Vec<Array2<f64>> = (lo..hi).map(decode_row).collect::<Result<_>>()?;
            let mut band = Array2::zeros((r1 - r0, width));
            for r in r0..r1 {
                let up = &decoded[r.saturating_sub(1) - lo];
                let mid = &decoded[r - lo];
                let down = &decoded[(r + 1).min(height - 1) - lo];
                for c in 0..width {
                    let left = mid.row(c.saturating_sub(1));
                    let right = mid.row((c + 1).min(width - 1));
                    let h2 = sq_dist(left, right);
                    let v2 = sq_dist(up.row(c), down.row(c));
                    band[[r - r0, c]] = (h2 + v2).sqrt();
                }
            }
            Ok(band)
        })
        .collect::<Result<_>>()?;
    let views: Vec<_> = bands.iter().map(|b| b.view()).collect();
    let values = ndarray::concatenate(Axis(0), &views).expect("bands share width");
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical("decoder produced non-finite values on the grid".into()));
    }
    let max_gradient = values.iter().copied().fold(0.0, f64::max);
    let avg_gradient = values.sum() / values.len() as f64;
    Ok(GradientMap {
        width,
        height,
        values,
        x_range,
        y_range,
        max_gradient,
        avg_gradient,
    })
}

fn sq_dist(a: ArrayView1<f64>, b: ArrayView1<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Decodes `k` equally spaced points from `a` to `b` inclusive (`k × d`).
pub fn interpolation_strip(model: &TrainedModel, a: (f64, f64), b: (f64, f64), k: usize) -> Result<Array2<f64>> {
    model.decode(&interpolation_points(a, b, k)?)
}

pub fn interpolation_points(a: (f64, f64), b: (f64, f64), k: usize) -> Result<Array2<f64>> {
    if k < 2 {
        return Err(Error::InvalidArgument(format!("need at least 2 samples, got {k}")));
    }
    Ok(Array2::from_shape_fn((k, 2), |(i, j)| {
        let t = i as f64 / (k - 1) as f64;
        let (p, q) = if j == 0 { (a.0, b.0) } else { (a.1, b.1) };
        p + t * (q - p)
    }))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub run: usize,
    pub seed: u64,
    pub parametric_mse: f64,
    pub inverse_mse: f64,
    /// `None` when timing is suppressed for reproducible output.
    pub train_seconds: Option<f64>,
    pub inference_seconds: Option<f64>,
}

/// Mean and population standard deviation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub mean: f64,
    pub sd: f64,
}

impl Aggregate {
    pub fn of(values: &[f64]) -> Self {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        Aggregate { mean, sd: var.sqrt() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub architecture: ArchitectureTag,
    pub dataset: String,
    pub units: Units,
    /// Always "population" (divide by N).
    pub sd_convention: String,
    pub runs: Vec<RunMetrics>,
    pub parametric: Aggregate,
    pub inverse: Aggregate,
}

impl MetricsReport {
    pub fn from_runs(architecture: ArchitectureTag, dataset: &str, units: Units, runs: Vec<RunMetrics>) -> Result<Self> {
        if runs.is_empty() {
            return Err(Error::InvalidArgument("report needs at least one run".into()));
        }
        let p: Vec<f64> = runs.iter().map(|r| r.parametric_mse).collect();
        let i: Vec<f64> = runs.iter().map(|r| r.inverse_mse).collect();
        Ok(MetricsReport {
            architecture,
            dataset: dataset.to_string(),
            units,
            sd_convention: "population".into(),
            parametric: Aggregate::of(&p),
            inverse: Aggregate::of(&i),
            runs,
        })
    }

    pub fn without_timing(mut self) -> Self {
        for r in &mut self.runs {
            r.train_seconds = None;
            r.inference_seconds = None;
        }
        self
    }
}

pub const METRICS_CSV_HEADER: &str = "run,arch,dataset,parametric_mse,inverse_mse,train_s,infer_s";

/// One row per run followed by `mean` and `sd` rows; missing timings are empty cells.
pub fn metrics_csv(reports: &[MetricsReport]) -> String {
    let opt = |v: Option<f64>| v.map(|v| v.to_string()).unwrap_or_default();
    let mut out = format!("{METRICS_CSV_HEADER}\n");
    for rep in reports {
        let (arch, ds) = (rep.architecture, &rep.dataset);
        for r in &rep.runs {
            out.push_str(&format!(
                "{},{arch},{ds},{},{},{},{}\n",
                r.run,
                r.parametric_mse,
                r.inverse_mse,
                opt(r.train_seconds),
                opt(r.inference_seconds)
            ));
        }
        out.push_str(&format!("mean,{arch},{ds},{},{},,\n", rep.parametric.mean, rep.inverse.mean));
        out.push_str(&format!("sd,{arch},{ds},{},{},,\n", rep.parametric.sd, rep.inverse.sd));
    }
    out
}

fn run_metrics(k: usize, run: &EnsembleRun, pair: &ProjectionPair, units: Units) -> Result<RunMetrics> {
    let start = Instant::now();
    let parametric_mse = parametric_mse_in(&run.model, pair, &run.split.test, units)?;
    let inverse_mse = inverse_mse_in(&run.model, pair, &run.split.test, units)?;
    let inference = start.elapsed().as_secs_f64().max(f64::MIN_POSITIVE);
    Ok(RunMetrics {
        run: k,
        seed: run.model.seed,
        parametric_mse,
        inverse_mse,
        train_seconds: Some(run.model.train_seconds.max(f64::MIN_POSITIVE)),
        inference_seconds: Some(inference),
    })
}

/// Per-run test metrics with aggregates.
pub fn evaluate_ensemble(runs: &[EnsembleRun], pair: &ProjectionPair, units: Units) -> Result<MetricsReport> {
    let first = runs
        .first()
        .ok_or_else(|| Error::InvalidArgument("no runs to evaluate".into()))?;
    let tag = first.model.spec.tag;
    if runs.iter().any(|r| r.model.spec.tag != tag) {
        return Err(Error::InvalidArgument("ensemble mixes architectures".into()));
    }
    let metrics = runs
        .par_iter()
        .enumerate()
        .map(|(k, r)| run_metrics(k, r, pair, units))
        .collect::<Result<Vec<_>>>()?;
    MetricsReport::from_runs(tag, pair.data().name(), units, metrics)
}

/// Loss weights of one scan point; unused weights are ignored by the architecture.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Weights {
    pub omega: f64,
    pub alpha: f64,
    pub beta: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScanRow {
    pub weights: Weights,
    pub parametric: Aggregate,
    pub inverse: Aggregate,
    /// Round-trip reconstruction through the model's own latent.
    pub reconstruction: Aggregate,
}

/// Trains `runs_per_point` models per weight combination and reports mean
/// test errors, sorted by ω for AEL and by (α, β) otherwise.
pub fn parameter_scan(
    pair: &ProjectionPair,
    base: &TrainingConfig,
    grid: &[Weights],
    runs_per_point: usize,
) -> Result<Vec<ScanRow>> {
    if grid.is_empty() {
        return Err(Error::InvalidArgument("parameter grid is empty".into()));
    }
    let mut rows = Vec::with_capacity(grid.len());
    for w in grid {
        let mut cfg = base.clone();
        cfg.architecture.omega = w.omega;
        cfg.architecture.alpha = w.alpha;
        cfg.architecture.beta = w.beta;
        let runs = train_ensemble(pair, &cfg, runs_per_point)?;
        let report = evaluate_ensemble(&runs, pair, Units::Standardized)?;
        let recon: Vec<f64> = runs
            .iter()
            .map(|r| reconstruction_mse(&r.model, pair, &r.split.test))
            .collect::<Result<_>>()?;
        rows.push(ScanRow {
            weights: *w,
            parametric: report.parametric,
            inverse: report.inverse,
            reconstruction: Aggregate::of(&recon),
        });
    }
    let key = |w: &Weights| match base.architecture.tag {
        ArchitectureTag::Ael => [w.omega, w.alpha, w.beta],
        _ => [w.alpha, w.beta, w.omega],
    };
    rows.sort_by(|a, b| {
        key(&a.weights)
            .iter()
            .zip(key(&b.weights).iter())
            .map(|(x, y)| x.total_cmp(y))
            .find(|o| o.is_ne())
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    Ok(rows)
}

pub fn scan_csv(rows: &[ScanRow]) -> String {
    let mut out = String::from(
        "omega,alpha,beta,parametric_mse,parametric_sd,inverse_mse,inverse_sd,reconstruction_mse,reconstruction_sd\n",
    );
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{}\n",
            r.weights.omega,
            r.weights.alpha,
            r.weights.beta,
            r.parametric.mean,
            r.parametric.sd,
            r.inverse.mean,
            r.inverse.sd,
            r.reconstruction.mean,
            r.reconstruction.sd
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::architectures::{ArchitectureSpec, ModelNets};
    use crate::data::{Dataset, SplitIndices, Standardizer, CONSTANT_COLUMN_EPSILON};
    use crate::nn::{Layer, Network};
    use ndarray::{array, Array1};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn linear(w: Array2<f64>, b: Array1<f64>) -> Network {
        Network::new(vec![Layer::affine(w, b)]).unwrap()
    }

    /// 2D data whose projection is the data itself.
    fn identity_pair(n: usize, seed: u64) -> ProjectionPair {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = Array2::from_shape_fn((n, 2), |(_, j)| rng.random_range(-1.0..1.0) * (j + 1) as f64 + 3.0);
        ProjectionPair::new(Dataset::new(x.clone(), None, "plane").unwrap(), x, "identity").unwrap()
    }

    fn model_with(pair: &ProjectionPair, train: &[usize], encoder: Network, decoder: Network) -> TrainedModel {
        let spec = ArchitectureSpec::new(ArchitectureTag::Ael, pair.data().d()).with_hidden(vec![], vec![]);
        TrainedModel {
            config: TrainingConfig::new(spec.clone(), 0),
            spec,
            nets: ModelNets { encoder, decoder },
            data_standardizer: Standardizer::fit(&pair.data().values().select(Axis(0), train), CONSTANT_COLUMN_EPSILON)
                .unwrap(),
            projection_standardizer: Standardizer::fit(&pair.coords().select(Axis(0), train), CONSTANT_COLUMN_EPSILON)
                .unwrap(),
            loss_history: vec![],
            seed: 0,
            train_seconds: 1e-3,
        }
    }

    #[test]
    fn perfect_and_mean_models() {
        let pair = identity_pair(50, 1);
        let all: Vec<usize> = (0..50).collect();
        let eye = || linear(Array2::eye(2), Array1::zeros(2));
        let perfect = model_with(&pair, &all[..40], eye(), eye());
        assert!(parametric_mse(&perfect, &pair, &all[40..]).unwrap() < 1e-24);
        assert!(inverse_mse(&perfect, &pair, &all[40..]).unwrap() < 1e-24);
        assert!(reconstruction_mse(&perfect, &pair, &all[40..]).unwrap() < 1e-24);

        // zero output in standardized units is the training mean; on the
        // training rows the error is the total variance of z-scores
        let zero = || linear(Array2::zeros((2, 2)), Array1::zeros(2));
        let mean_model = model_with(&pair, &all, zero(), zero());
        assert!((parametric_mse(&mean_model, &pair, &all).unwrap() - 2.0).abs() < 1e-12);
        assert!((inverse_mse(&mean_model, &pair, &all).unwrap() - 2.0).abs() < 1e-12);
        assert!((reconstruction_mse(&mean_model, &pair, &all).unwrap() - 2.0).abs() < 1e-12);
        // a decoder that undoes any encoder reconstructs perfectly even when the latent is wrong
        let swap = || linear(array![[0.0, 1.0], [1.0, 0.0]], Array1::zeros(2));
        let swapped = model_with(&pair, &all, swap(), swap());
        assert!(reconstruction_mse(&swapped, &pair, &all).unwrap() < 1e-24);
        assert!(inverse_mse(&swapped, &pair, &all).unwrap() > 1.0);
        assert!(parametric_mse(&mean_model, &pair, &[]).is_err());
    }

    #[test]
    fn decoder_emitting_mean_costs_d() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Array2::from_shape_fn((60, 5), |_| rng.random_range(-2.0..2.0));
        let y = Array2::from_shape_fn((60, 2), |_| rng.random_range(-2.0..2.0));
        let pair = ProjectionPair::new(Dataset::new(x, None, "five").unwrap(), y, "random").unwrap();
        let all: Vec<usize> = (0..60).collect();
        let m = model_with(
            &pair,
            &all,
            linear(Array2::zeros((2, 5)), Array1::zeros(2)),
            linear(Array2::zeros((5, 2)), Array1::zeros(5)),
        );
        assert!((inverse_mse(&m, &pair, &all).unwrap() - 5.0).abs() < 1e-12);
        let orig = inverse_mse_in(&m, &pair, &all, Units::Original).unwrap();
        let var_sum: f64 = pair.data().values().var_axis(Axis(0), 0.0).sum();
        assert!((orig - var_sum).abs() < 1e-12);
    }

    #[test]
    fn mse_ignores_test_row_order() {
        let pair = identity_pair(40, 2);
        let all: Vec<usize> = (0..40).collect();
        let m = model_with(
            &pair,
            &all[..30],
            linear(array![[0.9, 0.1], [-0.2, 1.1]], array![0.1, 0.0]),
            linear(array![[1.2, 0.0], [0.3, 0.8]], array![0.0, -0.2]),
        );
        let mut shuffled = all[30..].to_vec();
        shuffled.reverse();
        shuffled.swap(0, 4);
        let a = parametric_mse(&m, &pair, &all[30..]).unwrap();
        let b = parametric_mse(&m, &pair, &shuffled).unwrap();
        assert!((a - b).abs() < 1e-12);
        let a = inverse_mse(&m, &pair, &all[30..]).unwrap();
        let b = inverse_mse(&m, &pair, &shuffled).unwrap();
        assert!((a - b).abs() < 1e-12);
    }

    fn decode_with(a: Array2<f64>, c: Array1<f64>) -> impl Fn(&Array2<f64>) -> Result<Array2<f64>> + Sync {
        move |y: &Array2<f64>| Ok(y.dot(&a.t()) + &c)
    }

    #[test]
    fn linear_decoder_matches_closed_form() {
        let a = array![[1.0, -2.0], [0.5, 3.0], [-1.5, 0.25]];
        let map = gradient_map_of(decode_with(a.clone(), array![1.0, 2.0, 3.0]), (-1.0, 3.0), (2.0, 5.0), 40, 30).unwrap();
        let (hx, hy) = map.pixel_size();
        let gx = a.dot(&array![2.0 * hx, 0.0]);
        let gy = a.dot(&array![0.0, 2.0 * hy]);
        let expected = (gx.dot(&gx) + gy.dot(&gy)).sqrt();
        for &v in map.interior() {
            assert!((v - expected).abs() < 1e-9);
        }
        assert!(map.values.iter().all(|&v| v >= 0.0));
        assert!(map.avg_gradient <= map.max_gradient);
        assert!((map.max_gradient - map.values.iter().copied().fold(0.0, f64::max)).abs() < 1e-12);
        assert!((map.avg_gradient - map.values.mean().unwrap()).abs() < 1e-12);
        // one-sided differences on the border halve the step in one direction
        let gx1 = a.dot(&array![hx, 0.0]);
        let corner = (gx1.dot(&gx1) + gy.dot(&gy)).sqrt();
        assert!((map.values[[5, 0]] - corner).abs() < 1e-9);
    }

    #[test]
    fn identity_decoder_with_unit_pixels() {
        let map = gradient_map_of(decode_with(Array2::eye(2), Array1::zeros(2)), (0.0, 10.0), (0.0, 8.0), 10, 8).unwrap();
        assert_eq!(map.pixel_size(), (1.0, 1.0));
        for &v in map.interior() {
            assert!((v - 2.0 * 2f64.sqrt()).abs() < 1e-12);
        }
        assert_eq!(map.pixel_center(0, 0), (0.5, 7.5));
        assert_eq!(map.pixel_center(7, 9), (9.5, 0.5));
    }

    #[test]
    fn constant_decoder_gives_zero_map() {
        let map = gradient_map_of(decode_with(Array2::zeros((4, 2)), array![1.0, -2.0, 0.5, 7.0]), (0.0, 1.0), (0.0, 1.0), 16, 9)
            .unwrap();
        assert!(map.values.iter().all(|&v| v == 0.0));
        assert_eq!((map.max_gradient, map.avg_gradient), (0.0, 0.0));
        assert_eq!(map.values.dim(), (9, 16));
    }

    #[test]
    fn map_statistics_scale_with_decoder() {
        let dec = |y: &Array2<f64>| -> Result<Array2<f64>> {
            Ok(Array2::from_shape_fn((y.nrows(), 3), |(i, j)| {
                let (u, v) = (y[[i, 0]], y[[i, 1]]);
                [u.sin() * v, (u * v).cos(), u * u - v][j]
            }))
        };
        let base = gradient_map_of(dec, (-2.0, 2.0), (-1.0, 1.0), 33, 21).unwrap();
        let c = 3.5;
        let scaled = gradient_map_of(|y: &Array2<f64>| dec(y).map(|m| m * c), (-2.0, 2.0), (-1.0, 1.0), 33, 21).unwrap();
        assert!((scaled.max_gradient - c * base.max_gradient).abs() < 1e-9 * scaled.max_gradient);
        assert!((scaled.avg_gradient - c * base.avg_gradient).abs() < 1e-9 * scaled.avg_gradient);
        assert!(base.avg_gradient <= base.max_gradient);
        // band boundaries must not change the result
        let single = gradient_map_of(dec, (-2.0, 2.0), (-1.0, 1.0), 33, MAP_BAND).unwrap();
        assert_eq!(single.values.nrows(), MAP_BAND);
    }

    #[test]
    fn map_preconditions() {
        let eye = decode_with(Array2::eye(2), Array1::zeros(2));
        assert!(gradient_map_of(&eye, (0.0, 1.0), (0.0, 1.0), 2, 5).is_err());
        assert!(gradient_map_of(&eye, (0.0, 0.0), (0.0, 1.0), 5, 5).is_err());
        let flat = array![[0.0, 1.0], [2.0, 1.0]];
        assert!(expanded_bounds(&flat, 0.05).is_err());
        let ok = array![[0.0, 0.0], [10.0, 20.0]];
        assert_eq!(expanded_bounds(&ok, 0.05).unwrap(), ((-0.5, 10.5), (-1.0, 21.0)));
    }

    #[test]
    fn interpolation_points_are_evenly_spaced() {
        let p = interpolation_points((0.0, 0.0), (9.0, 0.0), 10).unwrap();
        for i in 0..10 {
            assert_eq!(p.row(i).to_vec(), vec![i as f64, 0.0]);
        }
        let p = interpolation_points((1.0, 2.0), (-3.0, 5.0), 2).unwrap();
        assert_eq!(p, array![[1.0, 2.0], [-3.0, 5.0]]);
        assert!(interpolation_points((0.0, 0.0), (1.0, 1.0), 1).is_err());

        let pair = identity_pair(20, 4);
        let all: Vec<usize> = (0..20).collect();
        let m = model_with(
            &pair,
            &all,
            linear(Array2::eye(2), Array1::zeros(2)),
            linear(array![[0.5, 1.0], [-1.0, 2.0]], array![0.3, 0.0]),
        );
        let strip = interpolation_strip(&m, (1.0, 2.0), (1.0, 2.0), 6).unwrap();
        for i in 1..6 {
            assert_eq!(strip.row(i), strip.row(0));
        }
        let ends = interpolation_strip(&m, (1.0, 2.0), (4.0, -1.0), 2).unwrap();
        assert_eq!(ends, m.decode(&array![[1.0, 2.0], [4.0, -1.0]]).unwrap());
    }

    fn run_of(model: TrainedModel, test: Vec<usize>) -> EnsembleRun {
        EnsembleRun {
            model,
            split: SplitIndices { train: vec![], test, seed: 0 },
        }
    }

    #[test]
    fn ensemble_report_aggregates() {
        let pair = identity_pair(30, 5);
        let all: Vec<usize> = (0..30).collect();
        let m = model_with(
            &pair,
            &all,
            linear(array![[0.9, 0.0], [0.0, 1.1]], array![0.0, 0.1]),
            linear(array![[1.0, 0.2], [0.0, 1.0]], array![0.0, 0.0]),
        );
        let same: Vec<EnsembleRun> = (0..10).map(|_| run_of(m.clone(), all[20..].to_vec())).collect();
        let rep = evaluate_ensemble(&same, &pair, Units::Standardized).unwrap();
        assert_eq!(rep.runs.len(), 10);
        assert!(rep.parametric.sd.abs() < 1e-15 && rep.inverse.sd.abs() < 1e-15);
        assert!(rep.runs.iter().all(|r| r.train_seconds.unwrap() > 0.0 && r.inference_seconds.unwrap() > 0.0));

        let mixed: Vec<EnsembleRun> = (0..4).map(|k| run_of(m.clone(), all[5 * k..5 * k + 7].to_vec())).collect();
        let rep = evaluate_ensemble(&mixed, &pair, Units::Standardized).unwrap();
        let mean = rep.runs.iter().map(|r| r.inverse_mse).sum::<f64>() / 4.0;
        assert!((rep.inverse.mean - mean).abs() < 1e-12);
        let var = rep.runs.iter().map(|r| (r.inverse_mse - mean).powi(2)).sum::<f64>() / 4.0;
        assert!((rep.inverse.sd - var.sqrt()).abs() < 1e-12);
        assert!(evaluate_ensemble(&[], &pair, Units::Standardized).is_err());
    }

    #[test]
    fn metrics_csv_layout() {
        let runs = vec![
            RunMetrics {
                run: 0,
                seed: 7,
                parametric_mse: 0.5,
                inverse_mse: 0.25,
                train_seconds: Some(1.5),
                inference_seconds: Some(0.01),
            },
            RunMetrics {
                run: 1,
                seed: 8,
                parametric_mse: 1.5,
                inverse_mse: 0.75,
                train_seconds: Some(2.5),
                inference_seconds: Some(0.02),
            },
        ];
        let rep = MetricsReport::from_runs(ArchitectureTag::Ael, "rings", Units::Standardized, runs).unwrap();
        assert_eq!((rep.parametric.mean, rep.parametric.sd), (1.0, 0.5));
        let csv = metrics_csv(std::slice::from_ref(&rep));
        assert_eq!(
            csv,
            "run,arch,dataset,parametric_mse,inverse_mse,train_s,infer_s\n\
             0,ael,rings,0.5,0.25,1.5,0.01\n\
             1,ael,rings,1.5,0.75,2.5,0.02\n\
             mean,ael,rings,1,0.5,,\n\
             sd,ael,rings,0.5,0.25,,\n"
        );
        let quiet = metrics_csv(&[rep.without_timing()]);
        assert!(quiet.contains("0,ael,rings,0.5,0.25,,\n"));
    }

    #[test]
    fn scan_rows_are_sorted_by_omega() {
        let pair = identity_pair(40, 6);
        let spec = ArchitectureSpec::new(ArchitectureTag::Ael, 2).with_hidden(vec![8], vec![8]);
        let cfg = TrainingConfig {
            epochs: 2,
            ..TrainingConfig::new(spec, 0)
        };
        let grid: Vec<Weights> = [5.0, 0.1, 1.0, 0.5]
            .iter()
            .map(|&omega| Weights {
                omega,
                alpha: 1.0,
                beta: 0.1,
            })
            .collect();
        let rows = parameter_scan(&pair, &cfg, &grid, 1).unwrap();
        let omegas: Vec<f64> = rows.iter().map(|r| r.weights.omega).collect();
        assert_eq!(omegas, vec![0.1, 0.5, 1.0, 5.0]);
        assert!(rows.iter().all(|r| r.parametric.mean.is_finite() && r.inverse.mean.is_finite()));
        assert_eq!(scan_csv(&rows).lines().count(), 5);
        assert!(parameter_scan(&pair, &cfg, &[], 1).is_err());
    }

    proptest::proptest! {
        #[test]
        fn gradient_map_scales_linearly_with_the_decoder(
            seed in proptest::prelude::any::<u64>(), k in 0.1f64..10.0, w in 3usize..12, h in 3usize..12,
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = Array2::from_shape_fn((3, 2), |_| rng.random_range(-2.0..2.0));
            let c = Array1::from_shape_fn(3, |_| rng.random_range(-2.0..2.0));
            let base = gradient_map_of(decode_with(a.clone(), c.clone()), (0.0, 1.0), (-1.0, 2.0), w, h).unwrap();
            let scaled = gradient_map_of(decode_with(&a * k, &c * k), (0.0, 1.0), (-1.0, 2.0), w, h).unwrap();
            for (x, y) in base.values.iter().zip(scaled.values.iter()) {
                proptest::prop_assert!(*x >= 0.0);
                proptest::prop_assert!((y - k * x).abs() <= 1e-9 * (1.0 + y.abs()));
            }
            // a constant offset never changes the map
            let shifted = gradient_map_of(decode_with(a, c + 7.0), (0.0, 1.0), (-1.0, 2.0), w, h).unwrap();
            for (x, y) in base.values.iter().zip(shifted.values.iter()) {
                proptest::prop_assert!((x - y).abs() <= 1e-9);
            }
        }

        #[test]
        fn population_sd_of_shifted_values(values in proptest::collection::vec(-100.0f64..100.0, 1..20), shift in -1e3f64..1e3) {
            let a = Aggregate::of(&values);
            let shifted: Vec<f64> = values.iter().map(|v| v + shift).collect();
            let b = Aggregate::of(&shifted);
            proptest::prop_assert!(a.sd >= 0.0);
            proptest::prop_assert!((b.mean - a.mean - shift).abs() <= 1e-9);
            proptest::prop_assert!((b.sd - a.sd).abs() <= 1e-8);
        }
    }
}
