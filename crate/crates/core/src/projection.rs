//! Reference projections: exact t-SNE and ingestion of precomputed 2D coordinates.

use std::path::Path;

use ndarray::{Array2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Standardizer, CONSTANT_COLUMN_EPSILON};
use crate::error::{Error, Result};
use crate::io::read_numeric_rows;

/// A dataset together with its row-aligned 2D reference projection.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionPair {
    data: Dataset,
    coords: Array2<f64>,
    method_tag: String,
}

impl ProjectionPair {
    pub fn new(data: Dataset, coords: Array2<f64>, method_tag: impl Into<String>) -> Result<Self> {
        if coords.ncols() != 2 {
            return Err(Error::Shape(format!(
                "projection must have 2 columns, found {}",
                coords.ncols()
            )));
        }
        if coords.nrows() != data.n() {
            return Err(Error::RowCount {
                what: "projection".into(),
                expected: data.n(),
                found: coords.nrows(),
            });
        }
        if coords.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical("projection contains non-finite coordinates".into()));
        }
        Ok(ProjectionPair {
            data,
            coords,
            method_tag: method_tag.into(),
        })
    }

    pub fn data(&self) -> &Dataset {
        &self.data
    }

    pub fn coords(&self) -> &Array2<f64> {
        &self.coords
    }

    pub fn method_tag(&self) -> &str {
        &self.method_tag
    }
}

/// Reads a two-column projection CSV aligned row by row with `data`.
pub fn load_projection(data: Dataset, path: &Path) -> Result<ProjectionPair> {
    let rows = read_numeric_rows(path, false)?;
    let width = rows[0].1.len();
    if width != 2 {
        return Err(Error::Parse {
            path: path.to_path_buf(),
            row: rows[0].0,
            column: None,
            message: format!("projection needs 2 columns, found {width}"),
        });
    }
    if rows.len() != data.n() {
        return Err(Error::RowCount {
            what: format!("projection file {}", path.display()),
            expected: data.n(),
            found: rows.len(),
        });
    }
    let coords = Array2::from_shape_vec((rows.len(), 2), rows.into_iter().flat_map(|(_, r)| r).collect())
        .expect("rectangular");
    ProjectionPair::new(data, coords, "file")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TsneConfig {
    pub perplexity: f64,
    pub iterations: usize,
    pub learning_rate: f64,
    pub early_exaggeration_factor: f64,
    pub early_exaggeration_iters: usize,
    pub momentum_initial: f64,
    pub momentum_final: f64,
    pub momentum_switch_iter: usize,
    pub seed: u64,
}

impl Default for TsneConfig {
    fn default() -> Self {
        TsneConfig {
            perplexity: 30.0,
            iterations: 1000,
            learning_rate: 200.0,
            early_exaggeration_factor: 12.0,
            early_exaggeration_iters: 250,
            momentum_initial: 0.5,
            momentum_final: 0.8,
            momentum_switch_iter: 250,
            seed: 0,
        }
    }
}

impl TsneConfig {
    pub fn with_seed(seed: u64) -> Self {
        TsneConfig {
            seed,
            ..Default::default()
        }
    }

    fn validate(&self, n: usize) -> Result<()> {
        if self.perplexity < 2.0 || self.perplexity >= n as f64 / 3.0 {
            return Err(Error::InvalidArgument(format!(
                "perplexity {} must be in [2, n/3) for n = {n}",
                self.perplexity
            )));
        }
        if self.iterations == 0 {
            return Err(Error::InvalidArgument("t-SNE needs at least one iteration".into()));
        }
        Ok(())
    }
}

const PERPLEXITY_TOLERANCE: f64 = 1e-5;
const MAX_BANDWIDTH_STEPS: usize = 200;

fn squared_distances(x: &Array2<f64>) -> Array2<f64> {
    let n = x.nrows();
    let norms: Vec<f64> = x.rows().into_iter().map(|r| r.dot(&r)).collect();
    let gram = x.dot(&x.t());
    Array2::from_shape_fn((n, n), |(i, j)| {
        if i == j {
            0.0
        } else {
            (norms[i] + norms[j] - 2.0 * gram[[i, j]]).max(0.0)
        }
    })
}

/// Fills `row` with `p_{j|i}` for precision `beta`; returns the perplexity `exp(H)`.
fn conditional_row(dist: &[f64], i: usize, beta: f64, row: &mut [f64]) -> f64 {
    // shift by the smallest off-diagonal distance so the largest weight is exp(0)
    let min_d = dist
        .iter()
        .enumerate()
        .filter(|&(j, _)| j != i)
        .map(|(_, &d)| d)
        .fold(f64::INFINITY, f64::min);
    let mut sum = 0.0;
    for (j, (p, &d)) in row.iter_mut().zip(dist).enumerate() {
        *p = if j == i { 0.0 } else { (-(d - min_d) * beta).exp() };
        sum += *p;
    }
    let mut entropy = 0.0;
    for p in row.iter_mut() {
        *p /= sum;
        if *p > 0.0 {
            entropy -= *p * p.ln();
        }
    }
    entropy.exp()
}

/// Binary search on the Gaussian precision so each row reaches `perplexity`.
fn conditional_affinities(dist: &Array2<f64>, perplexity: f64) -> Result<Array2<f64>> {
    let n = dist.nrows();
    let rows: Vec<Result<Vec<f64>>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let d = dist.row(i);
            let d = d.as_slice().expect("standard layout");
            let mut row = vec![0.0; n];
            let (lo_d, hi_d) = d
                .iter()
                .enumerate()
                .filter(|&(j, _)| j != i)
                .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), (_, &v)| (lo.min(v), hi.max(v)));
            // All neighbors equidistant: the row is uniform for every bandwidth.
            if hi_d - lo_d <= 1e-12 * hi_d.max(1.0) {
                conditional_row(d, i, 1.0, &mut row);
                return Ok(row);
            }
            let (mut beta, mut lo, mut hi) = (1.0, 0.0, f64::INFINITY);
            for _ in 0..MAX_BANDWIDTH_STEPS {
                let perp = conditional_row(d, i, beta, &mut row);
                if (perp - perplexity).abs() < PERPLEXITY_TOLERANCE {
                    return Ok(row);
                }
                if perp > perplexity {
                    lo = beta;
                    beta = if hi.is_infinite() { beta * 2.0 } else { 0.5 * (beta + hi) };
                } else {
                    hi = beta;
                    beta = 0.5 * (beta + lo);
                }
            }
            Err(Error::PerplexitySearch {
                row: i,
                iterations: MAX_BANDWIDTH_STEPS,
            })
        })
        .collect();
    let mut out = Array2::zeros((n, n));
    for (i, r) in rows.into_iter().enumerate() {
        out.row_mut(i).assign(&ndarray::ArrayView1::from(&r?[..]));
    }
    Ok(out)
}

/// Symmetrized joint affinities `p_ij = (p_{j|i} + p_{i|j}) / 2n` on raw distances of `x`.
pub fn affinities_from_matrix(x: &Array2<f64>, perplexity: f64) -> Result<Array2<f64>> {
    let n = x.nrows();
    if perplexity <= 0.0 || (n as f64) < 3.0 * perplexity {
        return Err(Error::InvalidArgument(format!(
            "need n >= 3 * perplexity, got n = {n}, perplexity = {perplexity}"
        )));
    }
    let cond = conditional_affinities(&squared_distances(x), perplexity)?;
    let denom = 2.0 * n as f64;
    Ok(Array2::from_shape_fn((n, n), |(i, j)| (cond[[i, j]] + cond[[j, i]]) / denom))
}

pub fn tsne_affinities(data: &Dataset, perplexity: f64) -> Result<Array2<f64>> {
    affinities_from_matrix(data.values(), perplexity)
}

/// `KL(P || Q)` value recorded during the descent.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KlCheckpoint {
    pub iteration: usize,
    pub kl: f64,
}

#[derive(Debug, Clone)]
pub struct TsneOutcome {
    pub pair: ProjectionPair,
    /// KL after the first iteration, every 50 iterations, and after the last one.
    pub kl_trace: Vec<KlCheckpoint>,
}

impl TsneOutcome {
    pub fn final_kl(&self) -> f64 {
        self.kl_trace.last().map(|c| c.kl).unwrap_or(f64::NAN)
    }
}

/// Student-t kernel numerators `1 / (1 + ‖y_i − y_j‖²)` and their sum.
fn student_t(y: &Array2<f64>) -> (Array2<f64>, f64) {
    let n = y.nrows();
    let mut num = Array2::zeros((n, n));
    let mut sum = 0.0;
    for i in 0..n {
        let (yi0, yi1) = (y[[i, 0]], y[[i, 1]]);
        for j in (i + 1)..n {
            let dx = yi0 - y[[j, 0]];
            let dy = yi1 - y[[j, 1]];
            let v = 1.0 / (1.0 + dx * dx + dy * dy);
            num[[i, j]] = v;
            num[[j, i]] = v;
            sum += 2.0 * v;
        }
    }
    (num, sum)
}

fn kl_divergence(p: &Array2<f64>, num: &Array2<f64>, sum: f64) -> f64 {
    const FLOOR: f64 = 1e-12;
    p.iter()
        .zip(num.iter())
        .filter(|(&pij, _)| pij > 0.0)
        .map(|(&pij, &q)| pij * (pij.max(FLOOR) / (q / sum).max(FLOOR)).ln())
        .sum()
}

/// Grid for standardized inputs, 2^-30. Translating or rescaling the raw data
/// perturbs standardized values only at rounding level; snapping them keeps
/// the affinities (and hence the embedding) bit-identical.
const INPUT_GRID: f64 = 1073741824.0;

/// Exact t-SNE in 2D on the standardized data.
pub fn tsne_embed(data: &Dataset, cfg: &TsneConfig) -> Result<TsneOutcome> {
    let n = data.n();
    cfg.validate(n)?;
    let standardized = Standardizer::fit(data.values(), CONSTANT_COLUMN_EPSILON)?
        .apply(data.values())?
        .mapv_into(|v| (v * INPUT_GRID).round() / INPUT_GRID);
    let p = affinities_from_matrix(&standardized, cfg.perplexity)?;

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let normal = Normal::new(0.0, 1e-4).expect("valid sigma");
    let mut y = Array2::from_shape_fn((n, 2), |_| normal.sample(&mut rng));
    let mut update = Array2::<f64>::zeros((n, 2));
    let mut gains = Array2::<f64>::ones((n, 2));
    let mut grad = Array2::<f64>::zeros((n, 2));
    let mut kl_trace = Vec::new();

    for iter in 0..cfg.iterations {
        if iter > 0 && iter == cfg.early_exaggeration_iters {
            // Fresh optimizer state for the unexaggerated phase; carrying the
            // exaggerated momentum over folds curves onto themselves.
            update.fill(0.0);
            gains.fill(1.0);
        }
        let exaggeration = if iter < cfg.early_exaggeration_iters {
            cfg.early_exaggeration_factor
        } else {
            1.0
        };
        let momentum = if iter < cfg.momentum_switch_iter {
            cfg.momentum_initial
        } else {
            cfg.momentum_final
        };
        let (num, sum) = student_t(&y);

        // dC/dy_i = 4 Σ_j (p_ij − q_ij) (y_i − y_j) / (1 + ‖y_i − y_j‖²)
        grad.fill(0.0);
        for i in 0..n {
            let (mut g0, mut g1) = (0.0, 0.0);
            for j in 0..n {
                if i == j {
                    continue;
                }
                let w = num[[i, j]];
                let m = (exaggeration * p[[i, j]] - w / sum) * w;
                g0 += m * (y[[i, 0]] - y[[j, 0]]);
                g1 += m * (y[[i, 1]] - y[[j, 1]]);
            }
            grad[[i, 0]] = 4.0 * g0;
            grad[[i, 1]] = 4.0 * g1;
        }

        for ((g, u), gain) in grad.iter().zip(update.iter_mut()).zip(gains.iter_mut()) {
            *gain = if (*g > 0.0) != (*u > 0.0) {
                *gain + 0.2
            } else {
                (*gain * 0.8).max(0.01)
            };
            *u = momentum * *u - cfg.learning_rate * *gain * *g;
        }
        y += &update;
        let mean = y.mean_axis(Axis(0)).expect("n > 0");
        y -= &mean;

        if y.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical(format!("t-SNE diverged at iteration {}", iter + 1)));
        }
        let done = iter + 1;
        if done == 1 || done % 50 == 0 || done == cfg.iterations {
            let (num, sum) = student_t(&y);
            kl_trace.push(KlCheckpoint {
                iteration: done,
                kl: kl_divergence(&p, &num, sum),
            });
        }
    }

    let pair = ProjectionPair::new(data.clone(), y, "tsne")?;
    Ok(TsneOutcome { pair, kl_trace })
}
