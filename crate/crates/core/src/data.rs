//! Datasets, loaders, standardization and train/test splitting.

use std::f64::consts::TAU;
use std::fs::File;
use std::io::Read;
use std::path::Path;

use ndarray::{Array1, Array2, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::read_numeric_rows;

/// Row-major sample matrix with optional integer class labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    values: Array2<f64>,
    labels: Option<Vec<i64>>,
    name: String,
}

impl Dataset {
    pub fn new(values: Array2<f64>, labels: Option<Vec<i64>>, name: impl Into<String>) -> Result<Self> {
        let (n, d) = values.dim();
        if n == 0 || d == 0 {
            return Err(Error::Shape(format!("dataset must be non-empty, got {n}x{d}")));
        }
        if let Some(pos) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "non-finite value at row {}, column {}",
                pos / d + 1,
                pos % d + 1
            )));
        }
        if let Some(l) = &labels {
            if l.len() != n {
                return Err(Error::RowCount {
                    what: "label vector".into(),
                    expected: n,
                    found: l.len(),
                });
            }
        }
        Ok(Dataset {
            values,
            labels,
            name: name.into(),
        })
    }

    pub fn values(&self) -> &Array2<f64> {
        &self.values
    }

    pub fn labels(&self) -> Option<&[i64]> {
        self.labels.as_deref()
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn n(&self) -> usize {
        self.values.nrows()
    }

    pub fn d(&self) -> usize {
        self.values.ncols()
    }

    /// Rows in the given order, labels carried along.
    pub fn select(&self, rows: &[usize]) -> Dataset {
        Dataset {
            values: self.values.select(Axis(0), rows),
            labels: self.labels.as_ref().map(|l| rows.iter().map(|&i| l[i]).collect()),
            name: self.name.clone(),
        }
    }
}

/// Offset of each ring's center along the axis it shares with the next ring.
/// With unit radii this links every pair of rings while keeping them 0.29 apart.
const RING_CENTER_OFFSET: f64 = 0.5;

/// Three pairwise interlocked unit circles in mutually orthogonal planes.
///
/// Ring `k` lies in the plane spanned by axes `k` and `k+1 (mod 3)` and is
/// centered at `0.5·e_{k+1}`:
///
/// `p(θ) = 0.5·e_{k+1} + cos θ·e_k + sin θ·e_{k+1}`, `θ_i = φ_k + 2πi/m`.
///
/// Points are equally spaced; the seed only picks each ring's starting phase `φ_k`.
pub fn generate_rings(points_per_ring: usize, seed: u64) -> Result<Dataset> {
    if points_per_ring < 3 {
        return Err(Error::InvalidArgument(format!(
            "points_per_ring must be at least 3, got {points_per_ring}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = 3 * points_per_ring;
    let mut values = Array2::zeros((n, 3));
    let mut labels = Vec::with_capacity(n);
    for ring in 0..3 {
        let u = ring;
        let v = (ring + 1) % 3;
        let phase: f64 = rng.random::<f64>() * TAU;
        for i in 0..points_per_ring {
            let theta = phase + TAU * i as f64 / points_per_ring as f64;
            let row = ring * points_per_ring + i;
            values[[row, u]] = theta.cos();
            values[[row, v]] = RING_CENTER_OFFSET + theta.sin();
            labels.push(ring as i64);
        }
    }
    Dataset::new(values, Some(labels), "rings")
}

/// Loads a numeric CSV. With `has_labels`, the last column holds integer classes.
pub fn load_csv(path: &Path, has_labels: bool, skip_header: bool) -> Result<Dataset> {
    let rows = read_numeric_rows(path, skip_header)?;
    let width = rows[0].1.len();
    let d = if has_labels { width - 1 } else { width };
    if d == 0 {
        return Err(Error::Parse {
            path: path.to_path_buf(),
            row: rows[0].0,
            column: None,
            message: "no feature columns".into(),
        });
    }
    let mut flat = Vec::with_capacity(rows.len() * d);
    let mut labels = Vec::new();
    for (row_no, row) in &rows {
        flat.extend_from_slice(&row[..d]);
        if has_labels {
            let l = row[d];
            if l.fract() != 0.0 {
                return Err(Error::Parse {
                    path: path.to_path_buf(),
                    row: *row_no,
                    column: Some(d + 1),
                    message: format!("label {l} is not an integer"),
                });
            }
            labels.push(l as i64);
        }
    }
    let values = Array2::from_shape_vec((rows.len(), d), flat).expect("rectangular rows");
    let name = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    Dataset::new(values, has_labels.then_some(labels), name)
}

/// Loads a single-column integer label file.
pub fn load_labels_csv(path: &Path) -> Result<Vec<i64>> {
    let rows = read_numeric_rows(path, false)?;
    rows.into_iter()
        .map(|(row_no, r)| {
            if r.len() != 1 || r[0].fract() != 0.0 {
                return Err(Error::Parse {
                    path: path.to_path_buf(),
                    row: row_no,
                    column: None,
                    message: "expected a single integer label".into(),
                });
            }
            Ok(r[0] as i64)
        })
        .collect()
}

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

fn read_maybe_gz(path: &Path) -> Result<Vec<u8>> {
    let mut raw = Vec::new();
    File::open(path)
        .and_then(|mut f| f.read_to_end(&mut raw))
        .map_err(|e| Error::io(path, e))?;
    if raw.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        flate2::read::GzDecoder::new(raw.as_slice())
            .read_to_end(&mut out)
            .map_err(|e| Error::io(path, e))?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

fn be_u32(bytes: &[u8], at: usize, path: &Path) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::Idx {
            path: path.to_path_buf(),
            message: "truncated header".into(),
        })
}

/// Reads an IDX image/label file pair (optionally gzipped). Pixels are scaled
/// to `[0, 1]`; each image becomes one row of `rows·cols` values.
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<(Dataset, (usize, usize))> {
    let img = read_maybe_gz(images_path)?;
    let magic = be_u32(&img, 0, images_path)?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::Idx {
            path: images_path.to_path_buf(),
            message: format!("magic {magic:#010x}, expected {IDX_IMAGES_MAGIC:#010x}"),
        });
    }
    let count = be_u32(&img, 4, images_path)? as usize;
    let rows = be_u32(&img, 8, images_path)? as usize;
    let cols = be_u32(&img, 12, images_path)? as usize;
    let d = rows * cols;
    let pixels = &img[16..];
    if pixels.len() != count * d {
        return Err(Error::Idx {
            path: images_path.to_path_buf(),
            message: format!("expected {} pixel bytes, found {}", count * d, pixels.len()),
        });
    }

    let lab = read_maybe_gz(labels_path)?;
    let magic = be_u32(&lab, 0, labels_path)?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::Idx {
            path: labels_path.to_path_buf(),
            message: format!("magic {magic:#010x}, expected {IDX_LABELS_MAGIC:#010x}"),
        });
    }
    let label_count = be_u32(&lab, 4, labels_path)? as usize;
    if label_count != count || lab.len() - 8 != count {
        return Err(Error::Idx {
            path: labels_path.to_path_buf(),
            message: format!("{count} images but {label_count} labels"),
        });
    }
    let labels = lab[8..].iter().map(|&b| b as i64).collect();
    let values = Array2::from_shape_vec((count, d), pixels.iter().map(|&p| p as f64 / 255.0).collect())
        .expect("sizes checked");
    let name = images_path
        .file_name()
        .map(|s| s.to_string_lossy().split('-').next().unwrap_or("idx").to_string())
        .unwrap_or_else(|| "idx".into());
    Ok((Dataset::new(values, Some(labels), name)?, (rows, cols)))
}

/// Columns with a standard deviation below this are treated as constant.
pub const CONSTANT_COLUMN_EPSILON: f64 = 1e-12;

/// Per-column z-scoring parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
}

impl Standardizer {
    /// Column means and population standard deviations; any deviation below
    /// `epsilon` is replaced by 1.
    pub fn fit(values: &Array2<f64>, epsilon: f64) -> Result<Self> {
        if values.nrows() < 2 {
            return Err(Error::InvalidArgument(
                "standardization needs at least two rows".into(),
            ));
        }
        let mean: Array1<f64> = values.mean_axis(Axis(0)).expect("non-empty");
        let scale = values
            .axis_iter(Axis(1))
            .zip(mean.iter())
            .map(|(col, &m)| {
                let var = col.iter().map(|&v| (v - m) * (v - m)).sum::<f64>() / col.len() as f64;
                let sd = var.sqrt();
                if sd < epsilon {
                    1.0
                } else {
                    sd
                }
            })
            .collect();
        Ok(Standardizer {
            mean: mean.to_vec(),
            scale,
        })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    fn check(&self, m: &Array2<f64>) -> Result<()> {
        if m.ncols() != self.dim() {
            return Err(Error::Shape(format!(
                "standardizer has {} columns, matrix has {}",
                self.dim(),
                m.ncols()
            )));
        }
        Ok(())
    }

    pub fn apply(&self, m: &Array2<f64>) -> Result<Array2<f64>> {
        self.check(m)?;
        let mut out = m.clone();
        for mut row in out.rows_mut() {
            for ((v, &mu), &s) in row.iter_mut().zip(&self.mean).zip(&self.scale) {
                *v = (*v - mu) / s;
            }
        }
        Ok(out)
    }

    pub fn invert(&self, m: &Array2<f64>) -> Result<Array2<f64>> {
        self.check(m)?;
        let mut out = m.clone();
        for mut row in out.rows_mut() {
            for ((v, &mu), &s) in row.iter_mut().zip(&self.mean).zip(&self.scale) {
                *v = *v * s + mu;
            }
        }
        Ok(out)
    }
}

pub fn fit_standardizer(data: &Dataset, epsilon: f64) -> Result<Standardizer> {
    Standardizer::fit(data.values(), epsilon)
}

/// Disjoint train/test row indices produced from a seeded permutation.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitIndices {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
    pub seed: u64,
}

/// Shuffles `0..n` under `seed`; the first `round(fraction_test·n)` entries form the test set.
pub fn split(n: usize, fraction_test: f64, seed: u64) -> Result<SplitIndices> {
    if n < 2 {
        return Err(Error::InvalidArgument(format!("cannot split {n} rows")));
    }
    if !(fraction_test > 0.0 && fraction_test < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "test fraction must lie in (0, 1), got {fraction_test}"
        )));
    }
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_test = ((fraction_test * n as f64).round() as usize).clamp(1, n - 1);
    let train = perm.split_off(n_test);
    Ok(SplitIndices {
        train,
        test: perm,
        seed,
    })
}
