//! PPM/PGM rasters: scatter plots, gradient maps and image strips.

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::evaluation::GradientMap;

/// Tableau-10 colours, indexed by label modulo 10.
pub const PALETTE: [[u8; 3]; 10] = [
    [31, 119, 180],
    [255, 127, 14],
    [44, 160, 44],
    [214, 39, 40],
    [148, 103, 189],
    [140, 86, 75],
    [227, 119, 194],
    [127, 127, 127],
    [188, 189, 34],
    [23, 190, 207],
];

pub const SCATTER_MARGIN: f64 = 0.05;

/// 8-bit RGB image, row-major from the top-left corner.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Rgb {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

impl Rgb {
    pub fn filled(width: usize, height: usize, colour: [u8; 3]) -> Self {
        Rgb {
            width,
            height,
            pixels: colour.iter().copied().cycle().take(width * height * 3).collect(),
        }
    }

    pub fn get(&self, x: usize, y: usize) -> [u8; 3] {
        let i = 3 * (y * self.width + x);
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }

    fn put(&mut self, x: usize, y: usize, c: [u8; 3]) {
        let i = 3 * (y * self.width + x);
        self.pixels[i..i + 3].copy_from_slice(&c);
    }

    /// Binary PPM (P6).
    pub fn to_ppm(&self) -> Vec<u8> {
        let mut out = format!("P6\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.pixels);
        out
    }
}

fn disc_radius(size: usize) -> usize {
    (size / 160).max(2)
}

/// Pixel centres of the scatter discs: linear min–max fit of each axis into
/// the image with a 5% margin, y pointing up. Axes without extent map to the centre.
pub fn scatter_centers(coords: &Array2<f64>, size: usize) -> Result<Vec<(usize, usize)>> {
    if coords.nrows() == 0 {
        return Err(Error::InvalidArgument("nothing to plot".into()));
    }
    if coords.ncols() != 2 {
        return Err(Error::Shape(format!("scatter needs 2 columns, got {}", coords.ncols())));
    }
    if size < 8 {
        return Err(Error::InvalidArgument(format!("image size {size} is too small")));
    }
    let fit = |col: usize| {
        let v = coords.column(col);
        let lo = v.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        (lo, hi - lo)
    };
    let (x0, xs) = fit(0);
    let (y0, ys) = fit(1);
    let span = (size - 1) as f64;
    let inner = span * (1.0 - 2.0 * SCATTER_MARGIN);
    let place = |v: f64, lo: f64, extent: f64| {
        if extent > 0.0 {
            span * SCATTER_MARGIN + (v - lo) / extent * inner
        } else {
            span / 2.0
        }
    };
    Ok(coords
        .rows()
        .into_iter()
        .map(|r| {
            let px = place(r[0], x0, xs).round() as usize;
            let py = (span - place(r[1], y0, ys)).round() as usize;
            (px, py)
        })
        .collect())
}

/// Square scatter plot on white, one filled disc per point coloured by label.
pub fn render_scatter(coords: &Array2<f64>, labels: Option<&[i64]>, size: usize) -> Result<Rgb> {
    if let Some(l) = labels {
        if l.len() != coords.nrows() {
            return Err(Error::RowCount {
                what: "label list".into(),
                expected: coords.nrows(),
                found: l.len(),
            });
        }
    }
    let centers = scatter_centers(coords, size)?;
    let mut img = Rgb::filled(size, size, [255, 255, 255]);
    let r = disc_radius(size) as i64;
    for (i, &(cx, cy)) in centers.iter().enumerate() {
        let colour = PALETTE[labels.map(|l| l[i].rem_euclid(10) as usize).unwrap_or(0)];
        for dy in -r..=r {
            for dx in -r..=r {
                if dx * dx + dy * dy > r * r {
                    continue;
                }
                let (x, y) = (cx as i64 + dx, cy as i64 + dy);
                if x >= 0 && y >= 0 && (x as usize) < size && (y as usize) < size {
                    img.put(x as usize, y as usize, colour);
                }
            }
        }
    }
    Ok(img)
}

/// 16-bit binary PGM (P5, big-endian) of a gradient map, min–max normalized.
/// A constant map is written as all zeros.
pub fn gradient_map_pgm(map: &GradientMap) -> Vec<u8> {
    let lo = map.values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = map.values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out = format!("P5\n{} {}\n65535\n", map.width, map.height).into_bytes();
    out.reserve(2 * map.values.len());
    for &v in map.values.iter() {
        let level = if hi > lo {
            ((v - lo) / (hi - lo) * 65535.0).round() as u16
        } else {
            0
        };
        out.extend_from_slice(&level.to_be_bytes());
    }
    out
}

/// Tiles each row of `samples` (values in display units) as a `rows × cols`
/// image, left to right, into one 8-bit PGM. Values are clamped to [0, 1].
pub fn image_strip_pgm(samples: &Array2<f64>, shape: (usize, usize)) -> Result<Vec<u8>> {
    let (rows, cols) = shape;
    if rows * cols != samples.ncols() {
        return Err(Error::Shape(format!(
            "image shape {rows}x{cols} does not match {} features",
            samples.ncols()
        )));
    }
    let k = samples.nrows();
    if k == 0 {
        return Err(Error::InvalidArgument("no samples to tile".into()));
    }
    let width = cols * k;
    let mut out = format!("P5\n{width} {rows}\n255\n").into_bytes();
    for r in 0..rows {
        for t in 0..k {
            for c in 0..cols {
                let v = samples[[t, r * cols + c]];
                let v = if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) };
                out.push((v * 255.0).round() as u8);
            }
        }
    }
    Ok(out)
}
