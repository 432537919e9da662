use std::fmt::Write as _;
use std::path::Path;

use image::{Rgb, RgbImage};

use super::{MetricsError, Result};

const SIZE: u32 = 512;
const MARGIN: u32 = 24;
const PALETTE: [[u8; 3]; 8] = [
    [31, 119, 180],
    [255, 127, 14],
    [44, 160, 44],
    [214, 39, 40],
    [148, 103, 189],
    [140, 86, 75],
    [227, 119, 194],
    [127, 127, 127],
];

/// One embedded point: source id, coordinates, group label.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingRow {
    pub id: String,
    pub x: f64,
    pub y: f64,
    pub group: String,
}

pub fn embedding_tsv(rows: &[EmbeddingRow]) -> String {
    let mut s = String::from("id\tx\ty\tgroup\n");
    for r in rows {
        writeln!(s, "{}\t{}\t{}\t{}", r.id, r.x, r.y, r.group).unwrap();
    }
    s
}

fn save(img: &RgbImage, path: &Path) -> Result<()> {
    img.save(path).map_err(|e| MetricsError::Format(format!("cannot write {}: {e}", path.display())))
}

fn canvas() -> RgbImage {
    let mut img = RgbImage::from_pixel(SIZE, SIZE, Rgb([255, 255, 255]));
    let axis = Rgb([0, 0, 0]);
    for t in MARGIN..SIZE - MARGIN {
        img.put_pixel(MARGIN, t, axis);
        img.put_pixel(t, SIZE - MARGIN, axis);
    }
    img
}

fn span(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = values.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    if !lo.is_finite() || !hi.is_finite() {
        (0.0, 1.0)
    } else if hi > lo {
        (lo, hi)
    } else {
        (lo - 0.5, hi + 0.5)
    }
}

/// Scatter plot of the embedding, one colour per group (in order of first
/// appearance).
pub fn scatter_png(rows: &[EmbeddingRow], path: impl AsRef<Path>) -> Result<()> {
    let mut img = canvas();
    let (x0, x1) = span(rows.iter().map(|r| r.x));
    let (y0, y1) = span(rows.iter().map(|r| r.y));
    let inner = (SIZE - 2 * MARGIN - 8) as f64;
    let mut groups: Vec<&str> = Vec::new();
    for r in rows {
        let g = match groups.iter().position(|g| *g == r.group) {
            Some(g) => g,
            None => {
                groups.push(&r.group);
                groups.len() - 1
            }
        };
        let colour = Rgb(PALETTE[g % PALETTE.len()]);
        let px = MARGIN as f64 + 4.0 + (r.x - x0) / (x1 - x0) * inner;
        let py = (SIZE - MARGIN) as f64 - 4.0 - (r.y - y0) / (y1 - y0) * inner;
        for dy in -2i32..=2 {
            for dx in -2i32..=2 {
                if dx * dx + dy * dy <= 5 {
                    img.put_pixel((px as i32 + dx) as u32, (py as i32 + dy) as u32, colour);
                }
            }
        }
    }
    save(&img, path.as_ref())
}

/// Histogram of finite values with `bins` equal-width bins.
pub fn histogram_png(values: &[f64], bins: usize, path: impl AsRef<Path>) -> Result<()> {
    let finite: Vec<f64> = values.iter().copied().filter(|v| v.is_finite()).collect();
    let bins = bins.max(1);
    let (lo, hi) = span(finite.iter().copied());
    let mut counts = vec![0usize; bins];
    for v in &finite {
        let b = (((v - lo) / (hi - lo)) * bins as f64) as usize;
        counts[b.min(bins - 1)] += 1;
    }
    let mut img = canvas();
    let peak = counts.iter().copied().max().unwrap_or(0).max(1) as f64;
    let inner_w = (SIZE - 2 * MARGIN - 2) as f64;
    let inner_h = (SIZE - 2 * MARGIN - 2) as f64;
    let colour = Rgb(PALETTE[0]);
    for (b, &c) in counts.iter().enumerate() {
        let left = MARGIN + 2 + (b as f64 * inner_w / bins as f64) as u32;
        let right = MARGIN + 1 + ((b + 1) as f64 * inner_w / bins as f64) as u32;
        let height = (c as f64 / peak * inner_h) as u32;
        for x in left..right.max(left + 1) {
            for y in (SIZE - MARGIN - height)..(SIZE - MARGIN) {
                img.put_pixel(x, y, colour);
            }
        }
    }
    save(&img, path.as_ref())
}
