//! Minimal raster figures: a similarity heatmap and a 2-D embedding scatter.

use image::{Rgb, RgbImage};

use musa_core::metrics::SimilarityMatrix;
use musa_core::{MusaError, Result};

const CELL: u32 = 48;
const SIZE: u32 = 480;

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

/// Dark blue at 0 through yellow at 1.
fn ramp(v: f64) -> Rgb<u8> {
    let v = v.clamp(0.0, 1.0);
    let lerp = |a: f64, b: f64| (a + (b - a) * v).round() as u8;
    Rgb([lerp(40.0, 250.0), lerp(20.0, 230.0), lerp(120.0, 30.0)])
}

/// One `CELL`-sized square per matrix entry, row `i` at the top.
pub fn heatmap(m: &SimilarityMatrix) -> RgbImage {
    let n = m.n() as u32;
    RgbImage::from_fn(n * CELL, n * CELL, |x, y| ramp(m.at((y / CELL) as usize, (x / CELL) as usize)))
}

/// Leading eigenvector of a symmetric matrix by power iteration.
fn leading_axis(cov: &[f64], d: usize) -> Vec<f64> {
    let mut v: Vec<f64> = (0..d).map(|i| 1.0 + (i as f64 * 0.37).sin()).collect();
    for _ in 0..200 {
        let mut next = vec![0.0; d];
        for (i, row) in cov.chunks(d).enumerate() {
            next[i] = row.iter().zip(&v).map(|(a, b)| a * b).sum();
        }
        let norm = next.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm == 0.0 {
            break;
        }
        v = next.into_iter().map(|x| x / norm).collect();
    }
    v
}

/// Projection of the rows onto their two principal axes.
pub fn project_2d(rows: &[Vec<f64>]) -> Result<Vec<(f64, f64)>> {
    let d = rows.first().map(Vec::len).ok_or_else(|| MusaError::InsufficientData("no embeddings".into()))?;
    let n = rows.len() as f64;
    let mean: Vec<f64> = (0..d).map(|j| rows.iter().map(|r| r[j]).sum::<f64>() / n).collect();
    let centered: Vec<Vec<f64>> = rows.iter().map(|r| r.iter().zip(&mean).map(|(a, m)| a - m).collect()).collect();
    let mut cov = vec![0.0; d * d];
    for r in &centered {
        for i in 0..d {
            for j in 0..d {
                cov[i * d + j] += r[i] * r[j] / n;
            }
        }
    }
    let a1 = leading_axis(&cov, d);
    let l1: f64 = (0..d).map(|i| a1[i] * (0..d).map(|j| cov[i * d + j] * a1[j]).sum::<f64>()).sum();
    // Deflate, then take the next axis.
    for i in 0..d {
        for j in 0..d {
            cov[i * d + j] -= l1 * a1[i] * a1[j];
        }
    }
    let a2 = leading_axis(&cov, d);
    let dot = |r: &[f64], a: &[f64]| r.iter().zip(a).map(|(x, y)| x * y).sum::<f64>();
    Ok(centered.iter().map(|r| (dot(r, &a1), dot(r, &a2))).collect())
}

/// Labelled points, one colour per distinct label in order of appearance.
pub fn scatter(points: &[(String, Vec<f64>)]) -> Result<RgbImage> {
    let rows: Vec<Vec<f64>> = points.iter().map(|p| p.1.clone()).collect();
    let xy = project_2d(&rows)?;
    let mut labels: Vec<&str> = Vec::new();
    for (l, _) in points {
        if !labels.contains(&l.as_str()) {
            labels.push(l);
        }
    }
    let span = |f: fn(&(f64, f64)) -> f64| {
        let lo = xy.iter().map(f).fold(f64::INFINITY, f64::min);
        let hi = xy.iter().map(f).fold(f64::NEG_INFINITY, f64::max);
        (lo, (hi - lo).max(1e-12))
    };
    let (x0, xs) = span(|p| p.0);
    let (y0, ys) = span(|p| p.1);
    let mut img = RgbImage::from_pixel(SIZE, SIZE, Rgb([255, 255, 255]));
    let margin = 24.0;
    let usable = SIZE as f64 - 2.0 * margin;
    for ((label, _), (x, y)) in points.iter().zip(&xy) {
        let c = labels.iter().position(|l| l == label).unwrap_or(0);
        let px = (margin + (x - x0) / xs * usable) as i64;
        let py = (SIZE as f64 - margin - (y - y0) / ys * usable) as i64;
        for dy in -4..=4i64 {
            for dx in -4..=4i64 {
                let (qx, qy) = (px + dx, py + dy);
                if dx * dx + dy * dy <= 16 && (0..SIZE as i64).contains(&qx) && (0..SIZE as i64).contains(&qy) {
                    img.put_pixel(qx as u32, qy as u32, Rgb(PALETTE[c % PALETTE.len()]));
                }
            }
        }
    }
    Ok(img)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn heatmap_cells_follow_values() {
        let m = SimilarityMatrix {
            speakers: vec!["a".into(), "b".into()],
            values: vec![1.0, 0.0, 0.0, 1.0],
        };
        let img = heatmap(&m);
        assert_eq!(img.dimensions(), (2 * CELL, 2 * CELL));
        assert_eq!(*img.get_pixel(0, 0), ramp(1.0));
        assert_eq!(*img.get_pixel(CELL, 0), ramp(0.0));
    }

    #[test]
    fn projection_recovers_the_dominant_direction() {
        // Points along (1, 1, 0) with a small spread along z.
        let rows: Vec<Vec<f64>> = (0..10).map(|i| vec![i as f64, i as f64, 0.01 * (i % 3) as f64]).collect();
        let xy = project_2d(&rows).unwrap();
        let spread1 = xy.iter().map(|p| p.0.abs()).fold(0.0, f64::max);
        let spread2 = xy.iter().map(|p| p.1.abs()).fold(0.0, f64::max);
        assert!(spread1 > 100.0 * spread2, "{spread1} vs {spread2}");
    }
}
