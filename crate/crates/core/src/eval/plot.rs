use std::fmt::Write as _;
use std::path::Path;

use image::{Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{invalid, Error, Result};

use super::features::FeatureMatrix;

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

/// Top eigenvector of a symmetric matrix by power iteration from a
/// seeded start; the sign is fixed so the largest entry is positive.
fn top_eigenvector(cov: &[Vec<f64>], rng: &mut ChaCha8Rng) -> Vec<f64> {
    let d = cov.len();
    let mut v: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
    for _ in 0..500 {
        let mut next: Vec<f64> = cov.iter().map(|row| row.iter().zip(&v).map(|(a, b)| a * b).sum()).collect();
        let norm = next.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm < 1e-300 {
            break;
        }
        next.iter_mut().for_each(|x| *x /= norm);
        let delta: f64 = next.iter().zip(&v).map(|(a, b)| (a - b).abs()).sum();
        v = next;
        if delta < 1e-13 {
            break;
        }
    }
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-300);
    v.iter_mut().for_each(|x| *x /= norm);
    let big = v.iter().copied().fold(0.0f64, |m, x| if x.abs() > m.abs() { x } else { m });
    if big < 0.0 {
        v.iter_mut().for_each(|x| *x = -*x);
    }
    v
}

/// Projection of the rows onto their first two principal axes.
pub fn pca_2d(rows: &[Vec<f64>], seed: u64) -> Result<Vec<[f64; 2]>> {
    if rows.is_empty() {
        return Ok(Vec::new());
    }
    let d = rows[0].len();
    let n = rows.len() as f64;
    let mean: Vec<f64> = (0..d).map(|j| rows.iter().map(|r| r[j]).sum::<f64>() / n).collect();
    let centred: Vec<Vec<f64>> = rows.iter().map(|r| r.iter().zip(&mean).map(|(x, m)| x - m).collect()).collect();
    let mut cov = vec![vec![0.0; d]; d];
    for r in &centred {
        for i in 0..d {
            for j in 0..d {
                cov[i][j] += r[i] * r[j] / n;
            }
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let e1 = top_eigenvector(&cov, &mut rng);
    let l1: f64 = (0..d).map(|i| e1[i] * (0..d).map(|j| cov[i][j] * e1[j]).sum::<f64>()).sum();
    for i in 0..d {
        for j in 0..d {
            cov[i][j] -= l1 * e1[i] * e1[j];
        }
    }
    let e2 = if d > 1 { top_eigenvector(&cov, &mut rng) } else { vec![0.0; d] };
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
    Ok(centred.iter().map(|r| [dot(r, &e1), dot(r, &e2)]).collect())
}

/// Scatter of the 2D projection coloured by label, written as PNG, plus
/// the coordinates as a tab-separated table. Returns the coordinates.
pub fn embedding_plot(fm: &FeatureMatrix, png: &Path, table: &Path, seed: u64) -> Result<Vec<[f64; 2]>> {
    fm.validate()?;
    if fm.len() < 3 {
        return Err(invalid(format!("embedding plot needs at least 3 samples, got {}", fm.len())));
    }
    let pts = pca_2d(&fm.rows, seed)?;
    let size = 512u32;
    let margin = 24.0;
    let (mut lo, mut hi) = ([f64::INFINITY; 2], [f64::NEG_INFINITY; 2]);
    for p in &pts {
        for a in 0..2 {
            lo[a] = lo[a].min(p[a]);
            hi[a] = hi[a].max(p[a]);
        }
    }
    let span: Vec<f64> = (0..2).map(|a| (hi[a] - lo[a]).max(1e-12)).collect();
    let mut img = RgbImage::from_pixel(size, size, Rgb([255, 255, 255]));
    let extent = size as f64 - 2.0 * margin;
    for (p, &l) in pts.iter().zip(&fm.labels) {
        let x = margin + (p[0] - lo[0]) / span[0] * extent;
        let y = size as f64 - margin - (p[1] - lo[1]) / span[1] * extent;
        let colour = Rgb(PALETTE[l as usize % PALETTE.len()]);
        for dx in -3i64..=3 {
            for dy in -3i64..=3 {
                let (px, py) = (x as i64 + dx, y as i64 + dy);
                if (0..size as i64).contains(&px) && (0..size as i64).contains(&py) {
                    img.put_pixel(px as u32, py as u32, colour);
                }
            }
        }
    }
    img.save(png).map_err(|e| match e {
        image::ImageError::IoError(io) => Error::io(png, io),
        other => Error::Format(format!("{}: {other}", png.display())),
    })?;
    let mut text = String::from("index\tlabel\tx\ty\n");
    for (i, (p, l)) in pts.iter().zip(&fm.labels).enumerate() {
        let _ = writeln!(text, "{i}\t{l}\t{:.9}\t{:.9}", p[0], p[1]);
    }
    std::fs::write(table, text).map_err(|e| Error::io(table, e))?;
    Ok(pts)
}

/// Reads back a coordinate table written by [`embedding_plot`].
pub fn read_coordinates(table: &Path) -> Result<Vec<(u32, [f64; 2])>> {
    let text = std::fs::read_to_string(table).map_err(|e| Error::io(table, e))?;
    text.lines()
        .skip(1)
        .map(|line| {
            let f: Vec<&str> = line.split('\t').collect();
            let bad = || Error::Format(format!("bad coordinate line `{line}`"));
            if f.len() != 4 {
                return Err(bad());
            }
            Ok((
                f[1].parse().map_err(|_| bad())?,
                [f[2].parse().map_err(|_| bad())?, f[3].parse().map_err(|_| bad())?],
            ))
        })
        .collect()
}
