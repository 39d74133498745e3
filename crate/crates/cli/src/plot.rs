use std::path::Path;

use image::{Rgb, RgbImage};

use crate::error::CliResult;

const W: u32 = 400;
const H: u32 = 300;
const MARGIN: f64 = 30.0;

/// Unlabelled line chart: axes along the left and bottom edges, the series
/// scaled to fill the plot area, one square marker per point.
pub fn line_plot(path: &Path, xs: &[f64], ys: &[f64]) -> CliResult<()> {
    let mut img = RgbImage::from_pixel(W, H, Rgb([255, 255, 255]));
    let (x0, x1) = (MARGIN, W as f64 - MARGIN);
    let (y0, y1) = (H as f64 - MARGIN, MARGIN);
    let black = Rgb([0, 0, 0]);
    segment(&mut img, (x0, y0), (x1, y0), black);
    segment(&mut img, (x0, y0), (x0, y1), black);

    let finite: Vec<(f64, f64)> = xs.iter().zip(ys).filter(|(x, y)| x.is_finite() && y.is_finite()).map(|(x, y)| (*x, *y)).collect();
    if !finite.is_empty() {
        let range = |v: Vec<f64>| {
            let lo = v.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            if hi > lo {
                (lo, hi)
            } else {
                (lo - 0.5, lo + 0.5)
            }
        };
        let (xl, xh) = range(finite.iter().map(|p| p.0).collect());
        let (yl, yh) = range(finite.iter().map(|p| p.1).collect());
        let pad = 0.05 * (yh - yl);
        let (yl, yh) = (yl - pad, yh + pad);
        let to_px = |(x, y): (f64, f64)| (x0 + (x - xl) / (xh - xl) * (x1 - x0), y0 + (y - yl) / (yh - yl) * (y1 - y0));
        let pts: Vec<(f64, f64)> = finite.into_iter().map(to_px).collect();
        let blue = Rgb([31, 90, 180]);
        for w in pts.windows(2) {
            segment(&mut img, w[0], w[1], blue);
        }
        for p in &pts {
            for dy in -2..=2 {
                for dx in -2..=2 {
                    put(&mut img, p.0 + dx as f64, p.1 + dy as f64, blue);
                }
            }
        }
    }
    img.save(path).map_err(anyhow::Error::from)?;
    Ok(())
}

fn put(img: &mut RgbImage, x: f64, y: f64, c: Rgb<u8>) {
    let (x, y) = (x.round(), y.round());
    if x >= 0.0 && y >= 0.0 && x < W as f64 && y < H as f64 {
        img.put_pixel(x as u32, y as u32, c);
    }
}

fn segment(img: &mut RgbImage, a: (f64, f64), b: (f64, f64), c: Rgb<u8>) {
    let n = (b.0 - a.0).abs().max((b.1 - a.1).abs()).ceil().max(1.0) as usize;
    for i in 0..=n {
        let t = i as f64 / n as f64;
        put(img, a.0 + t * (b.0 - a.0), a.1 + t * (b.1 - a.1), c);
    }
}
