//! Depth accuracy and image similarity.

use serde::{Deserialize, Serialize};

use crate::error::{domain, Result};
use crate::render::Image;

pub const DEFAULT_INLIER_MM: f64 = 3.0;
/// Reported PSNR for identical images.
pub const PSNR_CAP_DB: f64 = 99.0;
const SSIM_RADIUS: usize = 5;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DepthReport {
    pub rmse: f64,
    pub inlier_pct: f64,
    /// NaN when no pixel is an inlier.
    pub rmse_inliers: f64,
    pub threshold: f64,
    pub count: usize,
}

/// Depths in meters, report in millimeters. Inliers have |error| below
/// `threshold_mm`.
pub fn depth_metrics(est: &[f64], truth: &[f64], mask: &[bool], threshold_mm: f64) -> Result<DepthReport> {
    if est.len() != truth.len() || est.len() != mask.len() {
        return Err(domain(format!(
            "shape mismatch: {} estimates, {} truths, {} mask entries",
            est.len(),
            truth.len(),
            mask.len()
        )));
    }
    let (mut se, mut n, mut se_in, mut n_in) = (0.0, 0usize, 0.0, 0usize);
    for ((e, t), _) in est.iter().zip(truth).zip(mask).filter(|(_, m)| **m) {
        let err = (e - t) * 1e3;
        se += err * err;
        n += 1;
        if err.abs() < threshold_mm {
            se_in += err * err;
            n_in += 1;
        }
    }
    if n == 0 {
        return Err(domain("depth metrics over an empty mask"));
    }
    Ok(DepthReport {
        rmse: (se / n as f64).sqrt(),
        inlier_pct: 100.0 * n_in as f64 / n as f64,
        rmse_inliers: if n_in > 0 { (se_in / n_in as f64).sqrt() } else { f64::NAN },
        threshold: threshold_mm,
        count: n,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageReport {
    pub psnr: f64,
    pub ssim: f64,
}

/// PSNR and SSIM of `a` against reference `b` over the masked pixels. The
/// peak is the largest masked value of `b`; SSIM is the mean of the local
/// SSIM map over masked pixels and channels, with an 11x11 Gaussian window
/// (σ 1.5) truncated and renormalized at the image border.
pub fn image_metrics(a: &Image, b: &Image, mask: &[bool]) -> Result<ImageReport> {
    if (a.width, a.height, a.channels) != (b.width, b.height, b.channels) {
        return Err(domain("image shapes differ"));
    }
    if mask.len() != a.width * a.height {
        return Err(domain("mask does not match the images"));
    }
    let n_mask = mask.iter().filter(|m| **m).count();
    if n_mask == 0 {
        return Err(domain("image metrics over an empty mask"));
    }
    let c_n = a.channels;
    let mut peak = 0.0f64;
    let mut se = 0.0;
    for (i, _) in mask.iter().enumerate().filter(|(_, m)| **m) {
        for (x, y) in a.pixel(i).iter().zip(b.pixel(i)) {
            peak = peak.max(*y as f64);
            let d = *x as f64 - *y as f64;
            se += d * d;
        }
    }
    let mse = se / (n_mask * c_n) as f64;
    let psnr = if mse == 0.0 || peak == 0.0 {
        PSNR_CAP_DB
    } else {
        (10.0 * (peak * peak / mse).log10()).min(PSNR_CAP_DB)
    };
    let ssim = ssim_masked(a, b, mask, peak);
    Ok(ImageReport { psnr, ssim })
}

fn gaussian_window() -> Vec<f64> {
    let r = SSIM_RADIUS as i64;
    (-r..=r).map(|k| (-((k * k) as f64) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp()).collect()
}

fn ssim_masked(a: &Image, b: &Image, mask: &[bool], peak: f64) -> f64 {
    let (w, h, c_n) = (a.width, a.height, a.channels);
    let g = gaussian_window();
    let c1 = (SSIM_K1 * peak).powi(2);
    let c2 = (SSIM_K2 * peak).powi(2);
    let r = SSIM_RADIUS as i64;
    let mut total = 0.0;
    let mut count = 0usize;
    for (i, _) in mask.iter().enumerate().filter(|(_, m)| **m) {
        let (px, py) = ((i % w) as i64, (i / w) as i64);
        for c in 0..c_n {
            let (mut sw, mut ma, mut mb, mut aa, mut bb, mut ab) = (0.0, 0.0, 0.0, 0.0, 0.0, 0.0);
            for dy in -r..=r {
                let y = py + dy;
                if y < 0 || y >= h as i64 {
                    continue;
                }
                for dx in -r..=r {
                    let x = px + dx;
                    if x < 0 || x >= w as i64 {
                        continue;
                    }
                    let wt = g[(dy + r) as usize] * g[(dx + r) as usize];
                    let j = y as usize * w + x as usize;
                    let va = a.data[j * c_n + c] as f64;
                    let vb = b.data[j * c_n + c] as f64;
                    sw += wt;
                    ma += wt * va;
                    mb += wt * vb;
                    aa += wt * va * va;
                    bb += wt * vb * vb;
                    ab += wt * va * vb;
                }
            }
            let (ma, mb) = (ma / sw, mb / sw);
            let va = aa / sw - ma * ma;
            let vb = bb / sw - mb * mb;
            let cov = ab / sw - ma * mb;
            let s = ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
            total += if s.is_finite() { s } else { 1.0 };
            count += 1;
        }
    }
    total / count as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn depth_examples() {
        let truth = [0.2, 0.2, 0.2];
        let r = depth_metrics(&truth, &truth, &[true; 3], 3.0).unwrap();
        assert_eq!((r.rmse, r.inlier_pct, r.rmse_inliers), (0.0, 100.0, 0.0));
        let est = [0.2, 0.2029, 0.3];
        let r = depth_metrics(&est, &truth, &[true; 3], 3.0).unwrap();
        assert!((r.inlier_pct - 200.0 / 3.0).abs() < 1e-9);
        assert!((r.rmse_inliers - (2.9f64 * 2.9 / 2.0).sqrt()).abs() < 1e-9);
        assert!((r.rmse_inliers - 2.051).abs() < 1e-3);
        assert!(r.rmse_inliers <= r.rmse);
        assert!(depth_metrics(&est, &truth, &[false; 3], 3.0).is_err());
        assert!(depth_metrics(&est, &truth[..2], &[true; 3], 3.0).is_err());
    }

    proptest! {
        #[test]
        fn depth_metrics_ignore_pixel_order(seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let n = 40;
            let truth: Vec<f64> = (0..n).map(|_| rng.random_range(0.1..0.3)).collect();
            let est: Vec<f64> = truth.iter().map(|t| t + rng.random_range(-0.006..0.006)).collect();
            let mask: Vec<bool> = (0..n).map(|_| rng.random_bool(0.8)).collect();
            let mut perm: Vec<usize> = (0..n).collect();
            perm.reverse();
            perm.swap(3, 17);
            let p = |v: &[f64]| perm.iter().map(|&i| v[i]).collect::<Vec<_>>();
            let pm: Vec<bool> = perm.iter().map(|&i| mask[i]).collect();
            if mask.iter().any(|m| *m) {
                let a = depth_metrics(&est, &truth, &mask, 3.0).unwrap();
                let b = depth_metrics(&p(&est), &p(&truth), &pm, 3.0).unwrap();
                prop_assert!((a.rmse - b.rmse).abs() < 1e-12);
                prop_assert_eq!(a.inlier_pct, b.inlier_pct);
                prop_assert!(a.inlier_pct >= 0.0 && a.inlier_pct <= 100.0);
            }
        }
    }

    fn random_image(rng: &mut ChaCha8Rng, w: usize, h: usize, c: usize) -> Image {
        let mut im = Image::zeros(w, h, c);
        im.data.iter_mut().for_each(|v| *v = rng.random_range(0.0..1.0));
        im
    }

    #[test]
    fn identical_images_cap_psnr() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = random_image(&mut rng, 12, 9, 3);
        let r = image_metrics(&a, &a, &vec![true; 108]).unwrap();
        assert_eq!(r.psnr, PSNR_CAP_DB);
        assert!((r.ssim - 1.0).abs() < 1e-12);
        assert!(image_metrics(&a, &a, &vec![false; 108]).is_err());
    }

    #[test]
    fn uniform_offset_is_twenty_db() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let b = random_image(&mut rng, 10, 10, 1);
        let peak = b.max_value();
        let mut a = b.clone();
        a.data.iter_mut().for_each(|v| *v += 0.1 * peak);
        let r = image_metrics(&a, &b, &vec![true; 100]).unwrap();
        assert!((r.psnr - 20.0).abs() < 1e-4, "{}", r.psnr);
    }
}
