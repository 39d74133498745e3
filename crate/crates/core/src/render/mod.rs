//! Forward image formation: per-pixel measurements under a light/mask
//! pattern pair, their pattern derivatives, and whole-scene rendering.

mod ggx;
mod transport;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

pub use ggx::{eval_ggx, ggx_d, Frame, GgxParams, Lobes, ROUGHNESS_MAX, ROUGHNESS_MIN};
pub use transport::{led_weight, DiffTransport, Transport};

use crate::error::{domain, Result};
use crate::patterns::{PatternGrad, PatternPair, PatternShape, MAX_CHANNELS};
use crate::rig::{PixelRay, Rig};
use crate::scene::{NoiseModel, SceneTruth};

/// A hypothesized depth (along the pixel ray) and BRDF for one pixel.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub depth: f64,
    pub brdf: GgxParams,
}

impl Candidate {
    pub fn transport(&self, rig: &Rig, ray: &PixelRay, channels: usize) -> Transport {
        let frame = self.brdf.frame(&ray.view_frame());
        Transport::build(rig, ray, self.depth, &self.brdf.lobes(), &frame, channels)
    }
}

fn check_depth(ray: &PixelRay, cand: &Candidate) -> Result<()> {
    // allow for rounding at the interval ends
    let tol = 1e-9;
    if cand.depth < ray.z_min - tol || cand.depth > ray.z_max + tol || !cand.depth.is_finite() {
        return Err(domain(format!(
            "depth {} outside [{}, {}]",
            cand.depth, ray.z_min, ray.z_max
        )));
    }
    Ok(())
}

fn check_channels(channels: usize) -> Result<()> {
    if channels == 0 || channels > MAX_CHANNELS {
        return Err(domain(format!("channel count {channels} not in 1..={MAX_CHANNELS}")));
    }
    Ok(())
}

/// Simulated intensity of `cand` seen along `ray` under `pair`.
pub fn simulate_measurement(
    rig: &Rig,
    pair: &PatternPair,
    ray: &PixelRay,
    cand: &Candidate,
    channels: usize,
) -> Result<[f64; MAX_CHANNELS]> {
    check_channels(channels)?;
    check_depth(ray, cand)?;
    pair.validate(&PatternShape::new(&rig.geom, channels))?;
    Ok(cand.transport(rig, ray, channels).eval(pair))
}

/// Exact partial derivatives of each channel's measurement with respect to
/// every light and mask value (one dense gradient per channel).
pub fn measurement_grad_patterns(
    rig: &Rig,
    pair: &PatternPair,
    ray: &PixelRay,
    cand: &Candidate,
    channels: usize,
) -> Result<Vec<PatternGrad>> {
    check_channels(channels)?;
    check_depth(ray, cand)?;
    let shape = PatternShape::new(&rig.geom, channels);
    pair.validate(&shape)?;
    let t = cand.transport(rig, ray, channels);
    let mut resp = Vec::new();
    t.mask_responses(&pair.mask.values, &mut resp);
    Ok((0..channels)
        .map(|c| {
            let mut up = [0.0; MAX_CHANNELS];
            up[c] = 1.0;
            let mut g = PatternGrad::zeros(&shape);
            t.accumulate_grad(pair, &resp, &up, &mut g);
            g
        })
        .collect())
}

/// Row-major `height x width x channels` float image.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<f32>,
}

impl Image {
    pub fn zeros(width: usize, height: usize, channels: usize) -> Self {
        Self {
            width,
            height,
            channels,
            data: vec![0.0; width * height * channels],
        }
    }

    #[inline]
    pub fn pixel(&self, idx: usize) -> &[f32] {
        &self.data[idx * self.channels..(idx + 1) * self.channels]
    }

    #[inline]
    pub fn pixel_mut(&mut self, idx: usize) -> &mut [f32] {
        &mut self.data[idx * self.channels..(idx + 1) * self.channels]
    }

    pub fn max_value(&self) -> f32 {
        self.data.iter().copied().fold(0.0, f32::max)
    }
}

/// Noise-free render of per-pixel candidates; `None` pixels stay zero.
pub fn render_candidates(
    rig: &Rig,
    pair: &PatternPair,
    pixels: &[Option<(PixelRay, Candidate)>],
    channels: usize,
) -> Result<Image> {
    use rayon::prelude::*;
    let (w, h) = rig.resolution();
    if pixels.len() != w * h {
        return Err(domain(format!("{} pixels for a {w}x{h} camera", pixels.len())));
    }
    check_channels(channels)?;
    pair.validate(&PatternShape::new(&rig.geom, channels))?;
    let values: Vec<[f64; MAX_CHANNELS]> = pixels
        .par_iter()
        .map(|p| match p {
            Some((ray, cand)) => cand.transport(rig, ray, channels).eval(pair),
            None => [0.0; MAX_CHANNELS],
        })
        .collect();
    let mut img = Image::zeros(w, h, channels);
    for (i, v) in values.iter().enumerate() {
        for (o, x) in img.pixel_mut(i).iter_mut().zip(v) {
            *o = *x as f32;
        }
    }
    Ok(img)
}

/// Simulated photograph of `scene` under `pair`, with additive Gaussian noise
/// of std `noise.level · max_signal`, clamped at zero.
pub fn render_scene<R: Rng>(
    rig: &Rig,
    pair: &PatternPair,
    scene: &SceneTruth,
    noise: &NoiseModel,
    rng: &mut R,
) -> Result<Image> {
    if rig.resolution() != (scene.width, scene.height) {
        return Err(domain(format!(
            "scene is {}x{} but camera is {:?}",
            scene.width,
            scene.height,
            rig.resolution()
        )));
    }
    let pixels = scene.pixel_candidates(rig);
    let mut img = render_candidates(rig, pair, &pixels, scene.channels)?;
    noise.apply(&mut img, rng);
    Ok(img)
}

impl NoiseModel {
    pub fn apply<R: Rng>(&self, img: &mut Image, rng: &mut R) {
        let peak = img.max_value() as f64;
        if self.level > 0.0 && peak > 0.0 {
            let n = Normal::new(0.0, self.level * peak).expect("finite std");
            for v in img.data.iter_mut() {
                *v = ((*v as f64) + n.sample(rng)).max(0.0) as f32;
            }
        }
        if let Some(bits) = self.quantize_bits {
            if peak > 0.0 {
                let levels = ((1u64 << bits.min(32)) - 1) as f64;
                for v in img.data.iter_mut() {
                    let q = ((*v as f64) / peak).clamp(0.0, 1.0);
                    *v = ((q * levels).round() / levels * peak) as f32;
                }
            }
        }
    }
}


/// Measurement without argument validation (test helper for perturbed patterns
/// that may leave `[0,1]`).
#[cfg(test)]
pub(crate) fn transport_eval(
    rig: &Rig,
    pair: &PatternPair,
    ray: &PixelRay,
    cand: &Candidate,
    channels: usize,
) -> [f64; MAX_CHANNELS] {
    cand.transport(rig, ray, channels).eval(pair)
}
