//! Per-pixel refinement of depth and GGX parameters against the captured
//! photographs, coarse to fine, plus forward relighting of a reconstruction.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::acquire::AcquisitionState;
use crate::adam::{Adam, AdamConfig};
use crate::error::{domain, Error, Result};
use crate::io::{read_f32, read_json, write_f32, write_json, write_png_gray};
use crate::math::{logit, sigmoid, Dual, Real, V3};
use crate::patterns::{PatternPair, MAX_CHANNELS};
use crate::prob::map_estimate;
use crate::render::{render_candidates, Candidate, DiffTransport, Frame, GgxParams, Image, Lobes, ROUGHNESS_MAX, ROUGHNESS_MIN};
use crate::rig::{PixelRay, Rig};
use crate::rng::{stream, SeedTree};
use crate::scene::SceneTruth;

/// Smoothing of |r| near zero.
pub const CHARBONNIER_DELTA: f64 = 1e-6;
/// Depth stored for pixels without a reconstruction.
pub const INVALID_DEPTH: f64 = -1.0;
/// Generated normals never tilt past this (cosine of the angle to the view axis).
const MIN_NORMAL_Z: f64 = 1e-3;

/// Depth along each pixel ray and GGX parameters, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct ReconMaps {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub depth: Vec<f64>,
    pub brdf: Vec<GgxParams>,
}

impl ReconMaps {
    pub fn empty(width: usize, height: usize, channels: usize) -> Self {
        Self {
            width,
            height,
            channels,
            depth: vec![INVALID_DEPTH; width * height],
            brdf: vec![zeroed_params(); width * height],
        }
    }

    pub fn len(&self) -> usize {
        self.depth.len()
    }

    pub fn is_empty(&self) -> bool {
        self.depth.is_empty()
    }

    pub fn is_valid(&self, idx: usize) -> bool {
        self.depth[idx] >= 0.0
    }

    pub fn valid_mask(&self) -> Vec<bool> {
        (0..self.len()).map(|i| self.is_valid(i)).collect()
    }

    /// Ground-truth maps of a synthetic scene.
    pub fn from_scene(scene: &SceneTruth, rig: &Rig) -> Self {
        let mut r = Self::empty(scene.width, scene.height, scene.channels);
        for (i, p) in scene.pixel_candidates(rig).into_iter().enumerate() {
            if let Some((_, c)) = p {
                r.depth[i] = c.depth;
                r.brdf[i] = c.brdf;
            }
        }
        r
    }

    pub fn candidates(&self, rig: &Rig) -> Result<Vec<Option<(PixelRay, Candidate)>>> {
        self.check_rig(rig)?;
        Ok((0..self.len())
            .map(|i| {
                if !self.is_valid(i) {
                    return None;
                }
                let ray = rig.pixel_ray(i % self.width, i / self.width)?;
                Some((
                    ray,
                    Candidate {
                        depth: self.depth[i],
                        brdf: self.brdf[i],
                    },
                ))
            })
            .collect())
    }

    fn check_rig(&self, rig: &Rig) -> Result<()> {
        if rig.resolution() != (self.width, self.height) {
            return Err(domain(format!(
                "reconstruction is {}x{} but camera is {:?}",
                self.width,
                self.height,
                rig.resolution()
            )));
        }
        Ok(())
    }
}

fn zeroed_params() -> GgxParams {
    GgxParams {
        diffuse: [0.0; MAX_CHANNELS],
        specular: [0.0; MAX_CHANNELS],
        alpha_x: 0.0,
        alpha_y: 0.0,
        normal_theta: 0.0,
        normal_phi: 0.0,
        tangent_angle: 0.0,
    }
}

/// MAP depth and BRDF for every modelled pixel of a finished acquisition.
pub fn init_recon(state: &AcquisitionState, rig: &Rig, seed: u64) -> Result<ReconMaps> {
    if rig.resolution() != (state.width, state.height) {
        return Err(domain("acquisition and rig resolutions differ"));
    }
    let seeds = SeedTree::new(seed);
    let est: Vec<Option<Candidate>> = state
        .models
        .par_iter()
        .map(|m| {
            m.as_ref()
                .map(|m| map_estimate(m, rig, &state.patterns, &mut seeds.rng(stream::MAP, 0, m.pixel as u64)))
                .transpose()
        })
        .collect::<Result<_>>()?;
    let mut r = ReconMaps::empty(state.width, state.height, state.channels);
    for (i, c) in est.into_iter().enumerate() {
        if let Some(c) = c {
            r.depth[i] = c.depth;
            r.brdf[i] = c.brdf;
        }
    }
    Ok(r)
}

/// Renders a reconstruction under one pattern pair, without noise.
pub fn relight(recon: &ReconMaps, rig: &Rig, pair: &PatternPair) -> Result<Image> {
    render_candidates(rig, pair, &recon.candidates(rig)?, recon.channels)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FinetuneConfig {
    /// Adam iterations per resolution level.
    pub iters: usize,
    pub adam: AdamConfig,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            iters: 300,
            adam: AdamConfig::default(),
        }
    }
}

/// Captured photographs at one resolution of the schedule.
#[derive(Clone, Debug)]
pub struct FinetuneLevel {
    pub rig: Rig,
    /// One image per captured pattern, in capture order.
    pub images: Vec<Image>,
    /// Pixels to reconstruct at this level.
    pub valid: Vec<bool>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LevelLog {
    pub width: usize,
    pub height: usize,
    pub initial_loss: f64,
    pub final_loss: f64,
}

/// Boxed free variables of one pixel: depth, diffuse and specular albedos
/// per channel, two roughnesses, a free normal 3-vector (view frame) and the
/// tangent angle.
#[derive(Clone, Copy, Debug)]
struct Layout {
    channels: usize,
}

impl Layout {
    fn len(&self) -> usize {
        7 + 2 * self.channels
    }

    fn encode(&self, ray: &PixelRay, depth: f64, p: &GgxParams) -> Vec<f64> {
        let c = self.channels;
        let span = ray.z_max - ray.z_min;
        let rough = |a: f64| logit((a - ROUGHNESS_MIN) / (ROUGHNESS_MAX - ROUGHNESS_MIN));
        let mut v = Vec::with_capacity(self.len());
        v.push(logit((depth - ray.z_min) / span));
        v.extend(p.diffuse[..c].iter().map(|&x| logit(x)));
        v.extend(p.specular[..c].iter().map(|&x| logit(x)));
        v.push(rough(p.alpha_x));
        v.push(rough(p.alpha_y));
        let n = p.normal_local();
        v.extend([n.x, n.y, n.z]);
        v.push(p.tangent_angle);
        v
    }

    fn decode(&self, ray: &PixelRay, v: &[f64]) -> (f64, GgxParams) {
        let c = self.channels;
        let depth = ray.z_min + (ray.z_max - ray.z_min) * sigmoid(v[0]);
        let rough = |x: f64| ROUGHNESS_MIN + (ROUGHNESS_MAX - ROUGHNESS_MIN) * sigmoid(x);
        let mut p = zeroed_params();
        for k in 0..c {
            p.diffuse[k] = sigmoid(v[1 + k]);
            p.specular[k] = sigmoid(v[1 + c + k]);
        }
        p.alpha_x = rough(v[1 + 2 * c]);
        p.alpha_y = rough(v[2 + 2 * c]);
        let n = nalgebra::Vector3::new(v[3 + 2 * c], v[4 + 2 * c], v[5 + 2 * c].max(MIN_NORMAL_Z));
        p.set_normal_local(&n);
        p.tangent_angle = v[6 + 2 * c].rem_euclid(std::f64::consts::PI);
        (depth, p)
    }

    /// Simulated measurements under every pattern, differentiated with
    /// respect to the free variables.
    fn simulate<const N: usize>(&self, rig: &Rig, ray: &PixelRay, v: &[f64], patterns: &[PatternPair]) -> Vec<Dual<N>> {
        debug_assert_eq!(N, self.len());
        let c = self.channels;
        let x: Vec<Dual<N>> = v.iter().enumerate().map(|(i, &x)| Dual::var(x, i)).collect();
        let depth = x[0].sigmoid() * (ray.z_max - ray.z_min) + ray.z_min;
        let zero = Dual::constant(0.0);
        let mut lobes = Lobes {
            diffuse: [zero; MAX_CHANNELS],
            specular: [zero; MAX_CHANNELS],
            alpha_x: x[1 + 2 * c].sigmoid() * (ROUGHNESS_MAX - ROUGHNESS_MIN) + ROUGHNESS_MIN,
            alpha_y: x[2 + 2 * c].sigmoid() * (ROUGHNESS_MAX - ROUGHNESS_MIN) + ROUGHNESS_MIN,
        };
        for k in 0..c {
            lobes.diffuse[k] = x[1 + k].sigmoid();
            lobes.specular[k] = x[1 + c + k].sigmoid();
        }
        let n = V3::new(x[3 + 2 * c], x[4 + 2 * c], x[5 + 2 * c]).normalize();
        let frame = Frame::build(&ray.view_frame(), n, x[6 + 2 * c]);
        let tr = DiffTransport::<N>::build(rig, ray, depth, &lobes, &frame, c);
        let mut out = Vec::with_capacity(patterns.len() * c);
        for p in patterns {
            out.extend_from_slice(&tr.eval(p)[..c]);
        }
        out
    }
}

fn charbonnier(r: f64) -> (f64, f64) {
    let s = (r * r + CHARBONNIER_DELTA * CHARBONNIER_DELTA).sqrt();
    (s, r / s)
}

/// Smoothed ℓ1 between the measurements and the simulation at free
/// variables `v`, with its gradient.
fn pixel_loss<const N: usize>(
    layout: Layout,
    rig: &Rig,
    ray: &PixelRay,
    v: &[f64],
    patterns: &[PatternPair],
    meas: &[f64],
) -> (f64, [f64; N]) {
    let sim = layout.simulate::<N>(rig, ray, v, patterns);
    let mut loss = 0.0;
    let mut grad = [0.0; N];
    for (s, m) in sim.iter().zip(meas) {
        let (l, dl) = charbonnier(s.v - m);
        loss += l;
        for (g, d) in grad.iter_mut().zip(&s.d) {
            *g += dl * d;
        }
    }
    (loss, grad)
}

struct PixelResult {
    depth: f64,
    brdf: GgxParams,
    initial: f64,
    best: f64,
}

fn refine_pixel<const N: usize>(
    layout: Layout,
    rig: &Rig,
    ray: &PixelRay,
    start: (f64, &GgxParams),
    patterns: &[PatternPair],
    meas: &[f64],
    cfg: &FinetuneConfig,
) -> Result<PixelResult> {
    let mut v = layout.encode(ray, start.0, start.1);
    let mut adam = Adam::new(N, cfg.adam);
    let mut best_v = v.clone();
    let mut initial = f64::NAN;
    let mut best = f64::INFINITY;
    for it in 0..=cfg.iters {
        let (loss, grad) = pixel_loss::<N>(layout, rig, ray, &v, patterns, meas);
        if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFinite {
                iter: it,
                context: format!("finetune pixel {:?}", ray.px),
            });
        }
        if it == 0 {
            initial = loss;
        }
        if loss < best {
            best = loss;
            best_v.copy_from_slice(&v);
        }
        if it < cfg.iters {
            adam.step(&mut v, &grad);
        }
    }
    let (depth, brdf) = if best < initial {
        layout.decode(ray, &best_v)
    } else {
        (start.0, *start.1)
    };
    Ok(PixelResult {
        depth,
        brdf,
        initial,
        best: best.min(initial),
    })
}

/// Total smoothed ℓ1 of a reconstruction against one level's captures.
pub fn data_loss(recon: &ReconMaps, level: &FinetuneLevel, patterns: &[PatternPair]) -> Result<f64> {
    let per = pixel_l1(recon, &level.rig, patterns, &level.images)?;
    Ok(per.iter().flatten().sum())
}

/// Per-pixel smoothed ℓ1 against `images`; `None` for invalid pixels.
pub fn pixel_l1(recon: &ReconMaps, rig: &Rig, patterns: &[PatternPair], images: &[Image]) -> Result<Vec<Option<f64>>> {
    if images.len() != patterns.len() {
        return Err(domain(format!("{} images for {} patterns", images.len(), patterns.len())));
    }
    let cands = recon.candidates(rig)?;
    let c = recon.channels;
    Ok(cands
        .par_iter()
        .enumerate()
        .map(|(i, p)| {
            p.as_ref().map(|(ray, cand)| {
                let tr = cand.transport(rig, ray, c);
                patterns
                    .iter()
                    .zip(images)
                    .map(|(pat, img)| {
                        let sim = tr.eval(pat);
                        img.pixel(i).iter().zip(&sim).map(|(m, s)| charbonnier(s - *m as f64).0).sum::<f64>()
                    })
                    .sum()
            })
        })
        .collect())
}

/// Optimizes every valid pixel of `recon` against `level` for `cfg.iters`
/// steps. Pixels are independent, so each runs its own Adam; each keeps its
/// best iterate, which makes the level's final loss at most its initial one.
pub fn refine_level(
    recon: &ReconMaps,
    level: &FinetuneLevel,
    patterns: &[PatternPair],
    cfg: &FinetuneConfig,
) -> Result<(ReconMaps, LevelLog)> {
    let rig = &level.rig;
    recon.check_rig(rig)?;
    if level.images.len() != patterns.len() {
        return Err(domain(format!("{} images for {} patterns", level.images.len(), patterns.len())));
    }
    if level.images.iter().any(|im| (im.width, im.height, im.channels) != (recon.width, recon.height, recon.channels)) {
        return Err(domain("capture shape does not match the reconstruction"));
    }
    let layout = Layout { channels: recon.channels };
    let w = recon.width;
    let results: Vec<Option<PixelResult>> = (0..recon.len())
        .into_par_iter()
        .map(|i| {
            if !recon.is_valid(i) {
                return Ok(None);
            }
            let Some(ray) = rig.pixel_ray(i % w, i / w) else {
                return Ok(None);
            };
            let meas: Vec<f64> = level
                .images
                .iter()
                .flat_map(|im| im.pixel(i).iter().map(|v| *v as f64))
                .collect();
            let start = (recon.depth[i].clamp(ray.z_min, ray.z_max), &recon.brdf[i]);
            let r = match recon.channels {
                1 => refine_pixel::<9>(layout, rig, &ray, start, patterns, &meas, cfg),
                2 => refine_pixel::<11>(layout, rig, &ray, start, patterns, &meas, cfg),
                _ => refine_pixel::<13>(layout, rig, &ray, start, patterns, &meas, cfg),
            };
            r.map(Some)
        })
        .collect::<Result<_>>()?;
    let mut out = ReconMaps::empty(recon.width, recon.height, recon.channels);
    let (mut initial, mut fin) = (0.0, 0.0);
    for (i, r) in results.into_iter().enumerate() {
        if let Some(r) = r {
            out.depth[i] = r.depth;
            out.brdf[i] = r.brdf;
            initial += r.initial;
            fin += r.best;
        }
    }
    let log = LevelLog {
        width: recon.width,
        height: recon.height,
        initial_loss: initial,
        final_loss: fin,
    };
    Ok((out, log))
}

/// Coarse-to-fine refinement. `levels[0]` must match `recon`'s resolution
/// and each further level must double it; maps are upsampled between levels.
/// On a non-finite loss the last completed level is written to `checkpoint`
/// (when given) before the error is returned.
pub fn finetune(
    recon: &ReconMaps,
    patterns: &[PatternPair],
    levels: &[FinetuneLevel],
    cfg: &FinetuneConfig,
    checkpoint: Option<&Path>,
) -> Result<(ReconMaps, Vec<LevelLog>)> {
    let mut cur = recon.clone();
    let mut logs = Vec::new();
    for (k, level) in levels.iter().enumerate() {
        if k > 0 {
            cur = upsample(&cur, &level.rig, &level.valid)?;
        }
        match refine_level(&cur, level, patterns, cfg) {
            Ok((next, log)) => {
                log::info!(
                    "finetune {}x{}: loss {:.6} -> {:.6}",
                    log.width,
                    log.height,
                    log.initial_loss,
                    log.final_loss
                );
                cur = next;
                logs.push(log);
            }
            Err(e) => {
                if let Some(dir) = checkpoint {
                    save_recon(dir, &cur)?;
                }
                return Err(e);
            }
        }
    }
    Ok((cur, logs))
}

/// Bilinear 2x upsampling onto `rig`'s camera. Only valid coarse pixels
/// contribute; normals are renormalized and tangent angles are interpolated
/// as unit vectors on the doubled angle (they are defined modulo π).
pub fn upsample(recon: &ReconMaps, rig: &Rig, valid: &[bool]) -> Result<ReconMaps> {
    let (w, h) = rig.resolution();
    if (w, h) != (2 * recon.width, 2 * recon.height) {
        return Err(domain(format!(
            "cannot upsample {}x{} to {w}x{h}",
            recon.width, recon.height
        )));
    }
    if valid.len() != w * h {
        return Err(domain("valid mask does not match the fine camera"));
    }
    let (cw, ch) = (recon.width as i64, recon.height as i64);
    let c_n = recon.channels;
    let mut out = ReconMaps::empty(w, h, c_n);
    for i in 0..w * h {
        if !valid[i] {
            continue;
        }
        let Some(ray) = rig.pixel_ray(i % w, i / w) else {
            continue;
        };
        let fx = ((i % w) as f64 + 0.5) / 2.0 - 0.5;
        let fy = ((i / w) as f64 + 0.5) / 2.0 - 0.5;
        let (x0, y0) = (fx.floor() as i64, fy.floor() as i64);
        let (ax, ay) = (fx - x0 as f64, fy - y0 as f64);
        let mut taps = Vec::with_capacity(4);
        for (dx, dy, wt) in [
            (0, 0, (1.0 - ax) * (1.0 - ay)),
            (1, 0, ax * (1.0 - ay)),
            (0, 1, (1.0 - ax) * ay),
            (1, 1, ax * ay),
        ] {
            let (x, y) = ((x0 + dx).clamp(0, cw - 1), (y0 + dy).clamp(0, ch - 1));
            let j = (y * cw + x) as usize;
            if wt > 0.0 && recon.is_valid(j) {
                taps.push((j, wt));
            }
        }
        if taps.is_empty() {
            let (cx, cy) = (((i % w) / 2) as i64, ((i / w) / 2) as i64);
            if let Some(j) = nearest_valid(recon, cx, cy) {
                taps.push((j, 1.0));
            } else {
                continue;
            }
        }
        let total: f64 = taps.iter().map(|t| t.1).sum();
        let mut depth = 0.0;
        let mut p = zeroed_params();
        let mut n = nalgebra::Vector3::zeros();
        let (mut tc, mut ts) = (0.0, 0.0);
        for &(j, wt) in &taps {
            let wt = wt / total;
            let q = &recon.brdf[j];
            depth += wt * recon.depth[j];
            for k in 0..c_n {
                p.diffuse[k] += wt * q.diffuse[k];
                p.specular[k] += wt * q.specular[k];
            }
            p.alpha_x += wt * q.alpha_x;
            p.alpha_y += wt * q.alpha_y;
            n += wt * q.normal_local();
            tc += wt * (2.0 * q.tangent_angle).cos();
            ts += wt * (2.0 * q.tangent_angle).sin();
        }
        if n.z < MIN_NORMAL_Z || n.norm() < 1e-12 {
            n = nalgebra::Vector3::new(n.x, n.y, MIN_NORMAL_Z);
        }
        p.set_normal_local(&n);
        p.tangent_angle = (0.5 * ts.atan2(tc)).rem_euclid(std::f64::consts::PI);
        out.depth[i] = depth.clamp(ray.z_min, ray.z_max);
        out.brdf[i] = p;
    }
    Ok(out)
}

fn nearest_valid(recon: &ReconMaps, cx: i64, cy: i64) -> Option<usize> {
    let w = recon.width as i64;
    (0..recon.len())
        .filter(|&j| recon.is_valid(j))
        .min_by_key(|&j| {
            let (x, y) = (j as i64 % w, j as i64 / w);
            ((x - cx).pow(2) + (y - cy).pow(2), j)
        })
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ReconManifest {
    version: u32,
    resolution: [usize; 2],
    channels: usize,
    maps: Vec<String>,
}

const RECON_MAPS: [&str; 9] = [
    "depth",
    "diffuse",
    "specular",
    "alpha_x",
    "alpha_y",
    "normal_theta",
    "normal_phi",
    "tangent",
    "valid",
];

fn map_channels(name: &str, channels: usize) -> usize {
    if name == "diffuse" || name == "specular" {
        channels
    } else {
        1
    }
}

/// Writes `manifest.json`, one raw float32 file per map and a PNG preview of
/// each scalar map.
pub fn save_recon(dir: &Path, recon: &ReconMaps) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(crate::error::io_err(dir))?;
    let n = recon.len();
    let c_n = recon.channels;
    for name in RECON_MAPS {
        let k = map_channels(name, c_n);
        let mut data = vec![0f32; n * k];
        for i in 0..n {
            let p = &recon.brdf[i];
            let vals: Vec<f64> = match name {
                "depth" => vec![recon.depth[i]],
                "diffuse" => p.diffuse[..c_n].to_vec(),
                "specular" => p.specular[..c_n].to_vec(),
                "alpha_x" => vec![p.alpha_x],
                "alpha_y" => vec![p.alpha_y],
                "normal_theta" => vec![p.normal_theta],
                "normal_phi" => vec![p.normal_phi],
                "tangent" => vec![p.tangent_angle],
                _ => vec![if recon.is_valid(i) { 1.0 } else { 0.0 }],
            };
            for (o, v) in data[i * k..(i + 1) * k].iter_mut().zip(vals) {
                *o = v as f32;
            }
        }
        write_f32(&dir.join(format!("{name}.f32")), &data)?;
        let first: Vec<f64> = (0..n).map(|i| data[i * k] as f64).collect();
        let (lo, hi) = if name == "depth" {
            let valid = first.iter().copied().filter(|d| *d >= 0.0);
            let lo = valid.clone().fold(f64::INFINITY, f64::min);
            (lo, valid.fold(f64::NEG_INFINITY, f64::max))
        } else {
            (0.0, first.iter().copied().fold(0.0, f64::max))
        };
        write_png_gray(&dir.join(format!("{name}.png")), recon.width, recon.height, &first, lo, hi)?;
    }
    write_json(
        &dir.join("manifest.json"),
        &ReconManifest {
            version: 1,
            resolution: [recon.width, recon.height],
            channels: c_n,
            maps: RECON_MAPS.iter().map(|s| s.to_string()).collect(),
        },
    )
}

/// Inverse of [`save_recon`]. Values come back rounded to f32.
pub fn load_recon(dir: &Path) -> Result<ReconMaps> {
    let m: ReconManifest = read_json(&dir.join("manifest.json"))?;
    let [w, h] = m.resolution;
    let c_n = m.channels;
    if c_n == 0 || c_n > MAX_CHANNELS {
        return Err(Error::Parse {
            path: dir.join("manifest.json"),
            offset: 0,
            msg: format!("channel count {c_n}"),
        });
    }
    let mut r = ReconMaps::empty(w, h, c_n);
    let n = w * h;
    let mut valid = vec![false; n];
    for name in RECON_MAPS {
        let k = map_channels(name, c_n);
        let data = read_f32(&dir.join(format!("{name}.f32")), n * k)?;
        for i in 0..n {
            let v = &data[i * k..(i + 1) * k];
            let p = &mut r.brdf[i];
            match name {
                "depth" => r.depth[i] = v[0] as f64,
                "diffuse" => v.iter().enumerate().for_each(|(c, x)| p.diffuse[c] = *x as f64),
                "specular" => v.iter().enumerate().for_each(|(c, x)| p.specular[c] = *x as f64),
                "alpha_x" => p.alpha_x = v[0] as f64,
                "alpha_y" => p.alpha_y = v[0] as f64,
                "normal_theta" => p.normal_theta = v[0] as f64,
                "normal_phi" => p.normal_phi = v[0] as f64,
                "tangent" => p.tangent_angle = v[0] as f64,
                _ => valid[i] = v[0] > 0.0,
            }
        }
    }
    for (i, ok) in valid.into_iter().enumerate() {
        if !ok {
            r.depth[i] = INVALID_DEPTH;
            r.brdf[i] = zeroed_params();
        }
    }
    Ok(r)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::patterns::{FreePatternVars, PatternShape};
    use crate::rig::{LedModel, RigGeometry};
    use crate::scene::{gen_scene, NoiseModel, SceneKind};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn setup(res: usize, kind: SceneKind, n_pat: usize) -> (Rig, SceneTruth, Vec<PatternPair>, Vec<Image>) {
        let rig = Rig::new(RigGeometry::desk(res), LedModel::default()).unwrap();
        let scene = gen_scene(kind, &rig, 1, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        let shape = PatternShape::new(&rig.geom, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let pats: Vec<_> = (0..n_pat).map(|_| FreePatternVars::random(shape, &mut rng).realize()).collect();
        let imgs = pats
            .iter()
            .map(|p| render_scene_clean(&rig, p, &scene))
            .collect();
        (rig, scene, pats, imgs)
    }

    fn render_scene_clean(rig: &Rig, p: &PatternPair, scene: &SceneTruth) -> Image {
        crate::render::render_scene(rig, p, scene, &NoiseModel::noiseless(), &mut ChaCha8Rng::seed_from_u64(0)).unwrap()
    }

    fn level(rig: &Rig, scene: &SceneTruth, imgs: Vec<Image>) -> FinetuneLevel {
        FinetuneLevel {
            rig: rig.clone(),
            images: imgs,
            valid: scene.valid_mask(),
        }
    }

    #[test]
    fn layout_round_trip() {
        let rig = Rig::new(RigGeometry::desk(8), LedModel::default()).unwrap();
        let ray = rig.pixel_ray(4, 4).unwrap();
        let mut p = GgxParams {
            diffuse: [0.3, 0.6, 0.9],
            specular: [0.05, 0.1, 0.15],
            alpha_x: 0.12,
            alpha_y: 0.33,
            tangent_angle: 1.2,
            ..GgxParams::default()
        };
        p.set_normal_local(&nalgebra::Vector3::new(0.2, -0.3, 0.9));
        let l = Layout { channels: 3 };
        let d = 0.5 * (ray.z_min + ray.z_max);
        let (d2, p2) = l.decode(&ray, &l.encode(&ray, d, &p));
        assert!((d - d2).abs() < 1e-12);
        for k in 0..3 {
            assert!((p.diffuse[k] - p2.diffuse[k]).abs() < 1e-12);
            assert!((p.specular[k] - p2.specular[k]).abs() < 1e-12);
        }
        assert!((p.alpha_x - p2.alpha_x).abs() < 1e-12);
        assert!((p.alpha_y - p2.alpha_y).abs() < 1e-12);
        assert!((p.normal_theta - p2.normal_theta).abs() < 1e-9);
        assert!((p.normal_phi - p2.normal_phi).abs() < 1e-9);
        assert!((p.tangent_angle - p2.tangent_angle).abs() < 1e-12);
    }

    #[test]
    fn loss_gradient_matches_finite_differences() {
        let (rig, scene, pats, imgs) = setup(8, SceneKind::RandomSvbrdf, 4);
        let l = Layout { channels: 1 };
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut checked = 0;
        for (i, p) in scene.pixel_candidates(&rig).iter().enumerate() {
            let Some((ray, c)) = p else { continue };
            if checked >= 6 {
                break;
            }
            let meas: Vec<f64> = imgs.iter().map(|im| im.pixel(i)[0] as f64 * 0.8 + 0.01).collect();
            let mut v = l.encode(ray, c.depth, &c.brdf);
            for x in v.iter_mut() {
                *x += 0.05 * rand::Rng::random_range(&mut rng, -1.0..1.0);
            }
            let (_, g) = pixel_loss::<9>(l, &rig, ray, &v, &pats, &meas);
            for k in 0..9 {
                let h = 1e-6;
                let mut a = v.clone();
                let mut b = v.clone();
                a[k] += h;
                b[k] -= h;
                let fa = pixel_loss::<9>(l, &rig, ray, &a, &pats, &meas).0;
                let fb = pixel_loss::<9>(l, &rig, ray, &b, &pats, &meas).0;
                let fd = (fa - fb) / (2.0 * h);
                let err = (fd - g[k]).abs() / fd.abs().max(g[k].abs()).max(1e-6);
                assert!(err < 1e-3, "pixel {i} var {k}: fd {fd} analytic {}", g[k]);
            }
            checked += 1;
        }
        assert_eq!(checked, 6);
    }

    #[test]
    fn ground_truth_is_a_fixed_point() {
        let (rig, scene, pats, imgs) = setup(8, SceneKind::Wavy, 6);
        let gt = ReconMaps::from_scene(&scene, &rig);
        let cfg = FinetuneConfig {
            iters: 10,
            ..FinetuneConfig::default()
        };
        let (out, log) = refine_level(&gt, &level(&rig, &scene, imgs), &pats, &cfg).unwrap();
        assert!(log.initial_loss < 1e-3);
        for i in 0..gt.len() {
            assert!((out.depth[i] - gt.depth[i]).abs() < 1e-4);
            assert!((out.brdf[i].diffuse[0] - gt.brdf[i].diffuse[0]).abs() < 1e-4);
            assert!((out.brdf[i].alpha_x - gt.brdf[i].alpha_x).abs() < 1e-4);
        }
    }

    #[test]
    fn level_loss_never_increases() {
        let (rig, scene, pats, imgs) = setup(8, SceneKind::Wavy, 6);
        let mut start = ReconMaps::from_scene(&scene, &rig);
        for (i, d) in start.depth.iter_mut().enumerate() {
            if *d >= 0.0 {
                *d += 0.002 * ((i % 3) as f64 - 1.0);
                start.brdf[i].diffuse[0] = 0.5;
            }
        }
        let cfg = FinetuneConfig {
            iters: 30,
            ..FinetuneConfig::default()
        };
        let lv = level(&rig, &scene, imgs);
        let (out, log) = refine_level(&start, &lv, &pats, &cfg).unwrap();
        assert!(log.final_loss <= log.initial_loss);
        assert!((data_loss(&start, &lv, &pats).unwrap() - log.initial_loss).abs() < 1e-9 * log.initial_loss.max(1.0));
        assert!(data_loss(&out, &lv, &pats).unwrap() <= log.initial_loss + 1e-12);
        for i in 0..out.len() {
            assert_eq!(out.is_valid(i), start.is_valid(i));
            if out.is_valid(i) {
                assert!(out.brdf[i].in_bounds(1));
            } else {
                assert_eq!(out.depth[i], INVALID_DEPTH);
                assert_eq!(out.brdf[i], zeroed_params());
            }
        }
    }

    #[test]
    fn relight_ground_truth_equals_clean_render() {
        let (rig, scene, pats, imgs) = setup(8, SceneKind::Sphere, 2);
        let gt = ReconMaps::from_scene(&scene, &rig);
        for (p, im) in pats.iter().zip(&imgs) {
            assert_eq!(&relight(&gt, &rig, p).unwrap(), im);
        }
        let dark = PatternPair::filled(&PatternShape::new(&rig.geom, 1), 0.0, 1.0);
        assert!(relight(&gt, &rig, &dark).unwrap().data.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn upsample_keeps_constant_maps() {
        let coarse_rig = Rig::new(RigGeometry::desk(8), LedModel::default()).unwrap();
        let fine_rig = coarse_rig.at_resolution(16, 16).unwrap();
        let mut r = ReconMaps::empty(8, 8, 1);
        let mut p = GgxParams {
            diffuse: [0.4; 3],
            specular: [0.1; 3],
            alpha_x: 0.2,
            alpha_y: 0.3,
            tangent_angle: 3.1,
            ..GgxParams::default()
        };
        p.set_normal_local(&nalgebra::Vector3::new(0.1, 0.2, 0.9));
        for i in 0..64 {
            let ray = coarse_rig.pixel_ray(i % 8, i / 8).unwrap();
            r.depth[i] = 0.5 * (ray.z_min + ray.z_max);
            r.brdf[i] = p;
        }
        r.depth[0] = INVALID_DEPTH;
        let valid = vec![true; 256];
        let up = upsample(&r, &fine_rig, &valid).unwrap();
        for i in 0..256 {
            assert!(up.is_valid(i));
            let q = &up.brdf[i];
            assert!((q.diffuse[0] - 0.4).abs() < 1e-12);
            assert!((q.alpha_y - 0.3).abs() < 1e-12);
            assert!((q.normal_theta - p.normal_theta).abs() < 1e-9);
            // 3.1 and its neighbours agree modulo π
            assert!((q.tangent_angle - 3.1).abs() < 1e-9);
        }
        assert!(upsample(&r, &coarse_rig, &vec![true; 64]).is_err());
    }

    #[test]
    fn save_load_round_trip() {
        let (rig, scene, _, _) = setup(8, SceneKind::Steps, 0);
        let gt = ReconMaps::from_scene(&scene, &rig);
        let dir = tempfile::tempdir().unwrap();
        save_recon(dir.path(), &gt).unwrap();
        let back = load_recon(dir.path()).unwrap();
        assert_eq!(back.valid_mask(), gt.valid_mask());
        for i in 0..gt.len() {
            assert!((back.depth[i] - gt.depth[i]).abs() < 1e-6);
            assert!((back.brdf[i].alpha_x - gt.brdf[i].alpha_x).abs() < 1e-6);
        }
        assert!(dir.path().join("depth.png").exists());
    }
}
