//! Procedural ground-truth scenes and their on-disk form.

use std::f64::consts::PI;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use nalgebra::Vector3;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{domain, io_err, Error, Result};
use crate::io::{read_f32, read_json, write_f32, write_json};
use crate::patterns::MAX_CHANNELS;
use crate::render::{Candidate, GgxParams, ROUGHNESS_MAX, ROUGHNESS_MIN};
use crate::rig::{PixelRay, Rig};

/// Steepest normal the generators produce, matching the prior's normal range.
pub const MAX_NORMAL_THETA: f64 = 80.0 * PI / 180.0;

/// How far inside the valid volume generated surface points must lie.
const VOLUME_MARGIN: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SceneKind {
    Plane,
    Sphere,
    Wavy,
    Steps,
    RandomSvbrdf,
}

impl FromStr for SceneKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "plane" => Self::Plane,
            "sphere" => Self::Sphere,
            "wavy" => Self::Wavy,
            "steps" => Self::Steps,
            "random-svbrdf" => Self::RandomSvbrdf,
            _ => {
                return Err(domain(format!(
                    "unknown scene kind {s:?} (expected plane, sphere, wavy, steps or random-svbrdf)"
                )))
            }
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NoiseModel {
    /// Standard deviation as a fraction of the image's maximum signal.
    pub level: f64,
    pub quantize_bits: Option<u32>,
}

impl Default for NoiseModel {
    fn default() -> Self {
        Self {
            level: 0.01,
            quantize_bits: None,
        }
    }
}

impl NoiseModel {
    pub fn noiseless() -> Self {
        Self {
            level: 0.0,
            quantize_bits: None,
        }
    }
}

/// Ground-truth maps, row-major at the camera resolution. Depth is distance
/// along each pixel ray; pixels with `alpha == 0` are background.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneTruth {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub rig_hash: String,
    pub depth: Vec<f32>,
    pub alpha: Vec<f32>,
    /// `width·height·channels`
    pub diffuse: Vec<f32>,
    /// `width·height·channels`
    pub specular: Vec<f32>,
    pub alpha_x: Vec<f32>,
    pub alpha_y: Vec<f32>,
    pub normal_theta: Vec<f32>,
    pub normal_phi: Vec<f32>,
    pub tangent: Vec<f32>,
}

impl SceneTruth {
    fn empty(width: usize, height: usize, channels: usize, rig_hash: String) -> Self {
        let n = width * height;
        Self {
            width,
            height,
            channels,
            rig_hash,
            depth: vec![-1.0; n],
            alpha: vec![0.0; n],
            diffuse: vec![0.0; n * channels],
            specular: vec![0.0; n * channels],
            alpha_x: vec![0.0; n],
            alpha_y: vec![0.0; n],
            normal_theta: vec![0.0; n],
            normal_phi: vec![0.0; n],
            tangent: vec![0.0; n],
        }
    }

    pub fn len(&self) -> usize {
        self.width * self.height
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn is_valid(&self, idx: usize) -> bool {
        self.alpha[idx] > 0.0
    }

    pub fn valid_count(&self) -> usize {
        self.alpha.iter().filter(|a| **a > 0.0).count()
    }

    pub fn brdf(&self, idx: usize) -> GgxParams {
        let c_n = self.channels;
        let mut p = GgxParams {
            diffuse: [0.0; MAX_CHANNELS],
            specular: [0.0; MAX_CHANNELS],
            alpha_x: self.alpha_x[idx] as f64,
            alpha_y: self.alpha_y[idx] as f64,
            normal_theta: self.normal_theta[idx] as f64,
            normal_phi: self.normal_phi[idx] as f64,
            tangent_angle: self.tangent[idx] as f64,
        };
        for c in 0..c_n {
            p.diffuse[c] = self.diffuse[idx * c_n + c] as f64;
            p.specular[c] = self.specular[idx * c_n + c] as f64;
        }
        p
    }

    fn set(&mut self, idx: usize, depth: f64, b: &GgxParams) {
        let c_n = self.channels;
        self.depth[idx] = depth as f32;
        self.alpha[idx] = 1.0;
        for c in 0..c_n {
            self.diffuse[idx * c_n + c] = b.diffuse[c] as f32;
            self.specular[idx * c_n + c] = b.specular[c] as f32;
        }
        self.alpha_x[idx] = b.alpha_x as f32;
        self.alpha_y[idx] = b.alpha_y as f32;
        self.normal_theta[idx] = b.normal_theta as f32;
        self.normal_phi[idx] = b.normal_phi as f32;
        self.tangent[idx] = b.tangent_angle as f32;
    }

    /// Ground-truth candidate and ray for every pixel; `None` for background
    /// or pixels that miss the valid volume.
    pub fn pixel_candidates(&self, rig: &Rig) -> Vec<Option<(PixelRay, Candidate)>> {
        (0..self.len())
            .map(|i| {
                if !self.is_valid(i) {
                    return None;
                }
                let ray = rig.pixel_ray(i % self.width, i / self.width)?;
                let depth = (self.depth[i] as f64).clamp(ray.z_min, ray.z_max);
                Some((
                    ray,
                    Candidate {
                        depth,
                        brdf: self.brdf(i),
                    },
                ))
            })
            .collect()
    }

    /// Depth map with background pixels as NaN-free `-1`.
    pub fn depth_f64(&self) -> Vec<f64> {
        self.depth.iter().map(|d| *d as f64).collect()
    }

    pub fn valid_mask(&self) -> Vec<bool> {
        self.alpha.iter().map(|a| *a > 0.0).collect()
    }

    fn maps(&self) -> Vec<(&'static str, &Vec<f32>, usize)> {
        let c = self.channels;
        vec![
            ("depth", &self.depth, 1),
            ("alpha", &self.alpha, 1),
            ("diffuse", &self.diffuse, c),
            ("specular", &self.specular, c),
            ("alpha_x", &self.alpha_x, 1),
            ("alpha_y", &self.alpha_y, 1),
            ("normal_theta", &self.normal_theta, 1),
            ("normal_phi", &self.normal_phi, 1),
            ("tangent", &self.tangent, 1),
        ]
    }

    fn map_mut(&mut self, name: &str) -> Option<&mut Vec<f32>> {
        Some(match name {
            "depth" => &mut self.depth,
            "alpha" => &mut self.alpha,
            "diffuse" => &mut self.diffuse,
            "specular" => &mut self.specular,
            "alpha_x" => &mut self.alpha_x,
            "alpha_y" => &mut self.alpha_y,
            "normal_theta" => &mut self.normal_theta,
            "normal_phi" => &mut self.normal_phi,
            "tangent" => &mut self.tangent,
            _ => return None,
        })
    }
}

/// Sum of a few random plane waves over normalized image coordinates,
/// mapped into `[lo, hi]`.
fn smooth_field<R: Rng>(rng: &mut R, w: usize, h: usize, lo: f64, hi: f64) -> Vec<f64> {
    let waves: Vec<(f64, f64, f64)> = (0..4)
        .map(|_| {
            let dir = rng.random_range(0.0..2.0 * PI);
            let freq = rng.random_range(0.5..2.0);
            (freq * dir.cos(), freq * dir.sin(), rng.random_range(0.0..2.0 * PI))
        })
        .collect();
    (0..w * h)
        .map(|i| {
            let u = (i % w) as f64 / w as f64;
            let v = (i / w) as f64 / h as f64;
            let s: f64 = waves
                .iter()
                .map(|(kx, ky, ph)| (2.0 * PI * (kx * u + ky * v) + ph).sin())
                .sum::<f64>()
                / waves.len() as f64;
            lo + (hi - lo) * (0.5 + 0.5 * s)
        })
        .collect()
}

struct Materials {
    diffuse: Vec<Vec<f64>>,
    specular: Vec<Vec<f64>>,
    alpha_x: Vec<f64>,
    alpha_y: Vec<f64>,
    tangent: Vec<f64>,
}

fn materials<R: Rng>(rng: &mut R, w: usize, h: usize, channels: usize, wild: bool) -> Materials {
    let (dl, dh, sl, sh, rl, rh) = if wild {
        (0.05, 0.95, 0.0, 0.9, ROUGHNESS_MIN * 5.0, ROUGHNESS_MAX)
    } else {
        (0.2, 0.8, 0.02, 0.2, 0.1, 0.4)
    };
    let diffuse = (0..channels).map(|_| smooth_field(rng, w, h, dl, dh)).collect();
    let specular = (0..channels).map(|_| smooth_field(rng, w, h, sl, sh)).collect();
    let alpha_x = smooth_field(rng, w, h, rl, rh);
    let alpha_y = smooth_field(rng, w, h, rl, rh);
    let tangent = smooth_field(rng, w, h, 0.0, PI - 1e-3);
    Materials {
        diffuse,
        specular,
        alpha_x,
        alpha_y,
        tangent,
    }
}

/// Camera-frame heightfield `z(x_n, y_n)` over normalized image coordinates,
/// with its partial derivatives.
type Heightfield = dyn Fn(f64, f64) -> (f64, f64, f64);

fn heightfield_hit(rig: &Rig, ray: &PixelRay, surf: &Heightfield) -> (f64, Vector3<f64>) {
    let iso = rig.camera_pose();
    let d = iso.inverse_transform_vector(&ray.direction);
    let (xn, yn) = (d.x / d.z, d.y / d.z);
    let (z, zx, zy) = surf(xn, yn);
    let depth = z / d.z;
    // P(x_n, y_n) = z·(x_n, y_n, 1)
    let px = Vector3::new(xn, yn, 1.0) * zx + Vector3::new(z, 0.0, 0.0);
    let py = Vector3::new(xn, yn, 1.0) * zy + Vector3::new(0.0, z, 0.0);
    let mut n = iso * px.cross(&py).normalize();
    if n.dot(&ray.direction) > 0.0 {
        n = -n;
    }
    (depth, n)
}

fn sphere_hit(ray: &PixelRay, center: &Vector3<f64>, r: f64) -> Option<(f64, Vector3<f64>)> {
    let oc = ray.origin - center;
    let b = oc.dot(&ray.direction);
    let c = oc.norm_squared() - r * r;
    let disc = b * b - c;
    if disc < 0.0 {
        return None;
    }
    let t = -b - disc.sqrt();
    (t > 0.0).then(|| (t, (ray.point(t) - center) / r))
}

/// World-space normal as angles in the ray's view frame, tilted back to at
/// most [`MAX_NORMAL_THETA`].
fn normal_angles(ray: &PixelRay, n: &Vector3<f64>) -> (f64, f64) {
    let [vx, vy, vz] = ray.view_frame();
    let local = Vector3::new(n.dot(&vx), n.dot(&vy), n.dot(&vz));
    let theta = local.z.clamp(-1.0, 1.0).acos().min(MAX_NORMAL_THETA);
    let phi = local.y.atan2(local.x).rem_euclid(2.0 * PI);
    (theta, phi)
}

/// Generates a scene of the given kind at the rig's camera resolution.
pub fn gen_scene<R: Rng>(kind: SceneKind, rig: &Rig, channels: usize, rng: &mut R) -> Result<SceneTruth> {
    if channels == 0 || channels > MAX_CHANNELS {
        return Err(domain(format!("channel count {channels} not in 1..={MAX_CHANNELS}")));
    }
    let (w, h) = rig.resolution();
    let mut scene = SceneTruth::empty(w, h, channels, rig.hash());
    let mats = materials(rng, w, h, channels, kind == SceneKind::RandomSvbrdf);
    let center = Vector3::from(rig.geom.volume_center);
    let edge = rig.geom.volume_edge;
    let d_center = rig.camera_pose().inverse_transform_point(&center.into()).z;

    let wave_amp = 0.12 * edge;
    let (kx, ky) = (rng.random_range(1.5..2.5), rng.random_range(1.5..2.5));
    let surface: Box<Heightfield> = match kind {
        SceneKind::Plane | SceneKind::RandomSvbrdf | SceneKind::Sphere => Box::new(move |_, _| (d_center, 0.0, 0.0)),
        SceneKind::Wavy => Box::new(move |x, y| {
            let (a, b) = (2.0 * PI * kx * x, 2.0 * PI * ky * y);
            (
                d_center + wave_amp * a.sin() * b.sin(),
                wave_amp * 2.0 * PI * kx * a.cos() * b.sin(),
                wave_amp * 2.0 * PI * ky * a.sin() * b.cos(),
            )
        }),
        SceneKind::Steps => Box::new(move |x, _| {
            let step = ((x * 4.0).floor().clamp(-2.0, 1.0) + 0.5) * 0.15 * edge;
            (d_center + step, 0.0, 0.0)
        }),
    };

    let (lo, hi) = rig.volume_bounds();
    for row in 0..h {
        for col in 0..w {
            let idx = row * w + col;
            let Some(ray) = rig.pixel_ray(col, row) else { continue };
            let hit = if kind == SceneKind::Sphere {
                sphere_hit(&ray, &center, 0.3 * edge)
            } else {
                Some(heightfield_hit(rig, &ray, surface.as_ref()))
            };
            let Some((depth, n)) = hit else { continue };
            let p = ray.point(depth);
            let inside = (0..3).all(|i| p[i] > lo[i] + VOLUME_MARGIN && p[i] < hi[i] - VOLUME_MARGIN);
            if !inside || depth <= ray.z_min || depth >= ray.z_max {
                continue;
            }
            let (theta, phi) = normal_angles(&ray, &n);
            let mut b = GgxParams {
                alpha_x: mats.alpha_x[idx],
                alpha_y: mats.alpha_y[idx],
                normal_theta: theta,
                normal_phi: phi,
                tangent_angle: mats.tangent[idx],
                ..GgxParams::default()
            };
            for c in 0..channels {
                b.diffuse[c] = mats.diffuse[c][idx];
                b.specular[c] = mats.specular[c][idx];
            }
            scene.set(idx, depth, &b);
        }
    }
    Ok(scene)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct MapEntry {
    name: String,
    file: String,
    shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    version: u32,
    resolution: [usize; 2],
    channels: usize,
    maps: Vec<MapEntry>,
    rig_hash: String,
}

const MANIFEST_VERSION: u32 = 1;

/// Writes `manifest.json` plus one raw float32 file per map into `dir`.
pub fn save_scene(dir: &Path, scene: &SceneTruth) -> Result<()> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let mut maps = Vec::new();
    for (name, data, c) in scene.maps() {
        let file = format!("{name}.f32");
        write_f32(&dir.join(&file), data)?;
        let mut shape = vec![scene.height, scene.width];
        if c > 1 {
            shape.push(c);
        }
        maps.push(MapEntry {
            name: name.into(),
            file,
            shape,
        });
    }
    let manifest = Manifest {
        version: MANIFEST_VERSION,
        resolution: [scene.width, scene.height],
        channels: scene.channels,
        maps,
        rig_hash: scene.rig_hash.clone(),
    };
    write_json(&dir.join("manifest.json"), &manifest)
}

pub fn load_scene(dir: &Path) -> Result<SceneTruth> {
    let mpath = dir.join("manifest.json");
    let m: Manifest = read_json(&mpath)?;
    let parse = |msg: String| Error::Parse {
        path: mpath.clone(),
        offset: 0,
        msg,
    };
    if m.version != MANIFEST_VERSION {
        return Err(parse(format!("unsupported manifest version {}", m.version)));
    }
    if m.channels == 0 || m.channels > MAX_CHANNELS {
        return Err(parse(format!("channel count {} not in 1..={MAX_CHANNELS}", m.channels)));
    }
    let [w, h] = m.resolution;
    let mut scene = SceneTruth::empty(w, h, m.channels, m.rig_hash.clone());
    let expected: Vec<(&str, usize)> = scene.maps().iter().map(|(n, _, c)| (*n, *c)).collect();
    for (name, c) in expected {
        let entry = m
            .maps
            .iter()
            .find(|e| e.name == name)
            .ok_or_else(|| parse(format!("map {name:?} missing")))?;
        let len: usize = entry.shape.iter().product();
        if len != w * h * c || entry.shape.first() != Some(&h) || entry.shape.get(1) != Some(&w) {
            return Err(parse(format!(
                "map {name:?} has shape {:?}, expected {h}x{w}x{c}",
                entry.shape
            )));
        }
        if entry.file.contains('/') || entry.file.contains('\\') || entry.file.starts_with("..") {
            return Err(parse(format!("map file {:?} must be a plain file name", entry.file)));
        }
        let data = read_f32(&dir.join(&entry.file), len)?;
        *scene.map_mut(name).expect("known map") = data;
    }
    Ok(scene)
}
