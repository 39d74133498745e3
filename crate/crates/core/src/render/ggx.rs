//! Anisotropic GGX microfacet BRDF with a Lambertian diffuse lobe.
//!
//! `f = ρd/π + ρs · D·G·F / (4 (n·wi)(n·wo))` with the Walter et al. GGX
//! distribution `D`, the height-correlated Smith term `G`, and Schlick
//! Fresnel using `ρs` as F0.

use std::f64::consts::PI;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::math::{Real, V3};
use crate::patterns::MAX_CHANNELS;

pub const ROUGHNESS_MIN: f64 = 0.006;
pub const ROUGHNESS_MAX: f64 = 0.5;

/// Per-pixel GGX parameters. The normal is stored as polar/azimuth angles in
/// the pixel's view frame (+z toward the camera, see
/// [`crate::rig::view_frame`]); the tangent angle is measured in the tangent
/// plane from the projection of the view frame's x axis.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GgxParams {
    pub diffuse: [f64; MAX_CHANNELS],
    pub specular: [f64; MAX_CHANNELS],
    pub alpha_x: f64,
    pub alpha_y: f64,
    pub normal_theta: f64,
    pub normal_phi: f64,
    pub tangent_angle: f64,
}

impl Default for GgxParams {
    fn default() -> Self {
        Self {
            diffuse: [0.5; MAX_CHANNELS],
            specular: [0.0; MAX_CHANNELS],
            alpha_x: 0.2,
            alpha_y: 0.2,
            normal_theta: 0.0,
            normal_phi: 0.0,
            tangent_angle: 0.0,
        }
    }
}

impl GgxParams {
    pub fn normal_local(&self) -> Vector3<f64> {
        let (st, ct) = self.normal_theta.sin_cos();
        let (sp, cp) = self.normal_phi.sin_cos();
        Vector3::new(st * cp, st * sp, ct)
    }

    /// Sets the normal from a view-frame unit vector.
    pub fn set_normal_local(&mut self, n: &Vector3<f64>) {
        let n = n.normalize();
        self.normal_theta = n.z.clamp(-1.0, 1.0).acos();
        self.normal_phi = n.y.atan2(n.x).rem_euclid(2.0 * PI);
    }

    pub fn lobes(&self) -> Lobes<f64> {
        Lobes {
            diffuse: self.diffuse,
            specular: self.specular,
            alpha_x: self.alpha_x,
            alpha_y: self.alpha_y,
        }
    }

    /// World-space shading frame on a ray with the given view frame.
    pub fn frame(&self, view: &[Vector3<f64>; 3]) -> Frame<f64> {
        Frame::build(view, V3::from_f64(&self.normal_local()), self.tangent_angle)
    }

    /// Checks the parameter boxes for the first `channels` channels.
    pub fn in_bounds(&self, channels: usize) -> bool {
        let unit = |v: f64| (0.0..=1.0).contains(&v);
        let rough = |v: f64| (ROUGHNESS_MIN..=ROUGHNESS_MAX).contains(&v);
        self.diffuse[..channels].iter().all(|&v| unit(v))
            && self.specular[..channels].iter().all(|&v| unit(v))
            && rough(self.alpha_x)
            && rough(self.alpha_y)
            && (0.0..PI / 2.0).contains(&self.normal_theta)
            && (0.0..PI).contains(&self.tangent_angle)
    }
}

/// Reflectance lobes over a generic scalar (plain or dual).
#[derive(Clone, Copy, Debug)]
pub struct Lobes<T> {
    pub diffuse: [T; MAX_CHANNELS],
    pub specular: [T; MAX_CHANNELS],
    pub alpha_x: T,
    pub alpha_y: T,
}

/// Orthonormal world-space shading frame.
#[derive(Clone, Copy, Debug)]
pub struct Frame<T> {
    pub t: V3<T>,
    pub b: V3<T>,
    pub n: V3<T>,
}

impl<T: Real> Frame<T> {
    /// `normal_local` is a unit vector in the view frame `view` = [x, y, z].
    pub fn build(view: &[Vector3<f64>; 3], normal_local: V3<T>, tangent_angle: T) -> Self {
        let [vx, vy, vz] = view.map(|v| V3::<T>::from_f64(&v));
        let n = vx
            .scale(normal_local.x)
            .add(&vy.scale(normal_local.y))
            .add(&vz.scale(normal_local.z));
        let proj = |a: &V3<T>| a.sub(&n.scale(a.dot(&n)));
        let mut t0 = proj(&vx);
        if t0.norm_sq().val() < 1e-12 {
            t0 = proj(&vy);
        }
        let t0 = t0.normalize();
        let b0 = n.cross(&t0);
        let t = t0.scale(tangent_angle.cos()).add(&b0.scale(tangent_angle.sin()));
        let b = n.cross(&t);
        Self { t, b, n }
    }

    pub fn z_up() -> Self {
        Self {
            t: V3::new(T::cst(1.0), T::cst(0.0), T::cst(0.0)),
            b: V3::new(T::cst(0.0), T::cst(1.0), T::cst(0.0)),
            n: V3::new(T::cst(0.0), T::cst(0.0), T::cst(1.0)),
        }
    }
}

/// Anisotropic GGX normal distribution for a half vector in the local frame.
pub fn ggx_d<T: Real>(hx: T, hy: T, hz: T, ax: T, ay: T) -> T {
    let u = hx / ax;
    let v = hy / ay;
    let q = u * u + v * v + hz * hz;
    T::cst(1.0) / (ax * ay * q * q * PI)
}

fn smith_lambda<T: Real>(wx: T, wy: T, wz: T, ax: T, ay: T) -> T {
    let a = (ax * ax * wx * wx + ay * ay * wy * wy) / (wz * wz);
    ((a + 1.0).sqrt() - 1.0) * 0.5
}

/// BRDF value for unit world directions `wi` (toward the light) and `wo`
/// (toward the viewer). Zero when either lies below the surface.
pub fn eval_ggx<T: Real>(
    lobes: &Lobes<T>,
    frame: &Frame<T>,
    wi: &V3<T>,
    wo: &V3<T>,
    channels: usize,
) -> [T; MAX_CHANNELS] {
    let zero = T::cst(0.0);
    let mut out = [zero; MAX_CHANNELS];
    let cos_i = frame.n.dot(wi);
    let cos_o = frame.n.dot(wo);
    if cos_i.val() <= 0.0 || cos_o.val() <= 0.0 {
        return out;
    }
    let h = wi.add(wo).normalize();
    let (ax, ay) = (lobes.alpha_x, lobes.alpha_y);
    let d = ggx_d(frame.t.dot(&h), frame.b.dot(&h), frame.n.dot(&h), ax, ay);
    let li = smith_lambda(frame.t.dot(wi), frame.b.dot(wi), cos_i, ax, ay);
    let lo = smith_lambda(frame.t.dot(wo), frame.b.dot(wo), cos_o, ax, ay);
    let g = T::cst(1.0) / (li + lo + 1.0);
    let spec_common = d * g / (cos_i * cos_o * 4.0);
    let schlick = (-(wi.dot(&h).max0()) + 1.0).max0().powf(5.0);
    for c in 0..channels {
        let f0 = lobes.specular[c];
        let fresnel = f0 + (-f0 + 1.0) * schlick;
        out[c] = lobes.diffuse[c] / PI + f0 * spec_common * fresnel;
    }
    out
}
