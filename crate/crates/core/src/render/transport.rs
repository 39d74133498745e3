//! Per-candidate light transport.
//!
//! For a fixed surface point and BRDF, a measurement is bilinear in the light
//! and mask patterns:
//!
//! `I_c = Σ_l w_{l,c} · L(l,c) · Σ_p β_{l,p} · M(p)`
//!
//! where `w_{l,c} = f_c · F · Ψ` is the LED's reflected throughput and
//! `β_{l,p}` collects the 5x5 kernel weights times the bilinear mask taps of
//! every kernel sample ray. A [`Transport`] caches `w` and the sparse `β`
//! patch for each LED so that evaluating, or differentiating with respect to,
//! many patterns costs one dot product per LED.

use nalgebra::Vector3;

use crate::math::{Dual, Real, V3};
use crate::patterns::{PatternGrad, PatternPair, MAX_CHANNELS};
use crate::render::ggx::{eval_ggx, Frame, Lobes};
use crate::rig::{PixelRay, Rig};

const PATCH_LANES: usize = 4;

#[derive(Clone, Copy, Debug)]
struct Patch {
    x0: u32,
    y0: u32,
    pw: u32,
    ph: u32,
    offset: u32,
}

impl Patch {
    #[inline]
    fn dot(&self, weights: &[f64], mask: &[f64], mask_w: usize) -> f64 {
        let (pw, ph) = (self.pw as usize, self.ph as usize);
        let w = &weights[self.offset as usize..self.offset as usize + pw * ph];
        if pw == PATCH_LANES {
            let mut acc = [0.0; PATCH_LANES];
            for (r, wr) in w.chunks_exact(PATCH_LANES).enumerate() {
                let row = (self.y0 as usize + r) * mask_w + self.x0 as usize;
                let m: &[f64; PATCH_LANES] = mask[row..row + PATCH_LANES].try_into().expect("lane width");
                for c in 0..PATCH_LANES {
                    acc[c] += wr[c] * m[c];
                }
            }
            return acc.iter().sum();
        }
        let mut acc = 0.0;
        for r in 0..ph {
            let row = (self.y0 as usize + r) * mask_w + self.x0 as usize;
            let m = &mask[row..row + pw];
            let wr = &w[r * pw..(r + 1) * pw];
            for c in 0..pw {
                acc += wr[c] * m[c];
            }
        }
        acc
    }

    #[inline]
    fn scatter(&self, weights: &[f64], scale: f64, out: &mut [f64], mask_w: usize) {
        let (pw, ph) = (self.pw as usize, self.ph as usize);
        let w = &weights[self.offset as usize..self.offset as usize + pw * ph];
        for r in 0..ph {
            let row = (self.y0 as usize + r) * mask_w + self.x0 as usize;
            let o = &mut out[row..row + pw];
            let wr = &w[r * pw..(r + 1) * pw];
            for c in 0..pw {
                o[c] += scale * wr[c];
            }
        }
    }

    fn entries<'a>(&'a self, weights: &'a [f64], mask_w: usize) -> impl Iterator<Item = (usize, f64)> + 'a {
        let (pw, ph) = (self.pw as usize, self.ph as usize);
        (0..ph).flat_map(move |r| {
            (0..pw).map(move |c| {
                let idx = (self.y0 as usize + r) * mask_w + self.x0 as usize + c;
                (idx, weights[self.offset as usize + r * pw + c])
            })
        })
    }
}

#[derive(Clone, Copy, Debug)]
struct Tap {
    u: f64,
    v: f64,
    du: f64,
    dv: f64,
    k: f64,
}

/// Bilinear taps (pixel centres at `i + 0.5`, clamped to the edge) with the
/// derivative of each weight along the tap's `(du, dv)` direction.
#[inline]
fn bilinear(u: f64, v: f64, du: f64, dv: f64, w: usize, h: usize) -> [(usize, usize, f64, f64); 4] {
    // u, v >= 0, so truncation of x + 1 is floor(x) + 1
    let fu = u - 0.5;
    let fv = v - 0.5;
    let iu = (fu + 1.0) as i64 - 1;
    let iv = (fv + 1.0) as i64 - 1;
    let a = fu - iu as f64;
    let b = fv - iv as f64;
    let cx = |i: i64| (i.max(0) as usize).min(w - 1);
    let cy = |i: i64| (i.max(0) as usize).min(h - 1);
    let (x0, x1, y0, y1) = (cx(iu), cx(iu + 1), cy(iv), cy(iv + 1));
    [
        (x0, y0, (1.0 - a) * (1.0 - b), -du * (1.0 - b) - (1.0 - a) * dv),
        (x1, y0, a * (1.0 - b), du * (1.0 - b) - a * dv),
        (x0, y1, (1.0 - a) * b, -du * b + (1.0 - a) * dv),
        (x1, y1, a * b, du * b + a * dv),
    ]
}

/// Builds the patch for one LED's kernel taps, appending weights (and
/// depth-derivative weights when `dweights` is given).
fn build_patch(
    taps: &[Tap],
    mask_w: usize,
    mask_h: usize,
    weights: &mut Vec<f64>,
    dweights: Option<&mut Vec<f64>>,
) -> Option<Patch> {
    if taps.is_empty() {
        return None;
    }
    // tap indices are monotone in (u, v), so the extreme taps bound the patch
    let (mut umin, mut umax, mut vmin, mut vmax) = (f64::MAX, f64::MIN, f64::MAX, f64::MIN);
    for t in taps {
        umin = umin.min(t.u);
        umax = umax.max(t.u);
        vmin = vmin.min(t.v);
        vmax = vmax.max(t.v);
    }
    let first = bilinear(umin, vmin, 0.0, 0.0, mask_w, mask_h)[0];
    let lo = [first.0, first.1];
    let corner = bilinear(umax, vmax, 0.0, 0.0, mask_w, mask_h)[3];
    let hi = [corner.0, corner.1];
    let mut pw = hi[0] - lo[0] + 1;
    // narrow patches are padded with zero weights to the fixed-width fast path
    if pw < PATCH_LANES && lo[0] + PATCH_LANES <= mask_w {
        pw = PATCH_LANES;
    }
    let ph = hi[1] - lo[1] + 1;
    let offset = weights.len();
    weights.resize(offset + pw * ph, 0.0);
    match dweights {
        Some(d) => {
            d.resize(offset + pw * ph, 0.0);
            for t in taps {
                for (x, y, wt, dwt) in bilinear(t.u, t.v, t.du, t.dv, mask_w, mask_h) {
                    let i = offset + (y - lo[1]) * pw + (x - lo[0]);
                    weights[i] += t.k * wt;
                    d[i] += t.k * dwt;
                }
            }
        }
        None => {
            for t in taps {
                for (x, y, wt, _) in bilinear(t.u, t.v, 0.0, 0.0, mask_w, mask_h) {
                    weights[offset + (y - lo[1]) * pw + (x - lo[0])] += t.k * wt;
                }
            }
        }
    }
    Some(Patch {
        x0: lo[0] as u32,
        y0: lo[1] as u32,
        pw: pw as u32,
        ph: ph as u32,
        offset: offset as u32,
    })
}

/// Mask taps of the 25 kernel samples of `led` seen from mask-local point
/// `p`, with the derivative of `(u, v)` along mask-local direction `dp`.
fn kernel_taps(rig: &Rig, led: usize, p: &Vector3<f64>, dp: &Vector3<f64>, out: &mut Vec<Tap>) {
    out.clear();
    let g = &rig.geom;
    let su = g.mask_res_w as f64 / g.mask_phys_w;
    let sv = g.mask_res_h as f64 / g.mask_phys_h;
    for (a, &k) in rig.led_samples_mask(led).iter().zip(rig.led.kernel.iter()) {
        if k == 0.0 {
            continue;
        }
        let den = p.z - a.z;
        if den.abs() < 1e-15 {
            continue;
        }
        let t = -a.z / den;
        if !(0.0..=1.0).contains(&t) {
            continue;
        }
        let x = a.x + t * (p.x - a.x);
        let y = a.y + t * (p.y - a.y);
        let Some([u, v]) = rig.mask_local_to_pixel(x, y) else {
            continue;
        };
        let dt = a.z * dp.z / (den * den);
        let dx = dt * (p.x - a.x) + t * dp.x;
        let dy = dt * (p.y - a.y) + t * dp.y;
        out.push(Tap {
            u,
            v,
            du: dx * su,
            dv: dy * sv,
            k,
        });
    }
}

/// Reflected throughput `f · F · Ψ` of one LED, or `None` when it cannot
/// reach the surface point.
pub fn led_weight<T: Real>(
    rig: &Rig,
    led: usize,
    x_k: &V3<T>,
    wo: &V3<T>,
    lobes: &Lobes<T>,
    frame: &Frame<T>,
    channels: usize,
) -> Option<[T; MAX_CHANNELS]> {
    let x_l = V3::<T>::from_f64(&rig.led_centers()[led]);
    let n_l = V3::<T>::from_f64(&rig.led_normal());
    let d = x_l.sub(x_k);
    let dist2 = d.norm_sq();
    let wi = d.scale(T::cst(1.0) / dist2.sqrt());
    let cos_k = frame.n.dot(&wi);
    let cos_l = -n_l.dot(&wi);
    if cos_k.val() <= 0.0 || cos_l.val() <= 0.0 {
        return None;
    }
    let psi = if rig.led.angular_exponent == 0.0 {
        T::cst(1.0)
    } else {
        cos_l.powf(rig.led.angular_exponent)
    };
    let geom = cos_k * cos_l * psi / dist2;
    let f = eval_ggx(lobes, frame, &wi, wo, channels);
    let mut w = [T::cst(0.0); MAX_CHANNELS];
    let mut any = false;
    for c in 0..channels {
        w[c] = f[c] * geom;
        any |= w[c].val() != 0.0;
    }
    any.then_some(w)
}

#[derive(Clone, Copy, Debug)]
struct Term {
    led: u32,
    weight: [f64; MAX_CHANNELS],
    patch: Patch,
}

/// Cached transport for one candidate on one pixel ray.
#[derive(Clone, Debug)]
pub struct Transport {
    channels: usize,
    mask_w: usize,
    terms: Vec<Term>,
    weights: Vec<f64>,
}

impl Transport {
    pub fn build(rig: &Rig, ray: &PixelRay, depth: f64, lobes: &Lobes<f64>, frame: &Frame<f64>, channels: usize) -> Self {
        let x_k = ray.point(depth);
        let p = rig.to_mask_local(&x_k);
        let dp = rig.to_mask_local_dir(&ray.direction);
        let xk = V3::from_f64(&x_k);
        let wo = V3::from_f64(&(-ray.direction));
        let mut terms = Vec::new();
        let mut weights = Vec::new();
        let mut taps = Vec::with_capacity(25);
        for led in 0..rig.led_count() {
            let Some(w) = led_weight(rig, led, &xk, &wo, lobes, frame, channels) else {
                continue;
            };
            kernel_taps(rig, led, &p, &dp, &mut taps);
            if let Some(patch) = build_patch(&taps, rig.geom.mask_res_w, rig.geom.mask_res_h, &mut weights, None) {
                terms.push(Term {
                    led: led as u32,
                    weight: w,
                    patch,
                });
            }
        }
        Self {
            channels,
            mask_w: rig.geom.mask_res_w,
            terms,
            weights,
        }
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    /// Number of LEDs that reach the surface point through the mask.
    pub fn active_leds(&self) -> usize {
        self.terms.len()
    }

    /// Simulated measurement under one pattern pair.
    pub fn eval(&self, pair: &PatternPair) -> [f64; MAX_CHANNELS] {
        let mut out = [0.0; MAX_CHANNELS];
        let light = &pair.light.values;
        let mask = &pair.mask.values;
        let c_n = self.channels;
        for t in &self.terms {
            let l = t.led as usize * c_n;
            if (0..c_n).all(|c| light[l + c] == 0.0) {
                continue;
            }
            let tr = t.patch.dot(&self.weights, mask, self.mask_w);
            for c in 0..c_n {
                out[c] += t.weight[c] * light[l + c] * tr;
            }
        }
        out
    }

    /// Appends `C` measurements per pattern, in pattern order.
    pub fn eval_all(&self, patterns: &[PatternPair], out: &mut Vec<f64>) {
        for p in patterns {
            let m = self.eval(p);
            out.extend_from_slice(&m[..self.channels]);
        }
    }

    /// Per-LED mask responses `Σ_p β_{l,p} M(p)`, aligned with the internal term order.
    pub(crate) fn mask_responses(&self, mask: &[f64], out: &mut Vec<f64>) {
        out.clear();
        out.extend(self.terms.iter().map(|t| t.patch.dot(&self.weights, mask, self.mask_w)));
    }

    /// Measurement from precomputed mask responses of the same pattern.
    pub(crate) fn eval_responses(&self, light: &[f64], responses: &[f64]) -> [f64; MAX_CHANNELS] {
        let mut out = [0.0; MAX_CHANNELS];
        let c_n = self.channels;
        for (t, &tr) in self.terms.iter().zip(responses) {
            let l = t.led as usize * c_n;
            for c in 0..c_n {
                out[c] += t.weight[c] * light[l + c] * tr;
            }
        }
        out
    }

    /// Adds `Σ_c upstream[c] · ∂I_c/∂(pattern)` into `grad`, given the
    /// mask responses from [`Self::mask_responses`] for the same pattern.
    pub(crate) fn accumulate_grad(
        &self,
        pair: &PatternPair,
        responses: &[f64],
        upstream: &[f64; MAX_CHANNELS],
        grad: &mut PatternGrad,
    ) {
        let c_n = self.channels;
        let light = &pair.light.values;
        for (t, &tr) in self.terms.iter().zip(responses) {
            let l = t.led as usize * c_n;
            let mut coef = 0.0;
            for c in 0..c_n {
                let gw = upstream[c] * t.weight[c];
                grad.light[l + c] += gw * tr;
                coef += gw * light[l + c];
            }
            if coef != 0.0 {
                t.patch.scatter(&self.weights, coef, &mut grad.mask, self.mask_w);
            }
        }
    }

    /// Sparse `(mask index, β)` entries of every LED, for inspection and tests.
    pub fn mask_entries(&self) -> Vec<(usize, usize, f64)> {
        self.terms
            .iter()
            .flat_map(|t| {
                t.patch
                    .entries(&self.weights, self.mask_w)
                    .map(move |(i, w)| (t.led as usize, i, w))
            })
            .collect()
    }
}

#[derive(Clone, Copy, Debug)]
struct DiffTerm<const N: usize> {
    led: u32,
    weight: [Dual<N>; MAX_CHANNELS],
    patch: Patch,
}

/// Transport whose measurements carry derivatives with respect to `N` free
/// variables, given the depth and BRDF as dual numbers over them.
#[derive(Clone, Debug)]
pub struct DiffTransport<const N: usize> {
    channels: usize,
    mask_w: usize,
    depth_grad: [f64; N],
    terms: Vec<DiffTerm<N>>,
    weights: Vec<f64>,
    dweights: Vec<f64>,
}

impl<const N: usize> DiffTransport<N> {
    pub fn build(
        rig: &Rig,
        ray: &PixelRay,
        depth: Dual<N>,
        lobes: &Lobes<Dual<N>>,
        frame: &Frame<Dual<N>>,
        channels: usize,
    ) -> Self {
        let x_k = ray.point(depth.v);
        let p = rig.to_mask_local(&x_k);
        let dp = rig.to_mask_local_dir(&ray.direction);
        let o = V3::<Dual<N>>::from_f64(&ray.origin);
        let xk = o.add(&V3::from_f64(&ray.direction).scale(depth));
        let wo = V3::from_f64(&(-ray.direction));
        let mut terms = Vec::new();
        let mut weights = Vec::new();
        let mut dweights = Vec::new();
        let mut taps = Vec::with_capacity(25);
        for led in 0..rig.led_count() {
            let Some(w) = led_weight(rig, led, &xk, &wo, lobes, frame, channels) else {
                continue;
            };
            kernel_taps(rig, led, &p, &dp, &mut taps);
            let patch = build_patch(
                &taps,
                rig.geom.mask_res_w,
                rig.geom.mask_res_h,
                &mut weights,
                Some(&mut dweights),
            );
            if let Some(patch) = patch {
                terms.push(DiffTerm {
                    led: led as u32,
                    weight: w,
                    patch,
                });
            }
        }
        Self {
            channels,
            mask_w: rig.geom.mask_res_w,
            depth_grad: depth.d,
            terms,
            weights,
            dweights,
        }
    }

    pub fn eval(&self, pair: &PatternPair) -> [Dual<N>; MAX_CHANNELS] {
        let mut out = [Dual::constant(0.0); MAX_CHANNELS];
        let light = &pair.light.values;
        let mask = &pair.mask.values;
        let c_n = self.channels;
        for t in &self.terms {
            let l = t.led as usize * c_n;
            if (0..c_n).all(|c| light[l + c] == 0.0) {
                continue;
            }
            let tr = t.patch.dot(&self.weights, mask, self.mask_w);
            let dtr = t.patch.dot(&self.dweights, mask, self.mask_w);
            for c in 0..c_n {
                let lw = t.weight[c] * light[l + c];
                let mut term = lw * tr;
                let s = lw.v * dtr;
                for i in 0..N {
                    term.d[i] += s * self.depth_grad[i];
                }
                out[c] += term;
            }
        }
        out
    }
}
