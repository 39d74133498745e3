//! Per-pixel histogram models over depth and each GGX parameter, with
//! Monte-Carlo sampling and score updates.

use std::f64::consts::PI;
use std::io::Write;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{domain, Result};
use crate::patterns::{PatternPair, MAX_CHANNELS};
use crate::render::{Candidate, GgxParams, ROUGHNESS_MAX, ROUGHNESS_MIN};
use crate::rig::PixelRay;

pub const DEFAULT_N_BIN: usize = 100;
pub const DEFAULT_N_SAMPLE: usize = 600;
/// Smallest unnormalized probability of any bin.
pub const PMF_FLOOR: f64 = 1e-6;
/// Added to the mean absolute error before inverting it.
pub const L1_EPS: f64 = 1e-4;
/// Number of sub-bins a best bin is split into for the MAP estimate.
pub const MAP_SUBDIVISIONS: usize = 5;

/// How a histogram's scores map to probabilities.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreKind {
    /// ZNCC in [-1, 1], shifted to [0, 1].
    Zncc,
    /// Inverse mean absolute error, used as is.
    InvL1,
}

impl ScoreKind {
    #[inline]
    fn shift(self, s: f64) -> f64 {
        match self {
            ScoreKind::Zncc => (s + 1.0) / 2.0,
            ScoreKind::InvL1 => s,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub lo: f64,
    pub hi: f64,
    pub kind: ScoreKind,
    pub scores: Vec<f64>,
    pub pmf: Vec<f64>,
}

impl Histogram {
    /// Equal scores (zero) over `n_bin` bins.
    pub fn uniform(lo: f64, hi: f64, n_bin: usize, kind: ScoreKind) -> Result<Self> {
        if !(lo < hi) || !lo.is_finite() || !hi.is_finite() {
            return Err(domain(format!("histogram range [{lo}, {hi}] is empty")));
        }
        if n_bin == 0 {
            return Err(domain("histogram needs at least one bin"));
        }
        let mut h = Self {
            lo,
            hi,
            kind,
            scores: vec![0.0; n_bin],
            pmf: vec![0.0; n_bin],
        };
        h.normalize();
        Ok(h)
    }

    pub fn n_bin(&self) -> usize {
        self.scores.len()
    }

    pub fn bin_width(&self) -> f64 {
        (self.hi - self.lo) / self.n_bin() as f64
    }

    pub fn bin_range(&self, i: usize) -> (f64, f64) {
        let w = self.bin_width();
        (self.lo + i as f64 * w, self.lo + (i + 1) as f64 * w)
    }

    pub fn bin_center(&self, i: usize) -> f64 {
        self.lo + (i as f64 + 0.5) * self.bin_width()
    }

    /// Bin containing `x`; values outside the range fall into the end bins.
    pub fn bin_of(&self, x: f64) -> usize {
        let t = ((x - self.lo) / self.bin_width()).floor();
        if t <= 0.0 {
            0
        } else {
            (t as usize).min(self.n_bin() - 1)
        }
    }

    /// Recomputes the pmf from the scores.
    pub fn normalize(&mut self) {
        let kind = self.kind;
        for (p, s) in self.pmf.iter_mut().zip(&self.scores) {
            let v = kind.shift(*s);
            *p = if v > PMF_FLOOR { v } else { PMF_FLOOR };
        }
        let total: f64 = self.pmf.iter().sum();
        self.pmf.iter_mut().for_each(|p| *p /= total);
    }

    /// Categorical draw of a bin, then a uniform value inside it.
    pub fn sample<R: Rng>(&self, rng: &mut R) -> f64 {
        let bin = self.sample_bin(rng);
        let (a, b) = self.bin_range(bin);
        a + (b - a) * rng.random::<f64>()
    }

    fn sample_bin<R: Rng>(&self, rng: &mut R) -> usize {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        for (i, p) in self.pmf.iter().enumerate() {
            acc += p;
            if u < acc {
                return i;
            }
        }
        // rounding left `acc` just below 1
        self.pmf.iter().rposition(|p| *p > 0.0).unwrap_or(0)
    }

    /// Highest-probability bin; the lowest index wins ties.
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, p) in self.pmf.iter().enumerate() {
            if *p > self.pmf[best] {
                best = i;
            }
        }
        best
    }

    /// Shannon entropy of the pmf in nats.
    pub fn entropy(&self) -> f64 {
        entropy(&self.pmf)
    }
}

pub fn entropy(pmf: &[f64]) -> f64 {
    -pmf.iter().filter(|p| **p > 0.0).map(|p| p * p.ln()).sum::<f64>()
}

/// Ranges of the GGX parameter histograms.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BrdfRanges {
    pub diffuse: (f64, f64),
    pub specular: (f64, f64),
    pub roughness: (f64, f64),
    /// Largest angle between the normal and the direction to the camera.
    pub normal_max_deg: f64,
}

impl Default for BrdfRanges {
    fn default() -> Self {
        Self {
            diffuse: (0.0, 1.0),
            specular: (0.0, 1.0),
            roughness: (ROUGHNESS_MIN, ROUGHNESS_MAX),
            normal_max_deg: 80.0,
        }
    }
}

/// Histogram-model parameter slots in storage order.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BrdfParam {
    Diffuse(usize),
    Specular(usize),
    AlphaX,
    AlphaY,
    NormalTheta,
    NormalPhi,
    Tangent,
}

impl BrdfParam {
    pub fn all(channels: usize) -> Vec<Self> {
        let mut v: Vec<Self> = (0..channels).map(Self::Diffuse).collect();
        v.extend((0..channels).map(Self::Specular));
        v.extend([Self::AlphaX, Self::AlphaY, Self::NormalTheta, Self::NormalPhi, Self::Tangent]);
        v
    }

    pub fn name(&self) -> String {
        match self {
            Self::Diffuse(c) => format!("diffuse_{c}"),
            Self::Specular(c) => format!("specular_{c}"),
            Self::AlphaX => "alpha_x".into(),
            Self::AlphaY => "alpha_y".into(),
            Self::NormalTheta => "normal_theta".into(),
            Self::NormalPhi => "normal_phi".into(),
            Self::Tangent => "tangent".into(),
        }
    }

    pub fn range(&self, r: &BrdfRanges) -> (f64, f64) {
        match self {
            Self::Diffuse(_) => r.diffuse,
            Self::Specular(_) => r.specular,
            Self::AlphaX | Self::AlphaY => r.roughness,
            Self::NormalTheta => (0.0, r.normal_max_deg.to_radians()),
            Self::NormalPhi => (0.0, 2.0 * PI),
            Self::Tangent => (0.0, PI),
        }
    }

    pub fn get(&self, b: &GgxParams) -> f64 {
        match *self {
            Self::Diffuse(c) => b.diffuse[c],
            Self::Specular(c) => b.specular[c],
            Self::AlphaX => b.alpha_x,
            Self::AlphaY => b.alpha_y,
            Self::NormalTheta => b.normal_theta,
            Self::NormalPhi => b.normal_phi,
            Self::Tangent => b.tangent_angle,
        }
    }

    pub fn set(&self, b: &mut GgxParams, v: f64) {
        match *self {
            Self::Diffuse(c) => b.diffuse[c] = v,
            Self::Specular(c) => b.specular[c] = v,
            Self::AlphaX => b.alpha_x = v,
            Self::AlphaY => b.alpha_y = v,
            Self::NormalTheta => b.normal_theta = v,
            Self::NormalPhi => b.normal_phi = v,
            Self::Tangent => b.tangent_angle = v,
        }
    }
}

/// Histogram models and accumulated measurements of one pixel.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PixelModels {
    pub pixel: usize,
    pub ray: PixelRay,
    pub channels: usize,
    pub depth: Histogram,
    /// One histogram per [`BrdfParam::all`] slot.
    pub brdf: Vec<Histogram>,
    /// `channels` values per captured pattern, in capture order.
    pub measurements: Vec<f64>,
}

/// Fresh uniform models for a pixel whose ray crosses the valid volume.
pub fn init_models(pixel: usize, ray: &PixelRay, ranges: &BrdfRanges, n_bin: usize, channels: usize) -> Result<PixelModels> {
    if channels == 0 || channels > MAX_CHANNELS {
        return Err(domain(format!("channel count {channels} not in 1..={MAX_CHANNELS}")));
    }
    let depth = Histogram::uniform(ray.z_min, ray.z_max, n_bin, ScoreKind::Zncc)?;
    let brdf = BrdfParam::all(channels)
        .iter()
        .map(|p| {
            let (lo, hi) = p.range(ranges);
            Histogram::uniform(lo, hi, n_bin, ScoreKind::InvL1)
        })
        .collect::<Result<_>>()?;
    Ok(PixelModels {
        pixel,
        ray: *ray,
        channels,
        depth,
        brdf,
        measurements: Vec::new(),
    })
}

impl PixelModels {
    pub fn params(&self) -> Vec<BrdfParam> {
        BrdfParam::all(self.channels)
    }

    pub fn patterns_seen(&self) -> usize {
        self.measurements.len() / self.channels
    }

    /// Draws a BRDF only, parameter by parameter.
    pub fn sample_brdf<R: Rng>(&self, rng: &mut R) -> GgxParams {
        let mut b = GgxParams {
            diffuse: [0.0; MAX_CHANNELS],
            specular: [0.0; MAX_CHANNELS],
            ..GgxParams::default()
        };
        for (p, h) in self.params().iter().zip(&self.brdf) {
            p.set(&mut b, h.sample(rng));
        }
        b
    }

    /// Bin-centre values of every histogram's best bin.
    pub fn mode(&self) -> Candidate {
        let mut brdf = GgxParams {
            diffuse: [0.0; MAX_CHANNELS],
            specular: [0.0; MAX_CHANNELS],
            ..GgxParams::default()
        };
        for (p, h) in self.params().iter().zip(&self.brdf) {
            p.set(&mut brdf, h.bin_center(h.argmax()));
        }
        Candidate {
            depth: self.depth.bin_center(self.depth.argmax()),
            brdf,
        }
    }
}

/// Independent draw of depth and every BRDF parameter.
pub fn sample_candidate<R: Rng>(models: &PixelModels, rng: &mut R) -> Candidate {
    let depth = models.depth.sample(rng);
    Candidate {
        depth,
        brdf: models.sample_brdf(rng),
    }
}

/// Zero-normalized cross-correlation; 0 when either vector is constant.
pub fn zncc(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(domain(format!("zncc of vectors of length {} and {}", a.len(), b.len())));
    }
    Ok(zncc_unchecked(a, b))
}

#[inline]
pub(crate) fn zncc_unchecked(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len();
    if n == 0 {
        return 0.0;
    }
    let ma = a.iter().sum::<f64>() / n as f64;
    let mb = b.iter().sum::<f64>() / n as f64;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (x, y) = (x - ma, y - mb);
        sab += x * y;
        saa += x * x;
        sbb += y * y;
    }
    let (na, nb) = (saa.sqrt(), sbb.sqrt());
    if na < 1e-12 || nb < 1e-12 {
        return 0.0;
    }
    (sab / (na * nb)).clamp(-1.0, 1.0)
}

/// `1 / (mean |a - b| + ε)`.
#[inline]
pub fn inv_l1_score(a: &[f64], b: &[f64]) -> f64 {
    let l1: f64 = a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum();
    1.0 / (l1 / a.len().max(1) as f64 + L1_EPS)
}

/// Scatter-max update from simulated measurement vectors of `cands`: every
/// bin hit by a candidate takes the best score among its candidates; other
/// bins keep their scores. All histograms are renormalized.
pub fn update_models(models: &mut PixelModels, sims: &[Vec<f64>], cands: &[Candidate]) -> Result<()> {
    if sims.len() != cands.len() {
        return Err(domain(format!("{} simulations for {} candidates", sims.len(), cands.len())));
    }
    let m = &models.measurements;
    if let Some(s) = sims.iter().find(|s| s.len() != m.len()) {
        return Err(domain(format!(
            "simulated vector has {} entries, measurements have {}",
            s.len(),
            m.len()
        )));
    }
    if m.is_empty() || cands.is_empty() {
        return Ok(());
    }
    let n_bin = models.depth.n_bin();
    let mut best = vec![f64::NEG_INFINITY; n_bin];
    let zn: Vec<f64> = sims.iter().map(|s| zncc_unchecked(m, s)).collect();
    for (c, s) in cands.iter().zip(&zn) {
        let b = models.depth.bin_of(c.depth);
        best[b] = best[b].max(*s);
    }
    apply_best(&mut models.depth, &best);

    let l1: Vec<f64> = sims.iter().map(|s| inv_l1_score(m, s)).collect();
    let params = models.params();
    for (p, h) in params.iter().zip(models.brdf.iter_mut()) {
        let mut best = vec![f64::NEG_INFINITY; h.n_bin()];
        for (c, s) in cands.iter().zip(&l1) {
            let b = h.bin_of(p.get(&c.brdf));
            best[b] = best[b].max(*s);
        }
        apply_best(h, &best);
    }
    Ok(())
}

fn apply_best(h: &mut Histogram, best: &[f64]) {
    for (s, b) in h.scores.iter_mut().zip(best) {
        if *b > f64::NEG_INFINITY {
            *s = *b;
        }
    }
    h.normalize();
}

/// ZNCC and inverse-ℓ₁ scores of a candidate against the pixel's measurements
/// under the patterns captured so far.
pub fn score_candidate(
    models: &PixelModels,
    rig: &crate::rig::Rig,
    patterns: &[PatternPair],
    cand: &Candidate,
) -> (f64, f64) {
    let t = cand.transport(rig, &models.ray, models.channels);
    let mut sim = Vec::with_capacity(models.measurements.len());
    t.eval_all(patterns, &mut sim);
    (zncc_unchecked(&models.measurements, &sim), inv_l1_score(&models.measurements, &sim))
}

/// Refined estimate: for depth and then each BRDF parameter in turn, the best
/// bin is split into [`MAP_SUBDIVISIONS`] sub-bins that are re-scored at their
/// centres with every other parameter held at its current estimate. The
/// returned values are drawn uniformly inside the winning sub-bins.
pub fn map_estimate<R: Rng>(
    models: &PixelModels,
    rig: &crate::rig::Rig,
    patterns: &[PatternPair],
    rng: &mut R,
) -> Result<Candidate> {
    if patterns.len() != models.patterns_seen() || patterns.is_empty() {
        return Err(domain(format!(
            "map estimate needs the {} captured patterns, got {}",
            models.patterns_seen(),
            patterns.len()
        )));
    }
    let mut cur = models.mode();
    let mut winners: Vec<(f64, f64)> = Vec::with_capacity(1 + models.brdf.len());

    let best_sub = |h: &Histogram, score: &mut dyn FnMut(f64) -> f64| -> (f64, f64) {
        let (a, b) = h.bin_range(h.argmax());
        let w = (b - a) / MAP_SUBDIVISIONS as f64;
        let mut best = (f64::NEG_INFINITY, 0);
        for k in 0..MAP_SUBDIVISIONS {
            let s = score(a + (k as f64 + 0.5) * w);
            if s > best.0 {
                best = (s, k);
            }
        }
        (a + best.1 as f64 * w, a + (best.1 + 1) as f64 * w)
    };

    let (zl, zh) = best_sub(&models.depth, &mut |z| {
        let c = Candidate { depth: z, ..cur };
        score_candidate(models, rig, patterns, &c).0
    });
    cur.depth = 0.5 * (zl + zh);
    winners.push((zl, zh));

    for (p, h) in models.params().iter().zip(&models.brdf) {
        let (l, u) = best_sub(h, &mut |v| {
            let mut c = cur;
            p.set(&mut c.brdf, v);
            score_candidate(models, rig, patterns, &c).1
        });
        p.set(&mut cur.brdf, 0.5 * (l + u));
        winners.push((l, u));
    }

    let mut draw = |(l, u): (f64, f64)| l + (u - l) * rng.random::<f64>();
    let mut out = cur;
    out.depth = draw(winners[0]);
    for (p, w) in models.params().iter().zip(&winners[1..]) {
        p.set(&mut out.brdf, draw(*w));
    }
    Ok(out)
}

#[derive(Serialize)]
struct DumpLine<'a> {
    pixel: usize,
    kind: &'a str,
    lo: f64,
    hi: f64,
    scores: &'a [f64],
}

/// One JSON line per histogram: `{pixel, kind, lo, hi, scores}`.
pub fn dump_jsonl<'a, W: Write>(models: impl IntoIterator<Item = &'a PixelModels>, mut out: W) -> std::io::Result<()> {
    for m in models {
        let mut line = |kind: &str, h: &Histogram| -> std::io::Result<()> {
            let l = DumpLine {
                pixel: m.pixel,
                kind,
                lo: h.lo,
                hi: h.hi,
                scores: &h.scores,
            };
            serde_json::to_writer(&mut out, &l)?;
            out.write_all(b"\n")
        };
        line("depth", &m.depth)?;
        for (p, h) in m.params().iter().zip(&m.brdf) {
            line(&p.name(), h)?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::Vector3;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn ray(z_min: f64, z_max: f64) -> PixelRay {
        PixelRay {
            origin: Vector3::zeros(),
            direction: Vector3::z(),
            px: [0.5, 0.5],
            z_min,
            z_max,
        }
    }

    fn chi2_uniform(counts: &[usize], n: usize) -> f64 {
        let e = n as f64 / counts.len() as f64;
        counts.iter().map(|c| (*c as f64 - e).powi(2) / e).sum()
    }

    #[test]
    fn fresh_models_are_uniform() {
        let m = init_models(0, &ray(0.075, 0.225), &BrdfRanges::default(), 100, 3).unwrap();
        assert_eq!(m.brdf.len(), 11);
        for h in std::iter::once(&m.depth).chain(&m.brdf) {
            assert!(h.pmf.iter().all(|p| (p - 0.01).abs() < 1e-15));
        }
        assert!((m.depth.bin_width() - 0.0015).abs() < 1e-15);
        assert!((m.depth.entropy() - 100f64.ln()).abs() < 1e-12);
        assert!(m.measurements.is_empty());
    }

    #[test]
    fn empty_depth_interval_is_rejected() {
        assert!(init_models(0, &ray(0.2, 0.2), &BrdfRanges::default(), 100, 1).is_err());
    }

    #[test]
    fn uniform_sampling_passes_chi_square() {
        use statrs::distribution::{ChiSquared, ContinuousCDF};
        let m = init_models(0, &ray(0.1, 0.3), &BrdfRanges::default(), 100, 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let n = 100_000;
        let mut depth = vec![0usize; 100];
        let mut rough = vec![0usize; 100];
        for _ in 0..n {
            let c = sample_candidate(&m, &mut rng);
            assert!(c.depth >= 0.1 && c.depth < 0.3);
            depth[m.depth.bin_of(c.depth)] += 1;
            rough[m.brdf[2].bin_of(c.brdf.alpha_x)] += 1;
        }
        let dist = ChiSquared::new(99.0).unwrap();
        for counts in [&depth, &rough] {
            let p = 1.0 - dist.cdf(chi2_uniform(counts, n));
            assert!(p > 0.01, "p = {p}");
        }
    }

    #[test]
    fn concentrated_pmf_samples_inside_its_bin() {
        let mut h = Histogram::uniform(0.0, 1.0, 100, ScoreKind::InvL1).unwrap();
        h.scores[37] = 1.0;
        h.normalize();
        let eps = h.pmf[0];
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let n = 20_000;
        let inside = (0..n).filter(|_| h.bin_of(h.sample(&mut rng)) == 37).count();
        assert!(inside as f64 / n as f64 >= 1.0 - 99.0 * eps - 0.01);
    }

    #[test]
    fn sampling_is_deterministic_per_seed() {
        let m = init_models(0, &ray(0.1, 0.3), &BrdfRanges::default(), 100, 2).unwrap();
        let a = sample_candidate(&m, &mut ChaCha8Rng::seed_from_u64(5));
        let b = sample_candidate(&m, &mut ChaCha8Rng::seed_from_u64(5));
        assert_eq!(a, b);
    }

    #[test]
    fn zncc_conventions() {
        let v = [0.3, -1.2, 4.0, 2.2, 0.0];
        let neg: Vec<f64> = v.iter().map(|x| -x).collect();
        let aff: Vec<f64> = v.iter().map(|x| 3.0 * x + 7.0).collect();
        assert!((zncc(&v, &v).unwrap() - 1.0).abs() <= 1e-12);
        assert!((zncc(&v, &neg).unwrap() + 1.0).abs() <= 1e-12);
        assert!((zncc(&v, &aff).unwrap() - 1.0).abs() <= 1e-12);
        assert_eq!(zncc(&v, &[2.0; 5]).unwrap(), 0.0);
        assert!(zncc(&v, &v[..4]).is_err());
    }

    #[test]
    fn scatter_max_keeps_the_best_and_leaves_unhit_bins() {
        let mut m = init_models(0, &ray(0.0, 1.0), &BrdfRanges::default(), 10, 1).unwrap();
        m.measurements = vec![1.0, 2.0, 3.0];
        m.depth.scores[7] = 0.25;
        // centered target direction c and an orthogonal direction p give zncc = r
        let make = |r: f64| -> Vec<f64> {
            let c = [-1.0, 0.0, 1.0];
            let p = [1.0, -2.0, 1.0];
            (0..3)
                .map(|i| 5.0 + r * c[i] / 2f64.sqrt() + (1.0 - r * r).sqrt() * p[i] / 6f64.sqrt())
                .collect()
        };
        let (a, b) = (make(0.3), make(0.8));
        assert!((zncc(&m.measurements, &a).unwrap() - 0.3).abs() < 1e-12);
        assert!((zncc(&m.measurements, &b).unwrap() - 0.8).abs() < 1e-12);
        let cand = |d: f64| Candidate {
            depth: d,
            brdf: GgxParams::default(),
        };
        update_models(&mut m, &[a, b], &[cand(0.21), cand(0.29)]).unwrap();
        assert!((m.depth.scores[2] - 0.8).abs() < 1e-12);
        assert_eq!(m.depth.scores[7], 0.25);
        assert_eq!(m.depth.scores[0], 0.0);
    }

    #[test]
    fn identical_candidate_scores_one() {
        let mut m = init_models(0, &ray(0.0, 1.0), &BrdfRanges::default(), 10, 1).unwrap();
        m.measurements = vec![0.2, 0.9, 0.4, 0.1];
        let c = Candidate {
            depth: 0.55,
            brdf: GgxParams::default(),
        };
        let sim = m.measurements.clone();
        update_models(&mut m, &[sim], &[c]).unwrap();
        assert_eq!(m.depth.scores[5], 1.0);
        assert!((m.brdf[0].scores[m.brdf[0].bin_of(0.5)] - 1.0 / L1_EPS).abs() < 1e-6);
    }

    #[test]
    fn update_rejects_mismatched_inputs() {
        let mut m = init_models(0, &ray(0.0, 1.0), &BrdfRanges::default(), 10, 1).unwrap();
        m.measurements = vec![0.1, 0.2];
        let c = Candidate {
            depth: 0.5,
            brdf: GgxParams::default(),
        };
        assert!(update_models(&mut m, &[vec![0.1, 0.2]], &[c, c]).is_err());
        assert!(update_models(&mut m, &[vec![0.1]], &[c]).is_err());
    }

    #[test]
    fn argmax_breaks_ties_low() {
        let mut h = Histogram::uniform(0.0, 1.0, 10, ScoreKind::Zncc).unwrap();
        h.scores[3] = 0.9;
        h.scores[6] = 0.9;
        h.normalize();
        assert_eq!(h.argmax(), 3);
        assert_eq!(Histogram::uniform(0.0, 1.0, 10, ScoreKind::Zncc).unwrap().argmax(), 0);
    }

    #[test]
    fn one_hot_entropy_is_small() {
        let mut h = Histogram::uniform(0.0, 1.0, 100, ScoreKind::InvL1).unwrap();
        h.scores[4] = 1.0;
        h.normalize();
        assert!(h.entropy() < 0.01);
    }

    #[test]
    fn dump_has_one_line_per_histogram() {
        let m = init_models(3, &ray(0.1, 0.2), &BrdfRanges::default(), 5, 1).unwrap();
        let mut buf = Vec::new();
        dump_jsonl([&m], &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<serde_json::Value> = text.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
        assert_eq!(lines.len(), 8);
        assert_eq!(lines[0]["kind"], "depth");
        assert_eq!(lines[0]["pixel"], 3);
        assert_eq!(lines[0]["scores"].as_array().unwrap().len(), 5);
    }

    fn random_update(seed: u64, perm: bool) -> PixelModels {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut m = init_models(0, &ray(0.1, 0.4), &BrdfRanges::default(), 20, 2).unwrap();
        m.measurements = (0..8).map(|_| rng.random()).collect();
        let mut cands: Vec<Candidate> = (0..30).map(|_| sample_candidate(&m, &mut rng)).collect();
        let mut sims: Vec<Vec<f64>> = (0..30).map(|_| (0..8).map(|_| rng.random()).collect()).collect();
        if perm {
            cands.reverse();
            sims.reverse();
            cands.swap(3, 17);
            sims.swap(3, 17);
        }
        update_models(&mut m, &sims, &cands).unwrap();
        m
    }

    #[test]
    fn update_is_order_free() {
        assert_eq!(random_update(8, false), random_update(8, true));
    }

    proptest! {
        #[test]
        fn pmf_stays_normalized(seed in 0u64..1000) {
            let m = random_update(seed, false);
            for h in std::iter::once(&m.depth).chain(&m.brdf) {
                prop_assert!((h.pmf.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
                prop_assert!(h.pmf.iter().all(|p| *p >= 0.0));
            }
        }

        #[test]
        fn zncc_bounded_and_affine(a in prop::collection::vec(-10.0f64..10.0, 2..20), gain in 0.1f64..10.0, off in -5.0f64..5.0, seed in 0u64..100) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let b: Vec<f64> = a.iter().map(|_| rng.random_range(-3.0..3.0)).collect();
            let s = zncc(&a, &b).unwrap();
            prop_assert!((-1.0..=1.0).contains(&s));
            let pos: Vec<f64> = b.iter().map(|x| gain * x + off).collect();
            let neg: Vec<f64> = b.iter().map(|x| -gain * x + off).collect();
            prop_assert!((zncc(&a, &pos).unwrap() - s).abs() < 1e-9);
            prop_assert!((zncc(&a, &neg).unwrap() + s).abs() < 1e-9);
        }
    }
}
