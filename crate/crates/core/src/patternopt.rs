//! Choosing the next batch of light/mask patterns by making each pixel's
//! candidate hypotheses distinguishable: a softmax over pairwise ZNCC scores
//! classifies every candidate against the others, and the summed
//! cross-entropy is minimized with Adam through the sigmoid parameterization.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::adam::{Adam, AdamConfig};
use crate::error::{domain, Error, Result};
use crate::patterns::{realize_grad, FreePatternVars, PatternGrad, PatternPair, PatternShape, MAX_CHANNELS};
use crate::prob::{zncc_unchecked, PixelModels};
use crate::render::{Candidate, Transport};
use crate::rig::Rig;

/// Half-width of the local-maximum window (5 bins).
pub const PEAK_HALF_WINDOW: usize = 2;
/// Peaks must reach this fraction of the global maximum.
pub const PEAK_THRESHOLD: f64 = 0.5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimConfig {
    pub n_batch: usize,
    pub n_peak: usize,
    pub iters: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            n_batch: 3,
            n_peak: 3,
            iters: 200,
            learning_rate: 1e-3,
            weight_decay: 1e-6,
        }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_batch == 0 || self.n_peak == 0 {
            return Err(Error::Config("n_batch and n_peak must be positive".into()));
        }
        if !(self.learning_rate > 0.0) || !(self.weight_decay >= 0.0) {
            return Err(Error::Config("learning_rate must be positive and weight_decay non-negative".into()));
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            learning_rate: self.learning_rate,
            weight_decay: self.weight_decay,
            ..AdamConfig::default()
        }
    }
}

/// Candidates of one pixel that the next patterns should tell apart.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PixelPeaks {
    pub pixel: usize,
    pub cands: Vec<Candidate>,
    pub scores: Vec<f64>,
}

/// Bins that are the strict maximum of their centred 5-bin window and reach
/// [`PEAK_THRESHOLD`] of the global maximum, best first (lower index on ties).
pub fn peak_bins(values: &[f64], n_peak: usize) -> Vec<usize> {
    let n = values.len();
    let Some(global) = values.iter().copied().reduce(f64::max) else {
        return Vec::new();
    };
    let mut peaks: Vec<usize> = (0..n)
        .filter(|&i| {
            let lo = i.saturating_sub(PEAK_HALF_WINDOW);
            let hi = (i + PEAK_HALF_WINDOW).min(n - 1);
            values[i] >= PEAK_THRESHOLD * global && (lo..=hi).all(|j| j == i || values[j] < values[i])
        })
        .collect();
    peaks.sort_by(|a, b| values[*b].total_cmp(&values[*a]).then(a.cmp(b)));
    peaks.truncate(n_peak);
    peaks
}

/// Peaks of the depth pmf as candidates at their bin centres, each with one
/// BRDF draw from the pixel's reflectance histograms.
pub fn detect_peaks<R: Rng>(models: &PixelModels, n_peak: usize, rng: &mut R) -> PixelPeaks {
    let h = &models.depth;
    let bins = peak_bins(&h.pmf, n_peak);
    PixelPeaks {
        pixel: models.pixel,
        cands: bins
            .iter()
            .map(|&b| Candidate {
                depth: h.bin_center(b),
                brdf: models.sample_brdf(rng),
            })
            .collect(),
        scores: bins.iter().map(|&b| h.scores[b]).collect(),
    }
}

/// `n` candidates drawn from the models with depths in distinct bins; used
/// before any measurement exists.
pub fn sample_peaks<R: Rng>(models: &PixelModels, n: usize, rng: &mut R) -> PixelPeaks {
    let h = &models.depth;
    let n = n.min(h.n_bin());
    let mut cands: Vec<Candidate> = Vec::with_capacity(n);
    while cands.len() < n {
        let c = crate::prob::sample_candidate(models, rng);
        let b = h.bin_of(c.depth);
        if cands.iter().all(|o| h.bin_of(o.depth) != b) {
            cands.push(c);
        }
    }
    PixelPeaks {
        pixel: models.pixel,
        scores: cands.iter().map(|c| h.scores[h.bin_of(c.depth)]).collect(),
        cands,
    }
}

fn softmax_row(s: &[f64]) -> Vec<f64> {
    let m = s.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = s.iter().map(|x| (x - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|x| x / z).collect()
}

/// `ŷ[a][b] = softmax_b zncc(I_a, I_b)`.
pub fn class_likelihood(sims: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
    if sims.len() < 2 {
        return Err(domain("class likelihood needs at least two candidates"));
    }
    let len = sims[0].len();
    if sims.iter().any(|s| s.len() != len) {
        return Err(domain("simulated vectors differ in length"));
    }
    Ok(zncc_matrix(sims).iter().map(|r| softmax_row(r)).collect())
}

fn zncc_matrix(v: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let n = v.len();
    let mut s = vec![vec![0.0; n]; n];
    for a in 0..n {
        for b in a..n {
            let z = zncc_unchecked(&v[a], &v[b]);
            s[a][b] = z;
            s[b][a] = z;
        }
    }
    s
}

struct Centered {
    c: Vec<f64>,
    norm: f64,
}

fn center(x: &[f64]) -> Centered {
    let m = x.iter().sum::<f64>() / x.len().max(1) as f64;
    let c: Vec<f64> = x.iter().map(|v| v - m).collect();
    let norm = c.iter().map(|v| v * v).sum::<f64>().sqrt();
    Centered { c, norm }
}

/// Per-pixel loss `Σ_a −log ŷ_aa` and its gradient with respect to every
/// entry of every candidate's measurement vector.
pub fn pixel_cross_entropy(vecs: &[Vec<f64>]) -> (f64, Vec<Vec<f64>>) {
    let n = vecs.len();
    let s = zncc_matrix(vecs);
    let y: Vec<Vec<f64>> = s.iter().map(|r| softmax_row(r)).collect();
    let loss: f64 = (0..n).map(|a| -y[a][a].ln()).sum();
    let cs: Vec<Centered> = vecs.iter().map(|v| center(v)).collect();
    let len = vecs.first().map_or(0, Vec::len);
    let mut grads = vec![vec![0.0; len]; n];
    for a in 0..n {
        let x = &cs[a];
        if x.norm < 1e-12 {
            continue;
        }
        for b in 0..n {
            if b == a || cs[b].norm < 1e-12 {
                continue;
            }
            // S is symmetric, so S_ab receives weight from rows a and b
            let w = y[a][b] + y[b][a];
            let yv = &cs[b];
            let z = s[a][b];
            let k1 = w / (x.norm * yv.norm);
            let k2 = w * z / (x.norm * x.norm);
            for (g, (xc, yc)) in grads[a].iter_mut().zip(x.c.iter().zip(&yv.c)) {
                *g += k1 * yc - k2 * xc;
            }
        }
    }
    (loss, grads)
}

struct PixelTerm {
    transports: Vec<Transport>,
    /// Simulated measurements under the already captured patterns.
    fixed: Vec<Vec<f64>>,
}

/// Everything the loss needs that does not depend on the patterns being
/// optimized: per-candidate light transport and measurements under the
/// captured patterns.
pub struct LossContext {
    shape: PatternShape,
    channels: usize,
    terms: Vec<PixelTerm>,
}

impl LossContext {
    /// Pixels with fewer than two candidates are dropped.
    pub fn new(rig: &Rig, channels: usize, peaks: &[PixelPeaks], captured: &[PatternPair]) -> Self {
        let terms = peaks
            .par_iter()
            .filter(|p| p.cands.len() >= 2)
            .map(|p| {
                let ray = rig
                    .pixel_ray(p.pixel % rig.geom.cam_res_w, p.pixel / rig.geom.cam_res_w)
                    .expect("peaks only exist for pixels that see the volume");
                let transports: Vec<Transport> = p.cands.iter().map(|c| c.transport(rig, &ray, channels)).collect();
                let fixed = transports
                    .iter()
                    .map(|t| {
                        let mut v = Vec::with_capacity(captured.len() * channels);
                        t.eval_all(captured, &mut v);
                        v
                    })
                    .collect();
                PixelTerm { transports, fixed }
            })
            .collect();
        Self {
            shape: PatternShape::new(&rig.geom, channels),
            channels,
            terms,
        }
    }

    pub fn active_pixels(&self) -> usize {
        self.terms.len()
    }

    pub fn shape(&self) -> PatternShape {
        self.shape
    }

    /// Loss and gradient with respect to the values of `pairs`.
    pub fn loss_patterns(&self, pairs: &[PatternPair]) -> Result<(f64, Vec<PatternGrad>)> {
        if self.terms.is_empty() {
            return Err(Error::NothingToOptimize);
        }
        let c_n = self.channels;
        let per_pixel: Vec<(f64, Vec<Vec<[f64; MAX_CHANNELS]>>, Vec<Vec<Vec<f64>>>)> = self
            .terms
            .par_iter()
            .map(|t| {
                let mut responses = Vec::with_capacity(t.transports.len());
                let vecs: Vec<Vec<f64>> = t
                    .transports
                    .iter()
                    .zip(&t.fixed)
                    .map(|(tr, fixed)| {
                        let mut v = fixed.clone();
                        let mut resp = Vec::with_capacity(pairs.len());
                        for p in pairs {
                            let mut r = Vec::new();
                            tr.mask_responses(&p.mask.values, &mut r);
                            let m = tr.eval_responses(&p.light.values, &r);
                            v.extend_from_slice(&m[..c_n]);
                            resp.push(r);
                        }
                        responses.push(resp);
                        v
                    })
                    .collect();
                let (loss, grads) = pixel_cross_entropy(&vecs);
                let off = t.fixed[0].len();
                let upstream = grads
                    .iter()
                    .map(|g| {
                        (0..pairs.len())
                            .map(|j| {
                                let mut u = [0.0; MAX_CHANNELS];
                                u[..c_n].copy_from_slice(&g[off + j * c_n..off + (j + 1) * c_n]);
                                u
                            })
                            .collect()
                    })
                    .collect();
                (loss, upstream, responses)
            })
            .collect();

        let mut grads: Vec<PatternGrad> = pairs.iter().map(|_| PatternGrad::zeros(&self.shape)).collect();
        let mut loss = 0.0;
        for (t, (l, upstream, responses)) in self.terms.iter().zip(&per_pixel) {
            loss += l;
            for (a, tr) in t.transports.iter().enumerate() {
                for (j, p) in pairs.iter().enumerate() {
                    tr.accumulate_grad(p, &responses[a][j], &upstream[a][j], &mut grads[j]);
                }
            }
        }
        Ok((loss, grads))
    }
}

/// Summed cross-entropy over all pixels and its gradient with respect to the
/// free variables of each pattern being optimized.
pub fn cross_entropy_loss(ctx: &LossContext, vars: &[FreePatternVars]) -> Result<(f64, Vec<PatternGrad>)> {
    let pairs: Vec<PatternPair> = vars.iter().map(FreePatternVars::realize).collect();
    let (loss, grads) = ctx.loss_patterns(&pairs)?;
    let grads = vars
        .iter()
        .zip(&grads)
        .map(|(v, g)| realize_grad(v, g))
        .collect::<Result<_>>()?;
    Ok((loss, grads))
}

#[derive(Clone, Debug)]
pub struct OptimOutcome {
    pub patterns: Vec<PatternPair>,
    /// Loss at every iterate, starting with the initialization.
    pub loss_curve: Vec<f64>,
    pub initial_loss: f64,
    /// Loss of the returned patterns.
    pub final_loss: f64,
}

fn flatten(vars: &[FreePatternVars]) -> Vec<f64> {
    vars.iter()
        .flat_map(|v| v.light_raw.iter().chain(&v.mask_raw).copied())
        .collect()
}

fn unflatten(flat: &[f64], vars: &mut [FreePatternVars]) {
    let mut off = 0;
    for v in vars {
        let (nl, nm) = (v.light_raw.len(), v.mask_raw.len());
        v.light_raw.copy_from_slice(&flat[off..off + nl]);
        v.mask_raw.copy_from_slice(&flat[off + nl..off + nl + nm]);
        off += nl + nm;
    }
}

/// Runs `cfg.iters` Adam steps from `init` and returns the realized patterns
/// of the lowest-loss iterate.
pub fn optimize_next_patterns(ctx: &LossContext, cfg: &OptimConfig, init: Vec<FreePatternVars>) -> Result<OptimOutcome> {
    cfg.validate()?;
    if init.len() != cfg.n_batch {
        return Err(domain(format!("{} initial patterns for a batch of {}", init.len(), cfg.n_batch)));
    }
    let mut vars = init;
    let mut x = flatten(&vars);
    let mut adam = Adam::new(x.len(), cfg.adam());
    let mut curve = Vec::with_capacity(cfg.iters + 1);
    let mut best: Option<(f64, Vec<f64>)> = None;
    for it in 0..=cfg.iters {
        unflatten(&x, &mut vars);
        let (loss, grads) = cross_entropy_loss(ctx, &vars)?;
        if !loss.is_finite() {
            return Err(Error::NonFinite {
                iter: it,
                context: format!("cross-entropy over {} pixels", ctx.active_pixels()),
            });
        }
        curve.push(loss);
        if best.as_ref().is_none_or(|(b, _)| loss < *b) {
            best = Some((loss, x.clone()));
        }
        if it == cfg.iters {
            break;
        }
        let g: Vec<f64> = grads.iter().flat_map(|g| g.light.iter().chain(&g.mask).copied()).collect();
        adam.step(&mut x, &g);
    }
    let (final_loss, bx) = best.expect("at least one evaluation");
    unflatten(&bx, &mut vars);
    log::debug!(
        "pattern batch: loss {:.6} -> {:.6} over {} pixels",
        curve[0],
        final_loss,
        ctx.active_pixels()
    );
    Ok(OptimOutcome {
        patterns: vars.iter().map(FreePatternVars::realize).collect(),
        initial_loss: curve[0],
        loss_curve: curve,
        final_loss,
    })
}
