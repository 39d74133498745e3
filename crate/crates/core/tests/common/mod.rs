//! Independent reference implementations shared by the integration tests.
#![allow(dead_code)]

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sl4d_core::prob::{init_models, sample_candidate, update_models, BrdfParam, BrdfRanges, PixelModels};
use sl4d_core::rig::{LedModel, RigGeometry};
use sl4d_core::scene::{gen_scene, SceneKind};
use sl4d_core::{Candidate, FreePatternVars, PatternPair, PatternShape, Rig};

pub fn oracle_zncc(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let mut num = 0.0;
    let mut da = 0.0;
    let mut db = 0.0;
    for i in 0..a.len() {
        num += (a[i] - ma) * (b[i] - mb);
        da += (a[i] - ma).powi(2);
        db += (b[i] - mb).powi(2);
    }
    if da == 0.0 || db == 0.0 {
        0.0
    } else {
        num / (da * db).sqrt()
    }
}

pub fn oracle_bin(lo: f64, hi: f64, n: usize, x: f64) -> usize {
    let w = (hi - lo) / n as f64;
    let mut b = 0;
    while b + 1 < n && x >= lo + (b + 1) as f64 * w {
        b += 1;
    }
    b
}

pub fn oracle_pmf(scores: &[f64], shift: bool) -> Vec<f64> {
    let v: Vec<f64> = scores
        .iter()
        .map(|s| if shift { (s + 1.0) / 2.0 } else { *s })
        .map(|s| s.max(1e-6))
        .collect();
    let t: f64 = v.iter().sum();
    v.iter().map(|x| x / t).collect()
}

pub fn rig() -> Rig {
    Rig::new(RigGeometry::desk(16), LedModel::default()).unwrap()
}

pub fn simulate(rig: &Rig, m: &PixelModels, c: &Candidate, pats: &[PatternPair]) -> Vec<f64> {
    let mut v = Vec::new();
    c.transport(rig, &m.ray, m.channels).eval_all(pats, &mut v);
    v
}

pub fn setup(seed: u64, n_pat: usize) -> (Rig, PixelModels, Candidate, Vec<PatternPair>) {
    let rig = rig();
    let scene = gen_scene(SceneKind::Wavy, &rig, 1, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
    let px = (0..scene.len()).find(|&i| scene.is_valid(i) && i % 16 > 5 && i / 16 > 5).unwrap();
    let (ray, truth) = scene.pixel_candidates(&rig)[px].clone().unwrap();
    let m = init_models(px, &ray, &BrdfRanges::default(), 100, 1).unwrap();
    let shape = PatternShape::new(&rig.geom, 1);
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
    let pats: Vec<_> = (0..n_pat).map(|_| FreePatternVars::random(shape, &mut rng).realize()).collect();
    (rig, m, truth, pats)
}

/// Largest disagreements between `update_models` and a from-scratch
/// scatter-max over the same candidates.
#[derive(Debug, Default)]
pub struct UpdateDeviation {
    pub scores: f64,
    pub pmf: f64,
    pub normalization: f64,
}

pub fn brute_force_update(seed: u64, rounds: usize) -> UpdateDeviation {
    let (rig, mut m, truth, pats) = setup(seed, 6);
    m.measurements = simulate(&rig, &m, &truth, &pats);
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 2);
    let n = m.depth.n_bin();
    let mut expect_depth = vec![0.0; n];
    let mut expect_brdf: Vec<Vec<f64>> = vec![vec![0.0; n]; m.brdf.len()];
    let mut dev = UpdateDeviation::default();
    let note = |d: &mut f64, x: f64| *d = d.max(x);
    for _ in 0..rounds {
        let cands: Vec<Candidate> = (0..300).map(|_| sample_candidate(&m, &mut rng)).collect();
        let sims: Vec<Vec<f64>> = cands.iter().map(|c| simulate(&rig, &m, c, &pats)).collect();

        let mut best = vec![f64::NEG_INFINITY; n];
        for (c, s) in cands.iter().zip(&sims) {
            let b = oracle_bin(m.depth.lo, m.depth.hi, n, c.depth);
            best[b] = best[b].max(oracle_zncc(&m.measurements, s));
        }
        for (e, b) in expect_depth.iter_mut().zip(&best) {
            if b.is_finite() {
                *e = *b;
            }
        }
        for (k, p) in BrdfParam::all(m.channels).iter().enumerate() {
            let h = &m.brdf[k];
            let mut best = vec![f64::NEG_INFINITY; n];
            for (c, s) in cands.iter().zip(&sims) {
                let b = oracle_bin(h.lo, h.hi, n, p.get(&c.brdf));
                let l1: f64 = m.measurements.iter().zip(s).map(|(x, y)| (x - y).abs()).sum::<f64>() / s.len() as f64;
                best[b] = best[b].max(1.0 / (l1 + 1e-4));
            }
            for (e, b) in expect_brdf[k].iter_mut().zip(&best) {
                if b.is_finite() {
                    *e = *b;
                }
            }
        }

        update_models(&mut m, &sims, &cands).unwrap();
        let hists = std::iter::once((&m.depth, &expect_depth, true)).chain(m.brdf.iter().zip(&expect_brdf).map(|(h, e)| (h, e, false)));
        for (h, expect, shift) in hists {
            for (got, want) in h.scores.iter().zip(expect) {
                note(&mut dev.scores, (got - want).abs() / want.abs().max(1.0));
            }
            for (g, w) in h.pmf.iter().zip(oracle_pmf(expect, shift)) {
                note(&mut dev.pmf, (g - w).abs());
            }
            note(&mut dev.normalization, (h.pmf.iter().sum::<f64>() - 1.0).abs());
        }
    }
    dev
}
