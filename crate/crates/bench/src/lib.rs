//! Fixtures shared by the benchmarks.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sl4d_core::patternopt::{sample_peaks, LossContext, PixelPeaks};
use sl4d_core::prob::{init_models, sample_candidate, BrdfRanges, PixelModels};
use sl4d_core::{Candidate, FreePatternVars, LedModel, PatternPair, PatternShape, Rig, RigGeometry};

pub fn desk(res: usize) -> Rig {
    Rig::new(RigGeometry::desk(res), LedModel::default()).expect("desk rig is valid")
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn patterns(rig: &Rig, n: usize, seed: u64) -> Vec<PatternPair> {
    let shape = PatternShape::new(&rig.geom, 1);
    let mut r = rng(seed);
    (0..n).map(|_| FreePatternVars::random(shape, &mut r).realize()).collect()
}

/// Uniform models of the centre pixel plus `n` candidates drawn from them.
pub fn centre_pixel(rig: &Rig, n: usize, seed: u64) -> (PixelModels, Vec<Candidate>) {
    let (w, h) = rig.resolution();
    let ray = rig.pixel_ray(w / 2, h / 2).expect("centre pixel");
    let m = init_models(0, &ray, &BrdfRanges::default(), 100, 1).expect("models");
    let mut r = rng(seed);
    let cands = (0..n).map(|_| sample_candidate(&m, &mut r)).collect();
    (m, cands)
}

/// Loss context with three sampled peaks on every pixel of the image.
pub fn loss_context(rig: &Rig, captured: &[PatternPair], seed: u64) -> LossContext {
    let (w, h) = rig.resolution();
    let mut r = rng(seed);
    let peaks: Vec<PixelPeaks> = (0..w * h)
        .map(|px| {
            let ray = rig.pixel_ray(px % w, px / w).expect("pixel ray");
            let m = init_models(px, &ray, &BrdfRanges::default(), 100, 1).expect("models");
            sample_peaks(&m, 3, &mut r)
        })
        .collect();
    LossContext::new(rig, 1, &peaks, captured)
}
