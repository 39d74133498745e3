mod common;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use common::{brute_force_update, oracle_zncc, setup, simulate};
use sl4d_core::prob::{map_estimate, sample_candidate, update_models, zncc};
use sl4d_core::Candidate;

#[test]
fn update_matches_brute_force_oracle_on_one_pixel() {
    let dev = brute_force_update(3, 3);
    assert!(dev.scores < 1e-12 && dev.pmf < 1e-12 && dev.normalization < 1e-9, "{dev:?}");
}

#[test]
fn zncc_agrees_with_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..200 {
        let n = rng.random_range(2..40);
        let a: Vec<f64> = (0..n).map(|_| rng.random_range(-3.0..3.0)).collect();
        let b: Vec<f64> = (0..n).map(|_| rng.random_range(-3.0..3.0)).collect();
        assert!((zncc(&a, &b).unwrap() - oracle_zncc(&a, &b)).abs() < 1e-12);
    }
}

#[test]
fn map_depth_of_noiseless_pixel_after_thirty_patterns() {
    let (rig, mut m, truth, pats) = setup(7, 30);
    m.measurements = simulate(&rig, &m, &truth, &pats);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..10 {
        let cands: Vec<Candidate> = (0..600).map(|_| sample_candidate(&m, &mut rng)).collect();
        let sims: Vec<Vec<f64>> = cands.iter().map(|c| simulate(&rig, &m, c, &pats)).collect();
        update_models(&mut m, &sims, &cands).unwrap();
    }
    let est = map_estimate(&m, &rig, &pats, &mut rng).unwrap();
    let err = (est.depth - truth.depth).abs();
    assert!(err < 0.3e-3, "MAP depth off by {:.3} mm", err * 1e3);
}
