//! The adaptive capture loop: update the per-pixel models from what has been
//! captured, pick candidate peaks, optimize the next pattern batch, capture it.

use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{domain, io_err, Error, Result};
use crate::io::{load_image, load_pattern, read_array, save_image, save_pattern, write_array, write_pattern_pngs, write_png_gray, Sidecar};
use crate::patternopt::{detect_peaks, optimize_next_patterns, sample_peaks, LossContext, OptimConfig, PixelPeaks};
use crate::patterns::{FreePatternVars, PatternPair, PatternShape};
use crate::prob::{
    dump_jsonl, init_models, sample_candidate, update_models, BrdfParam, BrdfRanges, PixelModels, DEFAULT_N_BIN,
    DEFAULT_N_SAMPLE,
};
use crate::render::{render_scene, Image};
use crate::rig::Rig;
use crate::rng::{stream, SeedTree};
use crate::scene::{NoiseModel, SceneTruth};

const UPDATE_CHUNK: usize = 64;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AcquireConfig {
    /// Total number of patterns to capture.
    pub budget: usize,
    pub n_sample: usize,
    pub n_bin: usize,
    pub channels: usize,
    pub optim: OptimConfig,
    pub ranges: BrdfRanges,
    /// When false, every batch is the seeded random initialization that the
    /// adaptive loop would have optimized.
    pub adaptive: bool,
    pub seed: u64,
}

impl Default for AcquireConfig {
    fn default() -> Self {
        Self {
            budget: 72,
            n_sample: DEFAULT_N_SAMPLE,
            n_bin: DEFAULT_N_BIN,
            channels: 1,
            optim: OptimConfig::default(),
            ranges: BrdfRanges::default(),
            adaptive: true,
            seed: 0,
        }
    }
}

impl AcquireConfig {
    pub fn validate(&self) -> Result<()> {
        self.optim.validate()?;
        if self.budget == 0 || self.budget % self.optim.n_batch != 0 {
            return Err(Error::Config(format!(
                "budget {} must be a positive multiple of n_batch {}",
                self.budget, self.optim.n_batch
            )));
        }
        if self.n_sample == 0 || self.n_bin == 0 {
            return Err(Error::Config("n_sample and n_bin must be positive".into()));
        }
        if self.channels == 0 || self.channels > crate::patterns::MAX_CHANNELS {
            return Err(Error::Config(format!("channels must be 1..=3, got {}", self.channels)));
        }
        let r = &self.ranges;
        let ok = |(a, b): (f64, f64), lo: f64, hi: f64| a < b && a >= lo && b <= hi;
        if !ok(r.diffuse, 0.0, 1.0)
            || !ok(r.specular, 0.0, 1.0)
            || !ok(r.roughness, crate::render::ROUGHNESS_MIN, crate::render::ROUGHNESS_MAX)
            || !(r.normal_max_deg > 0.0 && r.normal_max_deg < 90.0)
        {
            return Err(Error::Config("BRDF ranges must lie inside the parameter boxes".into()));
        }
        Ok(())
    }

    pub fn rounds(&self) -> usize {
        self.budget / self.optim.n_batch
    }
}

/// Source of photographs under given patterns.
pub trait CaptureAdapter {
    fn capture(&mut self, pair: &PatternPair) -> Result<Image>;
    /// Foreground pixels; the rest never enter the models.
    fn foreground(&self) -> Vec<bool>;
}

/// Renders a ground-truth scene with seeded noise.
pub struct SimulatedCapture<'a> {
    rig: &'a Rig,
    scene: &'a SceneTruth,
    noise: NoiseModel,
    seeds: SeedTree,
    count: u64,
    level: u64,
}

impl<'a> SimulatedCapture<'a> {
    pub fn new(rig: &'a Rig, scene: &'a SceneTruth, noise: NoiseModel, seed: u64) -> Self {
        Self {
            rig,
            scene,
            noise,
            seeds: SeedTree::new(seed),
            count: 0,
            level: 0,
        }
    }

    /// Separate noise stream for re-capturing the same patterns at another
    /// resolution level.
    pub fn with_level(mut self, level: u64) -> Self {
        self.level = level;
        self
    }
}

impl CaptureAdapter for SimulatedCapture<'_> {
    fn capture(&mut self, pair: &PatternPair) -> Result<Image> {
        let mut rng = self.seeds.rng(stream::NOISE, self.count, self.level);
        self.count += 1;
        render_scene(self.rig, pair, self.scene, &self.noise, &mut rng)
    }

    fn foreground(&self) -> Vec<bool> {
        self.scene.valid_mask()
    }
}

/// Plays back the captures of an earlier run, in order.
pub struct ReplayCapture {
    dir: PathBuf,
    next: usize,
    foreground: Vec<bool>,
}

impl ReplayCapture {
    /// `dir` is a checkpoint directory written by [`run_acquisition`].
    pub fn open(dir: &Path) -> Result<Self> {
        let (_, fg) = read_array(&dir.join("alpha"))?;
        Ok(Self {
            dir: dir.to_owned(),
            next: 0,
            foreground: fg.iter().map(|a| *a > 0.0).collect(),
        })
    }
}

impl CaptureAdapter for ReplayCapture {
    fn capture(&mut self, _pair: &PatternPair) -> Result<Image> {
        let stem = self.dir.join("captures").join(format!("c{:04}", self.next));
        self.next += 1;
        load_image(&stem).map_err(|e| Error::Capture(format!("replay {}: {e}", stem.display())))
    }

    fn foreground(&self) -> Vec<bool> {
        self.foreground.clone()
    }
}

/// Per-round record, also written to `log.jsonl`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundLog {
    pub round: usize,
    pub patterns_before: usize,
    pub active_pixels: usize,
    pub loss_initial: Option<f64>,
    pub loss_final: Option<f64>,
    pub loss_curve: Vec<f64>,
    pub median_entropy: f64,
    pub update_seconds: f64,
    pub optimize_seconds: f64,
    pub seconds: f64,
}

#[derive(Clone, Debug)]
pub struct AcquisitionState {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    /// Row-major; `None` for background pixels and rays that miss the volume.
    pub models: Vec<Option<PixelModels>>,
    pub patterns: Vec<PatternPair>,
    pub images: Vec<Image>,
    pub round: usize,
    /// Per-pixel depth entropy (0 for invalid pixels) after each model
    /// update, starting with the uniform models.
    pub entropy: Vec<Vec<f64>>,
    pub log: Vec<RoundLog>,
}

impl AcquisitionState {
    pub fn new(rig: &Rig, foreground: &[bool], cfg: &AcquireConfig) -> Result<Self> {
        let (w, h) = rig.resolution();
        if foreground.len() != w * h {
            return Err(domain(format!("{} foreground flags for a {w}x{h} camera", foreground.len())));
        }
        let models = (0..w * h)
            .map(|i| {
                if !foreground[i] {
                    return Ok(None);
                }
                match rig.pixel_ray(i % w, i / w) {
                    Some(ray) => init_models(i, &ray, &cfg.ranges, cfg.n_bin, cfg.channels).map(Some),
                    None => Ok(None),
                }
            })
            .collect::<Result<Vec<_>>>()?;
        let mut s = Self {
            width: w,
            height: h,
            channels: cfg.channels,
            models,
            patterns: Vec::new(),
            images: Vec::new(),
            round: 0,
            entropy: Vec::new(),
            log: Vec::new(),
        };
        s.record_entropy();
        Ok(s)
    }

    pub fn valid_count(&self) -> usize {
        self.models.iter().flatten().count()
    }

    pub fn valid_mask(&self) -> Vec<bool> {
        self.models.iter().map(Option::is_some).collect()
    }

    fn record_entropy(&mut self) {
        self.entropy.push(
            self.models
                .iter()
                .map(|m| m.as_ref().map_or(0.0, |m| m.depth.entropy()))
                .collect(),
        );
    }

    fn append(&mut self, pair: PatternPair, img: Image) -> Result<()> {
        if (img.width, img.height, img.channels) != (self.width, self.height, self.channels) {
            return Err(Error::Capture(format!(
                "captured {}x{}x{} image, expected {}x{}x{}",
                img.width, img.height, img.channels, self.width, self.height, self.channels
            )));
        }
        for m in self.models.iter_mut().flatten() {
            m.measurements.extend(img.pixel(m.pixel).iter().map(|v| *v as f64));
        }
        self.patterns.push(pair);
        self.images.push(img);
        Ok(())
    }

    /// Monte-Carlo update of every valid pixel under the captured patterns.
    pub fn update(&mut self, rig: &Rig, n_sample: usize, seeds: &SeedTree, round: usize) -> Result<()> {
        if self.patterns.is_empty() {
            return Ok(());
        }
        let patterns = &self.patterns;
        let channels = self.channels;
        self.models.par_iter_mut().flatten().try_for_each(|m| {
            let mut rng = seeds.rng(stream::SAMPLE, round as u64, m.pixel as u64);
            let cands: Vec<_> = (0..n_sample).map(|_| sample_candidate(m, &mut rng)).collect();
            let mut sims: Vec<Vec<f64>> = Vec::with_capacity(cands.len());
            // pattern-major within a chunk keeps each mask's touched region in cache
            for chunk in cands.chunks(UPDATE_CHUNK) {
                let trs: Vec<_> = chunk.iter().map(|c| c.transport(rig, &m.ray, channels)).collect();
                let start = sims.len();
                sims.extend(chunk.iter().map(|_| Vec::with_capacity(patterns.len() * channels)));
                for p in patterns {
                    for (t, v) in trs.iter().zip(&mut sims[start..]) {
                        v.extend_from_slice(&t.eval(p)[..channels]);
                    }
                }
            }
            update_models(m, &sims, &cands)
        })?;
        self.record_entropy();
        Ok(())
    }

    fn peaks(&self, n_peak: usize, seeds: &SeedTree, round: usize) -> Vec<PixelPeaks> {
        self.models
            .par_iter()
            .flatten()
            .map(|m| {
                let mut rng = seeds.rng(stream::PEAKS, round as u64, m.pixel as u64);
                if m.measurements.is_empty() {
                    sample_peaks(m, n_peak, &mut rng)
                } else {
                    detect_peaks(m, n_peak, &mut rng)
                }
            })
            .collect()
    }
}

/// Median over valid pixels of each recorded depth-entropy map.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EntropyTrace {
    pub median: Vec<f64>,
    pub images: Vec<Vec<f64>>,
}

pub fn entropy_trace(state: &AcquisitionState) -> EntropyTrace {
    let valid = state.valid_mask();
    EntropyTrace {
        median: state.entropy.iter().map(|e| median_valid(e, &valid)).collect(),
        images: state.entropy.clone(),
    }
}

fn median_valid(values: &[f64], valid: &[bool]) -> f64 {
    let mut v: Vec<f64> = values.iter().zip(valid).filter(|(_, ok)| **ok).map(|(x, _)| *x).collect();
    if v.is_empty() {
        return f64::NAN;
    }
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Checkpoint directory layout: `patterns/`, `captures/`, `hist/`,
/// `entropy/`, `alpha` and `log.jsonl`.
pub struct Checkpoint {
    dir: PathBuf,
}

impl Checkpoint {
    pub fn create(dir: &Path) -> Result<Self> {
        for sub in ["patterns", "captures", "hist", "entropy"] {
            fs::create_dir_all(dir.join(sub)).map_err(io_err(dir.join(sub)))?;
        }
        let log = dir.join("log.jsonl");
        File::create(&log).map_err(io_err(&log))?;
        Ok(Self { dir: dir.to_owned() })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    fn write_foreground(&self, fg: &[bool], w: usize, h: usize) -> Result<()> {
        let header = Sidecar {
            shape: vec![h, w],
            channels: 1,
            kind: "alpha".into(),
        };
        let data: Vec<f32> = fg.iter().map(|b| if *b { 1.0 } else { 0.0 }).collect();
        write_array(&self.dir.join("alpha"), &header, &data)
    }

    fn write_capture(&self, j: usize, pair: &PatternPair, img: &Image) -> Result<()> {
        let p = self.dir.join("patterns").join(format!("p{j:04}"));
        save_pattern(&p, pair)?;
        write_pattern_pngs(&p, pair)?;
        let c = self.dir.join("captures").join(format!("c{j:04}"));
        save_image(&c, img)?;
        crate::io::write_png_image(&with_png(&c), img)
    }

    fn write_pattern(&self, j: usize, pair: &PatternPair) -> Result<()> {
        let p = self.dir.join("patterns").join(format!("p{j:04}"));
        save_pattern(&p, pair)?;
        write_pattern_pngs(&p, pair)
    }

    fn write_hist(&self, name: &str, state: &AcquisitionState) -> Result<()> {
        let path = self.dir.join("hist").join(format!("{name}.jsonl"));
        let f = File::create(&path).map_err(io_err(&path))?;
        let mut w = BufWriter::new(f);
        dump_jsonl(state.models.iter().flatten(), &mut w).map_err(io_err(&path))?;
        w.flush().map_err(io_err(&path))
    }

    fn write_entropy(&self, idx: usize, state: &AcquisitionState) -> Result<()> {
        let e = &state.entropy[idx];
        let path = self.dir.join("entropy").join(format!("e{idx:03}.png"));
        let hi = (state.models.iter().flatten().next().map_or(100, |m| m.depth.n_bin()) as f64).ln();
        write_png_gray(&path, state.width, state.height, e, 0.0, hi)
    }

    fn append_log(&self, entry: &RoundLog) -> Result<()> {
        let path = self.dir.join("log.jsonl");
        let mut f = OpenOptions::new().append(true).open(&path).map_err(io_err(&path))?;
        let line = serde_json::to_string(entry)?;
        writeln!(f, "{line}").map_err(io_err(&path))
    }
}

fn with_png(stem: &Path) -> PathBuf {
    let mut s = stem.as_os_str().to_owned();
    s.push(".png");
    PathBuf::from(s)
}

fn init_vars(shape: PatternShape, seeds: &SeedTree, stream_id: u64, round: usize, n: usize) -> Vec<FreePatternVars> {
    (0..n)
        .map(|j| FreePatternVars::random(shape, &mut seeds.rng(stream_id, round as u64, j as u64)))
        .collect()
}

/// Runs `cfg.rounds()` rounds of update → peaks → optimize → capture, then a
/// final model update with every capture. With a checkpoint, every pattern
/// and capture is written as soon as it exists and histograms are dumped
/// per round; a capture failure leaves the checkpoint consistent and is
/// returned as the error.
pub fn run_acquisition(
    rig: &Rig,
    adapter: &mut dyn CaptureAdapter,
    cfg: &AcquireConfig,
    checkpoint: Option<&Checkpoint>,
) -> Result<AcquisitionState> {
    cfg.validate()?;
    let seeds = SeedTree::new(cfg.seed);
    let fg = adapter.foreground();
    let mut state = AcquisitionState::new(rig, &fg, cfg)?;
    if let Some(ck) = checkpoint {
        ck.write_foreground(&state.valid_mask(), state.width, state.height)?;
        ck.write_entropy(0, &state)?;
    }
    let shape = PatternShape::new(&rig.geom, cfg.channels);
    let n_batch = cfg.optim.n_batch;
    for round in 0..cfg.rounds() {
        let t0 = Instant::now();
        state.round = round;
        state.update(rig, cfg.n_sample, &seeds, round)?;
        let update_seconds = t0.elapsed().as_secs_f64();
        let (batch, active, curve) = if cfg.adaptive {
            let peaks = state.peaks(cfg.optim.n_peak, &seeds, round);
            let ctx = LossContext::new(rig, cfg.channels, &peaks, &state.patterns);
            let init = init_vars(shape, &seeds, stream::PATTERN_INIT, round, n_batch);
            if ctx.active_pixels() == 0 {
                log::warn!("round {round}: no pixel has two peaks, capturing the initial patterns");
                (init.iter().map(FreePatternVars::realize).collect(), 0, Vec::new())
            } else {
                let out = optimize_next_patterns(&ctx, &cfg.optim, init)?;
                (out.patterns, ctx.active_pixels(), out.loss_curve)
            }
        } else {
            // the adaptive loop's starting patterns, so the two modes differ
            // only where optimization moved them
            let init = init_vars(shape, &seeds, stream::PATTERN_INIT, round, n_batch);
            (init.iter().map(FreePatternVars::realize).collect(), 0, Vec::new())
        };
        let optimize_seconds = t0.elapsed().as_secs_f64() - update_seconds;
        let patterns_before = state.patterns.len();
        for pair in batch {
            let pair = pair.to_display_precision();
            let j = state.patterns.len();
            let img = match adapter.capture(&pair) {
                Ok(img) => img,
                Err(e) => {
                    if let Some(ck) = checkpoint {
                        ck.write_pattern(j, &pair)?;
                        ck.write_hist("failed", &state)?;
                    }
                    return Err(Error::Capture(format!("pattern {j}: {e}")));
                }
            };
            if let Some(ck) = checkpoint {
                ck.write_capture(j, &pair, &img)?;
            }
            state.append(pair, img)?;
        }
        let entry = RoundLog {
            round,
            patterns_before,
            active_pixels: active,
            loss_initial: curve.first().copied(),
            loss_final: curve.iter().copied().reduce(f64::min),
            loss_curve: curve,
            median_entropy: median_valid(state.entropy.last().expect("entropy recorded"), &state.valid_mask()),
            update_seconds,
            optimize_seconds,
            seconds: t0.elapsed().as_secs_f64(),
        };
        log::info!(
            "round {round}: {} patterns, loss {:?} -> {:?}, median entropy {:.4}, {:.1}s",
            state.patterns.len(),
            entry.loss_initial,
            entry.loss_final,
            entry.median_entropy,
            entry.seconds
        );
        if let Some(ck) = checkpoint {
            ck.append_log(&entry)?;
            ck.write_hist(&format!("round_{round:03}"), &state)?;
            ck.write_entropy(state.entropy.len() - 1, &state)?;
        }
        state.log.push(entry);
    }
    state.round = cfg.rounds();
    state.update(rig, cfg.n_sample, &seeds, cfg.rounds())?;
    if let Some(ck) = checkpoint {
        ck.write_hist("final", &state)?;
        ck.write_entropy(state.entropy.len() - 1, &state)?;
    }
    Ok(state)
}

/// Rebuilds the final state of a completed checkpoint: captured patterns and
/// images, and the histograms from `hist/final.jsonl`.
pub fn load_checkpoint(dir: &Path, rig: &Rig, cfg: &AcquireConfig) -> Result<AcquisitionState> {
    let replay = ReplayCapture::open(dir)?;
    let mut state = AcquisitionState::new(rig, &replay.foreground, cfg)?;
    for j in 0..cfg.budget {
        let pair = load_pattern(&dir.join("patterns").join(format!("p{j:04}")))?;
        pair.validate(&PatternShape::new(&rig.geom, cfg.channels))?;
        let img = load_image(&dir.join("captures").join(format!("c{j:04}")))?;
        state.append(pair, img)?;
    }
    let path = dir.join("hist").join("final.jsonl");
    let f = File::open(&path).map_err(io_err(&path))?;
    let index: std::collections::HashMap<usize, usize> = state
        .models
        .iter()
        .enumerate()
        .filter_map(|(i, m)| m.as_ref().map(|_| (i, i)))
        .collect();
    let mut offset = 0u64;
    let mut seen = 0usize;
    #[derive(Deserialize)]
    struct Line {
        pixel: usize,
        kind: String,
        lo: f64,
        hi: f64,
        scores: Vec<f64>,
    }
    for line in BufReader::new(f).lines() {
        let line = line.map_err(io_err(&path))?;
        let bad = |msg: String| Error::Parse {
            path: path.clone(),
            offset,
            msg,
        };
        let l: Line = serde_json::from_str(&line).map_err(|e| bad(e.to_string()))?;
        let m = index
            .get(&l.pixel)
            .and_then(|&i| state.models[i].as_mut())
            .ok_or_else(|| bad(format!("pixel {} is not a valid pixel", l.pixel)))?;
        let h = if l.kind == "depth" {
            &mut m.depth
        } else {
            let k = BrdfParam::all(m.channels)
                .iter()
                .position(|p| p.name() == l.kind)
                .ok_or_else(|| bad(format!("unknown histogram kind {:?}", l.kind)))?;
            &mut m.brdf[k]
        };
        if l.scores.len() != h.n_bin() || (l.lo - h.lo).abs() > 1e-12 || (l.hi - h.hi).abs() > 1e-12 {
            return Err(bad(format!("histogram {} of pixel {} does not match the rig", l.kind, l.pixel)));
        }
        h.scores = l.scores;
        h.normalize();
        seen += 1;
        offset += line.len() as u64 + 1;
    }
    let expected = state.valid_count() * (1 + BrdfParam::all(cfg.channels).len());
    if seen != expected {
        return Err(Error::Parse {
            path,
            offset,
            msg: format!("{seen} histograms, expected {expected}"),
        });
    }
    state.round = cfg.rounds();
    Ok(state)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rig::{LedModel, RigGeometry};
    use crate::scene::{gen_scene, SceneKind};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny() -> (Rig, SceneTruth) {
        let geom = RigGeometry {
            mask_res_w: 64,
            mask_res_h: 64,
            ..RigGeometry::desk(4)
        };
        let rig = Rig::new(geom, LedModel::default()).unwrap();
        let scene = gen_scene(SceneKind::Plane, &rig, 1, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        (rig, scene)
    }

    fn cfg(budget: usize) -> AcquireConfig {
        AcquireConfig {
            budget,
            n_sample: 40,
            optim: OptimConfig {
                iters: 5,
                ..OptimConfig::default()
            },
            ..AcquireConfig::default()
        }
    }

    #[test]
    fn budget_must_divide_into_batches() {
        assert!(cfg(4).validate().is_err());
        assert!(cfg(6).validate().is_ok());
    }

    #[test]
    fn one_round_three_captures() {
        let (rig, scene) = tiny();
        let mut cap = SimulatedCapture::new(&rig, &scene, NoiseModel::noiseless(), 1);
        let s = run_acquisition(&rig, &mut cap, &cfg(3), None).unwrap();
        assert_eq!(s.patterns.len(), 3);
        assert_eq!(s.images.len(), 3);
        assert_eq!(s.log.len(), 1);
        for m in s.models.iter().flatten() {
            assert_eq!(m.measurements.len(), 3);
        }
        // uniform start, then the final update
        assert_eq!(s.entropy.len(), 2);
        let t = entropy_trace(&s);
        assert!((t.median[0] - 100f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn bookkeeping_per_round() {
        let (rig, scene) = tiny();
        let mut cap = SimulatedCapture::new(&rig, &scene, NoiseModel::default(), 1);
        let s = run_acquisition(&rig, &mut cap, &cfg(6), None).unwrap();
        assert_eq!(s.log.len(), 2);
        assert_eq!(s.log[1].patterns_before, 3);
        assert!(s.valid_count() > 0);
        for m in s.models.iter().flatten() {
            assert_eq!(m.measurements.len(), 6);
        }
        for (i, m) in s.models.iter().enumerate() {
            assert_eq!(m.is_some(), scene.is_valid(i));
        }
    }

    struct Failing(usize);

    impl CaptureAdapter for Failing {
        fn capture(&mut self, _: &PatternPair) -> Result<Image> {
            if self.0 == 0 {
                return Err(Error::Capture("camera unplugged".into()));
            }
            self.0 -= 1;
            Ok(Image::zeros(4, 4, 1))
        }

        fn foreground(&self) -> Vec<bool> {
            vec![true; 16]
        }
    }

    #[test]
    fn adapter_failure_aborts_with_checkpoint() {
        let (rig, _) = tiny();
        let dir = tempfile::tempdir().unwrap();
        let ck = Checkpoint::create(dir.path()).unwrap();
        let err = run_acquisition(&rig, &mut Failing(4), &cfg(6), Some(&ck)).unwrap_err();
        assert!(matches!(err, Error::Capture(_)));
        assert!(dir.path().join("captures/c0003.f32").exists());
        assert!(!dir.path().join("captures/c0004.f32").exists());
        assert!(dir.path().join("patterns/p0004_mask.f32").exists());
        assert!(dir.path().join("hist/failed.jsonl").exists());
    }

    #[test]
    fn replay_and_reload_reproduce_the_run() {
        let (rig, scene) = tiny();
        let dir = tempfile::tempdir().unwrap();
        let ck = Checkpoint::create(dir.path()).unwrap();
        let c = cfg(6);
        let mut cap = SimulatedCapture::new(&rig, &scene, NoiseModel::default(), 3);
        let a = run_acquisition(&rig, &mut cap, &c, Some(&ck)).unwrap();
        let mut replay = ReplayCapture::open(dir.path()).unwrap();
        let b = run_acquisition(&rig, &mut replay, &c, None).unwrap();
        assert_eq!(a.models, b.models);
        assert_eq!(a.patterns, b.patterns);
        let log = fs::read_to_string(dir.path().join("log.jsonl")).unwrap();
        assert_eq!(log.lines().count(), 2);
        let back = load_checkpoint(dir.path(), &rig, &c).unwrap();
        assert_eq!(back.patterns, a.patterns);
        assert_eq!(back.images, a.images);
        assert_eq!(back.models, a.models);
    }
}
