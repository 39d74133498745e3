use std::fs;
use std::path::{Path, PathBuf};

use clap::ValueEnum;
use serde::{Deserialize, Serialize};
use sl4d_core::acquire::{entropy_trace, load_checkpoint, run_acquisition, CaptureAdapter, Checkpoint, SimulatedCapture};
use sl4d_core::finetune::{finetune, init_recon, load_recon, relight, save_recon, FinetuneLevel, LevelLog};
use sl4d_core::io::{write_png_gray, write_png_image};
use sl4d_core::metrics::{depth_metrics, image_metrics};
use sl4d_core::render::render_scene;
use sl4d_core::rng::{stream, SeedTree};
use sl4d_core::scene::{gen_scene, load_scene, save_scene};
use sl4d_core::{
    AcquisitionState, DepthReport, FreePatternVars, ImageReport, NoiseModel, PatternPair, PatternShape, ReconMaps, Rig,
    SceneTruth,
};

use crate::config::RunConfig;
use crate::error::{usage, CliResult, InputContext};
use crate::plot::line_plot;

/// Output directory layout under `RunConfig::out`.
pub struct Layout {
    pub root: PathBuf,
}

impl Layout {
    pub fn new(cfg: &RunConfig) -> Self {
        Self { root: cfg.out.clone() }
    }

    pub fn scene(&self, level: usize) -> PathBuf {
        if level == 0 {
            self.root.join("scene")
        } else {
            self.root.join(format!("scene-l{level}"))
        }
    }

    pub fn acquire(&self) -> PathBuf {
        self.root.join("acquire")
    }

    pub fn recon(&self) -> PathBuf {
        self.root.join("recon")
    }

    pub fn recon_init(&self) -> PathBuf {
        self.root.join("recon-init")
    }

    pub fn eval(&self) -> PathBuf {
        self.root.join("eval")
    }

    pub fn ablate(&self) -> PathBuf {
        self.root.join("ablate")
    }
}

fn fresh_dir(dir: &Path) -> CliResult<()> {
    if dir.exists() {
        fs::remove_dir_all(dir)?;
    }
    fs::create_dir_all(dir)?;
    Ok(())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult<()> {
    fs::write(path, serde_json::to_string_pretty(value).map_err(anyhow::Error::from)?)?;
    Ok(())
}

pub fn make_scene(cfg: &RunConfig, rig: &Rig) -> CliResult<SceneTruth> {
    let mut rng = SeedTree::new(cfg.scene_seed()).rng(stream::SCENE, 0, 0);
    Ok(gen_scene(cfg.scene.kind, rig, cfg.scene.channels, &mut rng)?)
}

fn read_scene(layout: &Layout, level: usize, rig: &Rig) -> CliResult<SceneTruth> {
    let dir = layout.scene(level);
    if !dir.join("manifest.json").exists() {
        return Err(usage(format!("no scene at {}; run scene-gen first", dir.display())));
    }
    let scene = load_scene(&dir).input("scene")?;
    if scene.rig_hash != rig.hash() {
        return Err(usage(format!("scene at {} was generated for a different rig", dir.display())));
    }
    Ok(scene)
}

pub fn holdout_patterns(cfg: &RunConfig, rig: &Rig) -> Vec<PatternPair> {
    let shape = PatternShape::new(&rig.geom, cfg.scene.channels);
    let seeds = SeedTree::new(cfg.seed);
    (0..cfg.holdout)
        .map(|j| {
            FreePatternVars::random(shape, &mut seeds.rng(stream::HOLDOUT, j as u64, 0))
                .realize()
                .to_display_precision()
        })
        .collect()
}

/// Level 0 reuses the acquisition's captures; finer levels capture the same
/// patterns again with their own noise stream. `fine[k - 1]` is the scene at
/// `rigs[k]`.
fn finetune_levels(
    cfg: &RunConfig,
    state: &AcquisitionState,
    rigs: &[Rig],
    fine: &[SceneTruth],
) -> CliResult<Vec<FinetuneLevel>> {
    let mut levels = vec![FinetuneLevel {
        rig: rigs[0].clone(),
        images: state.images.clone(),
        valid: state.valid_mask(),
    }];
    for (k, scene) in fine.iter().enumerate().map(|(i, s)| (i + 1, s)) {
        let mut cap = SimulatedCapture::new(&rigs[k], scene, cfg.noise, cfg.seed).with_level(k as u64);
        let images = state.patterns.iter().map(|p| cap.capture(p)).collect::<Result<Vec<_>, _>>()?;
        levels.push(FinetuneLevel {
            rig: rigs[k].clone(),
            images,
            valid: scene.valid_mask(),
        });
    }
    Ok(levels)
}

pub fn rigs(cfg: &RunConfig) -> CliResult<Vec<Rig>> {
    (0..cfg.levels().len()).map(|k| cfg.rig(k)).collect()
}

pub fn cmd_scene_gen(cfg: &RunConfig) -> CliResult<()> {
    let layout = Layout::new(cfg);
    for (k, rig) in rigs(cfg)?.iter().enumerate() {
        let scene = make_scene(cfg, rig)?;
        let dir = layout.scene(k);
        fresh_dir(&dir)?;
        save_scene(&dir, &scene)?;
        let depth = scene.depth_f64();
        let valid = (0..scene.len()).filter(|&i| scene.is_valid(i)).map(|i| depth[i]);
        let (lo, hi) = valid.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), d| (a.min(d), b.max(d)));
        write_png_gray(&dir.join("depth.png"), scene.width, scene.height, &depth, lo, hi)?;
        log::info!(
            "scene {}x{}: {} valid pixels -> {}",
            scene.width,
            scene.height,
            scene.valid_count(),
            dir.display()
        );
    }
    Ok(())
}

#[derive(Serialize)]
struct EntropyReport {
    median: Vec<f64>,
}

pub fn cmd_acquire(cfg: &RunConfig) -> CliResult<()> {
    let layout = Layout::new(cfg);
    let rig = cfg.rig(0)?;
    let scene = read_scene(&layout, 0, &rig)?;
    let dir = layout.acquire();
    fresh_dir(&dir)?;
    let ckpt = Checkpoint::create(&dir)?;
    let mut cap = SimulatedCapture::new(&rig, &scene, cfg.noise, cfg.seed);
    let state = run_acquisition(&rig, &mut cap, &cfg.acquire(), Some(&ckpt))?;
    let trace = entropy_trace(&state);
    write_json(&dir.join("entropy.json"), &EntropyReport { median: trace.median })?;
    log::info!("acquired {} patterns over {} rounds -> {}", state.patterns.len(), state.log.len(), dir.display());
    Ok(())
}

#[derive(Serialize)]
struct FinetuneReport {
    levels: Vec<LevelLog>,
}

pub fn cmd_finetune(cfg: &RunConfig) -> CliResult<()> {
    let layout = Layout::new(cfg);
    let rigs = rigs(cfg)?;
    let dir = layout.acquire();
    if !dir.join("hist").join("final.jsonl").exists() {
        return Err(usage(format!("acquisition checkpoint at {} is incomplete", dir.display())));
    }
    let state = load_checkpoint(&dir, &rigs[0], &cfg.acquire()).input("acquisition checkpoint")?;
    let fine = (1..rigs.len())
        .map(|k| read_scene(&layout, k, &rigs[k]))
        .collect::<CliResult<Vec<_>>>()?;
    let start = init_recon(&state, &rigs[0], cfg.seed)?;
    save_recon(&layout.recon_init(), &start)?;
    let levels = finetune_levels(cfg, &state, &rigs, &fine)?;
    let out = layout.recon();
    fresh_dir(&out)?;
    let (recon, logs) = finetune(&start, &state.patterns, &levels, &cfg.finetune, Some(&out))?;
    save_recon(&out, &recon)?;
    write_json(&out.join("finetune.json"), &FinetuneReport { levels: logs })?;
    log::info!("reconstruction {}x{} -> {}", recon.width, recon.height, out.display());
    Ok(())
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EvalReport {
    pub resolution: [usize; 2],
    pub depth: DepthReport,
    pub relight: Vec<ImageReport>,
    pub relight_mean: ImageReport,
}

/// Depth accuracy against the scene plus relighting under `holdout` patterns
/// compared with noiseless renders of the scene.
pub fn evaluate(recon: &ReconMaps, scene: &SceneTruth, rig: &Rig, holdout: &[PatternPair], inlier_mm: f64) -> CliResult<(EvalReport, Vec<(sl4d_core::Image, sl4d_core::Image)>)> {
    if (recon.width, recon.height, recon.channels) != (scene.width, scene.height, scene.channels) {
        return Err(usage(format!(
            "reconstruction is {}x{}x{} but the scene is {}x{}x{}",
            recon.width, recon.height, recon.channels, scene.width, scene.height, scene.channels
        )));
    }
    let mask = scene.valid_mask();
    let depth = depth_metrics(&recon.depth, &scene.depth_f64(), &mask, inlier_mm)?;
    let mut relit = Vec::new();
    let mut reports = Vec::new();
    for p in holdout {
        // a noiseless render never draws from the generator
        let gt = render_scene(rig, p, scene, &NoiseModel::noiseless(), &mut SeedTree::new(0).rng(stream::NOISE, 0, 0))?;
        let img = relight(recon, rig, p)?;
        reports.push(image_metrics(&img, &gt, &mask)?);
        relit.push((img, gt));
    }
    let n = reports.len() as f64;
    let relight_mean = ImageReport {
        psnr: reports.iter().map(|r| r.psnr).sum::<f64>() / n,
        ssim: reports.iter().map(|r| r.ssim).sum::<f64>() / n,
    };
    Ok((
        EvalReport {
            resolution: [scene.width, scene.height],
            depth,
            relight: reports,
            relight_mean,
        },
        relit,
    ))
}

pub fn cmd_eval(cfg: &RunConfig) -> CliResult<EvalReport> {
    let layout = Layout::new(cfg);
    let last = cfg.levels().len() - 1;
    let rig = cfg.rig(last)?;
    let scene = read_scene(&layout, last, &rig)?;
    let rdir = layout.recon();
    if !rdir.join("manifest.json").exists() {
        return Err(usage(format!("no reconstruction at {}; run finetune first", rdir.display())));
    }
    let recon = load_recon(&rdir).input("reconstruction")?;
    let holdout = holdout_patterns(cfg, &rig);
    let (report, images) = evaluate(&recon, &scene, &rig, &holdout, cfg.inlier_mm)?;
    let dir = layout.eval();
    fresh_dir(&dir)?;
    write_json(&dir.join("report.json"), &report)?;
    let err: Vec<f64> = (0..scene.len())
        .map(|i| if scene.is_valid(i) { (recon.depth[i] - scene.depth[i] as f64).abs() * 1e3 } else { 0.0 })
        .collect();
    write_png_gray(&dir.join("depth_error.png"), scene.width, scene.height, &err, 0.0, cfg.inlier_mm)?;
    for (j, (img, gt)) in images.iter().enumerate() {
        write_png_image(&dir.join(format!("relight{j:02}.png")), img)?;
        write_png_image(&dir.join(format!("truth{j:02}.png")), gt)?;
    }
    println!("{}", serde_json::to_string(&report).map_err(anyhow::Error::from)?);
    Ok(report)
}

/// Acquisition, initial reconstruction and fine-tuning fully in memory.
pub fn run_pipeline(cfg: &RunConfig) -> CliResult<DepthReport> {
    let rigs = rigs(cfg)?;
    let scenes = rigs.iter().map(|r| make_scene(cfg, r)).collect::<CliResult<Vec<_>>>()?;
    let mut cap = SimulatedCapture::new(&rigs[0], &scenes[0], cfg.noise, cfg.seed);
    let state = run_acquisition(&rigs[0], &mut cap, &cfg.acquire(), None)?;
    let start = init_recon(&state, &rigs[0], cfg.seed)?;
    let levels = finetune_levels(cfg, &state, &rigs, &scenes[1..])?;
    let (recon, _) = finetune(&start, &state.patterns, &levels, &cfg.finetune, None)?;
    let scene = scenes.last().expect("at least one level");
    Ok(depth_metrics(&recon.depth, &scene.depth_f64(), &scene.valid_mask(), cfg.inlier_mm)?)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
#[value(rename_all = "snake_case")]
pub enum Axis {
    Budget,
    NSample,
    NBatch,
    NPeak,
    NBin,
    Resolution,
}

impl Axis {
    fn name(self) -> &'static str {
        match self {
            Axis::Budget => "budget",
            Axis::NSample => "n_sample",
            Axis::NBatch => "n_batch",
            Axis::NPeak => "n_peak",
            Axis::NBin => "n_bin",
            Axis::Resolution => "resolution",
        }
    }

    /// `cfg` with this axis set to `value`.
    pub fn apply(self, cfg: &RunConfig, value: &str) -> CliResult<RunConfig> {
        let bad = || usage(format!("invalid {} value {value:?}", self.name()));
        let int = || value.parse::<usize>().map_err(|_| bad());
        let mut c = cfg.clone();
        match self {
            Axis::Budget => c.budget = int()?,
            Axis::NSample => c.n_sample = int()?,
            Axis::NBatch => c.n_batch = int()?,
            Axis::NPeak => c.n_peak = int()?,
            Axis::NBin => c.n_bin = int()?,
            Axis::Resolution => {
                c.resolution = match value.split_once('x') {
                    Some((w, h)) => [w.parse().map_err(|_| bad())?, h.parse().map_err(|_| bad())?],
                    None => [int()?; 2],
                };
                c.target_resolution = None;
            }
        }
        c.validate()?;
        Ok(c)
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct AblateRow {
    pub axis: String,
    pub value: String,
    pub seed: Option<u64>,
    pub rmse: f64,
    pub inlier_pct: f64,
    pub rmse_inliers: f64,
    pub count: usize,
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// One summary row per value holding the median over seeds.
pub fn cmd_ablate(cfg: &RunConfig, axis: Axis, values: &[String], seeds: &[u64]) -> CliResult<Vec<AblateRow>> {
    if values.is_empty() || seeds.is_empty() {
        return Err(usage("ablate needs at least one value and one seed"));
    }
    let variants = values.iter().map(|v| axis.apply(cfg, v)).collect::<CliResult<Vec<_>>>()?;
    let dir = Layout::new(cfg).ablate();
    fresh_dir(&dir)?;
    let mut runs = csv::Writer::from_path(dir.join("runs.csv")).map_err(anyhow::Error::from)?;
    let mut summary = Vec::new();
    for (value, variant) in values.iter().zip(&variants) {
        let mut reports = Vec::new();
        for &seed in seeds {
            let c = RunConfig { seed, ..variant.clone() };
            let r = run_pipeline(&c)?;
            log::info!("{}={value} seed {seed}: rmse {:.3} mm, inliers {:.1}%", axis.name(), r.rmse, r.inlier_pct);
            runs.serialize(row(axis, value, Some(seed), &r)).map_err(anyhow::Error::from)?;
            runs.flush()?;
            reports.push(r);
        }
        let med = DepthReport {
            rmse: median(reports.iter().map(|r| r.rmse).collect()),
            inlier_pct: median(reports.iter().map(|r| r.inlier_pct).collect()),
            rmse_inliers: median(reports.iter().map(|r| r.rmse_inliers).collect()),
            threshold: cfg.inlier_mm,
            count: reports[0].count,
        };
        summary.push(row(axis, value, None, &med));
    }
    let mut w = csv::Writer::from_path(dir.join("ablate.csv")).map_err(anyhow::Error::from)?;
    for r in &summary {
        w.serialize(r).map_err(anyhow::Error::from)?;
    }
    w.flush()?;
    let xs: Vec<f64> = (0..summary.len()).map(|i| i as f64).collect();
    line_plot(&dir.join("rmse.png"), &xs, &summary.iter().map(|r| r.rmse).collect::<Vec<_>>())?;
    line_plot(&dir.join("inlier.png"), &xs, &summary.iter().map(|r| r.inlier_pct).collect::<Vec<_>>())?;
    Ok(summary)
}

fn row(axis: Axis, value: &str, seed: Option<u64>, r: &DepthReport) -> AblateRow {
    AblateRow {
        axis: axis.name().into(),
        value: value.into(),
        seed,
        rmse: r.rmse,
        inlier_pct: r.inlier_pct,
        rmse_inliers: r.rmse_inliers,
        count: r.count,
    }
}
