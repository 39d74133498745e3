use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sl4d_core::patternopt::OptimConfig;
use sl4d_core::prob::BrdfRanges;
use sl4d_core::scene::SceneKind;
use sl4d_core::{AcquireConfig, FinetuneConfig, LedModel, NoiseModel, Rig, RigGeometry};

use crate::error::{usage, CliResult};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneSection {
    pub kind: SceneKind,
    pub channels: usize,
    /// Defaults to the run seed.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

impl Default for SceneSection {
    fn default() -> Self {
        Self {
            kind: SceneKind::Wavy,
            channels: 1,
            seed: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerSection {
    pub iters: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
}

impl Default for OptimizerSection {
    fn default() -> Self {
        let d = OptimConfig::default();
        Self {
            iters: d.iters,
            learning_rate: d.learning_rate,
            weight_decay: d.weight_decay,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub out: PathBuf,
    pub budget: usize,
    pub n_batch: usize,
    pub n_sample: usize,
    pub n_bin: usize,
    pub n_peak: usize,
    pub adaptive: bool,
    /// Working resolution `[w, h]` used for acquisition.
    pub resolution: [usize; 2],
    /// Finest fine-tuning resolution; must be the working resolution times a
    /// power of two.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub target_resolution: Option<[usize; 2]>,
    /// Number of never-used patterns for relighting evaluation.
    pub holdout: usize,
    pub inlier_mm: f64,
    /// Defaults to the desk rig.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rig: Option<RigGeometry>,
    pub led: LedModel,
    pub scene: SceneSection,
    pub noise: NoiseModel,
    pub optimizer: OptimizerSection,
    pub finetune: FinetuneConfig,
    pub ranges: BrdfRanges,
}

impl Default for RunConfig {
    fn default() -> Self {
        let a = AcquireConfig::default();
        let o = OptimConfig::default();
        Self {
            seed: 0,
            out: PathBuf::from("out"),
            budget: a.budget,
            n_batch: o.n_batch,
            n_sample: a.n_sample,
            n_bin: a.n_bin,
            n_peak: o.n_peak,
            adaptive: true,
            resolution: [16, 16],
            target_resolution: None,
            holdout: 3,
            inlier_mm: sl4d_core::metrics::DEFAULT_INLIER_MM,
            rig: None,
            led: LedModel::default(),
            scene: SceneSection::default(),
            noise: NoiseModel::default(),
            optimizer: OptimizerSection::default(),
            finetune: FinetuneConfig::default(),
            ranges: BrdfRanges::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> CliResult<Self> {
        let text = fs::read_to_string(path).map_err(|e| usage(format!("cannot read config {}: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| usage(format!("config {}: {e}", path.display())))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn scene_seed(&self) -> u64 {
        self.scene.seed.unwrap_or(self.seed)
    }

    pub fn acquire(&self) -> AcquireConfig {
        AcquireConfig {
            budget: self.budget,
            n_sample: self.n_sample,
            n_bin: self.n_bin,
            channels: self.scene.channels,
            optim: OptimConfig {
                n_batch: self.n_batch,
                n_peak: self.n_peak,
                iters: self.optimizer.iters,
                learning_rate: self.optimizer.learning_rate,
                weight_decay: self.optimizer.weight_decay,
            },
            ranges: self.ranges,
            adaptive: self.adaptive,
            seed: self.seed,
        }
    }

    /// Camera resolutions of the fine-tuning levels, coarsest first.
    pub fn levels(&self) -> Vec<[usize; 2]> {
        let [w, h] = self.resolution;
        let mut out = vec![[w, h]];
        if let Some([tw, th]) = self.target_resolution {
            let mut k = 1;
            while w << k <= tw && h << k <= th {
                out.push([w << k, h << k]);
                k += 1;
            }
        }
        out
    }

    pub fn rig(&self, level: usize) -> CliResult<Rig> {
        let [w, h] = self.levels().get(level).copied().ok_or_else(|| usage(format!("no level {level}")))?;
        let geom = match &self.rig {
            Some(g) => g.with_resolution(w, h),
            None => RigGeometry::desk(w).with_resolution(w, h),
        };
        Rig::new(geom, self.led.clone()).map_err(|e| usage(format!("rig: {e}")))
    }

    /// Every constraint is checked here so commands fail before computing.
    pub fn validate(&self) -> CliResult<()> {
        let [w, h] = self.resolution;
        if w == 0 || h == 0 {
            return Err(usage("resolution must be positive"));
        }
        if let Some([tw, th]) = self.target_resolution {
            let ok = tw % w == 0
                && th % h == 0
                && tw / w == th / h
                && (tw / w).is_power_of_two();
            if !ok {
                return Err(usage(format!(
                    "target_resolution {tw}x{th} is not {w}x{h} scaled by a power of two"
                )));
            }
        }
        if self.holdout == 0 {
            return Err(usage("holdout must be at least 1"));
        }
        if !(self.inlier_mm > 0.0) {
            return Err(usage("inlier_mm must be positive"));
        }
        if !(self.noise.level >= 0.0) || self.noise.quantize_bits == Some(0) {
            return Err(usage("noise level must be non-negative and quantize_bits positive"));
        }
        if self.finetune.iters == 0 || !(self.finetune.adam.learning_rate > 0.0) {
            return Err(usage("finetune needs positive iters and learning rate"));
        }
        self.acquire().validate().map_err(|e| usage(e.to_string()))?;
        for level in 0..self.levels().len() {
            self.rig(level)?;
        }
        Ok(())
    }
}
