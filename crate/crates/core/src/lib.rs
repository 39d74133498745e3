//! Simulator and optimizer for adaptive 4D structured light: an LED array
//! behind an LCD mask illuminates the scene, per-pixel histogram models track
//! depth and GGX reflectance, and each new batch of light/mask patterns is
//! chosen by differentiating a candidate-classification loss.

pub mod acquire;
pub mod adam;
pub mod error;
pub mod finetune;
pub mod io;
pub mod math;
pub mod metrics;
pub mod patternopt;
pub mod patterns;
pub mod prob;
pub mod render;
pub mod rig;
pub mod rng;
pub mod scene;

pub use acquire::{AcquireConfig, AcquisitionState, CaptureAdapter};
pub use error::{Error, Result};
pub use finetune::{FinetuneConfig, ReconMaps};
pub use metrics::{DepthReport, ImageReport};
pub use patterns::{FreePatternVars, LightPattern, MaskPattern, PatternGrad, PatternPair, PatternShape};
pub use render::{Candidate, GgxParams, Image};
pub use rig::{LedModel, PixelRay, Pose, Rig, RigGeometry};
pub use scene::{NoiseModel, SceneKind, SceneTruth};
