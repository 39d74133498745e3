//! Light/mask pattern containers and the sigmoid parameterization used to
//! optimize them.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{domain, Result};
use crate::math::{sigmoid, sigmoid_prime};
use crate::rig::RigGeometry;

/// Largest supported number of color channels.
pub const MAX_CHANNELS: usize = 3;

/// Default multiplier applied to free mask variables before the sigmoid.
pub const DEFAULT_MASK_SCALE: f64 = 1e8;

/// LED intensities in `[0,1]`, indexed `led * channels + c` with
/// `led = row * led_cols + col`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LightPattern {
    pub rows: usize,
    pub cols: usize,
    pub channels: usize,
    pub values: Vec<f64>,
}

/// LCD transmittances in `[0,1]`, row-major `v * width + u`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskPattern {
    pub width: usize,
    pub height: usize,
    pub values: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PatternPair {
    pub light: LightPattern,
    pub mask: MaskPattern,
}

/// Shape shared by every pattern of a rig.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PatternShape {
    pub led_rows: usize,
    pub led_cols: usize,
    pub channels: usize,
    pub mask_w: usize,
    pub mask_h: usize,
}

impl PatternShape {
    pub fn new(geom: &RigGeometry, channels: usize) -> Self {
        Self {
            led_rows: geom.led_rows,
            led_cols: geom.led_cols,
            channels,
            mask_w: geom.mask_res_w,
            mask_h: geom.mask_res_h,
        }
    }

    pub fn light_len(&self) -> usize {
        self.led_rows * self.led_cols * self.channels
    }

    pub fn mask_len(&self) -> usize {
        self.mask_w * self.mask_h
    }
}

impl LightPattern {
    pub fn filled(shape: &PatternShape, v: f64) -> Self {
        Self {
            rows: shape.led_rows,
            cols: shape.led_cols,
            channels: shape.channels,
            values: vec![v; shape.light_len()],
        }
    }

    #[inline]
    pub fn get(&self, led: usize, c: usize) -> f64 {
        self.values[led * self.channels + c]
    }
}

impl MaskPattern {
    pub fn filled(shape: &PatternShape, v: f64) -> Self {
        Self {
            width: shape.mask_w,
            height: shape.mask_h,
            values: vec![v; shape.mask_len()],
        }
    }
}

impl PatternPair {
    pub fn filled(shape: &PatternShape, light: f64, mask: f64) -> Self {
        Self {
            light: LightPattern::filled(shape, light),
            mask: MaskPattern::filled(shape, mask),
        }
    }

    pub fn shape(&self) -> PatternShape {
        PatternShape {
            led_rows: self.light.rows,
            led_cols: self.light.cols,
            channels: self.light.channels,
            mask_w: self.mask.width,
            mask_h: self.mask.height,
        }
    }

    /// Checks value ranges and that the pattern fits `shape`.
    pub fn validate(&self, shape: &PatternShape) -> Result<()> {
        if self.shape() != *shape
            || self.light.values.len() != shape.light_len()
            || self.mask.values.len() != shape.mask_len()
        {
            return Err(domain(format!(
                "pattern shape {:?} does not match rig {:?}",
                self.shape(),
                shape
            )));
        }
        let in_range = |v: &f64| (0.0..=1.0).contains(v);
        if !self.light.values.iter().all(in_range) || !self.mask.values.iter().all(in_range) {
            return Err(domain("pattern values must lie in [0,1]"));
        }
        Ok(())
    }

    /// Rounds every value to the nearest `f32`, the precision patterns are
    /// stored and displayed at.
    pub fn to_display_precision(&self) -> Self {
        let q = |v: &Vec<f64>| v.iter().map(|x| *x as f32 as f64).collect();
        Self {
            light: LightPattern {
                values: q(&self.light.values),
                ..self.light.clone()
            },
            mask: MaskPattern {
                values: q(&self.mask.values),
                ..self.mask.clone()
            },
        }
    }
}

/// Gradient (or any other dense quantity) laid out like a [`PatternPair`]
/// or [`FreePatternVars`].
#[derive(Clone, Debug, PartialEq)]
pub struct PatternGrad {
    pub light: Vec<f64>,
    pub mask: Vec<f64>,
}

impl PatternGrad {
    pub fn zeros(shape: &PatternShape) -> Self {
        Self {
            light: vec![0.0; shape.light_len()],
            mask: vec![0.0; shape.mask_len()],
        }
    }
}

/// Unconstrained optimization variables for one pattern pair.
#[derive(Clone, Debug, PartialEq)]
pub struct FreePatternVars {
    pub shape: PatternShape,
    pub light_raw: Vec<f64>,
    pub mask_raw: Vec<f64>,
    pub mask_scale: f64,
}

impl FreePatternVars {
    pub fn zeros(shape: PatternShape) -> Self {
        Self {
            light_raw: vec![0.0; shape.light_len()],
            mask_raw: vec![0.0; shape.mask_len()],
            shape,
            mask_scale: DEFAULT_MASK_SCALE,
        }
    }

    /// Zero-mean Gaussian initialization: std 0.1 for light variables and
    /// 1e-7 for mask variables, which sits the mask near the sigmoid
    /// transition at the default scale.
    pub fn random<R: Rng>(shape: PatternShape, rng: &mut R) -> Self {
        let light = Normal::new(0.0, 0.1).expect("valid std");
        let mask = Normal::new(0.0, 1e-7).expect("valid std");
        Self {
            light_raw: (0..shape.light_len()).map(|_| light.sample(rng)).collect(),
            mask_raw: (0..shape.mask_len()).map(|_| mask.sample(rng)).collect(),
            shape,
            mask_scale: DEFAULT_MASK_SCALE,
        }
    }

    pub fn realize(&self) -> PatternPair {
        realize(self)
    }
}

/// `light = σ(light_raw)`, `mask = σ(mask_scale · mask_raw)`.
pub fn realize(vars: &FreePatternVars) -> PatternPair {
    let s = &vars.shape;
    PatternPair {
        light: LightPattern {
            rows: s.led_rows,
            cols: s.led_cols,
            channels: s.channels,
            values: vars.light_raw.iter().map(|&x| sigmoid(x)).collect(),
        },
        mask: MaskPattern {
            width: s.mask_w,
            height: s.mask_h,
            values: vars
                .mask_raw
                .iter()
                .map(|&x| sigmoid(vars.mask_scale * x))
                .collect(),
        },
    }
}

/// Chain rule through [`realize`].
pub fn realize_grad(vars: &FreePatternVars, upstream: &PatternGrad) -> Result<PatternGrad> {
    if upstream.light.len() != vars.light_raw.len() || upstream.mask.len() != vars.mask_raw.len() {
        return Err(domain("upstream gradient shape mismatch"));
    }
    let k = vars.mask_scale;
    Ok(PatternGrad {
        light: vars
            .light_raw
            .iter()
            .zip(&upstream.light)
            .map(|(&x, &g)| g * sigmoid_prime(x))
            .collect(),
        mask: vars
            .mask_raw
            .iter()
            .zip(&upstream.mask)
            .map(|(&x, &g)| g * k * sigmoid_prime(k * x))
            .collect(),
    })
}
