//! Light/view configurations for output exemplars and evaluation sets.
//!
//! Training exemplars place a mirror highlight at a random surface point:
//! the highlight point is uniform on the surface square plus a Gaussian
//! perturbation, the view is uniform on the hemisphere of radius `d_view`,
//! and the light is the mirror image of the view direction about the macro
//! normal at that point, at a random distance.

use std::f64::consts::PI;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::reflect_about;
use crate::math::Vec3;
use crate::render::{colocated_position, d_view};

/// Algorithm tag recorded in manifests; bump when the sampling sequence for
/// a given seed changes.
pub const RNG_ALGORITHM: &str = "chacha8-rand0.9-v1";

/// Standard deviation of the Gaussian terms in the exemplar sampler.
pub const EXEMPLAR_SIGMA: f64 = 2.0;

/// Minimum light distance from the highlight point.
pub const MIN_LIGHT_DISTANCE: f64 = 0.5;

/// Radius of the evaluation hemisphere.
pub const EVAL_HEMISPHERE_RADIUS: f64 = 4.0;

/// Seeded random stream. Equal seeds give equal sequences.
#[derive(Debug, Clone)]
pub struct RngStream {
    seed: u64,
    rng: ChaCha8Rng,
}

impl RngStream {
    pub fn new(seed: u64) -> Self {
        RngStream {
            seed,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// Independent sub-stream `index` of `seed`: same key, ChaCha stream
    /// number `index + 1` (stream 0 is the parent).
    pub fn split(seed: u64, index: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(index + 1);
        RngStream { seed, rng }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn algorithm(&self) -> &'static str {
        RNG_ALGORITHM
    }

    /// Uniform in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.rng.random::<f64>()
    }

    pub fn gaussian(&mut self, mean: f64, std: f64) -> f64 {
        Normal::new(mean, std)
            .expect("finite, non-negative std")
            .sample(&mut self.rng)
    }

    pub fn below(&mut self, n: usize) -> usize {
        self.rng.random_range(0..n)
    }
}

/// Light and view positions for one exemplar.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExemplarConfig {
    #[serde(rename = "light")]
    pub light_position: Vec3,
    #[serde(rename = "view")]
    pub view_position: Vec3,
    #[serde(rename = "highlight")]
    pub highlight_point: [f64; 2],
}

impl ExemplarConfig {
    pub fn colocated() -> Self {
        let c = colocated_position();
        ExemplarConfig {
            light_position: c,
            view_position: c,
            highlight_point: [0.0, 0.0],
        }
    }
}

/// `(2ξ₁ - 1 + g₁, 2ξ₃ - 1 + g₂)` for uniform draws `ξ` and Gaussian draws `g`.
pub fn highlight_point_from(xi1: f64, g1: f64, xi3: f64, g2: f64) -> [f64; 2] {
    [xi1 * 2.0 - 1.0 + g1, xi3 * 2.0 - 1.0 + g2]
}

pub fn sample_highlight_point(rng: &mut RngStream) -> [f64; 2] {
    let xi1 = rng.uniform();
    let g1 = rng.gaussian(0.0, EXEMPLAR_SIGMA);
    let xi3 = rng.uniform();
    let g2 = rng.gaussian(0.0, EXEMPLAR_SIGMA);
    highlight_point_from(xi1, g1, xi3, g2)
}

/// Uniform (by area) point on the upper hemisphere of the given radius.
pub fn sample_hemisphere(rng: &mut RngStream, radius: f64) -> Vec3 {
    // z uniform in [0, 1] is area-uniform on the unit hemisphere
    let z = rng.uniform();
    let phi = 2.0 * PI * rng.uniform();
    let r = (1.0 - z * z).max(0.0).sqrt();
    Vec3::new(r * phi.cos(), r * phi.sin(), z) * radius
}

/// View position uniform on the hemisphere of radius `d_view`.
pub fn sample_view(rng: &mut RngStream) -> Vec3 {
    sample_hemisphere(rng, d_view())
}

/// Light position whose mirror direction at `p` points at `v`, at distance
/// `|N(0, 2)| + 0.5` from `p`.
pub fn sample_light_for_highlight(p: [f64; 2], v: Vec3, rng: &mut RngStream) -> Result<Vec3> {
    let distance = rng.gaussian(0.0, EXEMPLAR_SIGMA).abs() + MIN_LIGHT_DISTANCE;
    light_for_highlight(p, v, distance)
}

/// Deterministic part of [`sample_light_for_highlight`].
pub fn light_for_highlight(p: [f64; 2], v: Vec3, distance: f64) -> Result<Vec3> {
    if !(v.z > 0.0) {
        return Err(Error::domain(format!("view {v:?} must lie above the surface")));
    }
    let p3 = Vec3::new(p[0], p[1], 0.0);
    let to_view = (v - p3)
        .try_normalize()
        .ok_or_else(|| Error::domain("view coincides with highlight point"))?;
    let mirrored = reflect_about(Vec3::Z, to_view);
    assert!(mirrored.z > 0.0, "mirror of an upward direction points downward");
    Ok(p3 + mirrored * distance)
}

/// One reflect-style training exemplar configuration.
pub fn sample_reflect_config(rng: &mut RngStream) -> ExemplarConfig {
    let p = sample_highlight_point(rng);
    let mut v = sample_view(rng);
    // z = 0 has probability zero but would make the mirror degenerate
    while v.z <= 1e-9 {
        v = sample_view(rng);
    }
    let light = sample_light_for_highlight(p, v, rng).expect("view lies above the surface");
    ExemplarConfig {
        light_position: light,
        view_position: v,
        highlight_point: p,
    }
}

/// Configuration families used for training and evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ConfigKind {
    /// Mirror-highlight training configurations.
    Reflect,
    /// The co-located overhead input configuration.
    Identity,
    /// Light and view independently uniform on the radius-4 hemisphere.
    Hemisphere,
}

impl FromStr for ConfigKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "reflect" => Ok(ConfigKind::Reflect),
            "identity" => Ok(ConfigKind::Identity),
            "hemisphere" => Ok(ConfigKind::Hemisphere),
            other => Err(Error::domain(format!(
                "unknown config kind {other:?} (expected reflect, identity or hemisphere)"
            ))),
        }
    }
}

pub fn eval_configs(kind: ConfigKind, count: usize, rng: &mut RngStream) -> Result<Vec<ExemplarConfig>> {
    if count == 0 {
        return Err(Error::domain("config count must be at least 1"));
    }
    let configs = (0..count)
        .map(|_| match kind {
            ConfigKind::Reflect => sample_reflect_config(rng),
            ConfigKind::Identity => ExemplarConfig::colocated(),
            ConfigKind::Hemisphere => {
                let mut light = sample_hemisphere(rng, EVAL_HEMISPHERE_RADIUS);
                while light.z <= 1e-9 {
                    light = sample_hemisphere(rng, EVAL_HEMISPHERE_RADIUS);
                }
                let mut view = sample_hemisphere(rng, EVAL_HEMISPHERE_RADIUS);
                while view.z <= 1e-9 {
                    view = sample_hemisphere(rng, EVAL_HEMISPHERE_RADIUS);
                }
                ExemplarConfig {
                    light_position: light,
                    view_position: view,
                    highlight_point: [0.0, 0.0],
                }
            }
        })
        .collect();
    Ok(configs)
}
