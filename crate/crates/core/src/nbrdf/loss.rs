//! Log-space L1 data loss and the pixel-masking distributions that pick which
//! pixels contribute to it.

use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::Rgb;
use crate::nbrdf::NeuralParamMap;
use crate::raster::HdrImage;
use crate::sampler::RngStream;

/// Added to parameter norms before inverting.
pub const INV_NORM_EPS: f64 = 1e-6;

/// How pixels are weighted when drawing the loss mask.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskMode {
    /// `1 / (‖params‖ + ε)`: steers away from high-norm parameter vectors.
    InvParamNorm,
    /// `‖rgb‖²` of the target exemplar: steers toward bright pixels.
    SqRgbNorm,
    /// Every pixel contributes.
    None,
}

impl FromStr for MaskMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "inv_param_norm" => Ok(MaskMode::InvParamNorm),
            "sq_rgb_norm" => Ok(MaskMode::SqRgbNorm),
            "none" => Ok(MaskMode::None),
            other => Err(Error::Config(format!("unknown mask mode {other:?}"))),
        }
    }
}

/// Source of per-pixel mask weights.
#[derive(Debug, Clone, Copy)]
pub enum MaskSource<'a> {
    Params(&'a NeuralParamMap),
    Rgb(&'a HdrImage),
}

impl MaskSource<'_> {
    fn pixel_count(&self) -> usize {
        match self {
            MaskSource::Params(p) => p.pixel_count(),
            MaskSource::Rgb(img) => img.pixel_count(),
        }
    }
}

/// Sorted set of distinct pixel indices.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PixelMask {
    indices: Vec<usize>,
}

impl PixelMask {
    pub fn all(pixels: usize) -> Self {
        PixelMask {
            indices: (0..pixels).collect(),
        }
    }

    pub fn from_indices(mut indices: Vec<usize>) -> Self {
        indices.sort_unstable();
        indices.dedup();
        PixelMask { indices }
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

/// Mean absolute difference over the masked pixels and all three channels.
pub fn l1_data_loss(pred: &[Rgb], target: &[Rgb], mask: &PixelMask) -> Result<f64> {
    if pred.len() != target.len() {
        return Err(Error::shape(format!(
            "prediction has {} pixels, target {}",
            pred.len(),
            target.len()
        )));
    }
    if mask.is_empty() {
        return Err(Error::domain("loss mask selects no pixels"));
    }
    if let Some(&i) = mask.indices().last() {
        if i >= pred.len() {
            return Err(Error::shape(format!("mask index {i} out of range")));
        }
    }
    let sum: f64 = mask
        .indices()
        .iter()
        .map(|&i| (0..3).map(|c| (pred[i][c] - target[i][c]).abs()).sum::<f64>())
        .sum();
    Ok(sum / (3 * mask.len()) as f64)
}

/// Gradient of [`l1_data_loss`] with respect to `pred`: `sign(d) / (3m)` on
/// masked pixels, zero elsewhere and where the difference is exactly 0.
pub fn l1_data_loss_grad(pred: &[Rgb], target: &[Rgb], mask: &PixelMask) -> Result<Vec<Rgb>> {
    l1_data_loss(pred, target, mask)?;
    let scale = 1.0 / (3 * mask.len()) as f64;
    let mut g = vec![[0.0; 3]; pred.len()];
    for &i in mask.indices() {
        for c in 0..3 {
            let d = pred[i][c] - target[i][c];
            g[i][c] = if d > 0.0 {
                scale
            } else if d < 0.0 {
                -scale
            } else {
                0.0
            };
        }
    }
    Ok(g)
}

/// [`l1_data_loss`] between two linear images after log compression.
pub fn log_l1_image_loss(pred: &HdrImage, target: &HdrImage, mask: &PixelMask) -> Result<f64> {
    if !pred.same_shape(target) {
        return Err(Error::shape("image sizes differ"));
    }
    let to_log = |img: &HdrImage| -> Vec<Rgb> {
        (0..img.pixel_count())
            .map(|i| img.get_index(i).map(|v| v.max(0.0).ln_1p()))
            .collect()
    };
    l1_data_loss(&to_log(pred), &to_log(target), mask)
}

/// Normalized per-pixel sampling distribution for `mode`. All-zero weights
/// fall back to uniform.
pub fn mask_weights(source: MaskSource<'_>, mode: MaskMode) -> Result<Vec<f64>> {
    let n = source.pixel_count();
    let raw: Vec<f64> = match (mode, source) {
        (MaskMode::None, _) => vec![1.0; n],
        (MaskMode::InvParamNorm, MaskSource::Params(p)) => (0..n)
            .map(|i| {
                let norm = p.pixel(i).iter().map(|v| v * v).sum::<f64>().sqrt();
                1.0 / (norm + INV_NORM_EPS)
            })
            .collect(),
        (MaskMode::SqRgbNorm, MaskSource::Rgb(img)) => (0..n)
            .map(|i| img.get_index(i).iter().map(|v| v * v).sum::<f64>())
            .collect(),
        (MaskMode::InvParamNorm, MaskSource::Rgb(_)) => {
            return Err(Error::Config("inv_param_norm masking needs a parameter map".into()))
        }
        (MaskMode::SqRgbNorm, MaskSource::Params(_)) => {
            return Err(Error::Config("sq_rgb_norm masking needs an RGB image".into()))
        }
    };
    if let Some(w) = raw.iter().find(|w| !(w.is_finite() && **w >= 0.0)) {
        return Err(Error::domain(format!("invalid mask weight {w}")));
    }
    let total: f64 = raw.iter().sum();
    if total <= 0.0 {
        return Ok(vec![1.0 / n as f64; n]);
    }
    Ok(raw.into_iter().map(|w| w / total).collect())
}

/// Number of pixels a mask of `fraction` selects out of `pixels`.
pub fn mask_size(pixels: usize, fraction: f64) -> usize {
    ((fraction * pixels as f64).ceil() as usize).clamp(1, pixels)
}

/// Draws `⌈fraction·H·W⌉` distinct pixels, each successive draw proportional
/// to the remaining weights (multinomial sampling without replacement).
pub fn pixel_mask(
    source: MaskSource<'_>,
    mode: MaskMode,
    fraction: f64,
    rng: &mut RngStream,
) -> Result<PixelMask> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::domain(format!("mask fraction {fraction} outside (0, 1]")));
    }
    let n = source.pixel_count();
    if mode == MaskMode::None {
        return Ok(PixelMask::all(n));
    }
    let weights = mask_weights(source, mode)?;
    Ok(sample_without_replacement(&weights, mask_size(n, fraction), rng))
}

/// Weighted sampling without replacement using exponential keys: pixel `i`
/// gets key `ln(u)/wᵢ` and the `k` largest keys win, which matches drawing
/// one pixel at a time proportionally to the remaining weights.
pub fn sample_without_replacement(weights: &[f64], k: usize, rng: &mut RngStream) -> PixelMask {
    let n = weights.len();
    if k >= n {
        return PixelMask::all(n);
    }
    let mut keyed: Vec<(f64, usize)> = Vec::with_capacity(n);
    let mut zero: Vec<usize> = Vec::new();
    for (i, &w) in weights.iter().enumerate() {
        let u = rng.uniform();
        if w > 0.0 {
            // 1 - u lies in (0, 1]
            keyed.push(((1.0 - u).ln() / w, i));
        } else {
            zero.push(i);
        }
    }
    let mut chosen: Vec<usize>;
    if keyed.len() >= k {
        keyed.select_nth_unstable_by(k - 1, |a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        chosen = keyed[..k].iter().map(|&(_, i)| i).collect();
    } else {
        chosen = keyed.iter().map(|&(_, i)| i).collect();
        let need = k - chosen.len();
        // partial Fisher-Yates over the zero-weight pixels
        for j in 0..need {
            let r = j + rng.below(zero.len() - j);
            zero.swap(j, r);
        }
        chosen.extend_from_slice(&zero[..need]);
    }
    PixelMask::from_indices(chosen)
}
