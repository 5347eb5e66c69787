//! Reverse-mode gradients against central finite differences.
//!
//! Each check builds a random instance from a seed, takes the scalar
//! `L = Σ w ⊙ f(θ)` for fixed random weights `w`, and compares the analytic
//! `∂L/∂θ` with `(L(θ+h) − L(θ−h)) / 2h` on a random subset of coordinates.
//! Leaky activations are not differentiable at zero; a coordinate whose two
//! one-sided differences disagree sharply straddles such a kink and is
//! skipped rather than scored.

use ndarray::{Array2, ArrayView2};

use crate::encoding::{encode_directions_into, EncodingConfig};
use crate::error::Result;
use crate::estimator::unet::{UNet, UNetSpec};
use crate::geometry::half_vector;
use crate::math::Rgb;
use crate::nbrdf::loss::{l1_data_loss, l1_data_loss_grad, PixelMask};
use crate::nbrdf::mlp::MlpNet;
use crate::nbrdf::{renderer_net, DEFAULT_HIDDEN_WIDTH, DEFAULT_PARAM_CHANNELS};
use crate::raster::FeatureMap;
use crate::sampler::{sample_hemisphere, RngStream};

pub const MLP_STEP: f64 = 1e-4;
pub const UNET_STEP: f64 = 1e-5;
pub const MLP_TOLERANCE: f64 = 1e-4;
pub const UNET_TOLERANCE: f64 = 1e-3;

/// Gradients below this magnitude are compared absolutely.
pub const REL_FLOOR: f64 = 1e-6;

/// One-sided differences disagreeing by more than this fraction mark a kink.
const KINK_RATIO: f64 = 0.05;

/// At most this share of coordinates may be skipped as kinks.
pub const MAX_SKIPPED_FRACTION: f64 = 0.05;

#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckReport {
    pub name: &'static str,
    pub checked: usize,
    pub skipped: usize,
    pub max_rel_error: f64,
    pub tolerance: f64,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.checked > 0
            && self.max_rel_error < self.tolerance
            && (self.skipped as f64) <= MAX_SKIPPED_FRACTION * (self.checked + self.skipped) as f64
    }
}

impl std::fmt::Display for GradcheckReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{:<10} {} coords, {} kinks skipped, max rel err {:.3e} (tol {:.0e}) {}",
            self.name,
            self.checked,
            self.skipped,
            self.max_rel_error,
            self.tolerance,
            if self.passed() { "PASS" } else { "FAIL" }
        )
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

struct Tally {
    checked: usize,
    skipped: usize,
    worst: f64,
}

impl Tally {
    fn new() -> Self {
        Tally {
            checked: 0,
            skipped: 0,
            worst: 0.0,
        }
    }

    /// Scores one coordinate from `L(θ−h)`, `L(θ)`, `L(θ+h)`.
    fn add(&mut self, analytic: f64, lm: f64, l0: f64, lp: f64, h: f64) {
        let fwd = (lp - l0) / h;
        let bwd = (l0 - lm) / h;
        if (fwd - bwd).abs() > KINK_RATIO * fwd.abs().max(bwd.abs()).max(REL_FLOOR * 100.0) {
            self.skipped += 1;
            return;
        }
        self.checked += 1;
        self.worst = self.worst.max(relative_error(analytic, 0.5 * (fwd + bwd)));
    }

    fn report(self, name: &'static str, tolerance: f64) -> GradcheckReport {
        GradcheckReport {
            name,
            checked: self.checked,
            skipped: self.skipped,
            max_rel_error: self.worst,
            tolerance,
        }
    }
}

fn gaussian_matrix(rows: usize, cols: usize, rng: &mut RngStream) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| rng.gaussian(0.0, 1.0))
}

fn weighted_sum(net: &MlpNet, x: ArrayView2<'_, f64>, w: &Array2<f64>) -> Result<f64> {
    Ok((&net.forward_batch(x)? * w).sum())
}

fn param_slot(net: &mut MlpNet, flat: usize) -> &mut f64 {
    let mut k = flat;
    for l in &mut net.layers {
        let n = l.weights.len();
        if k < n {
            return &mut l.weights.as_slice_mut().expect("standard layout")[k];
        }
        k -= n;
        if k < l.bias.len() {
            return &mut l.bias[k];
        }
        k -= l.bias.len();
    }
    panic!("parameter index out of range")
}

fn analytic_param(grads: &crate::nbrdf::mlp::MlpGrads, flat: usize) -> f64 {
    let mut k = flat;
    for (w, b) in grads.weights.iter().zip(&grads.biases) {
        if k < w.len() {
            return w.as_slice().expect("standard layout")[k];
        }
        k -= w.len();
        if k < b.len() {
            return b[k];
        }
        k -= b.len();
    }
    panic!("parameter index out of range")
}

/// Checks `param_samples` random parameters and `input_samples` random input
/// entries of `net` on the batch `x`.
pub fn check_mlp(
    name: &'static str,
    net: &MlpNet,
    x: &Array2<f64>,
    param_samples: usize,
    input_samples: usize,
    rng: &mut RngStream,
) -> Result<GradcheckReport> {
    let h = MLP_STEP;
    let w = gaussian_matrix(x.nrows(), net.output_dim(), rng);
    let tape = net.forward_tape(x.view())?;
    let (grads, gx) = net.backward_batch(&tape, w.view())?;
    let l0 = weighted_sum(net, x.view(), &w)?;
    let mut tally = Tally::new();

    let total = net.parameter_count();
    let mut probe = net.clone();
    for _ in 0..param_samples {
        let k = rng.below(total);
        let orig = *param_slot(&mut probe, k);
        *param_slot(&mut probe, k) = orig + h;
        let lp = weighted_sum(&probe, x.view(), &w)?;
        *param_slot(&mut probe, k) = orig - h;
        let lm = weighted_sum(&probe, x.view(), &w)?;
        *param_slot(&mut probe, k) = orig;
        tally.add(analytic_param(&grads, k), lm, l0, lp, h);
    }

    let mut xp = x.clone();
    for _ in 0..input_samples {
        let (r, c) = (rng.below(x.nrows()), rng.below(x.ncols()));
        let orig = xp[[r, c]];
        xp[[r, c]] = orig + h;
        let lp = weighted_sum(net, xp.view(), &w)?;
        xp[[r, c]] = orig - h;
        let lm = weighted_sum(net, xp.view(), &w)?;
        xp[[r, c]] = orig;
        tally.add(gx[[r, c]], lm, l0, lp, h);
    }
    Ok(tally.report(name, MLP_TOLERANCE))
}

/// The full-size renderer network on random parameter-plus-encoding rows.
pub fn check_renderer(seed: u64) -> Result<GradcheckReport> {
    let mut rng = RngStream::split(seed, 10);
    let enc = EncodingConfig::default();
    let net = renderer_net(
        DEFAULT_PARAM_CHANNELS + enc.compressed_dim,
        DEFAULT_HIDDEN_WIDTH,
        crate::nbrdf::mlp::DEFAULT_LEAKY_SLOPE,
        &mut rng,
    )?;
    let x = gaussian_matrix(4, net.input_dim(), &mut rng);
    check_mlp("renderer", &net, &x, 1000, 200, &mut rng)
}

/// ND_enc on the encodings of random light/view pairs.
pub fn check_encoder(seed: u64) -> Result<GradcheckReport> {
    let mut rng = RngStream::split(seed, 11);
    let enc = EncodingConfig::default();
    let net = enc.encoder_net(crate::nbrdf::mlp::DEFAULT_LEAKY_SLOPE, &mut rng)?;
    let rows = 4;
    let mut x = Array2::zeros((rows, enc.encoded_len()));
    for r in 0..rows {
        let wi = sample_hemisphere(&mut rng, 1.0).normalize();
        let wo = sample_hemisphere(&mut rng, 1.0).normalize();
        let h = half_vector(wi, wo)?;
        let mut row = x.row_mut(r);
        encode_directions_into(wi, wo, h, &enc, row.as_slice_mut().expect("standard layout"));
    }
    check_mlp("nd_enc", &net, &x, 1000, 100, &mut rng)
}

/// The masked log-space L1 loss, on predictions kept away from the targets
/// so every difference has a defined sign.
pub fn check_loss(seed: u64) -> Result<GradcheckReport> {
    let mut rng = RngStream::split(seed, 12);
    let n = 64;
    let target: Vec<Rgb> = (0..n).map(|_| [0; 3].map(|_| rng.uniform())).collect();
    let pred: Vec<Rgb> = target
        .iter()
        .map(|t| {
            t.map(|v| {
                let d = 0.01 + rng.uniform();
                if rng.uniform() < 0.5 {
                    v + d
                } else {
                    v - d
                }
            })
        })
        .collect();
    let mask = PixelMask::from_indices((0..n).filter(|i| i % 3 != 0).collect());
    let g = l1_data_loss_grad(&pred, &target, &mask)?;
    let h = MLP_STEP;
    let l0 = l1_data_loss(&pred, &target, &mask)?;
    let mut tally = Tally::new();
    let mut p = pred.clone();
    for i in 0..n {
        for c in 0..3 {
            let orig = p[i][c];
            p[i][c] = orig + h;
            let lp = l1_data_loss(&p, &target, &mask)?;
            p[i][c] = orig - h;
            let lm = l1_data_loss(&p, &target, &mask)?;
            p[i][c] = orig;
            tally.add(g[i][c], lm, l0, lp, h);
        }
    }
    Ok(tally.report("l1_loss", MLP_TOLERANCE))
}

fn unet_objective(net: &UNet, x: &FeatureMap, w: &[f64]) -> Result<f64> {
    Ok(net.forward(x)?.data.iter().zip(w).map(|(a, b)| a * b).sum())
}

/// A 16×16 U-Net with base width 4.
pub fn check_unet(seed: u64) -> Result<GradcheckReport> {
    let mut rng = RngStream::split(seed, 13);
    let spec = UNetSpec {
        base_channels: 4,
        blocks_per_level: 1,
        levels: 3,
        in_channels: 4,
        out_channels: 8,
    };
    let net = UNet::random(spec, &mut rng)?;
    let x = FeatureMap::from_vec(4, 16, 16, (0..4 * 16 * 16).map(|_| rng.gaussian(0.0, 1.0)).collect())?;
    let tape = net.forward_tape(&x)?;
    let out = tape.output();
    let w: Vec<f64> = (0..out.data.len()).map(|_| rng.gaussian(0.0, 1.0)).collect();
    let gy = FeatureMap::from_vec(out.channels, out.height, out.width, w.clone())?;
    let (grads, gx) = net.backward(&tape, &gy)?;
    let l0 = unet_objective(&net, &x, &w)?;
    let h = UNET_STEP;
    let mut tally = Tally::new();

    let analytic: Vec<Vec<f64>> = grads.params().into_iter().map(|t| t.to_vec()).collect();
    let sizes: Vec<usize> = analytic.iter().map(|t| t.len()).collect();
    let total: usize = sizes.iter().sum();
    let mut probe = net.clone();
    // every tensor at least once, then uniformly over all coordinates
    let mut coords: Vec<(usize, usize)> = sizes.iter().enumerate().map(|(t, &n)| (t, rng.below(n))).collect();
    while coords.len() < 600 {
        let mut k = rng.below(total);
        let mut t = 0;
        while k >= sizes[t] {
            k -= sizes[t];
            t += 1;
        }
        coords.push((t, k));
    }
    for (t, k) in coords {
        let orig = probe.params_mut()[t][k];
        probe.params_mut()[t][k] = orig + h;
        let lp = unet_objective(&probe, &x, &w)?;
        probe.params_mut()[t][k] = orig - h;
        let lm = unet_objective(&probe, &x, &w)?;
        probe.params_mut()[t][k] = orig;
        tally.add(analytic[t][k], lm, l0, lp, h);
    }

    let mut xp = x.clone();
    for _ in 0..100 {
        let k = rng.below(x.data.len());
        let orig = xp.data[k];
        xp.data[k] = orig + h;
        let lp = unet_objective(&net, &xp, &w)?;
        xp.data[k] = orig - h;
        let lm = unet_objective(&net, &xp, &w)?;
        xp.data[k] = orig;
        tally.add(gx.data[k], lm, l0, lp, h);
    }
    Ok(tally.report("unet", UNET_TOLERANCE))
}

/// Every check, in a fixed order.
pub fn run_all(seed: u64) -> Result<Vec<GradcheckReport>> {
    Ok(vec![
        check_renderer(seed)?,
        check_encoder(seed)?,
        check_loss(seed)?,
        check_unet(seed)?,
    ])
}
