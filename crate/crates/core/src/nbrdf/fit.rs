//! Fitting a neural material to a set of rendered exemplars.
//!
//! The per-pixel parameters come either from a directly optimized latent map
//! or from the convolutional estimator applied to the input photograph. Both
//! are optimized jointly with the encoder and renderer networks against the
//! masked log-space L1 loss.

use std::str::FromStr;

use ndarray::{s, Array2, ArrayView2};
#[cfg(feature = "parallel")]
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::adam::{AdamConfig, AdamSlot};
use super::loss::{pixel_mask, MaskMode, MaskSource, PixelMask};
use super::mlp::{MlpGrads, MlpNet};
use super::{NeuralBrdf, NeuralParamMap, DEFAULT_HIDDEN_WIDTH, DEFAULT_PARAM_CHANNELS};
use crate::encoding::{encode_directions_into, EncodingConfig};
use crate::error::{Error, Result};
use crate::estimator::unet::{feature_to_params, params_to_feature, UNet, UNetSpec, UNetTape};
use crate::geometry::{direction_to, half_vector, SurfaceGrid};
use crate::math::{Rgb, Vec3};
use crate::raster::HdrImage;
use crate::render::{build_estimator_input, colocated_position};
use crate::sampler::{ExemplarConfig, RngStream};

/// Rows per work unit. Gradients are summed per chunk and then across chunks
/// in index order, so results do not depend on the thread count.
pub const FIT_CHUNK_ROWS: usize = 1024;

/// Relative weights of the loss terms. Only the data term is optimized here;
/// the other two are kept so configs round-trip.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub data: f64,
    pub perceptual: f64,
    pub discriminator: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            data: 1.0,
            perceptual: 0.01,
            discriminator: 0.03,
        }
    }
}

/// Where the per-pixel parameters come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamSource {
    /// A free parameter map optimized directly.
    Latent,
    /// The estimator network applied to the input photograph.
    Estimator,
}

impl FromStr for ParamSource {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "latent" => Ok(ParamSource::Latent),
            "estimator" => Ok(ParamSource::Estimator),
            other => Err(Error::Config(format!("unknown parameter source {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FitConfig {
    pub iterations: usize,
    pub learning_rate: f64,
    /// Fractional learning-rate decay applied once per epoch.
    pub lr_decay: f64,
    pub epoch_iterations: usize,
    /// Exemplars per iteration, taken cyclically from the target list.
    pub batch_exemplars: usize,
    pub mask_fraction: f64,
    pub mask_mode: MaskMode,
    pub seed: u64,
    pub param_channels: usize,
    pub hidden_width: usize,
    pub leaky_slope: f64,
    /// Standard deviation of the Gaussian latent initialization.
    pub param_init_std: f64,
    pub param_source: ParamSource,
    pub estimator: UNetSpec,
    pub adam: AdamConfig,
    pub loss_weights: LossWeights,
}

impl Default for FitConfig {
    fn default() -> Self {
        FitConfig {
            iterations: 2000,
            learning_rate: 1e-4,
            lr_decay: 0.015,
            epoch_iterations: 20_000,
            batch_exemplars: 8,
            mask_fraction: 0.6,
            mask_mode: MaskMode::InvParamNorm,
            seed: 0,
            param_channels: DEFAULT_PARAM_CHANNELS,
            hidden_width: DEFAULT_HIDDEN_WIDTH,
            leaky_slope: super::mlp::DEFAULT_LEAKY_SLOPE,
            param_init_std: 0.1,
            param_source: ParamSource::Latent,
            estimator: UNetSpec::default(),
            adam: AdamConfig::default(),
            loss_weights: LossWeights::default(),
        }
    }
}

impl FitConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning_rate must be positive, got {}", self.learning_rate));
        }
        if !(0.0..1.0).contains(&self.lr_decay) {
            return bad(format!("lr_decay must lie in [0, 1), got {}", self.lr_decay));
        }
        if !(self.mask_fraction > 0.0 && self.mask_fraction <= 1.0) {
            return bad(format!("mask_fraction must lie in (0, 1], got {}", self.mask_fraction));
        }
        if self.epoch_iterations == 0 || self.batch_exemplars == 0 {
            return bad("epoch_iterations and batch_exemplars must be at least 1".into());
        }
        if self.param_channels == 0 || self.hidden_width == 0 {
            return bad("param_channels and hidden_width must be at least 1".into());
        }
        if !(self.leaky_slope.is_finite() && self.param_init_std >= 0.0 && self.param_init_std.is_finite()) {
            return bad("leaky_slope and param_init_std must be finite, init std non-negative".into());
        }
        let a = &self.adam;
        if !((0.0..1.0).contains(&a.beta1) && (0.0..1.0).contains(&a.beta2) && a.eps > 0.0) {
            return bad("adam betas must lie in [0, 1) and eps must be positive".into());
        }
        if self.param_source == ParamSource::Estimator {
            self.estimator.validate()?;
            if self.estimator.out_channels != self.param_channels || self.estimator.in_channels != 4 {
                return bad("estimator must map 4 input channels to param_channels outputs".into());
            }
        }
        Ok(())
    }

    /// Learning rate in effect at 1-based iteration `t`.
    pub fn learning_rate_at(&self, t: usize) -> f64 {
        let epoch = (t.saturating_sub(1) / self.epoch_iterations) as i32;
        self.learning_rate * (1.0 - self.lr_decay).powi(epoch)
    }
}

#[derive(Debug, Clone)]
pub struct FitResult {
    pub params: NeuralParamMap,
    pub brdf: NeuralBrdf,
    /// Trained estimator, when the parameters came from one.
    pub estimator: Option<UNet>,
    /// Loss over every pixel of each iteration's exemplars, measured before
    /// its update.
    pub trace: Vec<f64>,
    /// The masked loss that drove each update.
    pub masked_trace: Vec<f64>,
}

/// One exemplar prepared for fitting.
struct Exemplar {
    light: Vec3,
    view: Vec3,
    log_target: Vec<Rgb>,
    linear: HdrImage,
}

struct ChunkOut {
    abs_sum: f64,
    encoder: MlpGrads,
    renderer: MlpGrads,
    /// `(rows × C)` gradient for the parameters of each row's pixel.
    params: Array2<f64>,
}

struct Batch<'a> {
    exemplars: &'a [Exemplar],
    rows: Vec<(usize, usize)>,
}

fn flat(a: &Array2<f64>) -> std::borrow::Cow<'_, [f64]> {
    match a.as_slice() {
        Some(s) => s.into(),
        None => a.iter().copied().collect::<Vec<_>>().into(),
    }
}

/// Adam state for an MLP: one slot per weight matrix and bias vector.
struct MlpAdam {
    slots: Vec<(AdamSlot, AdamSlot)>,
}

impl MlpAdam {
    fn new(net: &MlpNet) -> Self {
        MlpAdam {
            slots: net
                .layers
                .iter()
                .map(|l| (AdamSlot::new(l.weights.len()), AdamSlot::new(l.bias.len())))
                .collect(),
        }
    }

    fn step(&mut self, cfg: &AdamConfig, lr: f64, t: u64, net: &mut MlpNet, g: &MlpGrads) {
        for (i, layer) in net.layers.iter_mut().enumerate() {
            let (sw, sb) = &mut self.slots[i];
            let w = layer.weights.as_slice_mut().expect("weights in standard layout");
            sw.step(cfg, lr, t, w, &flat(&g.weights[i]));
            let b = layer.bias.as_slice_mut().expect("contiguous bias");
            sb.step(cfg, lr, t, b, g.biases[i].as_slice().expect("contiguous bias"));
        }
    }
}

fn check_targets(targets: &[(HdrImage, ExemplarConfig)], input_photo: &HdrImage) -> Result<Vec<Exemplar>> {
    if targets.is_empty() {
        return Err(Error::domain("fit needs at least one target exemplar"));
    }
    let mut out = Vec::with_capacity(targets.len());
    for (k, (img, cfg)) in targets.iter().enumerate() {
        if !img.same_shape(input_photo) {
            return Err(Error::shape(format!(
                "target {k} is {}x{} but the input photo is {}x{}",
                img.width(),
                img.height(),
                input_photo.width(),
                input_photo.height()
            )));
        }
        if cfg.light_position.z <= 0.0 || cfg.view_position.z <= 0.0 {
            return Err(Error::domain(format!("target {k} has a light or view below the surface")));
        }
        let mut log_target = Vec::with_capacity(img.pixel_count());
        for i in 0..img.pixel_count() {
            let c = img.get_index(i);
            if c.iter().any(|v| !(*v >= 0.0 && v.is_finite())) {
                return Err(Error::domain(format!("target {k} has invalid radiance at pixel {i}")));
            }
            log_target.push(c.map(f64::ln_1p));
        }
        out.push(Exemplar {
            light: cfg.light_position,
            view: cfg.view_position,
            log_target,
            linear: img.clone(),
        });
    }
    Ok(out)
}

fn init_latent(photo: &HdrImage, channels: usize, std: f64, rng: &mut RngStream) -> Result<NeuralParamMap> {
    let n = photo.pixel_count();
    let mut data = Vec::with_capacity(n * channels);
    for i in 0..n {
        let rgb = photo.get_index(i);
        for c in 0..channels {
            let mut v = rng.gaussian(0.0, std);
            // seed the first channels with the photo's log colour
            if c < 3 {
                v += rgb[c].max(0.0).ln_1p();
            }
            data.push(v);
        }
    }
    NeuralParamMap::from_vec(photo.height(), photo.width(), channels, data)
}

/// Forward and reverse pass over one chunk of `(exemplar, pixel)` rows.
fn process_chunk(
    batch: &Batch<'_>,
    rows: &[(usize, usize)],
    total_rows: usize,
    params: &NeuralParamMap,
    brdf: &NeuralBrdf,
    grid: &SurfaceGrid,
) -> Result<ChunkOut> {
    let enc_len = brdf.encoding.encoded_len();
    let c = params.channels();
    let mut enc = Array2::zeros((rows.len(), enc_len));
    for (r, &(e, px)) in rows.iter().enumerate() {
        let ex = &batch.exemplars[e];
        let p = grid.position_index(px);
        let wi = direction_to(p, ex.light)?;
        let wo = direction_to(p, ex.view)?;
        let h = half_vector(wi, wo)?;
        let mut row = enc.row_mut(r);
        encode_directions_into(wi, wo, h, &brdf.encoding, row.as_slice_mut().expect("standard layout"));
    }
    let enc_tape = brdf.encoder.forward_tape(enc.view())?;
    let compressed = enc_tape.output();
    let mut input = Array2::zeros((rows.len(), c + compressed.ncols()));
    for (r, &(_, px)) in rows.iter().enumerate() {
        input.row_mut(r).slice_mut(s![..c]).assign(&ndarray::aview1(params.pixel(px)));
    }
    input.slice_mut(s![.., c..]).assign(compressed);
    let ren_tape = brdf.renderer.forward_tape(input.view())?;
    let out = ren_tape.output();

    let scale = 1.0 / (3 * total_rows) as f64;
    let mut abs_sum = 0.0;
    let mut g = Array2::zeros((rows.len(), 3));
    for (r, &(e, px)) in rows.iter().enumerate() {
        let t = batch.exemplars[e].log_target[px];
        for ch in 0..3 {
            let d = out[[r, ch]] - t[ch];
            abs_sum += d.abs();
            g[[r, ch]] = if d > 0.0 {
                scale
            } else if d < 0.0 {
                -scale
            } else {
                0.0
            };
        }
    }
    let (renderer, in_grad) = brdf.renderer.backward_batch(&ren_tape, g.view())?;
    let encoder = brdf
        .encoder
        .backward_batch_params(&enc_tape, in_grad.slice(s![.., c..]))?;
    Ok(ChunkOut {
        abs_sum,
        encoder,
        renderer,
        params: in_grad.slice(s![.., ..c]).to_owned(),
    })
}

/// Sum of absolute log errors over `rows`, forward pass only.
fn chunk_abs_sum(
    batch: &Batch<'_>,
    rows: &[(usize, usize)],
    params: &NeuralParamMap,
    brdf: &NeuralBrdf,
    grid: &SurfaceGrid,
) -> Result<f64> {
    let mut enc = Array2::zeros((rows.len(), brdf.encoding.encoded_len()));
    for (r, &(e, px)) in rows.iter().enumerate() {
        let ex = &batch.exemplars[e];
        let p = grid.position_index(px);
        let wi = direction_to(p, ex.light)?;
        let wo = direction_to(p, ex.view)?;
        let h = half_vector(wi, wo)?;
        let mut row = enc.row_mut(r);
        encode_directions_into(wi, wo, h, &brdf.encoding, row.as_slice_mut().expect("standard layout"));
    }
    let c = params.channels();
    let mut p = Array2::zeros((rows.len(), c));
    for (r, &(_, px)) in rows.iter().enumerate() {
        p.row_mut(r).assign(&ndarray::aview1(params.pixel(px)));
    }
    let out = brdf.render_log_batch(&p, &enc)?;
    let mut sum = 0.0;
    for (r, &(e, px)) in rows.iter().enumerate() {
        let t = batch.exemplars[e].log_target[px];
        for ch in 0..3 {
            sum += (out[[r, ch]] - t[ch]).abs();
        }
    }
    Ok(sum)
}

/// Mean absolute log error over `rows` without gradients.
fn forward_loss(batch: &Batch<'_>, rows: &[(usize, usize)], params: &NeuralParamMap, brdf: &NeuralBrdf, grid: &SurfaceGrid) -> Result<f64> {
    let chunks: Vec<&[(usize, usize)]> = rows.chunks(FIT_CHUNK_ROWS).collect();
    let run = |rows: &&[(usize, usize)]| chunk_abs_sum(batch, rows, params, brdf, grid);
    #[cfg(feature = "parallel")]
    let sums: Vec<Result<f64>> = chunks.par_iter().map(run).collect();
    #[cfg(not(feature = "parallel"))]
    let sums: Vec<Result<f64>> = chunks.iter().map(run).collect();
    let mut total = 0.0;
    for v in sums {
        total += v?;
    }
    Ok(total)
}

struct StepOut {
    loss: f64,
    encoder: MlpGrads,
    renderer: MlpGrads,
    /// Dense `H×W×C` parameter gradient.
    params: Vec<f64>,
}

fn loss_and_grads(batch: &Batch<'_>, params: &NeuralParamMap, brdf: &NeuralBrdf, grid: &SurfaceGrid) -> Result<StepOut> {
    let total = batch.rows.len();
    let chunks: Vec<&[(usize, usize)]> = batch.rows.chunks(FIT_CHUNK_ROWS).collect();
    let run = |rows: &&[(usize, usize)]| process_chunk(batch, rows, total, params, brdf, grid);
    #[cfg(feature = "parallel")]
    let outs: Vec<Result<ChunkOut>> = chunks.par_iter().map(run).collect();
    #[cfg(not(feature = "parallel"))]
    let outs: Vec<Result<ChunkOut>> = chunks.iter().map(run).collect();

    let mut encoder = MlpGrads::zeros_like(&brdf.encoder);
    let mut renderer = MlpGrads::zeros_like(&brdf.renderer);
    let c = params.channels();
    let mut pgrad = vec![0.0; params.data().len()];
    let mut abs_sum = 0.0;
    for (rows, out) in chunks.iter().zip(outs) {
        let out = out?;
        abs_sum += out.abs_sum;
        encoder.add_assign(&out.encoder);
        renderer.add_assign(&out.renderer);
        for (r, &(_, px)) in rows.iter().enumerate() {
            let dst = &mut pgrad[px * c..(px + 1) * c];
            for (d, v) in dst.iter_mut().zip(out.params.row(r)) {
                *d += v;
            }
        }
    }
    Ok(StepOut {
        loss: abs_sum / (3 * total) as f64,
        encoder,
        renderer,
        params: pgrad,
    })
}

/// Fits parameters and networks to `targets`. See [`fit_with_progress`].
pub fn fit(
    targets: &[(HdrImage, ExemplarConfig)],
    input_photo: &HdrImage,
    cfg: &FitConfig,
    enc_cfg: &EncodingConfig,
) -> Result<FitResult> {
    fit_with_progress(targets, input_photo, cfg, enc_cfg, |_, _| {})
}

/// As [`fit`], calling `progress(iteration, loss)` after every iteration.
///
/// All randomness comes from `cfg.seed`, so equal inputs give bit-identical
/// traces. Networks and parameters are rounded to `f32` on return, which is
/// the precision they are stored at.
pub fn fit_with_progress(
    targets: &[(HdrImage, ExemplarConfig)],
    input_photo: &HdrImage,
    cfg: &FitConfig,
    enc_cfg: &EncodingConfig,
    mut progress: impl FnMut(usize, f64),
) -> Result<FitResult> {
    cfg.validate()?;
    enc_cfg.validate()?;
    let exemplars = check_targets(targets, input_photo)?;
    let grid = SurfaceGrid::new(input_photo.width(), input_photo.height());
    let n_px = grid.width * grid.height;

    let mut brdf = NeuralBrdf::random(
        *enc_cfg,
        cfg.param_channels,
        cfg.hidden_width,
        cfg.leaky_slope,
        &mut RngStream::split(cfg.seed, 0),
    )?;
    let mut init_rng = RngStream::split(cfg.seed, 1);
    let mut mask_rng = RngStream::split(cfg.seed, 2);

    let (mut latent, mut estimator, est_input) = match cfg.param_source {
        ParamSource::Latent => (
            Some(init_latent(input_photo, cfg.param_channels, cfg.param_init_std, &mut init_rng)?),
            None,
            None,
        ),
        ParamSource::Estimator => {
            let c = colocated_position();
            let x = build_estimator_input(input_photo, c, c)?;
            cfg.estimator.check_input(&x)?;
            (None, Some(UNet::random(cfg.estimator, &mut init_rng)?), Some(x))
        }
    };

    let mut enc_adam = MlpAdam::new(&brdf.encoder);
    let mut ren_adam = MlpAdam::new(&brdf.renderer);
    let mut latent_adam = latent.as_ref().map(|p| AdamSlot::new(p.data().len()));
    let mut est_adam: Option<Vec<AdamSlot>> = estimator
        .as_ref()
        .map(|u| u.params().iter().map(|t| AdamSlot::new(t.len())).collect());

    let mut trace = Vec::with_capacity(cfg.iterations);
    let mut masked_trace = Vec::with_capacity(cfg.iterations);
    let n_ex = exemplars.len();
    for t in 1..=cfg.iterations {
        // parameters for this iteration
        let (params, tape): (NeuralParamMap, Option<UNetTape>) = match (&latent, &estimator) {
            (Some(p), _) => (p.clone(), None),
            (None, Some(u)) => {
                let tape = u.forward_tape(est_input.as_ref().expect("estimator input"))?;
                (feature_to_params(tape.output())?, Some(tape))
            }
            _ => unreachable!(),
        };

        let mut rows = Vec::new();
        let mut unmasked = Vec::new();
        let start = (t - 1) * cfg.batch_exemplars;
        for j in 0..cfg.batch_exemplars.min(n_ex) {
            let e = (start + j) % n_ex;
            let source = match cfg.mask_mode {
                MaskMode::SqRgbNorm => MaskSource::Rgb(&exemplars[e].linear),
                _ => MaskSource::Params(&params),
            };
            let mask: PixelMask = pixel_mask(source, cfg.mask_mode, cfg.mask_fraction, &mut mask_rng)?;
            rows.extend(mask.indices().iter().map(|&px| (e, px)));
            let mut it = mask.indices().iter().peekable();
            for px in 0..n_px {
                if it.peek() == Some(&&px) {
                    it.next();
                } else {
                    unmasked.push((e, px));
                }
            }
        }
        debug_assert!(rows.iter().all(|&(_, px)| px < n_px));
        let batch = Batch {
            exemplars: &exemplars,
            rows,
        };
        let step = loss_and_grads(&batch, &params, &brdf, &grid)?;
        let rest = forward_loss(&batch, &unmasked, &params, &brdf, &grid)?;
        let masked_rows = batch.rows.len() as f64;
        let full = (step.loss * 3.0 * masked_rows + rest) / (3.0 * (masked_rows + unmasked.len() as f64));
        if !(step.loss.is_finite() && full.is_finite()) {
            return Err(Error::Diverged {
                iteration: t,
                loss: if step.loss.is_finite() { full } else { step.loss },
            });
        }
        trace.push(full);
        masked_trace.push(step.loss);
        progress(t, full);

        let lr = cfg.learning_rate_at(t);
        let w = cfg.loss_weights.data;
        let scaled = |g: &mut MlpGrads| {
            if w != 1.0 {
                g.weights.iter_mut().for_each(|a| *a *= w);
                g.biases.iter_mut().for_each(|a| *a *= w);
            }
        };
        let (mut eg, mut rg) = (step.encoder, step.renderer);
        scaled(&mut eg);
        scaled(&mut rg);
        let mut pg = step.params;
        pg.iter_mut().for_each(|v| *v *= w);

        enc_adam.step(&cfg.adam, lr, t as u64, &mut brdf.encoder, &eg);
        ren_adam.step(&cfg.adam, lr, t as u64, &mut brdf.renderer, &rg);
        if let (Some(p), Some(slot)) = (latent.as_mut(), latent_adam.as_mut()) {
            slot.step(&cfg.adam, lr, t as u64, p.data_mut(), &pg);
        }
        if let (Some(u), Some(slots), Some(tape)) = (estimator.as_mut(), est_adam.as_mut(), tape.as_ref()) {
            let gmap = NeuralParamMap::from_vec(params.height(), params.width(), params.channels(), pg)?;
            let (grads, _) = u.backward(tape, &params_to_feature(&gmap))?;
            for ((p, g), slot) in u.params_mut().into_iter().zip(grads.params()).zip(slots.iter_mut()) {
                slot.step(&cfg.adam, lr, t as u64, p, g);
            }
        }
    }

    brdf.round_to_f32();
    let params = match (latent, estimator.as_mut()) {
        (Some(mut p), _) => {
            p.round_to_f32();
            p
        }
        (None, Some(u)) => {
            u.round_to_f32();
            let mut p = feature_to_params(&u.forward(est_input.as_ref().expect("estimator input"))?)?;
            p.round_to_f32();
            p
        }
        _ => unreachable!(),
    };
    Ok(FitResult {
        params,
        brdf,
        estimator,
        trace,
        masked_trace,
    })
}

/// Masked log-space L1 between the relit `params` and one target.
pub fn relit_l1(
    brdf: &NeuralBrdf,
    params: &NeuralParamMap,
    target: &HdrImage,
    cfg: &ExemplarConfig,
    mask: &PixelMask,
) -> Result<f64> {
    let log = brdf.relight_log(params, cfg.light_position, cfg.view_position)?;
    let pred = rows_to_rgb(log.view());
    let tgt: Vec<Rgb> = (0..target.pixel_count())
        .map(|i| target.get_index(i).map(f64::ln_1p))
        .collect();
    super::loss::l1_data_loss(&pred, &tgt, mask)
}

fn rows_to_rgb(a: ArrayView2<'_, f64>) -> Vec<Rgb> {
    a.rows().into_iter().map(|r| [r[0], r[1], r[2]]).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::PointSource;
    use crate::render::{render, RenderJob, SvbrdfMaps};
    use crate::sampler::sample_reflect_config;

    fn small_cfg() -> (FitConfig, EncodingConfig) {
        let cfg = FitConfig {
            iterations: 30,
            learning_rate: 3e-3,
            batch_exemplars: 2,
            param_channels: 8,
            hidden_width: 16,
            seed: 3,
            ..FitConfig::default()
        };
        let enc = EncodingConfig {
            frequencies: 4,
            compressed_dim: 8,
        };
        (cfg, enc)
    }

    fn targets(n: usize, size: usize) -> (Vec<(HdrImage, ExemplarConfig)>, HdrImage) {
        let maps = SvbrdfMaps::uniform(size, size, [0.5; 3], [0.04; 3], Vec3::Z, 0.5).unwrap();
        let mut rng = RngStream::new(11);
        let t = (0..n)
            .map(|_| {
                let c = sample_reflect_config(&mut rng);
                let job = RenderJob::new(&maps, PointSource::white(c.light_position), c.view_position);
                (render(&job).unwrap(), c)
            })
            .collect();
        let photo = crate::render::colocated_input_render(&maps).unwrap();
        (t, photo)
    }

    #[test]
    fn config_validation() {
        let ok = FitConfig::default();
        assert!(ok.validate().is_ok());
        assert!(FitConfig { mask_fraction: 0.0, ..ok.clone() }.validate().is_err());
        assert!(FitConfig { mask_fraction: 1.5, ..ok.clone() }.validate().is_err());
        assert!(FitConfig { learning_rate: 0.0, ..ok.clone() }.validate().is_err());
        let json = serde_json::to_string(&ok).unwrap();
        let back: FitConfig = serde_json::from_str(&json).unwrap();
        assert_eq!(back, ok);
        assert!(serde_json::from_str::<FitConfig>(r#"{"learning_rte": 0.1}"#).is_err());
        let partial: FitConfig = serde_json::from_str(r#"{"iterations": 5, "mask_mode": "none"}"#).unwrap();
        assert_eq!(partial.iterations, 5);
        assert_eq!(partial.mask_fraction, 0.6);
    }

    #[test]
    fn learning_rate_decays_per_epoch() {
        let cfg = FitConfig {
            epoch_iterations: 10,
            ..FitConfig::default()
        };
        assert_eq!(cfg.learning_rate_at(1), 1e-4);
        assert_eq!(cfg.learning_rate_at(10), 1e-4);
        assert!((cfg.learning_rate_at(11) - 0.985e-4).abs() < 1e-18);
        assert!((cfg.learning_rate_at(25) - 1e-4 * 0.985f64.powi(2)).abs() < 1e-18);
    }

    #[test]
    fn rejects_bad_inputs() {
        let (cfg, enc) = small_cfg();
        let (t, photo) = targets(2, 8);
        assert!(fit(&[], &photo, &cfg, &enc).is_err());
        let other = HdrImage::new(4, 8);
        assert!(fit(&t, &other, &cfg, &enc).is_err());
    }

    #[test]
    fn loss_decreases_and_is_reproducible() {
        let (cfg, enc) = small_cfg();
        let (t, photo) = targets(4, 8);
        let a = fit(&t, &photo, &cfg, &enc).unwrap();
        let b = fit(&t, &photo, &cfg, &enc).unwrap();
        assert_eq!(a.trace.len(), 30);
        let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a.trace), bits(&b.trace));
        assert_eq!(a.params, b.params);
        let head: f64 = a.trace[..5].iter().sum();
        let tail: f64 = a.trace[25..].iter().sum();
        assert!(tail < head, "{:?}", a.trace);
    }

    #[test]
    fn gradients_match_finite_differences() {
        let (cfg, enc) = small_cfg();
        let (t, photo) = targets(2, 4);
        let ex = check_targets(&t, &photo).unwrap();
        let grid = SurfaceGrid::new(4, 4);
        let brdf = NeuralBrdf::random(enc, 8, 16, 0.01, &mut RngStream::new(1)).unwrap();
        let mut params = init_latent(&photo, 8, 0.3, &mut RngStream::new(2)).unwrap();
        let batch = Batch {
            exemplars: &ex,
            rows: vec![(0, 0), (0, 5), (1, 5), (1, 15), (0, 9)],
        };
        let base = loss_and_grads(&batch, &params, &brdf, &grid).unwrap();
        let h = 1e-6;
        let mut checked = 0;
        for idx in [0, 3, 5 * 8 + 1, 5 * 8 + 7, 15 * 8 + 2, 9 * 8] {
            let orig = params.data()[idx];
            params.data_mut()[idx] = orig + h;
            let up = loss_and_grads(&batch, &params, &brdf, &grid).unwrap().loss;
            params.data_mut()[idx] = orig - h;
            let dn = loss_and_grads(&batch, &params, &brdf, &grid).unwrap().loss;
            params.data_mut()[idx] = orig;
            let fd = (up - dn) / (2.0 * h);
            assert!((fd - base.params[idx]).abs() < 1e-6, "{idx}: {fd} vs {}", base.params[idx]);
            checked += 1;
        }
        // pixels outside the batch get no gradient
        assert!(base.params[8..16].iter().all(|v| *v == 0.0));
        assert_eq!(checked, 6);
        let _ = cfg;
    }

    #[test]
    fn estimator_source_runs() {
        let (mut cfg, enc) = small_cfg();
        cfg.param_source = ParamSource::Estimator;
        cfg.estimator = UNetSpec {
            base_channels: 2,
            blocks_per_level: 1,
            levels: 3,
            in_channels: 4,
            out_channels: 8,
        };
        cfg.iterations = 20;
        let (t, photo) = targets(2, 16);
        let r = fit(&t, &photo, &cfg, &enc).unwrap();
        assert!(r.estimator.is_some());
        assert_eq!(r.params.channels(), 8);
        let head: f64 = r.trace[..4].iter().sum();
        let tail: f64 = r.trace[16..].iter().sum();
        assert!(tail < head, "{:?}", r.trace);
    }
}
