//! Per-pixel neural materials: a map of learned parameter vectors rendered by
//! a shared MLP that takes the parameters and a compressed encoding of the
//! light/view directions, and returns log-compressed radiance including the
//! `n·ωi` foreshortening factor.

pub mod adam;
pub mod fit;
pub mod loss;
pub mod mlp;

use ndarray::{s, Array2};

use crate::encoding::{encode_directions, encode_directions_into, EncodingConfig};
use crate::error::{Error, Result};
use crate::geometry::{direction_to, half_vector, SurfaceGrid};
use crate::math::{Rgb, Vec3};
use crate::raster::HdrImage;
use crate::sampler::RngStream;

use mlp::{Activation, MlpNet};

/// Default per-pixel parameter count.
pub const DEFAULT_PARAM_CHANNELS: usize = 64;

/// Default hidden width of the renderer network.
pub const DEFAULT_HIDDEN_WIDTH: usize = 128;

/// Number of dense layers in the renderer network.
pub const RENDERER_LAYERS: usize = 6;

/// Smallest `n·ωi` that [`NeuralBrdf::as_brdf`] divides by.
pub const MIN_BRDF_COSINE: f64 = 1e-4;

/// `H×W×C` raster of per-pixel material parameter vectors, row-major with
/// interleaved channels.
#[derive(Debug, Clone, PartialEq)]
pub struct NeuralParamMap {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f64>,
}

impl NeuralParamMap {
    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        NeuralParamMap {
            height,
            width,
            channels,
            data: vec![0.0; height * width * channels],
        }
    }

    pub fn from_vec(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != height * width * channels {
            return Err(Error::shape(format!(
                "parameter map {height}x{width}x{channels} needs {} values, got {}",
                height * width * channels,
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::domain("parameter map contains non-finite values"));
        }
        Ok(NeuralParamMap {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn pixel_count(&self) -> usize {
        self.height * self.width
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn pixel(&self, index: usize) -> &[f64] {
        &self.data[index * self.channels..(index + 1) * self.channels]
    }

    pub fn pixel_xy(&self, x: usize, y: usize) -> &[f64] {
        self.pixel(y * self.width + x)
    }

    pub fn round_to_f32(&mut self) {
        for v in &mut self.data {
            *v = *v as f32 as f64;
        }
    }
}

/// Output of the renderer for one pixel: `params ‖ compressed encoding`
/// through `net`, read as log-compressed RGB radiance.
pub fn render_pixel(params: &[f64], enc: &[f64], net: &MlpNet) -> Result<Rgb> {
    if params.len() + enc.len() != net.input_dim() || net.output_dim() != 3 {
        return Err(Error::shape(format!(
            "renderer takes {} inputs and returns {}, got {} params + {} encoding",
            net.input_dim(),
            net.output_dim(),
            params.len(),
            enc.len()
        )));
    }
    let mut input = Vec::with_capacity(net.input_dim());
    input.extend_from_slice(params);
    input.extend_from_slice(enc);
    let out = net.forward(&input)?;
    Ok([out[0], out[1], out[2]])
}

/// Renderer network shape: `input → hidden ×5 (leaky) → 3 (linear)`.
pub fn renderer_net(
    input_dim: usize,
    hidden: usize,
    leaky_slope: f64,
    rng: &mut RngStream,
) -> Result<MlpNet> {
    let mut dims = vec![input_dim];
    dims.extend(std::iter::repeat_n(hidden, RENDERER_LAYERS - 1));
    dims.push(3);
    let mut acts = vec![Activation::Leaky; RENDERER_LAYERS - 1];
    acts.push(Activation::Linear);
    MlpNet::random(&dims, &acts, leaky_slope, rng)
}

/// Encoder and renderer networks plus the encoding they were trained with.
#[derive(Debug, Clone, PartialEq)]
pub struct NeuralBrdf {
    pub encoding: EncodingConfig,
    pub encoder: MlpNet,
    pub renderer: MlpNet,
}

impl NeuralBrdf {
    pub fn new(encoding: EncodingConfig, encoder: MlpNet, renderer: MlpNet) -> Result<Self> {
        encoding.validate()?;
        if encoder.input_dim() != encoding.encoded_len() {
            return Err(Error::shape(format!(
                "encoder expects {} inputs but the encoding has {}",
                encoder.input_dim(),
                encoding.encoded_len()
            )));
        }
        if renderer.input_dim() <= encoder.output_dim() || renderer.output_dim() != 3 {
            return Err(Error::shape(
                "renderer must take parameters plus the compressed encoding and return RGB",
            ));
        }
        Ok(NeuralBrdf {
            encoding,
            encoder,
            renderer,
        })
    }

    /// Freshly initialized networks for `param_channels`-long parameters.
    pub fn random(
        encoding: EncodingConfig,
        param_channels: usize,
        hidden: usize,
        leaky_slope: f64,
        rng: &mut RngStream,
    ) -> Result<Self> {
        let encoder = encoding.encoder_net(leaky_slope, rng)?;
        let renderer = renderer_net(param_channels + encoding.compressed_dim, hidden, leaky_slope, rng)?;
        NeuralBrdf::new(encoding, encoder, renderer)
    }

    pub fn param_channels(&self) -> usize {
        self.renderer.input_dim() - self.encoder.output_dim()
    }

    pub fn round_to_f32(&mut self) {
        self.encoder.round_to_f32();
        self.renderer.round_to_f32();
    }

    /// Compressed direction encoding for one light/view pair.
    pub fn compressed_encoding(&self, omega_i: Vec3, omega_o: Vec3) -> Result<Vec<f64>> {
        let h = half_vector(omega_i, omega_o)?;
        let e = encode_directions(omega_i, omega_o, h, &self.encoding);
        self.encoder.forward(&e)
    }

    /// Log radiance for one pixel's parameters under `(ωi, ωo)`.
    pub fn render_log(&self, params: &[f64], omega_i: Vec3, omega_o: Vec3) -> Result<Rgb> {
        let enc = self.compressed_encoding(omega_i, omega_o)?;
        render_pixel(params, &enc, &self.renderer)
    }

    /// The renderer as a BRDF: expanded radiance divided by `n·ωi` with
    /// `n = +z` in the pixel's frame. Negative expansions clamp to 0, and
    /// incidence below `MIN_BRDF_COSINE` returns 0.
    pub fn as_brdf(&self, params: &[f64], omega_i: Vec3, omega_o: Vec3) -> Result<Rgb> {
        let cos = omega_i.z;
        if cos < MIN_BRDF_COSINE {
            return Ok([0.0; 3]);
        }
        if (omega_i + omega_o).length_squared() < 1e-24 {
            return Ok([0.0; 3]);
        }
        let log = self.render_log(params, omega_i, omega_o)?;
        Ok(log.map(|v| (v.exp_m1() / cos.max(MIN_BRDF_COSINE)).max(0.0)))
    }

    /// Batched log radiance for rows of parameters and raw encodings.
    pub fn render_log_batch(&self, params: &Array2<f64>, encodings: &Array2<f64>) -> Result<Array2<f64>> {
        if params.nrows() != encodings.nrows() {
            return Err(Error::shape("parameter and encoding batches differ in length"));
        }
        let compressed = self.encoder.forward_batch(encodings.view())?;
        let c = params.ncols();
        let mut input = Array2::zeros((params.nrows(), c + compressed.ncols()));
        input.slice_mut(s![.., ..c]).assign(params);
        input.slice_mut(s![.., c..]).assign(&compressed);
        self.renderer.forward_batch(input.view())
    }

    /// Renders a whole parameter map under a point light and camera, using
    /// perspective-rectified per-pixel directions. Returns linear radiance.
    pub fn relight(&self, params: &NeuralParamMap, light: Vec3, view: Vec3) -> Result<HdrImage> {
        let log = self.relight_log(params, light, view)?;
        let data = log.iter().map(|v| v.exp_m1().max(0.0) as f32).collect();
        HdrImage::from_raw(params.width(), params.height(), data)
    }

    /// As [`NeuralBrdf::relight`] but returns the raw log-space output,
    /// `(pixels × 3)`.
    pub fn relight_log(&self, params: &NeuralParamMap, light: Vec3, view: Vec3) -> Result<Array2<f64>> {
        if params.channels() != self.param_channels() {
            return Err(Error::shape(format!(
                "parameter map has {} channels, renderer expects {}",
                params.channels(),
                self.param_channels()
            )));
        }
        let grid = SurfaceGrid::new(params.width(), params.height());
        let encodings = direction_encodings(&grid, light, view, &self.encoding)?;
        let p = Array2::from_shape_vec((params.pixel_count(), params.channels()), params.data().to_vec())
            .map_err(|e| Error::shape(e.to_string()))?;
        self.render_log_batch(&p, &encodings)
    }
}

/// Raw direction encodings for every pixel of `grid`, `(pixels × len)`.
pub fn direction_encodings(
    grid: &SurfaceGrid,
    light: Vec3,
    view: Vec3,
    cfg: &EncodingConfig,
) -> Result<Array2<f64>> {
    let n = grid.width * grid.height;
    let mut out = Array2::zeros((n, cfg.encoded_len()));
    for (i, mut row) in out.rows_mut().into_iter().enumerate() {
        let p = grid.position_index(i);
        let wi = direction_to(p, light)?;
        let wo = direction_to(p, view)?;
        let h = half_vector(wi, wo)?;
        encode_directions_into(wi, wo, h, cfg, row.as_slice_mut().expect("standard layout"));
    }
    Ok(out)
}
