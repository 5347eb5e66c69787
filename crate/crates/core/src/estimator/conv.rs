//! Convolution layers on `C×H×W` feature maps with hand-written reverse
//! passes.
//!
//! Spatial convolutions use reflect padding of `k/2`; the 2×2 stride-2
//! downsampling convolution uses none. Transposed convolutions are 4×4,
//! stride 2, padding 1, which exactly doubles the resolution.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::FeatureMap;
use crate::sampler::RngStream;

/// LeakyReLU slope used throughout the estimator.
pub const ESTIMATOR_LEAKY_SLOPE: f64 = 0.2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConvKind {
    Standard,
    HighlightAware,
    Transposed,
}

/// Shape of one convolution layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvLayerSpec {
    pub kernel: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub stride: usize,
    pub kind: ConvKind,
}

impl ConvLayerSpec {
    pub fn validate(&self) -> Result<()> {
        if self.kernel == 0 || self.in_channels == 0 || self.out_channels == 0 {
            return Err(Error::shape("convolution sizes must be positive"));
        }
        match (self.kind, self.stride) {
            (ConvKind::Transposed, 2) => Ok(()),
            (ConvKind::Transposed, s) => Err(Error::shape(format!("transposed stride {s} != 2"))),
            (_, 1) if self.kernel % 2 == 1 => Ok(()),
            (_, 1) => Err(Error::shape(format!(
                "stride-1 kernel size {} must be odd",
                self.kernel
            ))),
            (ConvKind::Standard, 2) if self.kernel == 2 => Ok(()),
            (_, s) => Err(Error::shape(format!(
                "stride {s} is only allowed for 2x2 downsampling"
            ))),
        }
    }
}

/// Mirror index `i` into `[0, n)` without repeating the edge sample.
#[inline]
pub fn reflect_index(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let n = n as isize;
    let period = 2 * (n - 1);
    let mut j = i.rem_euclid(period);
    if j >= n {
        j = period - j;
    }
    j as usize
}

#[inline]
pub fn leaky(v: f64) -> f64 {
    if v > 0.0 {
        v
    } else {
        ESTIMATOR_LEAKY_SLOPE * v
    }
}

#[inline]
pub fn leaky_slope_at(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else {
        ESTIMATOR_LEAKY_SLOPE
    }
}

pub fn leaky_map(x: &FeatureMap) -> FeatureMap {
    FeatureMap {
        data: x.data.iter().map(|&v| leaky(v)).collect(),
        ..*x
    }
}

/// `g ⊙ leaky'(pre)`.
pub fn leaky_backward(pre: &FeatureMap, g: &FeatureMap) -> FeatureMap {
    FeatureMap {
        data: pre
            .data
            .iter()
            .zip(&g.data)
            .map(|(&p, &gv)| gv * leaky_slope_at(p))
            .collect(),
        ..*g
    }
}

#[inline]
fn sigmoid(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

/// Standard 2D convolution. Weights are `[out][in][k][k]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Conv2d {
    pub fn zeros(in_channels: usize, out_channels: usize, kernel: usize, stride: usize) -> Self {
        Conv2d {
            in_channels,
            out_channels,
            kernel,
            stride,
            weights: vec![0.0; out_channels * in_channels * kernel * kernel],
            bias: vec![0.0; out_channels],
        }
    }

    /// He-normal weights scaled by `gain`, zero bias.
    pub fn random(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        gain: f64,
        rng: &mut RngStream,
    ) -> Self {
        let mut c = Conv2d::zeros(in_channels, out_channels, kernel, stride);
        let std = gain * (2.0 / (in_channels * kernel * kernel) as f64).sqrt();
        for w in &mut c.weights {
            *w = rng.gaussian(0.0, std);
        }
        c
    }

    pub fn spec(&self) -> ConvLayerSpec {
        ConvLayerSpec {
            kernel: self.kernel,
            in_channels: self.in_channels,
            out_channels: self.out_channels,
            stride: self.stride,
            kind: ConvKind::Standard,
        }
    }

    fn pad(&self) -> usize {
        if self.stride == 1 {
            self.kernel / 2
        } else {
            0
        }
    }

    pub fn output_size(&self, h: usize, w: usize) -> (usize, usize) {
        let p = self.pad();
        (
            (h + 2 * p - self.kernel) / self.stride + 1,
            (w + 2 * p - self.kernel) / self.stride + 1,
        )
    }

    #[inline]
    fn widx(&self, co: usize, ci: usize, ky: usize, kx: usize) -> usize {
        ((co * self.in_channels + ci) * self.kernel + ky) * self.kernel + kx
    }

    /// Source index tables: `rows[ky][oy]` is the input row read by output
    /// row `oy` at kernel row `ky`.
    fn tables(&self, h: usize, w: usize) -> (Vec<Vec<usize>>, Vec<Vec<usize>>, usize, usize) {
        let (oh, ow) = self.output_size(h, w);
        let p = self.pad() as isize;
        let k = self.kernel;
        let s = self.stride as isize;
        let rows = (0..k)
            .map(|ky| {
                (0..oh)
                    .map(|oy| reflect_index(oy as isize * s + ky as isize - p, h))
                    .collect()
            })
            .collect();
        let cols = (0..k)
            .map(|kx| {
                (0..ow)
                    .map(|ox| reflect_index(ox as isize * s + kx as isize - p, w))
                    .collect()
            })
            .collect();
        (rows, cols, oh, ow)
    }

    fn check(&self, x: &FeatureMap) -> Result<()> {
        if x.channels != self.in_channels {
            return Err(Error::shape(format!(
                "convolution expects {} channels, got {}",
                self.in_channels, x.channels
            )));
        }
        if x.height < self.kernel.min(2) || x.width < self.kernel.min(2) {
            return Err(Error::shape("feature map smaller than kernel"));
        }
        Ok(())
    }

    pub fn forward(&self, x: &FeatureMap) -> Result<FeatureMap> {
        self.check(x)?;
        let (rows, cols, oh, ow) = self.tables(x.height, x.width);
        let mut out = FeatureMap::zeros(self.out_channels, oh, ow);
        let k = self.kernel;
        for co in 0..self.out_channels {
            let o = &mut out.data[co * oh * ow..(co + 1) * oh * ow];
            o.fill(self.bias[co]);
            for ci in 0..self.in_channels {
                let plane = x.plane(ci);
                for ky in 0..k {
                    for kx in 0..k {
                        let wv = self.weights[self.widx(co, ci, ky, kx)];
                        if wv == 0.0 {
                            continue;
                        }
                        for (oy, &iy) in rows[ky].iter().enumerate() {
                            let src = &plane[iy * x.width..(iy + 1) * x.width];
                            let dst = &mut o[oy * ow..(oy + 1) * ow];
                            for (d, &ix) in dst.iter_mut().zip(&cols[kx]) {
                                *d += wv * src[ix];
                            }
                        }
                    }
                }
            }
        }
        Ok(out)
    }

    /// Accumulates parameter gradients into `grads` and returns the input
    /// gradient.
    pub fn backward(&self, x: &FeatureMap, gy: &FeatureMap, grads: &mut Conv2d) -> FeatureMap {
        let (rows, cols, oh, ow) = self.tables(x.height, x.width);
        debug_assert_eq!((gy.height, gy.width), (oh, ow));
        let mut gx = FeatureMap::zeros(x.channels, x.height, x.width);
        let k = self.kernel;
        let w = x.width;
        for co in 0..self.out_channels {
            let g = gy.plane(co);
            grads.bias[co] += g.iter().sum::<f64>();
            for ci in 0..self.in_channels {
                let plane = x.plane(ci);
                let gplane = &mut gx.data[ci * x.height * w..(ci + 1) * x.height * w];
                for ky in 0..k {
                    for kx in 0..k {
                        let wi = self.widx(co, ci, ky, kx);
                        let wv = self.weights[wi];
                        let mut acc = 0.0;
                        for (oy, &iy) in rows[ky].iter().enumerate() {
                            let grow = &g[oy * ow..(oy + 1) * ow];
                            let src = &plane[iy * w..(iy + 1) * w];
                            for (gv, &ix) in grow.iter().zip(&cols[kx]) {
                                acc += gv * src[ix];
                            }
                            if wv != 0.0 {
                                let dst = &mut gplane[iy * w..(iy + 1) * w];
                                for (gv, &ix) in grow.iter().zip(&cols[kx]) {
                                    dst[ix] += wv * gv;
                                }
                            }
                        }
                        grads.weights[wi] += acc;
                    }
                }
            }
        }
        gx
    }

    pub fn params(&self) -> Vec<&[f64]> {
        vec![&self.weights, &self.bias]
    }

    pub fn params_mut(&mut self) -> Vec<&mut [f64]> {
        vec![&mut self.weights, &mut self.bias]
    }
}

/// Cached intermediates of a highlight-aware convolution.
#[derive(Debug, Clone)]
pub struct HaCache {
    feature: FeatureMap,
    gate: FeatureMap,
}

impl HaCache {
    /// Sigmoid gate values, strictly inside `(0, 1)` for finite inputs.
    pub fn gate(&self) -> &FeatureMap {
        &self.gate
    }
}

/// Gated convolution: `conv_f(x) ⊙ σ(conv_g(x))`. The gate learns a soft
/// per-pixel, per-channel mask over the same receptive field.
#[derive(Debug, Clone, PartialEq)]
pub struct HaConv {
    pub feature: Conv2d,
    pub gate: Conv2d,
}

impl HaConv {
    pub fn zeros(in_channels: usize, out_channels: usize, kernel: usize) -> Self {
        HaConv {
            feature: Conv2d::zeros(in_channels, out_channels, kernel, 1),
            gate: Conv2d::zeros(in_channels, out_channels, kernel, 1),
        }
    }

    pub fn random(in_channels: usize, out_channels: usize, kernel: usize, gain: f64, rng: &mut RngStream) -> Self {
        HaConv {
            feature: Conv2d::random(in_channels, out_channels, kernel, 1, gain, rng),
            gate: Conv2d::random(in_channels, out_channels, kernel, 1, 1.0, rng),
        }
    }

    pub fn spec(&self) -> ConvLayerSpec {
        ConvLayerSpec {
            kind: ConvKind::HighlightAware,
            ..self.feature.spec()
        }
    }

    pub fn forward(&self, x: &FeatureMap) -> Result<(FeatureMap, HaCache)> {
        let feature = self.feature.forward(x)?;
        let mut gate = self.gate.forward(x)?;
        for v in &mut gate.data {
            *v = sigmoid(*v);
        }
        let out = FeatureMap {
            data: feature.data.iter().zip(&gate.data).map(|(f, g)| f * g).collect(),
            ..feature
        };
        Ok((out, HaCache { feature, gate }))
    }

    pub fn backward(&self, x: &FeatureMap, cache: &HaCache, gy: &FeatureMap, grads: &mut HaConv) -> FeatureMap {
        let gf = FeatureMap {
            data: gy.data.iter().zip(&cache.gate.data).map(|(g, s)| g * s).collect(),
            ..*gy
        };
        let gz = FeatureMap {
            data: gy
                .data
                .iter()
                .zip(&cache.feature.data)
                .zip(&cache.gate.data)
                .map(|((g, f), s)| g * f * s * (1.0 - s))
                .collect(),
            ..*gy
        };
        let mut gx = self.feature.backward(x, &gf, &mut grads.feature);
        let g2 = self.gate.backward(x, &gz, &mut grads.gate);
        for (a, b) in gx.data.iter_mut().zip(&g2.data) {
            *a += b;
        }
        gx
    }

    pub fn params(&self) -> Vec<&[f64]> {
        let mut p = self.feature.params();
        p.extend(self.gate.params());
        p
    }

    pub fn params_mut(&mut self) -> Vec<&mut [f64]> {
        let mut p = self.feature.params_mut();
        p.extend(self.gate.params_mut());
        p
    }
}

/// 4×4 stride-2 transposed convolution. Weights are `[in][out][4][4]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvTranspose2d {
    pub in_channels: usize,
    pub out_channels: usize,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

const UP_K: usize = 4;
const UP_PAD: isize = 1;

impl ConvTranspose2d {
    pub fn zeros(in_channels: usize, out_channels: usize) -> Self {
        ConvTranspose2d {
            in_channels,
            out_channels,
            weights: vec![0.0; in_channels * out_channels * UP_K * UP_K],
            bias: vec![0.0; out_channels],
        }
    }

    pub fn random(in_channels: usize, out_channels: usize, rng: &mut RngStream) -> Self {
        let mut c = ConvTranspose2d::zeros(in_channels, out_channels);
        // each output sees in_channels × 2 × 2 taps
        let std = (2.0 / (in_channels * 4) as f64).sqrt();
        for w in &mut c.weights {
            *w = rng.gaussian(0.0, std);
        }
        c
    }

    pub fn spec(&self) -> ConvLayerSpec {
        ConvLayerSpec {
            kernel: UP_K,
            in_channels: self.in_channels,
            out_channels: self.out_channels,
            stride: 2,
            kind: ConvKind::Transposed,
        }
    }

    #[inline]
    fn widx(&self, ci: usize, co: usize, ky: usize, kx: usize) -> usize {
        ((ci * self.out_channels + co) * UP_K + ky) * UP_K + kx
    }

    /// Output coordinate for input `i` and kernel tap `k`, if inside.
    #[inline]
    fn target(i: usize, k: usize, n_out: usize) -> Option<usize> {
        let o = i as isize * 2 - UP_PAD + k as isize;
        (o >= 0 && (o as usize) < n_out).then_some(o as usize)
    }

    pub fn forward(&self, x: &FeatureMap) -> Result<FeatureMap> {
        if x.channels != self.in_channels {
            return Err(Error::shape(format!(
                "transposed convolution expects {} channels, got {}",
                self.in_channels, x.channels
            )));
        }
        let (oh, ow) = (x.height * 2, x.width * 2);
        let mut out = FeatureMap::zeros(self.out_channels, oh, ow);
        for co in 0..self.out_channels {
            out.data[co * oh * ow..(co + 1) * oh * ow].fill(self.bias[co]);
        }
        for ci in 0..self.in_channels {
            let plane = x.plane(ci);
            for co in 0..self.out_channels {
                let o = &mut out.data[co * oh * ow..(co + 1) * oh * ow];
                for ky in 0..UP_K {
                    for kx in 0..UP_K {
                        let wv = self.weights[self.widx(ci, co, ky, kx)];
                        for iy in 0..x.height {
                            let Some(oy) = Self::target(iy, ky, oh) else { continue };
                            for ix in 0..x.width {
                                if let Some(ox) = Self::target(ix, kx, ow) {
                                    o[oy * ow + ox] += wv * plane[iy * x.width + ix];
                                }
                            }
                        }
                    }
                }
            }
        }
        Ok(out)
    }

    pub fn backward(&self, x: &FeatureMap, gy: &FeatureMap, grads: &mut ConvTranspose2d) -> FeatureMap {
        let (oh, ow) = (gy.height, gy.width);
        let mut gx = FeatureMap::zeros(x.channels, x.height, x.width);
        for co in 0..self.out_channels {
            grads.bias[co] += gy.plane(co).iter().sum::<f64>();
        }
        for ci in 0..self.in_channels {
            let plane = x.plane(ci);
            for co in 0..self.out_channels {
                let g = gy.plane(co);
                for ky in 0..UP_K {
                    for kx in 0..UP_K {
                        let wi = self.widx(ci, co, ky, kx);
                        let wv = self.weights[wi];
                        let mut acc = 0.0;
                        for iy in 0..x.height {
                            let Some(oy) = Self::target(iy, ky, oh) else { continue };
                            for ix in 0..x.width {
                                if let Some(ox) = Self::target(ix, kx, ow) {
                                    let gv = g[oy * ow + ox];
                                    acc += gv * plane[iy * x.width + ix];
                                    gx.data[(ci * x.height + iy) * x.width + ix] += wv * gv;
                                }
                            }
                        }
                        grads.weights[wi] += acc;
                    }
                }
            }
        }
        gx
    }

    pub fn params(&self) -> Vec<&[f64]> {
        vec![&self.weights, &self.bias]
    }

    pub fn params_mut(&mut self) -> Vec<&mut [f64]> {
        vec![&mut self.weights, &mut self.bias]
    }
}

/// Highlight-aware convolution as a free function.
pub fn ha_conv_forward(input: &FeatureMap, layer: &HaConv) -> Result<FeatureMap> {
    Ok(layer.forward(input)?.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn random_map(c: usize, h: usize, w: usize, rng: &mut RngStream) -> FeatureMap {
        FeatureMap::from_vec(c, h, w, (0..c * h * w).map(|_| rng.gaussian(0.0, 1.0)).collect()).unwrap()
    }

    /// Direct nested-loop reference with explicit reflect padding.
    fn naive_conv(x: &FeatureMap, c: &Conv2d) -> FeatureMap {
        let p = if c.stride == 1 { c.kernel / 2 } else { 0 } as isize;
        let (oh, ow) = c.output_size(x.height, x.width);
        let mut out = FeatureMap::zeros(c.out_channels, oh, ow);
        for co in 0..c.out_channels {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut s = c.bias[co];
                    for ci in 0..c.in_channels {
                        for ky in 0..c.kernel {
                            for kx in 0..c.kernel {
                                let mut iy = oy as isize * c.stride as isize + ky as isize - p;
                                let mut ix = ox as isize * c.stride as isize + kx as isize - p;
                                if iy < 0 {
                                    iy = -iy;
                                }
                                if iy >= x.height as isize {
                                    iy = 2 * (x.height as isize - 1) - iy;
                                }
                                if ix < 0 {
                                    ix = -ix;
                                }
                                if ix >= x.width as isize {
                                    ix = 2 * (x.width as isize - 1) - ix;
                                }
                                let w = c.weights
                                    [((co * c.in_channels + ci) * c.kernel + ky) * c.kernel + kx];
                                s += w * x.at(ci, iy as usize, ix as usize);
                            }
                        }
                    }
                    let i = out.index(co, oy, ox);
                    out.data[i] = s;
                }
            }
        }
        out
    }

    #[test]
    fn reflect_indices() {
        assert_eq!(reflect_index(-1, 5), 1);
        assert_eq!(reflect_index(-2, 5), 2);
        assert_eq!(reflect_index(5, 5), 3);
        assert_eq!(reflect_index(6, 5), 2);
        assert_eq!(reflect_index(-1, 1), 0);
        assert_eq!(reflect_index(3, 2), 1);
    }

    #[test]
    fn conv_matches_naive_loops() {
        let mut rng = RngStream::new(1);
        let x = random_map(3, 7, 6, &mut rng);
        for (k, s) in [(3, 1), (5, 1), (1, 1), (2, 2)] {
            let c = Conv2d::random(3, 4, k, s, 1.0, &mut rng);
            let a = c.forward(&x).unwrap();
            let b = naive_conv(&x, &c);
            for (u, v) in a.data.iter().zip(&b.data) {
                assert!((u - v).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn ha_conv_matches_reference() {
        let mut rng = RngStream::new(2);
        let x = random_map(2, 5, 5, &mut rng);
        let mut ha = HaConv::random(2, 3, 3, 1.0, &mut rng);
        for b in &mut ha.gate.bias {
            *b = rng.gaussian(0.0, 0.5);
        }
        let got = ha_conv_forward(&x, &ha).unwrap();
        let f = naive_conv(&x, &ha.feature);
        let g = naive_conv(&x, &ha.gate);
        for i in 0..got.data.len() {
            let want = f.data[i] / (1.0 + (-g.data[i]).exp());
            assert!((got.data[i] - want).abs() < 1e-5);
        }
    }

    #[test]
    fn open_and_closed_gates() {
        let mut rng = RngStream::new(3);
        let x = random_map(2, 6, 6, &mut rng);
        let mut ha = HaConv::random(2, 2, 3, 1.0, &mut rng);
        ha.gate.weights.fill(0.0);
        ha.gate.bias.fill(60.0);
        let plain = ha.feature.forward(&x).unwrap();
        let open = ha_conv_forward(&x, &ha).unwrap();
        for (a, b) in open.data.iter().zip(&plain.data) {
            assert!((a - b).abs() < 1e-12);
        }
        ha.gate.bias.fill(-60.0);
        let closed = ha_conv_forward(&x, &ha).unwrap();
        assert!(closed.data.iter().all(|v| v.abs() < 1e-20));

        // gate outputs stay strictly inside (0, 1) for moderate inputs
        let ha = HaConv::random(2, 2, 3, 1.0, &mut rng);
        let (_, cache) = ha.forward(&x).unwrap();
        assert!(cache.gate().data.iter().all(|g| *g > 0.0 && *g < 1.0));
    }

    #[test]
    fn transposed_doubles_resolution() {
        let mut rng = RngStream::new(4);
        let x = random_map(3, 4, 5, &mut rng);
        let t = ConvTranspose2d::random(3, 2, &mut rng);
        let y = t.forward(&x).unwrap();
        assert_eq!((y.channels, y.height, y.width), (2, 8, 10));
    }

    #[test]
    fn layer_spec_rules() {
        let ok = ConvLayerSpec {
            kernel: 3,
            in_channels: 2,
            out_channels: 2,
            stride: 1,
            kind: ConvKind::HighlightAware,
        };
        assert!(ok.validate().is_ok());
        assert!(ConvLayerSpec { kernel: 4, ..ok }.validate().is_err());
        assert!(ConvLayerSpec { stride: 2, ..ok }.validate().is_err());
        assert!(ConvLayerSpec {
            kernel: 2,
            stride: 2,
            kind: ConvKind::Standard,
            ..ok
        }
        .validate()
        .is_ok());
        assert!(ConvTranspose2d::zeros(2, 2).spec().validate().is_ok());
    }
}
