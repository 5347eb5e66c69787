//! Residual encoder-decoder with gated encoder convolutions.
//!
//! Layout for `L` levels and widths `cₗ = base·2ˡ`:
//!
//! ```text
//! stem  HA 7×7 in → c₀
//! enc ℓ gated residual blocks at cₗ → skipₗ → 2×2/2 conv cₗ → cₗ₊₁
//! mid   gated residual blocks at c_L
//! dec ℓ 4×4/2 transposed c_{ℓ+1} → cₗ, concat skipₗ, 3×3 conv 2cₗ → cₗ,
//!       standard residual blocks at cₗ
//! head  1×1 c₀ → out
//! ```

use serde::{Deserialize, Serialize};

use super::conv::{leaky_backward, leaky_map, Conv2d, ConvTranspose2d, HaCache, HaConv};
use crate::error::{Error, Result};
use crate::nbrdf::NeuralParamMap;
use crate::raster::FeatureMap;
use crate::sampler::RngStream;

/// Gain on the second convolution of each residual branch at init, so
/// fresh blocks start close to the identity.
const RESIDUAL_BRANCH_GAIN: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UNetSpec {
    pub base_channels: usize,
    pub blocks_per_level: usize,
    pub levels: usize,
    pub in_channels: usize,
    pub out_channels: usize,
}

impl Default for UNetSpec {
    fn default() -> Self {
        UNetSpec {
            base_channels: 16,
            blocks_per_level: 1,
            levels: 3,
            in_channels: 4,
            out_channels: crate::nbrdf::DEFAULT_PARAM_CHANNELS,
        }
    }
}

impl UNetSpec {
    pub fn validate(&self) -> Result<()> {
        if self.base_channels == 0 || self.in_channels == 0 || self.out_channels == 0 {
            return Err(Error::Config("U-Net channel counts must be positive".into()));
        }
        if self.levels == 0 || self.levels > 8 {
            return Err(Error::Config(format!("unsupported level count {}", self.levels)));
        }
        Ok(())
    }

    pub fn width_at(&self, level: usize) -> usize {
        self.base_channels << level
    }

    /// Input sides must be multiples of this.
    pub fn size_multiple(&self) -> usize {
        1 << self.levels
    }

    pub fn check_input(&self, x: &FeatureMap) -> Result<()> {
        if x.channels != self.in_channels {
            return Err(Error::shape(format!(
                "estimator expects {} input channels, got {}",
                self.in_channels, x.channels
            )));
        }
        let m = self.size_multiple();
        if x.height == 0 || x.width == 0 || !x.height.is_multiple_of(m) || !x.width.is_multiple_of(m) {
            return Err(Error::shape(format!(
                "estimator input {}x{} is not divisible by {m}",
                x.width, x.height
            )));
        }
        // a 7×7 reflect pad needs at least 4 pixels per side at full size and
        // a 3×3 needs 2 at the bottleneck
        if x.height < 4 || x.width < 4 || x.height / m < 2 || x.width / m < 2 {
            return Err(Error::shape("estimator input is too small for its level count"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum BlockConv {
    Standard(Conv2d),
    Gated(HaConv),
}

impl BlockConv {
    fn forward(&self, x: &FeatureMap) -> Result<(FeatureMap, Option<HaCache>)> {
        match self {
            BlockConv::Standard(c) => Ok((c.forward(x)?, None)),
            BlockConv::Gated(c) => {
                let (y, cache) = c.forward(x)?;
                Ok((y, Some(cache)))
            }
        }
    }

    fn backward(&self, x: &FeatureMap, cache: &Option<HaCache>, gy: &FeatureMap, grads: &mut BlockConv) -> FeatureMap {
        match (self, grads, cache) {
            (BlockConv::Standard(c), BlockConv::Standard(g), _) => c.backward(x, gy, g),
            (BlockConv::Gated(c), BlockConv::Gated(g), Some(cache)) => c.backward(x, cache, gy, g),
            _ => unreachable!("gradient structure mirrors the network"),
        }
    }

    fn params(&self) -> Vec<&[f64]> {
        match self {
            BlockConv::Standard(c) => c.params(),
            BlockConv::Gated(c) => c.params(),
        }
    }

    fn params_mut(&mut self) -> Vec<&mut [f64]> {
        match self {
            BlockConv::Standard(c) => c.params_mut(),
            BlockConv::Gated(c) => c.params_mut(),
        }
    }
}

/// Pre-activation residual block: `x + conv₂(act(conv₁(act(x))))`.
#[derive(Debug, Clone, PartialEq)]
pub struct ResBlock {
    pub conv1: BlockConv,
    pub conv2: BlockConv,
}

struct ResTape {
    x: FeatureMap,
    a: FeatureMap,
    h: FeatureMap,
    b: FeatureMap,
    c1: Option<HaCache>,
    c2: Option<HaCache>,
}

impl ResBlock {
    fn zeros(channels: usize, gated: bool) -> Self {
        let make = || {
            if gated {
                BlockConv::Gated(HaConv::zeros(channels, channels, 3))
            } else {
                BlockConv::Standard(Conv2d::zeros(channels, channels, 3, 1))
            }
        };
        ResBlock {
            conv1: make(),
            conv2: make(),
        }
    }

    fn random(channels: usize, gated: bool, rng: &mut RngStream) -> Self {
        let mut make = |gain| {
            if gated {
                BlockConv::Gated(HaConv::random(channels, channels, 3, gain, rng))
            } else {
                BlockConv::Standard(Conv2d::random(channels, channels, 3, 1, gain, rng))
            }
        };
        ResBlock {
            conv1: make(1.0),
            conv2: make(RESIDUAL_BRANCH_GAIN),
        }
    }

    fn forward(&self, x: FeatureMap) -> Result<(FeatureMap, ResTape)> {
        let a = leaky_map(&x);
        let (h, c1) = self.conv1.forward(&a)?;
        let b = leaky_map(&h);
        let (mut y, c2) = self.conv2.forward(&b)?;
        for (v, xv) in y.data.iter_mut().zip(&x.data) {
            *v += xv;
        }
        Ok((y, ResTape { x, a, h, b, c1, c2 }))
    }

    fn backward(&self, t: &ResTape, gy: &FeatureMap, grads: &mut ResBlock) -> FeatureMap {
        let gb = self.conv2.backward(&t.b, &t.c2, gy, &mut grads.conv2);
        let gh = leaky_backward(&t.h, &gb);
        let ga = self.conv1.backward(&t.a, &t.c1, &gh, &mut grads.conv1);
        let mut gx = leaky_backward(&t.x, &ga);
        for (v, g) in gx.data.iter_mut().zip(&gy.data) {
            *v += g;
        }
        gx
    }

    fn params(&self) -> Vec<&[f64]> {
        let mut p = self.conv1.params();
        p.extend(self.conv2.params());
        p
    }

    fn params_mut(&mut self) -> Vec<&mut [f64]> {
        let mut p = self.conv1.params_mut();
        p.extend(self.conv2.params_mut());
        p
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct UNet {
    spec: UNetSpec,
    pub stem: HaConv,
    pub encoder: Vec<Vec<ResBlock>>,
    pub down: Vec<Conv2d>,
    pub bottleneck: Vec<ResBlock>,
    /// Indexed by level; applied from the deepest level up.
    pub up: Vec<ConvTranspose2d>,
    pub fuse: Vec<Conv2d>,
    pub decoder: Vec<Vec<ResBlock>>,
    pub head: Conv2d,
}

/// Intermediate values recorded by [`UNet::forward_tape`].
pub struct UNetTape {
    input: FeatureMap,
    stem: HaCache,
    encoder: Vec<Vec<ResTape>>,
    skips: Vec<FeatureMap>,
    bottleneck: Vec<ResTape>,
    up_in: Vec<FeatureMap>,
    cat: Vec<FeatureMap>,
    decoder: Vec<Vec<ResTape>>,
    head_in: FeatureMap,
    output: FeatureMap,
}

impl UNetTape {
    pub fn output(&self) -> &FeatureMap {
        &self.output
    }
}

fn concat_channels(a: &FeatureMap, b: &FeatureMap) -> FeatureMap {
    debug_assert_eq!((a.height, a.width), (b.height, b.width));
    let mut data = Vec::with_capacity(a.data.len() + b.data.len());
    data.extend_from_slice(&a.data);
    data.extend_from_slice(&b.data);
    FeatureMap {
        channels: a.channels + b.channels,
        height: a.height,
        width: a.width,
        data,
    }
}

fn split_channels(g: FeatureMap, first: usize) -> (FeatureMap, FeatureMap) {
    let n = first * g.height * g.width;
    let (h, w) = (g.height, g.width);
    let mut data = g.data;
    let rest = data.split_off(n);
    (
        FeatureMap {
            channels: first,
            height: h,
            width: w,
            data,
        },
        FeatureMap {
            channels: g.channels - first,
            height: h,
            width: w,
            data: rest,
        },
    )
}

impl UNet {
    fn build(spec: UNetSpec, mut res: impl FnMut(usize, bool) -> ResBlock, mut conv: impl FnMut(usize, usize, usize, usize) -> Conv2d, mut ha: impl FnMut(usize, usize, usize) -> HaConv, mut up: impl FnMut(usize, usize) -> ConvTranspose2d) -> Result<Self> {
        spec.validate()?;
        let l = spec.levels;
        let r = spec.blocks_per_level;
        let stem = ha(spec.in_channels, spec.base_channels, 7);
        let mut encoder = Vec::with_capacity(l);
        let mut down = Vec::with_capacity(l);
        for lv in 0..l {
            let c = spec.width_at(lv);
            encoder.push((0..r).map(|_| res(c, true)).collect());
            down.push(conv(c, spec.width_at(lv + 1), 2, 2));
        }
        let bottleneck = (0..r).map(|_| res(spec.width_at(l), true)).collect();
        let mut ups = Vec::with_capacity(l);
        let mut fuse = Vec::with_capacity(l);
        let mut decoder = Vec::with_capacity(l);
        for lv in 0..l {
            let c = spec.width_at(lv);
            ups.push(up(spec.width_at(lv + 1), c));
            fuse.push(conv(2 * c, c, 3, 1));
            decoder.push((0..r).map(|_| res(c, false)).collect());
        }
        let head = conv(spec.base_channels, spec.out_channels, 1, 1);
        Ok(UNet {
            spec,
            stem,
            encoder,
            down,
            bottleneck,
            up: ups,
            fuse,
            decoder,
            head,
        })
    }

    pub fn zeros(spec: UNetSpec) -> Result<Self> {
        UNet::build(
            spec,
            ResBlock::zeros,
            Conv2d::zeros,
            HaConv::zeros,
            ConvTranspose2d::zeros,
        )
    }

    pub fn random(spec: UNetSpec, rng: &mut RngStream) -> Result<Self> {
        // one stream threaded through construction in a fixed order
        let rng = std::cell::RefCell::new(rng);
        UNet::build(
            spec,
            |c, g| ResBlock::random(c, g, &mut rng.borrow_mut()),
            |i, o, k, s| Conv2d::random(i, o, k, s, 1.0, &mut rng.borrow_mut()),
            |i, o, k| HaConv::random(i, o, k, 1.0, &mut rng.borrow_mut()),
            |i, o| ConvTranspose2d::random(i, o, &mut rng.borrow_mut()),
        )
    }

    pub fn spec(&self) -> &UNetSpec {
        &self.spec
    }

    pub fn forward(&self, x: &FeatureMap) -> Result<FeatureMap> {
        Ok(self.forward_tape(x)?.output)
    }

    pub fn forward_tape(&self, x: &FeatureMap) -> Result<UNetTape> {
        self.spec.check_input(x)?;
        let l = self.spec.levels;
        let (mut cur, stem) = self.stem.forward(x)?;
        let mut encoder = Vec::with_capacity(l);
        let mut skips = Vec::with_capacity(l);
        for lv in 0..l {
            let mut tapes = Vec::new();
            for block in &self.encoder[lv] {
                let (y, t) = block.forward(cur)?;
                tapes.push(t);
                cur = y;
            }
            encoder.push(tapes);
            let next = self.down[lv].forward(&cur)?;
            skips.push(cur);
            cur = next;
        }
        let mut bottleneck = Vec::new();
        for block in &self.bottleneck {
            let (y, t) = block.forward(cur)?;
            bottleneck.push(t);
            cur = y;
        }
        let mut up_in: Vec<Option<FeatureMap>> = (0..l).map(|_| None).collect();
        let mut cat: Vec<Option<FeatureMap>> = (0..l).map(|_| None).collect();
        let mut decoder: Vec<Vec<ResTape>> = (0..l).map(|_| Vec::new()).collect();
        for lv in (0..l).rev() {
            let upsampled = self.up[lv].forward(&cur)?;
            up_in[lv] = Some(cur);
            let c = concat_channels(&upsampled, &skips[lv]);
            cur = self.fuse[lv].forward(&c)?;
            cat[lv] = Some(c);
            for block in &self.decoder[lv] {
                let (y, t) = block.forward(cur)?;
                decoder[lv].push(t);
                cur = y;
            }
        }
        let output = self.head.forward(&cur)?;
        Ok(UNetTape {
            input: x.clone(),
            stem,
            encoder,
            skips,
            bottleneck,
            up_in: up_in.into_iter().map(Option::unwrap).collect(),
            cat: cat.into_iter().map(Option::unwrap).collect(),
            decoder,
            head_in: cur,
            output,
        })
    }

    /// Reverse pass. Returns parameter gradients (as a zero-initialized net
    /// of the same shape) and the input gradient.
    pub fn backward(&self, tape: &UNetTape, out_grad: &FeatureMap) -> Result<(UNet, FeatureMap)> {
        if !out_grad.same_shape(&tape.output) {
            return Err(Error::shape("output gradient shape does not match the forward output"));
        }
        let mut grads = UNet::zeros(self.spec)?;
        let l = self.spec.levels;
        let mut g = self.head.backward(&tape.head_in, out_grad, &mut grads.head);
        let mut skip_grads: Vec<Option<FeatureMap>> = (0..l).map(|_| None).collect();
        for lv in 0..l {
            for (i, block) in self.decoder[lv].iter().enumerate().rev() {
                g = block.backward(&tape.decoder[lv][i], &g, &mut grads.decoder[lv][i]);
            }
            let gcat = self.fuse[lv].backward(&tape.cat[lv], &g, &mut grads.fuse[lv]);
            let (g_up, g_skip) = split_channels(gcat, self.spec.width_at(lv));
            skip_grads[lv] = Some(g_skip);
            g = self.up[lv].backward(&tape.up_in[lv], &g_up, &mut grads.up[lv]);
        }
        for (i, block) in self.bottleneck.iter().enumerate().rev() {
            g = block.backward(&tape.bottleneck[i], &g, &mut grads.bottleneck[i]);
        }
        for lv in (0..l).rev() {
            g = self.down[lv].backward(&tape.skips[lv], &g, &mut grads.down[lv]);
            for (v, s) in g.data.iter_mut().zip(&skip_grads[lv].take().unwrap().data) {
                *v += s;
            }
            for (i, block) in self.encoder[lv].iter().enumerate().rev() {
                g = block.backward(&tape.encoder[lv][i], &g, &mut grads.encoder[lv][i]);
            }
        }
        let gx = self.stem.backward(&tape.input, &tape.stem, &g, &mut grads.stem);
        Ok((grads, gx))
    }

    /// Parameter tensors in a fixed canonical order.
    pub fn params(&self) -> Vec<&[f64]> {
        let mut p = self.stem.params();
        for lv in 0..self.spec.levels {
            for b in &self.encoder[lv] {
                p.extend(b.params());
            }
            p.extend(self.down[lv].params());
        }
        for b in &self.bottleneck {
            p.extend(b.params());
        }
        for lv in 0..self.spec.levels {
            p.extend(self.up[lv].params());
            p.extend(self.fuse[lv].params());
            for b in &self.decoder[lv] {
                p.extend(b.params());
            }
        }
        p.extend(self.head.params());
        p
    }

    pub fn params_mut(&mut self) -> Vec<&mut [f64]> {
        let mut p = self.stem.params_mut();
        for (blocks, down) in self.encoder.iter_mut().zip(self.down.iter_mut()) {
            for b in blocks {
                p.extend(b.params_mut());
            }
            p.extend(down.params_mut());
        }
        for b in &mut self.bottleneck {
            p.extend(b.params_mut());
        }
        for ((up, fuse), blocks) in self.up.iter_mut().zip(self.fuse.iter_mut()).zip(self.decoder.iter_mut()) {
            p.extend(up.params_mut());
            p.extend(fuse.params_mut());
            for b in blocks {
                p.extend(b.params_mut());
            }
        }
        p.extend(self.head.params_mut());
        p
    }

    pub fn parameter_count(&self) -> usize {
        self.params().iter().map(|t| t.len()).sum()
    }

    pub fn round_to_f32(&mut self) {
        for t in self.params_mut() {
            for v in t.iter_mut() {
                *v = *v as f32 as f64;
            }
        }
    }
}

/// Converts the network's `C×H×W` output to an `H×W×C` parameter map.
pub fn feature_to_params(f: &FeatureMap) -> Result<NeuralParamMap> {
    let (c, h, w) = (f.channels, f.height, f.width);
    let mut data = vec![0.0; c * h * w];
    for ch in 0..c {
        for (i, v) in f.plane(ch).iter().enumerate() {
            data[i * c + ch] = *v;
        }
    }
    NeuralParamMap::from_vec(h, w, c, data)
}

/// Inverse of [`feature_to_params`].
pub fn params_to_feature(p: &NeuralParamMap) -> FeatureMap {
    let (c, h, w) = (p.channels(), p.height(), p.width());
    let mut data = vec![0.0; c * h * w];
    for (i, px) in p.data().chunks_exact(c).enumerate() {
        for (ch, v) in px.iter().enumerate() {
            data[ch * h * w + i] = *v;
        }
    }
    FeatureMap {
        channels: c,
        height: h,
        width: w,
        data,
    }
}

/// Predicts a neural parameter map from a 4-channel estimator input.
pub fn estimate(photo_input: &FeatureMap, net: &UNet) -> Result<NeuralParamMap> {
    feature_to_params(&net.forward(photo_input)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> UNetSpec {
        UNetSpec {
            base_channels: 2,
            blocks_per_level: 1,
            levels: 3,
            in_channels: 4,
            out_channels: 3,
        }
    }

    fn input(h: usize, w: usize, rng: &mut RngStream) -> FeatureMap {
        FeatureMap::from_vec(4, h, w, (0..4 * h * w).map(|_| rng.gaussian(0.0, 1.0)).collect()).unwrap()
    }

    #[test]
    fn output_shape_matches_input() {
        let mut rng = RngStream::new(1);
        let spec = UNetSpec {
            base_channels: 4,
            out_channels: 64,
            ..tiny()
        };
        let net = UNet::random(spec, &mut rng).unwrap();
        let p = estimate(&input(64, 64, &mut rng), &net).unwrap();
        assert_eq!((p.height(), p.width(), p.channels()), (64, 64, 64));
        let q = estimate(&input(16, 24, &mut rng), &net).unwrap();
        assert_eq!((q.height(), q.width()), (16, 24));
    }

    #[test]
    fn indivisible_input_is_rejected() {
        let mut rng = RngStream::new(2);
        let net = UNet::random(tiny(), &mut rng).unwrap();
        assert!(estimate(&input(20, 16, &mut rng), &net).is_err());
        let three = FeatureMap::zeros(3, 16, 16);
        assert!(estimate(&three, &net).is_err());
    }

    #[test]
    fn zero_weights_give_constant_bias_map() {
        let mut rng = RngStream::new(3);
        let mut net = UNet::zeros(tiny()).unwrap();
        net.head.bias = vec![0.5, -1.0, 2.0];
        for b in &mut net.fuse[0].bias {
            *b = 0.3;
        }
        let p = estimate(&input(16, 16, &mut rng), &net).unwrap();
        for px in p.data().chunks_exact(3) {
            assert_eq!(px, [0.5, -1.0, 2.0]);
        }
    }

    #[test]
    fn zeroed_up_path_isolates_skips() {
        let mut rng = RngStream::new(4);
        let mut net = UNet::random(tiny(), &mut rng).unwrap();
        for up in &mut net.up {
            up.weights.fill(0.0);
            up.bias.fill(0.0);
        }
        let x = input(16, 16, &mut rng);
        let a = net.forward(&x).unwrap();
        // the bottleneck and deeper encoder levels no longer reach the output
        let mut probe = net.clone();
        for b in &mut probe.bottleneck {
            for t in b.params_mut() {
                t.fill(0.7);
            }
        }
        for t in probe.down[0].params_mut() {
            t.fill(-0.3);
        }
        let b = probe.forward(&x).unwrap();
        assert_eq!(a.data, b.data);
        // the level-0 encoder features still do
        let mut probe = net.clone();
        probe.stem.feature.bias.fill(1.0);
        let c = probe.forward(&x).unwrap();
        assert!(a.data.iter().zip(&c.data).any(|(u, v)| (u - v).abs() > 1e-6));
    }

    #[test]
    fn interior_translation_covariance() {
        let mut rng = RngStream::new(5);
        let net = UNet::random(tiny(), &mut rng).unwrap();
        let (h, w) = (16, 128);
        let x = input(h, w, &mut rng);
        let mut shifted = FeatureMap::zeros(4, h, w);
        for c in 0..4 {
            for y in 0..h {
                for xx in 0..w {
                    let i = shifted.index(c, y, xx);
                    shifted.data[i] = x.at(c, y, (xx + 8) % w);
                }
            }
        }
        let a = net.forward(&x).unwrap();
        let b = net.forward(&shifted).unwrap();
        // receptive field is far smaller than this band
        let band = 48;
        let mut checked = 0;
        for c in 0..a.channels {
            for y in 0..h {
                for xx in band..w - band - 8 {
                    assert!((b.at(c, y, xx) - a.at(c, y, xx + 8)).abs() < 1e-4);
                    checked += 1;
                }
            }
        }
        assert!(checked > 0);
    }

    #[test]
    fn params_roundtrip_through_layout() {
        let mut rng = RngStream::new(6);
        let f = FeatureMap::from_vec(3, 2, 4, (0..24).map(|_| rng.uniform()).collect()).unwrap();
        let p = feature_to_params(&f).unwrap();
        assert_eq!(p.pixel_xy(1, 1)[2], f.at(2, 1, 1));
        assert_eq!(params_to_feature(&p), f);
    }

    #[test]
    fn seeded_init_is_deterministic() {
        let a = UNet::random(tiny(), &mut RngStream::new(9)).unwrap();
        let b = UNet::random(tiny(), &mut RngStream::new(9)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.params().len(), UNet::zeros(tiny()).unwrap().params_mut().len());
    }
}
