//! File formats: PFM images, PNG texture maps, the `NBRF` network container,
//! `NPMP` parameter maps, JSON configs, exemplar sets and run manifests.
//!
//! Every writer goes through [`atomic_write`], so a crash never leaves a
//! truncated file behind.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use image::DynamicImage;
use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::encoding::EncodingConfig;
use crate::error::{Error, Result};
use crate::estimator::unet::{UNet, UNetSpec};
use crate::math::{Rgb, Vec3};
use crate::nbrdf::fit::FitConfig;
use crate::nbrdf::mlp::{Activation, DenseLayer, MlpNet};
use crate::nbrdf::{NeuralBrdf, NeuralParamMap};
use crate::radiometry::DISPLAY_GAMMA;
use crate::raster::HdrImage;
use crate::render::SvbrdfMaps;
use crate::sampler::{ExemplarConfig, RNG_ALGORITHM};

/// Writes `bytes` to a temporary file next to `path`, then renames it over
/// `path`.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| Error::Io(e.error))?;
    Ok(())
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::MissingFile(path.to_path_buf()),
        _ => Error::Io(e),
    })
}

// ---------------------------------------------------------------- PFM

/// Encodes an image as little-endian RGB PFM.
pub fn encode_pfm(img: &HdrImage) -> Vec<u8> {
    let (w, h) = (img.width(), img.height());
    let mut out = format!("PF\n{w} {h}\n-1.0\n").into_bytes();
    out.reserve(w * h * 12);
    // PFM stores the bottom row first
    for y in (0..h).rev() {
        for v in &img.data()[y * w * 3..(y + 1) * w * 3] {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

/// Decodes colour (`PF`) or greyscale (`Pf`) PFM data. Greyscale is
/// replicated to three channels.
pub fn decode_pfm(bytes: &[u8]) -> Result<HdrImage> {
    let bad = |r: &str| Error::format("PFM", r);
    // header: three whitespace-separated tokens, then exactly one whitespace
    let mut pos = 0;
    let mut tokens = Vec::with_capacity(4);
    while tokens.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad("truncated header"));
        }
        tokens.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| bad("header is not ASCII"))?);
        if pos - start > 32 {
            return Err(bad("header token too long"));
        }
    }
    if pos >= bytes.len() {
        return Err(bad("missing pixel data"));
    }
    pos += 1;
    let channels = match tokens[0] {
        "PF" => 3,
        "Pf" => 1,
        other => return Err(bad(&format!("unknown magic {other:?}"))),
    };
    let w: usize = tokens[1].parse().map_err(|_| bad("bad width"))?;
    let h: usize = tokens[2].parse().map_err(|_| bad("bad height"))?;
    let scale: f32 = tokens[3].parse().map_err(|_| bad("bad scale"))?;
    if w == 0 || h == 0 || !scale.is_finite() || scale == 0.0 {
        return Err(bad("zero size or invalid scale"));
    }
    let little = scale < 0.0;
    let count = w
        .checked_mul(h)
        .and_then(|n| n.checked_mul(channels))
        .ok_or_else(|| bad("size overflow"))?;
    let payload = &bytes[pos..];
    if payload.len() < count * 4 {
        return Err(bad(&format!("expected {} payload bytes, found {}", count * 4, payload.len())));
    }
    if payload.len() > count * 4 {
        return Err(bad("trailing bytes after payload"));
    }
    let mut data = vec![0f32; w * h * 3];
    for (i, chunk) in payload.chunks_exact(4).enumerate() {
        let b = [chunk[0], chunk[1], chunk[2], chunk[3]];
        let v = if little { f32::from_le_bytes(b) } else { f32::from_be_bytes(b) };
        if v.is_nan() {
            return Err(bad("NaN sample"));
        }
        let px = i / channels;
        let (file_row, x) = (px / w, px % w);
        let y = h - 1 - file_row;
        let base = (y * w + x) * 3;
        if channels == 3 {
            data[base + i % 3] = v;
        } else {
            data[base..base + 3].fill(v);
        }
    }
    HdrImage::from_raw(w, h, data)
}

pub fn write_pfm(img: &HdrImage, path: &Path) -> Result<()> {
    atomic_write(path, &encode_pfm(img))
}

pub fn read_pfm(path: &Path) -> Result<HdrImage> {
    decode_pfm(&read_file(path)?)
}

// ---------------------------------------------------------------- PNG

/// Raw channel values scaled to `[0, 1]`, without any gamma handling.
fn png_unit_rgb(path: &Path) -> Result<(usize, usize, Vec<Rgb>)> {
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    let img = image::open(path)?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let px: Vec<Rgb> = match img {
        DynamicImage::ImageLuma8(_)
        | DynamicImage::ImageLumaA8(_)
        | DynamicImage::ImageRgb8(_)
        | DynamicImage::ImageRgba8(_) => img
            .to_rgb8()
            .pixels()
            .map(|p| p.0.map(|v| v as f64 / 255.0))
            .collect(),
        DynamicImage::ImageLuma16(_)
        | DynamicImage::ImageLumaA16(_)
        | DynamicImage::ImageRgb16(_)
        | DynamicImage::ImageRgba16(_) => img
            .to_rgb16()
            .pixels()
            .map(|p| p.0.map(|v| v as f64 / 65535.0))
            .collect(),
        other => {
            return Err(Error::format(
                "PNG",
                format!("unsupported sample type {:?} in {}", other.color(), path.display()),
            ))
        }
    };
    Ok((w, h, px))
}

/// Reads an 8- or 16-bit PNG and undoes the 2.2 display gamma.
pub fn read_png_ldr(path: &Path) -> Result<HdrImage> {
    let (w, h, px) = png_unit_rgb(path)?;
    Ok(HdrImage::from_fn(w, h, |x, y| px[y * w + x].map(|v| v.powf(DISPLAY_GAMMA))))
}

fn write_png_rgb8(path: &Path, w: usize, h: usize, data: Vec<u8>) -> Result<()> {
    let buf = image::RgbImage::from_raw(w as u32, h as u32, data)
        .ok_or_else(|| Error::shape("PNG buffer size mismatch"))?;
    let mut bytes = Vec::new();
    DynamicImage::ImageRgb8(buf).write_to(&mut std::io::Cursor::new(&mut bytes), image::ImageFormat::Png)?;
    atomic_write(path, &bytes)
}

/// Writes a linear image as gamma-encoded 8-bit PNG, clamping to `[0, 1]`.
pub fn write_png_ldr(img: &HdrImage, path: &Path) -> Result<()> {
    write_png_rgb8(path, img.width(), img.height(), crate::radiometry::to_display_rgb8(img))
}

fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

// ---------------------------------------------------------------- SVBRDF maps

pub const DIFFUSE_FILE: &str = "diffuse.png";
pub const SPECULAR_FILE: &str = "specular.png";
pub const NORMAL_FILE: &str = "normal.png";
pub const ROUGHNESS_FILE: &str = "roughness.png";

/// What to do with decoded normals that are not unit length or do not point
/// above the surface.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NormalPolicy {
    #[default]
    Reject,
    Renormalize,
}

/// Tolerance on `|2v - 1|` before a normal counts as malformed; 8-bit
/// quantization alone stays well inside it.
pub const NORMAL_LENGTH_TOLERANCE: f64 = 0.05;

/// Smallest `z` a renormalized normal is lifted to.
pub const MIN_NORMAL_Z: f64 = 1e-3;

/// Decodes a normal-map texel from `[0, 1]³`.
pub fn decode_normal(texel: Rgb, policy: NormalPolicy) -> Result<Vec3> {
    let v = Vec3::new(2.0 * texel[0] - 1.0, 2.0 * texel[1] - 1.0, 2.0 * texel[2] - 1.0);
    let len = v.length();
    let n = v
        .try_normalize()
        .ok_or_else(|| Error::domain(format!("zero normal from texel {texel:?}")))?;
    match policy {
        NormalPolicy::Reject => {
            if (len - 1.0).abs() > NORMAL_LENGTH_TOLERANCE || n.z <= 0.0 {
                return Err(Error::domain(format!(
                    "texel {texel:?} decodes to {v:?}, not a unit normal above the surface"
                )));
            }
            Ok(n)
        }
        NormalPolicy::Renormalize => {
            if n.z < MIN_NORMAL_Z {
                let t = Vec3::new(n.x, n.y, 0.0).normalize() * (1.0 - MIN_NORMAL_Z * MIN_NORMAL_Z).sqrt();
                return Ok(Vec3::new(t.x, t.y, MIN_NORMAL_Z).normalize());
            }
            Ok(n)
        }
    }
}

/// Loads `diffuse.png`, `specular.png`, `normal.png` and `roughness.png` from
/// `dir`. Colour maps are gamma-decoded; normals and roughness are linear,
/// and roughness keeps the stored `√α` from its first channel.
pub fn load_svbrdf_maps(dir: &Path, policy: NormalPolicy) -> Result<SvbrdfMaps> {
    let (w, h, diffuse) = png_unit_rgb(&dir.join(DIFFUSE_FILE))?;
    let load = |name: &str| -> Result<Vec<Rgb>> {
        let (w2, h2, px) = png_unit_rgb(&dir.join(name))?;
        if (w2, h2) != (w, h) {
            return Err(Error::shape(format!("{name} is {w2}x{h2}, expected {w}x{h}")));
        }
        Ok(px)
    };
    let specular = load(SPECULAR_FILE)?;
    let normal = load(NORMAL_FILE)?;
    let rough = load(ROUGHNESS_FILE)?;
    let degamma = |c: Rgb| c.map(|v| v.powf(DISPLAY_GAMMA));
    let normals = normal
        .iter()
        .map(|t| decode_normal(*t, policy))
        .collect::<Result<Vec<_>>>()?;
    SvbrdfMaps::new(
        w,
        h,
        diffuse.into_iter().map(degamma).collect(),
        specular.into_iter().map(degamma).collect(),
        normals,
        rough.iter().map(|c| c[0]).collect(),
    )
}

/// Writes the four maps as 8-bit PNGs using the conventions of
/// [`load_svbrdf_maps`].
pub fn save_svbrdf_maps(maps: &SvbrdfMaps, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let (w, h) = (maps.width(), maps.height());
    let gamma = |c: &Rgb| c.map(|v| quantize(v.max(0.0).powf(1.0 / DISPLAY_GAMMA)));
    let flat = |px: Vec<[u8; 3]>| px.into_iter().flatten().collect::<Vec<u8>>();
    write_png_rgb8(&dir.join(DIFFUSE_FILE), w, h, flat(maps.diffuse().iter().map(gamma).collect()))?;
    write_png_rgb8(&dir.join(SPECULAR_FILE), w, h, flat(maps.specular().iter().map(gamma).collect()))?;
    let enc = |n: &Vec3| [n.x, n.y, n.z].map(|v| quantize(0.5 * v + 0.5));
    write_png_rgb8(&dir.join(NORMAL_FILE), w, h, flat(maps.normal().iter().map(enc).collect()))?;
    let r = |v: &f64| [quantize(*v); 3];
    write_png_rgb8(&dir.join(ROUGHNESS_FILE), w, h, flat(maps.roughness().iter().map(r).collect()))
}

// ---------------------------------------------------------------- NBRF container

pub const NBRF_MAGIC: &[u8; 4] = b"NBRF";
pub const NBRF_VERSION: u32 = 1;

const SECTION_MLP: u32 = 1;
const SECTION_UNET: u32 = 2;
const SECTION_ENCODING: u32 = 3;

/// One named entry of a network container.
#[derive(Debug, Clone, PartialEq)]
pub enum Section {
    Mlp(String, MlpNet),
    UNet(String, UNet),
    Encoding(String, EncodingConfig),
}

impl Section {
    pub fn name(&self) -> &str {
        match self {
            Section::Mlp(n, _) | Section::UNet(n, _) | Section::Encoding(n, _) => n,
        }
    }
}

struct Writer(Vec<u8>);

impl Writer {
    fn u32(&mut self, v: usize) -> Result<()> {
        let v = u32::try_from(v).map_err(|_| Error::shape(format!("{v} does not fit in u32")))?;
        self.0.extend_from_slice(&v.to_le_bytes());
        Ok(())
    }

    fn f32(&mut self, v: f64) {
        self.0.extend_from_slice(&(v as f32).to_le_bytes());
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    kind: &'static str,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::format(self.kind, format!("truncated at byte {}", self.pos)));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize)
    }

    fn u64(&mut self) -> Result<usize> {
        let b = self.take(8)?;
        let mut a = [0u8; 8];
        a.copy_from_slice(b);
        usize::try_from(u64::from_le_bytes(a)).map_err(|_| Error::format(self.kind, "length overflow"))
    }

    fn f32(&mut self) -> Result<f64> {
        let b = self.take(4)?;
        let v = f32::from_le_bytes([b[0], b[1], b[2], b[3]]);
        if !v.is_finite() {
            return Err(Error::format(self.kind, format!("non-finite value at byte {}", self.pos - 4)));
        }
        Ok(v as f64)
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f64>> {
        if (self.bytes.len() - self.pos) / 4 < n {
            return Err(Error::format(self.kind, format!("truncated at byte {}", self.pos)));
        }
        (0..n).map(|_| self.f32()).collect()
    }

    fn done(&self) -> Result<()> {
        if self.pos != self.bytes.len() {
            return Err(Error::format(self.kind, "trailing bytes"));
        }
        Ok(())
    }
}

fn encode_mlp(net: &MlpNet, w: &mut Writer) -> Result<()> {
    w.f32(net.leaky_slope);
    w.u32(net.layers.len())?;
    for l in &net.layers {
        w.u32(l.input_dim())?;
        w.u32(l.output_dim())?;
        w.u32(l.activation.tag() as usize)?;
        for v in l.weights.iter() {
            w.f32(*v);
        }
        for v in l.bias.iter() {
            w.f32(*v);
        }
    }
    Ok(())
}

fn decode_mlp(r: &mut Reader<'_>) -> Result<MlpNet> {
    let slope = r.f32()?;
    let n = r.u32()?;
    if n == 0 || n > 1024 {
        return Err(Error::format("NBRF", format!("implausible layer count {n}")));
    }
    let mut layers = Vec::with_capacity(n);
    for _ in 0..n {
        let (inp, out) = (r.u32()?, r.u32()?);
        let tag = r.u32()? as u32;
        let activation = Activation::from_tag(tag)
            .ok_or_else(|| Error::format("NBRF", format!("unknown activation tag {tag}")))?;
        let count = inp.checked_mul(out).ok_or_else(|| Error::format("NBRF", "layer size overflow"))?;
        let weights = Array2::from_shape_vec((out, inp), r.f32s(count)?).map_err(|e| Error::format("NBRF", e.to_string()))?;
        let bias = Array1::from(r.f32s(out)?);
        layers.push(DenseLayer {
            weights,
            bias,
            activation,
        });
    }
    MlpNet::new(layers, slope).map_err(|e| Error::format("NBRF", e.to_string()))
}

fn encode_unet(net: &UNet, w: &mut Writer) -> Result<()> {
    let s = net.spec();
    for v in [s.base_channels, s.blocks_per_level, s.levels, s.in_channels, s.out_channels] {
        w.u32(v)?;
    }
    let params = net.params();
    w.u32(params.len())?;
    for t in params {
        w.u32(t.len())?;
        for v in t {
            w.f32(*v);
        }
    }
    Ok(())
}

fn decode_unet(r: &mut Reader<'_>) -> Result<UNet> {
    let spec = UNetSpec {
        base_channels: r.u32()?,
        blocks_per_level: r.u32()?,
        levels: r.u32()?,
        in_channels: r.u32()?,
        out_channels: r.u32()?,
    };
    if spec.base_channels > 4096 || spec.blocks_per_level > 64 || spec.out_channels > 1 << 16 {
        return Err(Error::format("NBRF", "implausible U-Net dimensions"));
    }
    let mut net = UNet::zeros(spec).map_err(|e| Error::format("NBRF", e.to_string()))?;
    let count = r.u32()?;
    let mut tensors = net.params_mut();
    if count != tensors.len() {
        return Err(Error::format(
            "NBRF",
            format!("U-Net section has {count} tensors, spec implies {}", tensors.len()),
        ));
    }
    for (i, t) in tensors.iter_mut().enumerate() {
        let len = r.u32()?;
        if len != t.len() {
            return Err(Error::format("NBRF", format!("tensor {i} has {len} values, expected {}", t.len())));
        }
        let vals = r.f32s(len)?;
        t.copy_from_slice(&vals);
    }
    Ok(net)
}

/// Serializes sections into `NBRF` bytes.
pub fn encode_container(sections: &[Section]) -> Result<Vec<u8>> {
    let mut w = Writer(Vec::new());
    w.0.extend_from_slice(NBRF_MAGIC);
    w.u32(NBRF_VERSION as usize)?;
    w.u32(sections.len())?;
    for s in sections {
        let mut p = Writer(Vec::new());
        let kind = match s {
            Section::Mlp(_, net) => {
                encode_mlp(net, &mut p)?;
                SECTION_MLP
            }
            Section::UNet(_, net) => {
                encode_unet(net, &mut p)?;
                SECTION_UNET
            }
            Section::Encoding(_, cfg) => {
                p.u32(cfg.frequencies)?;
                p.u32(cfg.compressed_dim)?;
                SECTION_ENCODING
            }
        };
        w.u32(kind as usize)?;
        let name = s.name().as_bytes();
        w.u32(name.len())?;
        w.0.extend_from_slice(name);
        w.0.extend_from_slice(&(p.0.len() as u64).to_le_bytes());
        w.0.extend_from_slice(&p.0);
    }
    Ok(w.0)
}

pub fn decode_container(bytes: &[u8]) -> Result<Vec<Section>> {
    let mut r = Reader {
        bytes,
        pos: 0,
        kind: "NBRF",
    };
    if r.take(4)? != NBRF_MAGIC {
        return Err(Error::format("NBRF", "bad magic"));
    }
    let version = r.u32()?;
    if version != NBRF_VERSION as usize {
        return Err(Error::format("NBRF", format!("unsupported version {version}")));
    }
    let n = r.u32()?;
    let mut out = Vec::with_capacity(n.min(64));
    for _ in 0..n {
        let kind = r.u32()? as u32;
        let name_len = r.u32()?;
        let name = String::from_utf8(r.take(name_len)?.to_vec()).map_err(|_| Error::format("NBRF", "section name is not UTF-8"))?;
        let len = r.u64()?;
        let mut p = Reader {
            bytes: r.take(len)?,
            pos: 0,
            kind: "NBRF",
        };
        let section = match kind {
            SECTION_MLP => Section::Mlp(name, decode_mlp(&mut p)?),
            SECTION_UNET => Section::UNet(name, decode_unet(&mut p)?),
            SECTION_ENCODING => {
                let cfg = EncodingConfig {
                    frequencies: p.u32()?,
                    compressed_dim: p.u32()?,
                };
                cfg.validate().map_err(|e| Error::format("NBRF", e.to_string()))?;
                Section::Encoding(name, cfg)
            }
            other => return Err(Error::format("NBRF", format!("unknown section kind {other}"))),
        };
        p.done()?;
        out.push(section);
    }
    r.done()?;
    Ok(out)
}

pub fn write_container(sections: &[Section], path: &Path) -> Result<()> {
    atomic_write(path, &encode_container(sections)?)
}

pub fn read_container(path: &Path) -> Result<Vec<Section>> {
    decode_container(&read_file(path)?)
}

/// Section names used for a neural material.
pub const ENCODING_SECTION: &str = "encoding";
pub const ENCODER_SECTION: &str = "nd_enc";
pub const RENDERER_SECTION: &str = "renderer";
pub const ESTIMATOR_SECTION: &str = "estimator";

pub fn brdf_sections(brdf: &NeuralBrdf) -> Vec<Section> {
    vec![
        Section::Encoding(ENCODING_SECTION.into(), brdf.encoding),
        Section::Mlp(ENCODER_SECTION.into(), brdf.encoder.clone()),
        Section::Mlp(RENDERER_SECTION.into(), brdf.renderer.clone()),
    ]
}

/// Finds the encoding, encoder and renderer sections.
pub fn brdf_from_sections(sections: &[Section]) -> Result<NeuralBrdf> {
    let mut enc = None;
    let mut encoder = None;
    let mut renderer = None;
    for s in sections {
        match s {
            Section::Encoding(n, c) if n == ENCODING_SECTION => enc = Some(*c),
            Section::Mlp(n, m) if n == ENCODER_SECTION => encoder = Some(m.clone()),
            Section::Mlp(n, m) if n == RENDERER_SECTION => renderer = Some(m.clone()),
            _ => {}
        }
    }
    match (enc, encoder, renderer) {
        (Some(e), Some(a), Some(b)) => NeuralBrdf::new(e, a, b),
        _ => Err(Error::format(
            "NBRF",
            format!("container needs {ENCODING_SECTION:?}, {ENCODER_SECTION:?} and {RENDERER_SECTION:?} sections"),
        )),
    }
}

pub fn unet_from_sections(sections: &[Section]) -> Result<UNet> {
    sections
        .iter()
        .find_map(|s| match s {
            Section::UNet(_, u) => Some(u.clone()),
            _ => None,
        })
        .ok_or_else(|| Error::format("NBRF", "container has no U-Net section"))
}

pub fn write_neural_brdf(brdf: &NeuralBrdf, path: &Path) -> Result<()> {
    write_container(&brdf_sections(brdf), path)
}

pub fn read_neural_brdf(path: &Path) -> Result<NeuralBrdf> {
    brdf_from_sections(&read_container(path)?)
}

// ---------------------------------------------------------------- NPMP

pub const NPMP_MAGIC: &[u8; 4] = b"NPMP";

pub fn encode_param_map(p: &NeuralParamMap) -> Result<Vec<u8>> {
    let mut w = Writer(Vec::with_capacity(16 + p.data().len() * 4));
    w.0.extend_from_slice(NPMP_MAGIC);
    w.u32(p.height())?;
    w.u32(p.width())?;
    w.u32(p.channels())?;
    for v in p.data() {
        w.f32(*v);
    }
    Ok(w.0)
}

pub fn decode_param_map(bytes: &[u8]) -> Result<NeuralParamMap> {
    let mut r = Reader {
        bytes,
        pos: 0,
        kind: "NPMP",
    };
    if r.take(4)? != NPMP_MAGIC {
        return Err(Error::format("NPMP", "bad magic"));
    }
    let (h, w, c) = (r.u32()?, r.u32()?, r.u32()?);
    let n = h
        .checked_mul(w)
        .and_then(|v| v.checked_mul(c))
        .ok_or_else(|| Error::format("NPMP", "size overflow"))?;
    if bytes.len() - 16 != n * 4 {
        return Err(Error::format(
            "NPMP",
            format!("{h}x{w}x{c} needs {} payload bytes, found {}", n * 4, bytes.len() - 16),
        ));
    }
    let data = r.f32s(n)?;
    NeuralParamMap::from_vec(h, w, c, data)
}

pub fn write_param_map(p: &NeuralParamMap, path: &Path) -> Result<()> {
    atomic_write(path, &encode_param_map(p)?)
}

pub fn read_param_map(path: &Path) -> Result<NeuralParamMap> {
    decode_param_map(&read_file(path)?)
}

// ---------------------------------------------------------------- JSON config

pub const CONFIG_SCHEMA_VERSION: u32 = 1;

/// On-disk fit configuration. Unknown fields are rejected by name.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigFile {
    pub schema_version: u32,
    #[serde(default)]
    pub fit: FitConfig,
    #[serde(default)]
    pub encoding: EncodingConfig,
    /// Divide rendered radiance by squared light distance.
    #[serde(default)]
    pub falloff: bool,
}

impl Default for ConfigFile {
    fn default() -> Self {
        ConfigFile {
            schema_version: CONFIG_SCHEMA_VERSION,
            fit: FitConfig::default(),
            encoding: EncodingConfig::default(),
            falloff: false,
        }
    }
}

impl ConfigFile {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: ConfigFile = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        if cfg.schema_version != CONFIG_SCHEMA_VERSION {
            return Err(Error::Config(format!(
                "schema_version {} is not supported (expected {CONFIG_SCHEMA_VERSION})",
                cfg.schema_version
            )));
        }
        cfg.fit.validate()?;
        cfg.encoding.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// SHA-256 of the canonical JSON form, hex encoded.
    pub fn hash(&self) -> Result<String> {
        Ok(sha256_hex(serde_json::to_string(self)?.as_bytes()))
    }
}

pub fn read_config(path: &Path) -> Result<ConfigFile> {
    let bytes = read_file(path)?;
    let text = String::from_utf8(bytes).map_err(|_| Error::Config("config is not UTF-8".into()))?;
    ConfigFile::from_json(&text)
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

// ---------------------------------------------------------------- exemplar sets

pub const EXEMPLARS_FILE: &str = "exemplars.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExemplarEntry {
    pub file: String,
    #[serde(flatten)]
    pub config: ExemplarConfig,
}

/// Writes `NNN.pfm` images and an `exemplars.json` index into `dir`.
pub fn write_targets(dir: &Path, targets: &[(HdrImage, ExemplarConfig)]) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut index = Vec::with_capacity(targets.len());
    for (i, (img, cfg)) in targets.iter().enumerate() {
        let file = format!("{i:03}.pfm");
        write_pfm(img, &dir.join(&file))?;
        index.push(ExemplarEntry { file, config: *cfg });
    }
    atomic_write(&dir.join(EXEMPLARS_FILE), serde_json::to_string_pretty(&index)?.as_bytes())
}

/// Writes only the configurations, for exemplar sets without images.
pub fn write_exemplar_configs(path: &Path, configs: &[ExemplarConfig]) -> Result<()> {
    atomic_write(path, serde_json::to_string_pretty(configs)?.as_bytes())
}

pub fn read_exemplar_configs(path: &Path) -> Result<Vec<ExemplarConfig>> {
    Ok(serde_json::from_slice(&read_file(path)?)?)
}

pub fn read_targets(dir: &Path) -> Result<Vec<(HdrImage, ExemplarConfig)>> {
    let index: Vec<ExemplarEntry> = serde_json::from_slice(&read_file(&dir.join(EXEMPLARS_FILE))?)?;
    index
        .into_iter()
        .map(|e| {
            if e.file.contains('/') || e.file.contains('\\') || e.file.starts_with("..") {
                return Err(Error::format("exemplars.json", format!("file {:?} must be a plain name", e.file)));
            }
            Ok((read_pfm(&dir.join(&e.file))?, e.config))
        })
        .collect()
}

// ---------------------------------------------------------------- manifest

pub const MANIFEST_FILE: &str = "manifest.json";

/// Provenance record written once into every CLI output directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunManifest {
    pub command: String,
    pub seed: Option<u64>,
    pub config_hash: Option<String>,
    pub version: String,
    pub rng_algorithm: String,
    pub falloff: bool,
    pub encoding: Option<EncodingConfig>,
    /// Seconds since the Unix epoch.
    pub started_at: u64,
    pub finished_at: u64,
    pub outputs: Vec<String>,
}

impl RunManifest {
    pub fn new(command: &str) -> Self {
        RunManifest {
            command: command.to_string(),
            seed: None,
            config_hash: None,
            version: env!("CARGO_PKG_VERSION").to_string(),
            rng_algorithm: RNG_ALGORITHM.to_string(),
            falloff: false,
            encoding: None,
            started_at: unix_now(),
            finished_at: 0,
            outputs: Vec::new(),
        }
    }
}

pub fn unix_now() -> u64 {
    std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

/// Writes `manifest.json` into `dir`, replacing any previous one.
pub fn write_manifest(dir: &Path, manifest: &RunManifest) -> Result<PathBuf> {
    fs::create_dir_all(dir)?;
    let path = dir.join(MANIFEST_FILE);
    let mut m = manifest.clone();
    if m.finished_at == 0 {
        m.finished_at = unix_now();
    }
    atomic_write(&path, serde_json::to_string_pretty(&m)?.as_bytes())?;
    Ok(path)
}

pub fn read_manifest(dir: &Path) -> Result<RunManifest> {
    Ok(serde_json::from_slice(&read_file(&dir.join(MANIFEST_FILE))?)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sampler::RngStream;

    fn bits(img: &HdrImage) -> Vec<u32> {
        img.data().iter().map(|v| v.to_bits()).collect()
    }

    #[test]
    fn pfm_roundtrip_is_bit_exact() {
        let img = HdrImage::from_raw(1, 1, vec![0.5, 0.25, 1e6]).unwrap();
        let back = decode_pfm(&encode_pfm(&img)).unwrap();
        assert_eq!(bits(&back), bits(&img));

        let mut rng = RngStream::new(1);
        let data: Vec<f32> = (0..5 * 3 * 3).map(|_| (rng.gaussian(0.0, 100.0)).abs() as f32).collect();
        let img = HdrImage::from_raw(5, 3, data).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.pfm");
        write_pfm(&img, &p).unwrap();
        assert_eq!(bits(&read_pfm(&p).unwrap()), bits(&img));
    }

    #[test]
    fn pfm_rows_are_bottom_up() {
        let img = HdrImage::from_fn(1, 2, |_, y| [y as f64; 3]);
        let bytes = encode_pfm(&img);
        let payload = &bytes[bytes.len() - 24..];
        // first stored row is the bottom image row (y = 1)
        assert_eq!(f32::from_le_bytes(payload[..4].try_into().unwrap()), 1.0);
    }

    #[test]
    fn big_endian_fixture() {
        // 2×2, positive scale: big-endian; values 1..12 stored bottom row first
        let mut bytes = b"PF\n2 2\n1.0\n".to_vec();
        for v in 1..=12 {
            bytes.extend_from_slice(&(v as f32).to_be_bytes());
        }
        let img = decode_pfm(&bytes).unwrap();
        assert_eq!(img.get(0, 1), [1.0, 2.0, 3.0]);
        assert_eq!(img.get(1, 1), [4.0, 5.0, 6.0]);
        assert_eq!(img.get(0, 0), [7.0, 8.0, 9.0]);
        assert_eq!(img.get(1, 0), [10.0, 11.0, 12.0]);
    }

    #[test]
    fn greyscale_pfm_expands() {
        let mut bytes = b"Pf\n2 1\n-1\n".to_vec();
        bytes.extend_from_slice(&0.5f32.to_le_bytes());
        bytes.extend_from_slice(&2.0f32.to_le_bytes());
        let img = decode_pfm(&bytes).unwrap();
        assert_eq!(img.get(1, 0), [2.0; 3]);
    }

    #[test]
    fn malformed_pfm() {
        let good = encode_pfm(&HdrImage::from_raw(1, 1, vec![1.0, 2.0, 3.0]).unwrap());
        assert!(decode_pfm(&good[..good.len() - 1]).is_err());
        let mut extra = good.clone();
        extra.push(0);
        assert!(decode_pfm(&extra).is_err());
        assert!(decode_pfm(b"P6\n1 1\n-1\n000000000000").is_err());
        assert!(decode_pfm(b"PF\n1").is_err());
        assert!(decode_pfm(b"PF\nx 1\n-1\n000000000000").is_err());
        let mut nan = b"PF\n1 1\n-1\n".to_vec();
        for v in [1.0f32, f32::NAN, 0.0] {
            nan.extend_from_slice(&v.to_le_bytes());
        }
        assert!(matches!(decode_pfm(&nan), Err(Error::Format { .. })));
    }

    #[test]
    fn png_decoding() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.png");
        write_png_rgb8(&p, 3, 1, vec![255, 255, 255, 0, 0, 0, 128, 128, 128]).unwrap();
        let img = read_png_ldr(&p).unwrap();
        assert_eq!(img.get(0, 0), [1.0; 3]);
        assert_eq!(img.get(1, 0), [0.0; 3]);
        // (128/255)^2.2 = 0.21952…
        assert!((img.get(2, 0)[0] - 0.219520).abs() < 1e-6);

        let p16 = dir.path().join("t16.png");
        let buf: image::ImageBuffer<image::Rgb<u16>, Vec<u16>> =
            image::ImageBuffer::from_raw(1, 1, vec![65535, 0, 32768]).unwrap();
        buf.save(&p16).unwrap();
        let img = read_png_ldr(&p16).unwrap();
        assert_eq!(img.get(0, 0)[0], 1.0);
        assert!(matches!(read_png_ldr(&dir.path().join("nope.png")), Err(Error::MissingFile(_))));
    }

    #[test]
    fn normal_decoding() {
        let up = decode_normal([0.5, 0.5, 1.0], NormalPolicy::Reject).unwrap();
        assert!((up - Vec3::Z).length() < 1e-12);
        assert!(decode_normal([1.0, 0.5, 0.5], NormalPolicy::Reject).is_err());
        let r = decode_normal([1.0, 0.5, 0.5], NormalPolicy::Renormalize).unwrap();
        assert!((r.length() - 1.0).abs() < 1e-12);
        assert!(r.z > 0.0 && r.x > 0.99);
        // mild 8-bit quantization error is accepted
        assert!(decode_normal([128.0 / 255.0, 127.0 / 255.0, 1.0], NormalPolicy::Reject).is_ok());
    }

    #[test]
    fn svbrdf_maps_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let n = Vec3::new(0.2, -0.3, 0.9).normalize();
        let maps = SvbrdfMaps::new(
            2,
            1,
            vec![[0.5, 0.2, 0.1], [1.0, 0.0, 0.3]],
            vec![[0.04; 3], [0.5; 3]],
            vec![Vec3::Z, n],
            vec![0.25, 1.0],
        )
        .unwrap();
        save_svbrdf_maps(&maps, dir.path()).unwrap();
        let back = load_svbrdf_maps(dir.path(), NormalPolicy::Reject).unwrap();
        // roughness 0.25 survives 8-bit storage closely and decodes to α ≈ 0.0625
        assert!((back.roughness()[0] - 0.25).abs() < 2.0 / 255.0);
        assert!((back.sample(0).alpha - 0.0625).abs() < 2e-3);
        assert!((back.normal()[0] - Vec3::Z).length() < 1e-2);
        assert!((back.normal()[1] - n).length() < 1e-2);
        for (a, b) in back.diffuse().iter().zip(maps.diffuse()) {
            for c in 0..3 {
                assert!((a[c] - b[c]).abs() < 1e-2);
            }
        }
        fs::remove_file(dir.path().join(SPECULAR_FILE)).unwrap();
        assert!(matches!(load_svbrdf_maps(dir.path(), NormalPolicy::Reject), Err(Error::MissingFile(_))));
    }

    #[test]
    fn map_size_mismatch_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let a = SvbrdfMaps::uniform(2, 2, [0.5; 3], [0.04; 3], Vec3::Z, 0.5).unwrap();
        save_svbrdf_maps(&a, dir.path()).unwrap();
        write_png_rgb8(&dir.path().join(ROUGHNESS_FILE), 3, 2, vec![0; 18]).unwrap();
        assert!(matches!(load_svbrdf_maps(dir.path(), NormalPolicy::Reject), Err(Error::Shape(_))));
    }

    fn rounded_brdf() -> NeuralBrdf {
        let mut b = NeuralBrdf::random(EncodingConfig::default(), 64, 128, 0.01, &mut RngStream::new(5)).unwrap();
        b.round_to_f32();
        b
    }

    #[test]
    fn container_roundtrip_is_bit_exact() {
        let brdf = rounded_brdf();
        let mut unet = UNet::random(
            UNetSpec {
                base_channels: 4,
                ..UNetSpec::default()
            },
            &mut RngStream::new(6),
        )
        .unwrap();
        unet.round_to_f32();
        let mut sections = brdf_sections(&brdf);
        sections.push(Section::UNet(ESTIMATOR_SECTION.into(), unet.clone()));
        let bytes = encode_container(&sections).unwrap();
        let back = decode_container(&bytes).unwrap();
        assert_eq!(back, sections);
        assert_eq!(encode_container(&back).unwrap(), bytes);
        assert_eq!(brdf_from_sections(&back).unwrap(), brdf);
        assert_eq!(unet_from_sections(&back).unwrap(), unet);

        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.nbrf");
        write_neural_brdf(&brdf, &p).unwrap();
        assert_eq!(read_neural_brdf(&p).unwrap(), brdf);
    }

    #[test]
    fn malformed_containers() {
        let bytes = encode_container(&brdf_sections(&rounded_brdf())).unwrap();
        assert!(decode_container(&bytes[..bytes.len() - 3]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(decode_container(&bad).is_err());
        let mut bad = bytes.clone();
        bad[4] = 9;
        assert!(decode_container(&bad).is_err());
        let mut extra = bytes.clone();
        extra.push(1);
        assert!(decode_container(&extra).is_err());
        assert!(brdf_from_sections(&[]).is_err());
    }

    #[test]
    fn param_map_roundtrip() {
        let mut rng = RngStream::new(7);
        let mut p = NeuralParamMap::from_vec(3, 2, 5, (0..30).map(|_| rng.gaussian(0.0, 1.0)).collect()).unwrap();
        p.round_to_f32();
        let bytes = encode_param_map(&p).unwrap();
        assert_eq!(&bytes[..4], b"NPMP");
        assert_eq!(bytes.len(), 16 + 30 * 4);
        assert_eq!(decode_param_map(&bytes).unwrap(), p);
        assert!(decode_param_map(&bytes[..bytes.len() - 4]).is_err());
    }

    #[test]
    fn config_schema() {
        let cfg = ConfigFile::from_json(r#"{"schema_version": 1, "fit": {"iterations": 7}}"#).unwrap();
        assert_eq!(cfg.fit.iterations, 7);
        assert_eq!(cfg.encoding, EncodingConfig::default());
        let err = ConfigFile::from_json(r#"{"schema_version": 1, "fitt": {}}"#).unwrap_err();
        assert!(err.to_string().contains("fitt"), "{err}");
        let err = ConfigFile::from_json(r#"{"schema_version": 1, "fit": {"lr": 1}}"#).unwrap_err();
        assert!(err.to_string().contains("lr"), "{err}");
        assert!(ConfigFile::from_json(r#"{"schema_version": 2}"#).is_err());
        assert!(ConfigFile::from_json(r#"{"schema_version": 1, "fit": {"mask_fraction": 0}}"#).is_err());
        let d = ConfigFile::default();
        assert_eq!(ConfigFile::from_json(&d.to_json().unwrap()).unwrap(), d);
        assert_eq!(d.hash().unwrap().len(), 64);
    }

    #[test]
    fn targets_and_manifest() {
        let dir = tempfile::tempdir().unwrap();
        let mut rng = RngStream::new(8);
        let targets: Vec<_> = (0..3)
            .map(|i| {
                (
                    HdrImage::from_fn(2, 2, |x, y| [(x + y + i) as f64; 3]),
                    crate::sampler::sample_reflect_config(&mut rng),
                )
            })
            .collect();
        write_targets(dir.path(), &targets).unwrap();
        let back = read_targets(dir.path()).unwrap();
        assert_eq!(back.len(), 3);
        for ((a, ca), (b, cb)) in back.iter().zip(&targets) {
            assert_eq!(a, b);
            assert_eq!(ca, cb);
        }
        let mut m = RunManifest::new("render");
        m.seed = Some(3);
        write_manifest(dir.path(), &m).unwrap();
        write_manifest(dir.path(), &m).unwrap();
        let manifests = fs::read_dir(dir.path())
            .unwrap()
            .filter(|e| e.as_ref().unwrap().file_name() == MANIFEST_FILE)
            .count();
        assert_eq!(manifests, 1);
        assert_eq!(read_manifest(dir.path()).unwrap().seed, Some(3));
    }
}
