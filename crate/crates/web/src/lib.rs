//! WebAssembly bindings for the browser demo in `www/`.
//!
//! Every function returns either RGBA8 pixels ready for `ImageData` or a
//! JSON string, and reports bad input as a JS exception.

use wasm_bindgen::prelude::*;

use svbrdf_forge::geometry::PointSource;
use svbrdf_forge::ggx::GgxSample;
use svbrdf_forge::math::Vec3;
use svbrdf_forge::radiometry::to_display_rgb8;
use svbrdf_forge::raster::HdrImage;
use svbrdf_forge::render::{render, RenderJob, SvbrdfMaps};
use svbrdf_forge::sampler::{eval_configs, ConfigKind, RngStream};
use svbrdf_forge::sphere::{render_sphere, SphereMaterial, SphereScene};

/// Largest image side accepted from the page.
pub const MAX_SIDE: usize = 512;

fn err(e: impl std::fmt::Display) -> String {
    e.to_string()
}

fn js(e: String) -> JsError {
    JsError::new(&e)
}

fn check_side(n: usize) -> Result<(), String> {
    if n == 0 || n > MAX_SIDE {
        return Err(err(format!("image side must be in 1..={MAX_SIDE}, got {n}")));
    }
    Ok(())
}

fn rgba(img: &HdrImage) -> Vec<u8> {
    let rgb = to_display_rgb8(img);
    let mut out = Vec::with_capacity(rgb.len() / 3 * 4);
    for px in rgb.chunks_exact(3) {
        out.extend_from_slice(px);
        out.push(255);
    }
    out
}

/// Checkerboard of two materials, to make the spatial variation visible.
fn checker_maps(size: usize, diffuse: [f64; 3], specular: f64, roughness: f64) -> svbrdf_forge::Result<SvbrdfMaps> {
    let n = size * size;
    let cell = (size / 4).max(1);
    let mut d = Vec::with_capacity(n);
    let mut s = Vec::with_capacity(n);
    let mut r = Vec::with_capacity(n);
    for i in 0..n {
        let (x, y) = (i % size, i / size);
        let dark = ((x / cell) + (y / cell)) % 2 == 1;
        d.push(if dark { diffuse.map(|v| 0.3 * v) } else { diffuse });
        s.push([specular; 3]);
        r.push(if dark { (roughness * 0.5).max(0.05) } else { roughness });
    }
    SvbrdfMaps::new(size, size, d, s, vec![Vec3::Z; n], r)
}

/// Renders a checkered material patch of side `size` lit by a point light
/// at `(lx, ly, lz)` and seen from `(vx, vy, vz)`. `roughness` is the stored
/// `√α`. Returns RGBA8 pixels.
#[allow(clippy::too_many_arguments)]
pub fn material_rgba(
    size: usize,
    diffuse_r: f64,
    diffuse_g: f64,
    diffuse_b: f64,
    specular: f64,
    roughness: f64,
    lx: f64,
    ly: f64,
    lz: f64,
    vx: f64,
    vy: f64,
    vz: f64,
    intensity: f64,
) -> Result<Vec<u8>, String> {
    check_side(size)?;
    let maps = checker_maps(size, [diffuse_r, diffuse_g, diffuse_b], specular, roughness).map_err(err)?;
    let light = PointSource {
        position: Vec3::new(lx, ly, lz),
        intensity: [intensity; 3],
    };
    let img = render(&RenderJob::new(&maps, light, Vec3::new(vx, vy, vz))).map_err(err)?;
    Ok(rgba(&img))
}

/// Renders a uniform GGX material on the unit sphere seen from `+z`.
#[allow(clippy::too_many_arguments)]
pub fn sphere_rgba(
    res: usize,
    diffuse_r: f64,
    diffuse_g: f64,
    diffuse_b: f64,
    specular: f64,
    roughness: f64,
    lx: f64,
    ly: f64,
    lz: f64,
    intensity: f64,
) -> Result<Vec<u8>, String> {
    check_side(res)?;
    if !(0.0..=1.0).contains(&roughness) {
        return Err(err("roughness must lie in [0, 1]"));
    }
    let sample = GgxSample::from_stored([diffuse_r, diffuse_g, diffuse_b], [specular; 3], Vec3::Z, roughness);
    let light = PointSource {
        position: Vec3::new(lx, ly, lz),
        intensity: [intensity; 3],
    };
    let scene = SphereScene::new(SphereMaterial::Ggx(sample), light, res);
    Ok(rgba(&render_sphere(&scene).map_err(err)?))
}

/// Seeded light/view configurations as a JSON array of
/// `{"light": {x,y,z}, "view": {x,y,z}, "highlight": [u, v]}`.
/// `kind` is `reflect`, `identity` or `hemisphere`.
pub fn exemplars_json(seed: u64, count: usize, kind: &str) -> Result<String, String> {
    if count > 10_000 {
        return Err(err("at most 10000 configurations"));
    }
    let kind: ConfigKind = kind.parse().map_err(err)?;
    let configs = eval_configs(kind, count, &mut RngStream::new(seed)).map_err(err)?;
    serde_json::to_string(&configs).map_err(err)
}

#[wasm_bindgen]
#[allow(clippy::too_many_arguments)]
pub fn render_material(
    size: usize,
    diffuse_r: f64,
    diffuse_g: f64,
    diffuse_b: f64,
    specular: f64,
    roughness: f64,
    lx: f64,
    ly: f64,
    lz: f64,
    vx: f64,
    vy: f64,
    vz: f64,
    intensity: f64,
) -> Result<Vec<u8>, JsError> {
    material_rgba(
        size, diffuse_r, diffuse_g, diffuse_b, specular, roughness, lx, ly, lz, vx, vy, vz, intensity,
    )
    .map_err(js)
}

#[wasm_bindgen]
#[allow(clippy::too_many_arguments)]
pub fn render_sphere_ggx(
    res: usize,
    diffuse_r: f64,
    diffuse_g: f64,
    diffuse_b: f64,
    specular: f64,
    roughness: f64,
    lx: f64,
    ly: f64,
    lz: f64,
    intensity: f64,
) -> Result<Vec<u8>, JsError> {
    sphere_rgba(res, diffuse_r, diffuse_g, diffuse_b, specular, roughness, lx, ly, lz, intensity).map_err(js)
}

/// The seed is a `u32` so the page can pass a plain JS number.
#[wasm_bindgen]
pub fn sample_exemplars(seed: u32, count: usize, kind: &str) -> Result<String, JsError> {
    exemplars_json(seed as u64, count, kind).map_err(js)
}
