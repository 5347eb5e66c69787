//! Point-light rendering of GGX SVBRDF maps into HDR radiance images.
//!
//! Every pixel is shaded as an independent BRDF sample at its surface
//! position, with its own light and view direction (perspective-rectified
//! rendering). Output radiance includes the `n·ωi` foreshortening factor.

use crate::error::{Error, Result};
use crate::geometry::{direction_to, half_vector, PointSource, SurfaceGrid};
use crate::ggx::{eval_brdf, GgxSample};
use crate::math::{Rgb, Vec3};
use crate::raster::{FeatureMap, HdrImage};

/// Distance of the co-located input camera/light above the surface center:
/// `1 / tan(28° / 2)`, so a 28° field of view spans the `2×2` surface.
pub fn d_view() -> f64 {
    1.0 / (14.0f64).to_radians().tan()
}

/// Position of the co-located input light and camera.
pub fn colocated_position() -> Vec3 {
    Vec3::new(0.0, 0.0, d_view())
}

/// Per-pixel GGX parameter maps. All rasters share one resolution and are
/// stored row-major; colors are linear.
#[derive(Debug, Clone, PartialEq)]
pub struct SvbrdfMaps {
    width: usize,
    height: usize,
    diffuse: Vec<Rgb>,
    specular: Vec<Rgb>,
    normal: Vec<Vec3>,
    /// Stored `√α` values in `[0, 1]`.
    roughness: Vec<f64>,
}

impl SvbrdfMaps {
    pub fn new(
        width: usize,
        height: usize,
        diffuse: Vec<Rgb>,
        specular: Vec<Rgb>,
        normal: Vec<Vec3>,
        roughness: Vec<f64>,
    ) -> Result<Self> {
        let n = width * height;
        for (name, len) in [
            ("diffuse", diffuse.len()),
            ("specular", specular.len()),
            ("normal", normal.len()),
            ("roughness", roughness.len()),
        ] {
            if len != n {
                return Err(Error::shape(format!(
                    "{name} map has {len} pixels, expected {width}x{height}"
                )));
            }
        }
        if let Some(r) = roughness.iter().find(|r| !(0.0..=1.0).contains(*r)) {
            return Err(Error::domain(format!("roughness value {r} outside [0, 1]")));
        }
        if let Some(nrm) = normal
            .iter()
            .find(|v| (v.length() - 1.0).abs() > 1e-3 || v.z <= 0.0)
        {
            return Err(Error::domain(format!(
                "normal {nrm:?} is not a unit vector with positive z"
            )));
        }
        Ok(SvbrdfMaps {
            width,
            height,
            diffuse,
            specular,
            normal,
            roughness,
        })
    }

    /// Spatially constant material.
    pub fn uniform(
        width: usize,
        height: usize,
        diffuse: Rgb,
        specular: Rgb,
        normal: Vec3,
        roughness: f64,
    ) -> Result<Self> {
        let n = width * height;
        SvbrdfMaps::new(
            width,
            height,
            vec![diffuse; n],
            vec![specular; n],
            vec![normal; n],
            vec![roughness; n],
        )
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn grid(&self) -> SurfaceGrid {
        SurfaceGrid::new(self.width, self.height)
    }

    pub fn diffuse(&self) -> &[Rgb] {
        &self.diffuse
    }

    pub fn specular(&self) -> &[Rgb] {
        &self.specular
    }

    pub fn normal(&self) -> &[Vec3] {
        &self.normal
    }

    pub fn roughness(&self) -> &[f64] {
        &self.roughness
    }

    /// Decoded BRDF parameters of pixel `index`.
    pub fn sample(&self, index: usize) -> GgxSample {
        GgxSample::from_stored(
            self.diffuse[index],
            self.specular[index],
            self.normal[index],
            self.roughness[index],
        )
    }
}

/// One rendering request.
#[derive(Debug, Clone, Copy)]
pub struct RenderJob<'a> {
    pub maps: &'a SvbrdfMaps,
    pub light: PointSource,
    pub view_position: Vec3,
    /// Ignore `view_position` and place the camera at the light.
    pub colocated: bool,
    /// Apply inverse-square distance falloff to the light.
    pub falloff: bool,
}

impl<'a> RenderJob<'a> {
    pub fn new(maps: &'a SvbrdfMaps, light: PointSource, view_position: Vec3) -> Self {
        RenderJob {
            maps,
            light,
            view_position,
            colocated: false,
            falloff: false,
        }
    }

    pub fn camera(&self) -> Vec3 {
        if self.colocated {
            self.light.position
        } else {
            self.view_position
        }
    }
}

fn shade_pixel(job: &RenderJob<'_>, grid: &SurfaceGrid, index: usize) -> Result<Rgb> {
    let p = grid.position_index(index);
    let wi = direction_to(p, job.light.position)?;
    let wo = direction_to(p, job.camera())?;
    let sample = job.maps.sample(index);
    let cos = sample.normal.dot(wi).max(0.0);
    let mut scale = cos;
    if job.falloff {
        scale /= (job.light.position - p).length_squared();
    }
    let f = eval_brdf(&sample, wi, wo);
    let i = job.light.intensity;
    Ok([f[0] * i[0] * scale, f[1] * i[1] * scale, f[2] * i[2] * scale])
}

/// Renders the job to a linear HDR radiance image.
pub fn render(job: &RenderJob<'_>) -> Result<HdrImage> {
    if !(job.light.position.z > 0.0) || !(job.camera().z > 0.0) {
        return Err(Error::domain(
            "light and view positions must lie above the surface (z > 0)",
        ));
    }
    if job.light.intensity.iter().any(|c| !(*c >= 0.0)) {
        return Err(Error::domain("light intensity must be non-negative"));
    }
    let grid = job.maps.grid();
    let n = grid.width * grid.height;

    #[cfg(feature = "parallel")]
    let pixels: Vec<Rgb> = {
        use rayon::prelude::*;
        (0..n)
            .into_par_iter()
            .map(|i| shade_pixel(job, &grid, i))
            .collect::<Result<_>>()?
    };
    #[cfg(not(feature = "parallel"))]
    let pixels: Vec<Rgb> = (0..n)
        .map(|i| shade_pixel(job, &grid, i))
        .collect::<Result<_>>()?;

    let data = pixels
        .iter()
        .flat_map(|c| c.map(|v| v as f32))
        .collect::<Vec<_>>();
    HdrImage::from_raw(grid.width, grid.height, data)
}

/// Input-photograph configuration: unit white light and camera co-located at
/// `(0, 0, d_view)`.
pub fn colocated_input_render(maps: &SvbrdfMaps) -> Result<HdrImage> {
    let job = RenderJob {
        colocated: true,
        ..RenderJob::new(maps, PointSource::white(colocated_position()), colocated_position())
    };
    render(&job)
}

/// `z` component of the per-pixel half vector, i.e. `ωh·n` for the macro
/// normal `n = +z`.
pub fn half_cosine_map(grid: &SurfaceGrid, light: Vec3, view: Vec3) -> Result<Vec<f64>> {
    grid.positions()
        .map(|p| {
            let wi = direction_to(p, light)?;
            let wo = direction_to(p, view)?;
            Ok(half_vector(wi, wo)?.z)
        })
        .collect()
}

/// Four-channel estimator input: log-compressed RGB of the linear `photo`
/// followed by the (not log-scaled) half-vector cosine.
pub fn build_estimator_input(photo: &HdrImage, light: Vec3, view: Vec3) -> Result<FeatureMap> {
    let (w, h) = (photo.width(), photo.height());
    let grid = SurfaceGrid::new(w, h);
    let cosines = half_cosine_map(&grid, light, view)?;
    let plane = w * h;
    let mut out = FeatureMap::zeros(4, h, w);
    for i in 0..plane {
        let c = photo.get_index(i);
        for (ch, v) in c.iter().enumerate() {
            if !(*v >= 0.0) {
                return Err(Error::domain(format!("negative radiance {v} at pixel {i}")));
            }
            out.data[ch * plane + i] = v.ln_1p();
        }
        out.data[3 * plane + i] = cosines[i];
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use std::f64::consts::PI;

    fn gray(w: usize, h: usize, a: f64) -> SvbrdfMaps {
        SvbrdfMaps::uniform(w, h, [a; 3], [0.0; 3], Vec3::Z, 0.5).unwrap()
    }

    #[test]
    fn d_view_constant() {
        assert!((d_view() - 4.010781).abs() < 1e-5);
    }

    #[test]
    fn null_material_is_black() {
        let maps = SvbrdfMaps::uniform(8, 8, [0.0; 3], [0.0; 3], Vec3::Z, 0.5).unwrap();
        let img = colocated_input_render(&maps).unwrap();
        assert!(img.data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn lambertian_center_pixel() {
        // 1x1 grid puts the only pixel at the origin
        let maps = gray(1, 1, 0.5);
        let img = colocated_input_render(&maps).unwrap();
        let want = 0.5 / PI;
        for c in img.get(0, 0) {
            assert_relative_eq!(c, want, epsilon = 1e-7);
        }

        // off-center pixel: a/π · cosθ with cosθ = d / sqrt(d² + |p|²)
        let maps = gray(4, 4, 0.5);
        let img = colocated_input_render(&maps).unwrap();
        let p = maps.grid().position(0, 0);
        let cos = d_view() / (d_view() * d_view() + p.length_squared()).sqrt();
        assert_relative_eq!(img.get(0, 0)[1], 0.5 / PI * cos, epsilon = 1e-7);
    }

    #[test]
    fn specular_peak_where_half_vector_is_normal() {
        let maps = SvbrdfMaps::uniform(33, 33, [0.0; 3], [0.5; 3], Vec3::Z, 0.3).unwrap();
        let img = colocated_input_render(&maps).unwrap();
        let cos = half_cosine_map(&maps.grid(), colocated_position(), colocated_position())
            .unwrap();
        let argmax = |v: &[f64]| {
            v.iter()
                .enumerate()
                .max_by(|a, b| a.1.total_cmp(b.1))
                .unwrap()
                .0
        };
        let lum: Vec<f64> = (0..33 * 33).map(|i| img.get_index(i)[0]).collect();
        assert_eq!(argmax(&lum), argmax(&cos));
        assert_eq!(argmax(&cos), 16 * 33 + 16);
    }

    #[test]
    fn render_is_linear_in_intensity() {
        let maps = SvbrdfMaps::uniform(8, 8, [0.3, 0.5, 0.7], [0.2; 3], Vec3::Z, 0.4).unwrap();
        let base = RenderJob::new(
            &maps,
            PointSource::white(Vec3::new(1.0, 0.5, 2.0)),
            Vec3::new(-1.0, 0.0, 3.0),
        );
        let a = render(&base).unwrap();
        let mut scaled = base;
        scaled.light.intensity = [0.0; 3];
        assert!(render(&scaled).unwrap().data().iter().all(|v| *v == 0.0));
        scaled.light.intensity = [4.0; 3];
        let b = render(&scaled).unwrap();
        for (x, y) in a.data().iter().zip(b.data()) {
            // scaling by a power of two is exact
            assert_eq!(*x * 4.0, *y);
        }
    }

    #[test]
    fn colocated_flat_render_is_point_symmetric() {
        let maps = SvbrdfMaps::uniform(16, 16, [0.4; 3], [0.3; 3], Vec3::Z, 0.4).unwrap();
        let img = colocated_input_render(&maps).unwrap();
        for y in 0..16 {
            for x in 0..16 {
                let a = img.get(x, y);
                let b = img.get(15 - x, 15 - y);
                for c in 0..3 {
                    assert!((a[c] - b[c]).abs() < 1e-5);
                }
            }
        }
    }

    #[test]
    fn falloff_divides_by_squared_distance() {
        let maps = gray(1, 1, 0.5);
        let mut job = RenderJob::new(&maps, PointSource::white(Vec3::new(0.0, 0.0, 2.0)), Vec3::Z);
        let a = render(&job).unwrap().get(0, 0)[0];
        job.falloff = true;
        let b = render(&job).unwrap().get(0, 0)[0];
        assert_relative_eq!(b, a / 4.0, epsilon = 1e-8);
    }

    #[test]
    fn rejects_bad_maps_and_jobs() {
        assert!(SvbrdfMaps::new(2, 2, vec![[0.0; 3]; 4], vec![[0.0; 3]; 3], vec![Vec3::Z; 4], vec![0.5; 4]).is_err());
        assert!(SvbrdfMaps::uniform(2, 2, [0.0; 3], [0.0; 3], Vec3::X, 0.5).is_err());
        assert!(SvbrdfMaps::uniform(2, 2, [0.0; 3], [0.0; 3], Vec3::Z, 1.5).is_err());
        let maps = gray(2, 2, 0.5);
        let job = RenderJob::new(&maps, PointSource::white(Vec3::new(0.0, 0.0, -1.0)), Vec3::Z);
        assert!(render(&job).is_err());
    }

    #[test]
    fn estimator_input_channels() {
        let maps = SvbrdfMaps::uniform(8, 8, [0.4; 3], [0.3; 3], Vec3::Z, 0.4).unwrap();
        let photo = colocated_input_render(&maps).unwrap();
        let c = colocated_position();
        let input = build_estimator_input(&photo, c, c).unwrap();
        assert_eq!(input.channels, 4);
        for i in 0..64 {
            let (x, y) = (i % 8, i / 8);
            for ch in 0..3 {
                let want = (photo.get(x, y)[ch]).ln_1p();
                assert_eq!(input.at(ch, y, x), want);
            }
        }
        // corner pixel, co-located: ωh = ωi = normalize(c - p)
        let p = SurfaceGrid::new(8, 8).position(7, 7);
        let want = (c - p).normalize().z;
        assert_relative_eq!(input.at(3, 7, 7), want, epsilon = 1e-12);

        let one = SvbrdfMaps::uniform(1, 1, [0.4; 3], [0.3; 3], Vec3::Z, 0.4).unwrap();
        let photo = colocated_input_render(&one).unwrap();
        let input = build_estimator_input(&photo, c, c).unwrap();
        assert_eq!(input.at(3, 0, 0), 1.0);
    }
}
