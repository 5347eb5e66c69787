//! Renders one pixel's material applied isotropically over a sphere.
//!
//! Directions at a sphere point with normal `m` are taken into the
//! material's own frame with `R_n · R_mᵀ`, where `R_x` is the Gram-Schmidt
//! frame that maps `+z` to `x` and `n` is the material's encoded normal.

use std::f64::consts::PI;

#[cfg(feature = "parallel")]
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{gram_schmidt_rotation, PointSource};
use crate::ggx::{eval_brdf, GgxSample};
use crate::math::{Mat3, Rgb, Vec3};
use crate::nbrdf::NeuralBrdf;
use crate::raster::HdrImage;
use crate::sampler::RngStream;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Sphere {
    pub center: Vec3,
    pub radius: f64,
}

impl Default for Sphere {
    fn default() -> Self {
        Sphere {
            center: Vec3::ZERO,
            radius: 1.0,
        }
    }
}

/// Material painted on the sphere.
#[derive(Debug, Clone, Copy)]
pub enum SphereMaterial<'a> {
    Ggx(GgxSample),
    Neural {
        brdf: &'a NeuralBrdf,
        params: &'a [f64],
        /// Normal the parameters were fitted under.
        normal: Vec3,
    },
}

impl SphereMaterial<'_> {
    fn encoded_normal(&self) -> Vec3 {
        match self {
            SphereMaterial::Ggx(s) => s.normal,
            SphereMaterial::Neural { normal, .. } => *normal,
        }
    }

    /// BRDF value for directions already in the material's frame.
    fn eval(&self, omega_i: Vec3, omega_o: Vec3) -> Result<Rgb> {
        match self {
            SphereMaterial::Ggx(s) => Ok(eval_brdf(s, omega_i, omega_o)),
            SphereMaterial::Neural { brdf, params, .. } => brdf.as_brdf(params, omega_i, omega_o),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct SphereScene<'a> {
    pub sphere: Sphere,
    pub light: PointSource,
    /// Unit direction toward the orthographic camera.
    pub camera: Vec3,
    pub resolution: usize,
    pub material: SphereMaterial<'a>,
    /// Divide by squared light distance.
    pub falloff: bool,
}

impl<'a> SphereScene<'a> {
    /// Unit sphere at the origin seen from `+z` under `light`.
    pub fn new(material: SphereMaterial<'a>, light: PointSource, resolution: usize) -> Self {
        SphereScene {
            sphere: Sphere::default(),
            light,
            camera: Vec3::Z,
            resolution,
            material,
            falloff: false,
        }
    }

    fn validate(&self) -> Result<()> {
        if !(self.sphere.radius > 0.0 && self.sphere.radius.is_finite()) {
            return Err(Error::domain("sphere radius must be positive"));
        }
        if (self.light.position - self.sphere.center).length() <= self.sphere.radius {
            return Err(Error::domain("light lies inside the sphere"));
        }
        if self.resolution == 0 {
            return Err(Error::domain("resolution must be at least 1"));
        }
        if self.camera.try_normalize().is_none() {
            return Err(Error::domain("camera direction must be non-zero"));
        }
        if self.light.intensity.iter().any(|v| !(*v >= 0.0)) {
            return Err(Error::domain("light intensity must be non-negative"));
        }
        Ok(())
    }

    /// Image-plane basis `(right, up, toward camera)`.
    fn camera_basis(&self) -> (Vec3, Vec3, Vec3) {
        let d = self.camera.normalize();
        let hint = if d.y.abs() > 0.999 { Vec3::Z } else { Vec3::Y };
        let right = hint.cross(d).normalize();
        let up = d.cross(right);
        (right, up, d)
    }

    /// Surface normal seen through pixel `(x, y)`, if it hits the sphere.
    pub fn normal_at(&self, x: usize, y: usize) -> Option<Vec3> {
        let n = self.resolution as f64;
        let u = (2.0 * x as f64 + 1.0) / n - 1.0;
        let v = 1.0 - (2.0 * y as f64 + 1.0) / n;
        let s = u * u + v * v;
        if s > 1.0 {
            return None;
        }
        let (right, up, d) = self.camera_basis();
        Some((right * u + up * v + d * (1.0 - s).sqrt()).normalize())
    }
}

/// Maps world directions at a point with normal `m` into the frame of a
/// material whose encoded normal is `n`.
pub fn material_frame(m: Vec3, n: Vec3) -> Mat3 {
    gram_schmidt_rotation(n).mul_mat(&gram_schmidt_rotation(m).transpose())
}

fn shade_pixel(scene: &SphereScene<'_>, x: usize, y: usize) -> Result<Rgb> {
    let Some(m) = scene.normal_at(x, y) else {
        return Ok([0.0; 3]);
    };
    let q = scene.sphere.center + m * scene.sphere.radius;
    let to_light = scene.light.position - q;
    let dist2 = to_light.length_squared();
    let wi = to_light.normalize();
    let cos = m.dot(wi);
    if cos <= 0.0 {
        return Ok([0.0; 3]);
    }
    let wo = scene.camera.normalize();
    let r = material_frame(m, scene.material.encoded_normal());
    let f = scene.material.eval(r.mul_vec(wi), r.mul_vec(wo))?;
    let scale = if scene.falloff { cos / dist2 } else { cos };
    Ok([0, 1, 2].map(|c| scene.light.intensity[c] * f[c] * scale))
}

/// Point-light render of the scene; background pixels are 0.
pub fn render_sphere(scene: &SphereScene<'_>) -> Result<HdrImage> {
    scene.validate()?;
    let n = scene.resolution;
    let row = |y: usize| -> Result<Vec<Rgb>> { (0..n).map(|x| shade_pixel(scene, x, y)).collect() };
    #[cfg(feature = "parallel")]
    let rows: Vec<Result<Vec<Rgb>>> = (0..n).into_par_iter().map(row).collect();
    #[cfg(not(feature = "parallel"))]
    let rows: Vec<Result<Vec<Rgb>>> = (0..n).map(row).collect();
    let mut img = HdrImage::new(n, n);
    for (y, r) in rows.into_iter().enumerate() {
        for (x, c) in r?.into_iter().enumerate() {
            img.set(x, y, c);
        }
    }
    Ok(img)
}

/// Direction with density `cos θ / π` on the upper hemisphere, and that
/// density.
pub fn cosine_sample_hemisphere(rng: &mut RngStream) -> (Vec3, f64) {
    let u1 = rng.uniform();
    let u2 = rng.uniform();
    let r = u1.sqrt();
    let phi = 2.0 * PI * u2;
    let z = (1.0 - u1).max(0.0).sqrt();
    (Vec3::new(r * phi.cos(), r * phi.sin(), z), z / PI)
}

/// Monte Carlo render under a uniform white environment of radiance
/// `env_radiance`, with `samples` cosine-distributed directions per pixel.
/// The point light is ignored.
pub fn render_sphere_environment(
    scene: &SphereScene<'_>,
    env_radiance: f64,
    samples: usize,
    seed: u64,
) -> Result<HdrImage> {
    scene.validate()?;
    if samples == 0 || !(env_radiance >= 0.0) {
        return Err(Error::domain("need at least one sample and non-negative radiance"));
    }
    let n = scene.resolution;
    let wo_world = scene.camera.normalize();
    let row = |y: usize| -> Result<Vec<Rgb>> {
        let mut rng = RngStream::split(seed, y as u64);
        let mut out = Vec::with_capacity(n);
        for x in 0..n {
            let Some(m) = scene.normal_at(x, y) else {
                out.push([0.0; 3]);
                continue;
            };
            let local = gram_schmidt_rotation(m);
            let r = material_frame(m, scene.material.encoded_normal());
            let wo = r.mul_vec(wo_world);
            let mut acc = [0.0; 3];
            for _ in 0..samples {
                let (s, pdf) = cosine_sample_hemisphere(&mut rng);
                if pdf <= 0.0 {
                    continue;
                }
                let wi = r.mul_vec(local.mul_vec(s));
                let f = scene.material.eval(wi, wo)?;
                for c in 0..3 {
                    acc[c] += f[c] * s.z / pdf;
                }
            }
            out.push(acc.map(|v| v * env_radiance / samples as f64));
        }
        Ok(out)
    };
    #[cfg(feature = "parallel")]
    let rows: Vec<Result<Vec<Rgb>>> = (0..n).into_par_iter().map(row).collect();
    #[cfg(not(feature = "parallel"))]
    let rows: Vec<Result<Vec<Rgb>>> = (0..n).map(row).collect();
    let mut img = HdrImage::new(n, n);
    for (y, r) in rows.into_iter().enumerate() {
        for (x, c) in r?.into_iter().enumerate() {
            img.set(x, y, c);
        }
    }
    Ok(img)
}

/// Pixel of the largest channel sum, first in row-major order on ties.
pub fn argmax_pixel(img: &HdrImage) -> (usize, usize) {
    let mut best = (0, 0);
    let mut best_v = f64::NEG_INFINITY;
    for y in 0..img.height() {
        for x in 0..img.width() {
            let v: f64 = img.get(x, y).iter().sum();
            if v > best_v {
                best_v = v;
                best = (x, y);
            }
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoding::EncodingConfig;

    fn lambert(albedo: f64) -> GgxSample {
        GgxSample {
            diffuse: [albedo; 3],
            specular: [0.0; 3],
            normal: Vec3::Z,
            alpha: 0.5,
        }
    }

    #[test]
    fn cosine_samples() {
        let mut rng = RngStream::new(1);
        let n = 100_000;
        let mut mean_z = 0.0;
        for _ in 0..n {
            let (d, pdf) = cosine_sample_hemisphere(&mut rng);
            assert!(d.z >= 0.0);
            assert!((d.length() - 1.0).abs() < 1e-12);
            assert!((pdf - d.z / PI).abs() < 1e-12);
            mean_z += d.z;
        }
        mean_z /= n as f64;
        assert!((mean_z - 2.0 / 3.0).abs() < 0.02 * 2.0 / 3.0);
    }

    #[test]
    fn matches_world_frame_evaluation() {
        // a sphere point with normal m shades like the material tilted to m
        let light = PointSource::white(Vec3::new(3.0, 2.0, 4.0));
        let mat = lambert(1.0);
        let scene = SphereScene::new(SphereMaterial::Ggx(mat), light, 64);
        let img = render_sphere(&scene).unwrap();
        for y in 0..64 {
            for x in 0..64 {
                let got = img.get(x, y)[0] as f64;
                let want = match scene.normal_at(x, y) {
                    Some(m) => {
                        let wi = (light.position - m).normalize();
                        let tilted = GgxSample { normal: m, ..mat };
                        eval_brdf(&tilted, wi, Vec3::Z)[0] * m.dot(wi).max(0.0)
                    }
                    None => 0.0,
                };
                assert!((got - want).abs() < 1e-6 * (1.0 + want), "{x},{y}");
            }
        }
        let (bx, by) = argmax_pixel(&img);
        let m = scene.normal_at(bx, by).unwrap();
        let l = light.position.normalize();
        let h = (l + Vec3::Z).normalize();
        // diffuse peak toward the light, Fresnel pulls it slightly off
        assert!(m.dot(l) > 0.95 || m.dot(h) > 0.95);
        assert_eq!(img.get(0, 0), [0.0; 3]);
    }

    #[test]
    fn glossy_highlight_at_half_vector() {
        let light = PointSource::white(Vec3::new(0.0, 40.0, 60.0));
        let s = GgxSample {
            diffuse: [0.0; 3],
            specular: [0.9; 3],
            normal: Vec3::Z,
            alpha: 0.01,
        };
        let scene = SphereScene::new(SphereMaterial::Ggx(s), light, 128);
        let img = render_sphere(&scene).unwrap();
        let (bx, by) = argmax_pixel(&img);
        // brute force the pixel whose normal best matches the half vector
        let mut best = (0, 0);
        let mut best_d = f64::NEG_INFINITY;
        for y in 0..128 {
            for x in 0..128 {
                if let Some(m) = scene.normal_at(x, y) {
                    let wi = (light.position - m).normalize();
                    let h = (wi + Vec3::Z).normalize();
                    if m.dot(h) > best_d {
                        best_d = m.dot(h);
                        best = (x, y);
                    }
                }
            }
        }
        let d = ((bx as f64 - best.0 as f64).powi(2) + (by as f64 - best.1 as f64).powi(2)).sqrt();
        assert!(d <= 1.5, "{:?} vs {:?}", (bx, by), best);
    }

    #[test]
    fn symmetric_about_light_camera_plane() {
        // light in the y-z plane, camera +z: mirror x ↦ -x
        let light = PointSource::white(Vec3::new(0.0, 2.0, 3.0));
        let s = GgxSample {
            diffuse: [0.3; 3],
            specular: [0.5; 3],
            normal: Vec3::Z,
            alpha: 0.1,
        };
        let img = render_sphere(&SphereScene::new(SphereMaterial::Ggx(s), light, 64)).unwrap();
        for y in 0..64 {
            for x in 0..32 {
                let a = img.get(x, y);
                let b = img.get(63 - x, y);
                for c in 0..3 {
                    assert!((a[c] - b[c]).abs() < 1e-4);
                }
            }
        }
    }

    #[test]
    fn rotation_is_identity_at_encoded_normal() {
        let n = Vec3::new(0.2, -0.1, 1.0).normalize();
        let r = material_frame(n, n);
        let d = Vec3::new(0.3, 0.4, 0.5).normalize();
        assert!((r.mul_vec(d) - d).length() < 1e-12);
        // the sphere normal maps onto the encoded normal
        let m = Vec3::new(-0.5, 0.3, 0.8).normalize();
        assert!((material_frame(m, n).mul_vec(m) - n).length() < 1e-12);
    }

    #[test]
    fn neural_center_pixel_matches_direct_eval() {
        let enc = EncodingConfig {
            frequencies: 4,
            compressed_dim: 8,
        };
        let brdf = NeuralBrdf::random(enc, 6, 16, 0.01, &mut RngStream::new(3)).unwrap();
        let params = [0.1, -0.2, 0.3, 0.0, 0.5, -0.4];
        let light = PointSource::white(Vec3::new(1.0, 0.5, 3.0));
        // odd resolution puts a pixel center exactly at m = +z
        let scene = SphereScene::new(
            SphereMaterial::Neural {
                brdf: &brdf,
                params: &params,
                normal: Vec3::Z,
            },
            light,
            65,
        );
        assert!((scene.normal_at(32, 32).unwrap() - Vec3::Z).length() < 1e-15);
        let img = render_sphere(&scene).unwrap();
        let wi = (light.position - Vec3::Z).normalize();
        let f = brdf.as_brdf(&params, wi, Vec3::Z).unwrap();
        let got = img.get(32, 32);
        for c in 0..3 {
            let want = f[c] * wi.z;
            assert!((got[c] as f64 - want).abs() < 1e-6 * (1.0 + want.abs()));
        }
    }

    #[test]
    fn white_lambertian_energy_bound() {
        for pos in [Vec3::new(0.0, 0.0, 5.0), Vec3::new(3.0, 2.0, 4.0), Vec3::new(-4.0, 0.5, 1.0), Vec3::new(0.0, 6.0, 0.2)] {
            let light = PointSource::white(pos);
            let scene = SphereScene::new(SphereMaterial::Ggx(lambert(1.0)), light, 96);
            let img = render_sphere(&scene).unwrap();
            assert!(img.max_value() as f64 <= 1.0 / PI + 1e-6, "{pos:?}: {}", img.max_value());
        }
    }

    /// Directional albedo `∫ f cos θ dω` at normal view by midpoint
    /// quadrature in `(θ, φ)`.
    fn albedo_quadrature(mat: &GgxSample) -> f64 {
        let (nt, np) = (400, 200);
        let mut acc = 0.0;
        for i in 0..nt {
            let t = (i as f64 + 0.5) / nt as f64 * PI / 2.0;
            for j in 0..np {
                let p = (j as f64 + 0.5) / np as f64 * 2.0 * PI;
                let wi = Vec3::new(t.sin() * p.cos(), t.sin() * p.sin(), t.cos());
                acc += eval_brdf(mat, wi, Vec3::Z)[0] * t.cos() * t.sin();
            }
        }
        acc * (PI / 2.0 / nt as f64) * (2.0 * PI / np as f64)
    }

    #[test]
    fn environment_render_converges_to_albedo() {
        let mat = GgxSample {
            alpha: 0.8,
            ..lambert(0.7)
        };
        let want = albedo_quadrature(&mat);
        let scene = SphereScene::new(SphereMaterial::Ggx(mat), PointSource::white(Vec3::new(0.0, 0.0, 5.0)), 9);
        let img = render_sphere_environment(&scene, 2.0, 20_000, 9).unwrap();
        let got = img.get(4, 4)[0] as f64 / 2.0;
        assert!((got - want).abs() < 0.01 * want, "{got} vs {want}");
        assert_eq!(img.get(0, 0), [0.0; 3]);
    }

    #[test]
    fn invalid_scenes() {
        let inside = SphereScene::new(SphereMaterial::Ggx(lambert(0.5)), PointSource::white(Vec3::new(0.0, 0.0, 0.5)), 8);
        assert!(render_sphere(&inside).is_err());
        let mut s = SphereScene::new(SphereMaterial::Ggx(lambert(0.5)), PointSource::white(Vec3::new(0.0, 0.0, 3.0)), 8);
        s.sphere.radius = 0.0;
        assert!(render_sphere(&s).is_err());
    }
}
