//! Isotropic GGX microfacet BRDF with a Lambertian diffuse lobe.
//!
//! The specular lobe is `D·F·G / (4 (h·ωo)(h·ωi))` with the Trowbridge-Reitz
//! distribution, the separable Smith shadow-masking product and Schlick's
//! Fresnel approximation. The diffuse lobe is `diffuse / π`.

use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::math::{Rgb, Vec3};

/// Lower bound applied to `α` after decoding a roughness map value.
pub const MIN_ALPHA: f64 = 1e-3;

/// Lower bound on `h·ωi` and `h·ωo` in the specular denominator.
pub const DENOM_GUARD: f64 = 1e-6;

const COS_SLACK: f64 = 1e-6;

/// Analytic material parameters at one surface point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GgxSample {
    pub diffuse: Rgb,
    /// Specular reflectance at normal incidence (F0).
    pub specular: Rgb,
    pub normal: Vec3,
    /// Surface-slope standard deviation.
    pub alpha: f64,
}

impl GgxSample {
    /// Builds a sample from stored map values, where `roughness` holds `√α`.
    pub fn from_stored(diffuse: Rgb, specular: Rgb, normal: Vec3, roughness: f64) -> Self {
        GgxSample {
            diffuse: diffuse.map(|c| c.clamp(0.0, 1.0)),
            specular: specular.map(|c| c.clamp(0.0, 1.0)),
            normal,
            alpha: decode_alpha(roughness),
        }
    }
}

/// `α = r²` clamped to `[MIN_ALPHA, 1]`.
pub fn decode_alpha(roughness: f64) -> f64 {
    let r = roughness.clamp(0.0, 1.0);
    (r * r).clamp(MIN_ALPHA, 1.0)
}

/// GGX normal distribution `D(h)` as a function of `cos θh`.
pub fn ndf_d(cos_theta_h: f64, alpha: f64) -> Result<f64> {
    if !(alpha > 0.0) {
        return Err(Error::domain(format!("GGX alpha must be positive, got {alpha}")));
    }
    if !(-1.0 - COS_SLACK..=1.0 + COS_SLACK).contains(&cos_theta_h) {
        return Err(Error::domain(format!(
            "cos_theta_h = {cos_theta_h} outside [-1, 1]"
        )));
    }
    Ok(ndf(cos_theta_h.clamp(-1.0, 1.0), alpha))
}

#[inline]
pub(crate) fn ndf(cos_theta_h: f64, alpha: f64) -> f64 {
    let a2 = alpha * alpha;
    let c2 = cos_theta_h * cos_theta_h;
    let t = c2 * (a2 - 1.0) + 1.0;
    a2 / (PI * t * t)
}

/// Smith shadow-masking term for one direction. Back-facing input returns 0.
#[inline]
pub fn smith_g1(i_dot_h: f64, alpha: f64) -> f64 {
    if i_dot_h <= 0.0 {
        return 0.0;
    }
    let c = i_dot_h.min(1.0);
    c / (c * (1.0 - 0.5 * alpha) + 0.5 * alpha)
}

/// Schlick's approximation `F0 + (1 - F0)(1 - cos)^5`.
#[inline]
pub fn fresnel_schlick(cos_term: f64, f0: Rgb) -> Rgb {
    let c = cos_term.clamp(0.0, 1.0);
    let w = (1.0 - c).powi(5);
    f0.map(|f| {
        let f = f.clamp(0.0, 1.0);
        f + (1.0 - f) * w
    })
}

/// Evaluates the full BRDF for incident `omega_i` and outgoing `omega_o`.
///
/// Both directions are unit vectors in the same frame as `sample.normal`.
/// Directions below the shading normal, and the antiparallel pair, return
/// black.
pub fn eval_brdf(sample: &GgxSample, omega_i: Vec3, omega_o: Vec3) -> Rgb {
    let n = sample.normal;
    let n_dot_i = n.dot(omega_i);
    let n_dot_o = n.dot(omega_o);
    if n_dot_i < 0.0 || n_dot_o < 0.0 {
        return [0.0; 3];
    }
    let Some(h) = (omega_i + omega_o).try_normalize() else {
        return [0.0; 3];
    };

    let h_dot_i = h.dot(omega_i);
    let h_dot_o = h.dot(omega_o);
    let alpha = sample.alpha;
    let d = ndf(n.dot(h).clamp(-1.0, 1.0), alpha);
    let g = smith_g1(h_dot_o, alpha) * smith_g1(h_dot_i, alpha);
    // h·ωi and h·ωo agree analytically; averaging keeps the result exactly
    // symmetric under swapping the two directions.
    let f = fresnel_schlick(0.5 * (h_dot_i + h_dot_o), sample.specular);
    let denom = 4.0 * h_dot_o.max(DENOM_GUARD) * h_dot_i.max(DENOM_GUARD);
    let spec_scale = d * g / denom;

    let mut out = [0.0; 3];
    for c in 0..3 {
        out[c] = sample.diffuse[c] / PI + f[c] * spec_scale;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn unit(theta: f64, phi: f64) -> Vec3 {
        Vec3::new(theta.sin() * phi.cos(), theta.sin() * phi.sin(), theta.cos())
    }

    #[test]
    fn ndf_examples() {
        assert_relative_eq!(ndf_d(1.0, 0.5).unwrap(), 4.0 / PI, epsilon = 1e-12);
        assert_relative_eq!(ndf_d(1.0, 1.0).unwrap(), 1.0 / PI, epsilon = 1e-12);
        // mpmath, 40 digits
        assert_relative_eq!(
            ndf_d(0.8, 0.3).unwrap(),
            0.164_275_068_424_551_77,
            epsilon = 1e-14
        );
    }

    #[test]
    fn ndf_rejects_bad_inputs() {
        assert!(ndf_d(0.5, 0.0).is_err());
        assert!(ndf_d(0.5, -0.1).is_err());
        assert!(ndf_d(1.01, 0.5).is_err());
        assert!(ndf_d(1.0 + 5e-7, 0.5).is_ok());
    }

    #[test]
    fn smith_examples() {
        assert_eq!(smith_g1(1.0, 0.5), 1.0);
        assert_eq!(smith_g1(0.0, 0.5), 0.0);
        assert_eq!(smith_g1(-0.3, 0.5), 0.0);
        assert_relative_eq!(smith_g1(0.5, 0.4), 0.833_333_333_333_333_3, epsilon = 1e-15);
    }

    #[test]
    fn fresnel_examples() {
        let f0 = [0.04; 3];
        assert_eq!(fresnel_schlick(1.0, f0), f0);
        assert_eq!(fresnel_schlick(0.0, f0), [1.0; 3]);
        let f = fresnel_schlick(0.5, [0.1, 0.2, 0.3]);
        for (got, want) in f.iter().zip([0.128125, 0.225, 0.321875]) {
            assert_relative_eq!(*got, want, epsilon = 1e-15);
        }
    }

    #[test]
    fn lambertian_only() {
        let s = GgxSample {
            diffuse: [0.5; 3],
            specular: [0.0; 3],
            normal: Vec3::Z,
            alpha: 0.3,
        };
        // at normal incidence Schlick with F0 = 0 vanishes exactly
        let f = eval_brdf(&s, Vec3::Z, Vec3::Z);
        for c in f {
            assert_relative_eq!(c, 0.5 / PI, epsilon = 1e-12);
        }
    }

    #[test]
    fn below_surface_is_black() {
        let s = GgxSample {
            diffuse: [0.5; 3],
            specular: [0.5; 3],
            normal: Vec3::Z,
            alpha: 0.3,
        };
        assert_eq!(eval_brdf(&s, Vec3::new(0.0, 0.6, -0.8), Vec3::Z), [0.0; 3]);
        assert_eq!(eval_brdf(&s, Vec3::Z, Vec3::new(0.6, 0.0, -0.8)), [0.0; 3]);
        // grazing antiparallel pair lies on the surface plane
        assert_eq!(eval_brdf(&s, Vec3::X, -Vec3::X), [0.0; 3]);
    }

    #[test]
    fn colocated_normal_incidence() {
        let s = GgxSample {
            diffuse: [0.0; 3],
            specular: [0.04; 3],
            normal: Vec3::Z,
            alpha: 0.5,
        };
        let f = eval_brdf(&s, Vec3::Z, Vec3::Z);
        for c in f {
            assert_relative_eq!(c, 0.012_732_395_447_351_627, epsilon = 1e-15);
        }
    }

    #[test]
    fn roughness_decode() {
        assert_eq!(decode_alpha(0.25), 0.0625);
        assert_eq!(decode_alpha(0.0), MIN_ALPHA);
        assert_eq!(decode_alpha(1.5), 1.0);
    }

    #[test]
    fn ndf_projected_area_is_normalized() {
        // midpoint rule over (theta, phi), 256 x 1024 cells
        for alpha in [0.1, 0.5, 1.0] {
            let (nt, np) = (256usize, 1024usize);
            let dt = 0.5 * PI / nt as f64;
            let dp = 2.0 * PI / np as f64;
            let mut sum = 0.0;
            for i in 0..nt {
                let t = (i as f64 + 0.5) * dt;
                let ring = ndf(t.cos(), alpha) * t.cos() * t.sin() * dt * dp;
                sum += ring * np as f64;
            }
            assert!((sum - 1.0).abs() < 0.01, "alpha {alpha}: {sum}");
        }
    }

    proptest! {
        #[test]
        fn reciprocity_and_positivity(
            t1 in 0.0f64..1.55, p1 in 0.0f64..std::f64::consts::TAU,
            t2 in 0.0f64..1.55, p2 in 0.0f64..std::f64::consts::TAU,
            d in 0.0f64..1.0, sp in 0.0f64..1.0, r in 0.0f64..1.0,
        ) {
            let s = GgxSample::from_stored([d; 3], [sp; 3], Vec3::Z, r);
            let a = eval_brdf(&s, unit(t1, p1), unit(t2, p2));
            let b = eval_brdf(&s, unit(t2, p2), unit(t1, p1));
            prop_assert_eq!(a, b);
            for c in a {
                prop_assert!(c >= 0.0 && c.is_finite());
            }
        }

        #[test]
        fn g1_monotone_bounded(a in 0.001f64..1.0, x in 0.0f64..1.0, dx in 0.0f64..0.5) {
            let g0 = smith_g1(x, a);
            let g1 = smith_g1((x + dx).min(1.0), a);
            prop_assert!(g1 >= g0);
            prop_assert!((0.0..=1.0).contains(&g0));
        }

        #[test]
        fn fresnel_monotone(f in 0.0f64..1.0, x in 0.0f64..1.0, dx in 0.0f64..0.5) {
            let a = fresnel_schlick(x, [f; 3]);
            let b = fresnel_schlick((x + dx).min(1.0), [f; 3]);
            prop_assert!(b[0] <= a[0]);
        }
    }
}
