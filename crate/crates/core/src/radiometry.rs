//! Log-space radiance compression, display gamma and LDR clamping.

use crate::error::{Error, Result};
use crate::raster::HdrImage;

/// Display gamma applied after log expansion.
pub const DISPLAY_GAMMA: f64 = 2.2;

/// Default LDR white point in linear radiance.
pub const LDR_WHITE: f32 = 1.0;

/// `ln(r + 1)`.
pub fn log_compress(r: f64) -> Result<f64> {
    if !(r >= 0.0) {
        return Err(Error::domain(format!("radiance must be non-negative, got {r}")));
    }
    Ok(r.ln_1p())
}

/// Inverse of [`log_compress`]: `exp(r_log) - 1`.
pub fn log_expand(r_log: f64) -> f64 {
    r_log.exp_m1()
}

/// `(exp(r_log) - 1)^(1/2.2)`, for display.
pub fn log_expand_and_gamma(r_log: f64) -> f64 {
    log_expand(r_log).max(0.0).powf(1.0 / DISPLAY_GAMMA)
}

/// Componentwise `min(v, white)`.
pub fn ldr_clamp(img: &HdrImage, white: f32) -> HdrImage {
    img.map(|v| v.min(white))
}

/// Log-compresses every sample of an image.
pub fn log_compress_image(img: &HdrImage) -> Result<HdrImage> {
    if let Some(v) = img.data().iter().find(|v| !(**v >= 0.0)) {
        return Err(Error::domain(format!("radiance sample {v} is negative or NaN")));
    }
    Ok(img.map(|v| (v as f64).ln_1p() as f32))
}

/// 8-bit sRGB-ish display encoding of a linear image, for previews.
pub fn to_display_rgb8(img: &HdrImage) -> Vec<u8> {
    img.data()
        .iter()
        .map(|&v| {
            let d = (v.max(0.0) as f64).powf(1.0 / DISPLAY_GAMMA);
            (d.clamp(0.0, 1.0) * 255.0).round() as u8
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    #[test]
    fn compress_examples() {
        assert_eq!(log_compress(0.0).unwrap(), 0.0);
        assert_relative_eq!(
            log_compress(std::f64::consts::E - 1.0).unwrap(),
            1.0,
            epsilon = 1e-15
        );
        assert_relative_eq!(
            log_compress(4.5).unwrap(),
            1.704_748_092_238_425_2,
            epsilon = 1e-15
        );
        assert!(log_compress(-1e-9).is_err());
        assert!(log_compress(f64::NAN).is_err());
    }

    #[test]
    fn gamma_examples() {
        assert_eq!(log_expand_and_gamma(0.0), 0.0);
        assert_relative_eq!(log_expand_and_gamma(2f64.ln()), 1.0, epsilon = 1e-15);
        // mpmath: (e - 1)^(1/2.2)
        assert_relative_eq!(
            log_expand_and_gamma(1.0),
            1.278_972_155_833_688,
            epsilon = 1e-14
        );
    }

    #[test]
    fn clamp_examples() {
        let img = HdrImage::from_raw(2, 1, vec![0.5, 3.7, 1.0, 0.0, 12.0, 0.25]).unwrap();
        let c = ldr_clamp(&img, LDR_WHITE);
        assert_eq!(c.data(), &[0.5, 1.0, 1.0, 0.0, 1.0, 0.25]);
        assert!(c.max_value() <= 1.0);
        assert_eq!(ldr_clamp(&c, LDR_WHITE), c);
    }

    proptest! {
        #[test]
        fn roundtrip(e in -12.0f64..4.0) {
            let r = 10f64.powf(e);
            let back = log_expand(log_compress(r).unwrap());
            prop_assert!((r - back).abs() < 1e-6 * (1.0 + r));
        }

        #[test]
        fn strictly_increasing(a in 0.0f64..1e4, d in 1e-6f64..10.0) {
            prop_assert!(log_compress(a + d).unwrap() > log_compress(a).unwrap());
        }
    }
}
