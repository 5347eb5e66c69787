//! Fast internal consistency checks, one line each.

use std::f64::consts::PI;

use anyhow::Result;

use svbrdf_forge::encoding::{encode_directions, EncodingConfig};
use svbrdf_forge::geometry::{direction_to, half_vector};
use svbrdf_forge::ggx::{eval_brdf, ndf_d, GgxSample};
use svbrdf_forge::gradcheck;
use svbrdf_forge::io;
use svbrdf_forge::math::Vec3;
use svbrdf_forge::nbrdf::NeuralBrdf;
use svbrdf_forge::radiometry::{log_compress, log_expand};
use svbrdf_forge::raster::HdrImage;
use svbrdf_forge::render::d_view;
use svbrdf_forge::sampler::{sample_hemisphere, sample_reflect_config, RngStream};

fn unit_hemisphere(rng: &mut RngStream) -> Vec3 {
    sample_hemisphere(rng, 1.0).normalize()
}

fn ggx_constants() -> Result<bool> {
    Ok((ndf_d(1.0, 0.5)? - 4.0 / PI).abs() < 1e-9 && (d_view() - 4.010781).abs() < 1e-5)
}

fn encoding_length() -> Result<bool> {
    let cfg = EncodingConfig::default();
    let e = encode_directions(Vec3::Z, Vec3::Z, Vec3::Z, &cfg);
    Ok(e.len() == 297 && cfg.sinusoidal_len() == 288)
}

fn reciprocity() -> Result<bool> {
    let mut rng = RngStream::new(1);
    for _ in 0..2000 {
        let s = GgxSample::from_stored(
            [rng.uniform(), rng.uniform(), rng.uniform()],
            [rng.uniform(), rng.uniform(), rng.uniform()],
            unit_hemisphere(&mut rng),
            rng.uniform(),
        );
        let (a, b) = (unit_hemisphere(&mut rng), unit_hemisphere(&mut rng));
        let (f, g) = (eval_brdf(&s, a, b), eval_brdf(&s, b, a));
        for c in 0..3 {
            if !(f[c] >= 0.0) || (f[c] - g[c]).abs() > 1e-12 * (1.0 + f[c].abs()) {
                return Ok(false);
            }
        }
    }
    Ok(true)
}

fn log_roundtrip() -> Result<bool> {
    for k in 0..=400 {
        let r = if k == 0 { 0.0 } else { 10f64.powf(-6.0 + 10.0 * k as f64 / 400.0) };
        if (r - log_expand(log_compress(r)?)).abs() >= 1e-6 * (1.0 + r) {
            return Ok(false);
        }
    }
    Ok(true)
}

fn highlight_identity() -> Result<bool> {
    let mut rng = RngStream::new(2);
    for _ in 0..1000 {
        let c = sample_reflect_config(&mut rng);
        let p = Vec3::new(c.highlight_point[0], c.highlight_point[1], 0.0);
        let h = half_vector(direction_to(p, c.light_position)?, direction_to(p, c.view_position)?)?;
        if (h - Vec3::Z).length() > 1e-6 || (c.light_position - p).length() < 0.5 {
            return Ok(false);
        }
    }
    Ok(true)
}

fn pfm_roundtrip() -> Result<bool> {
    let img = HdrImage::from_raw(2, 1, vec![0.5, 0.25, 1e6, -0.0, f32::MIN_POSITIVE, 3.0])?;
    let back = io::decode_pfm(&io::encode_pfm(&img))?;
    Ok(back.data().iter().zip(img.data()).all(|(a, b)| a.to_bits() == b.to_bits()))
}

fn container_roundtrip() -> Result<bool> {
    let mut brdf = NeuralBrdf::random(EncodingConfig::default(), 8, 16, 0.01, &mut RngStream::new(3))?;
    brdf.round_to_f32();
    let bytes = io::encode_container(&io::brdf_sections(&brdf))?;
    Ok(io::brdf_from_sections(&io::decode_container(&bytes)?)? == brdf)
}

fn small_gradchecks() -> Result<bool> {
    Ok(gradcheck::check_encoder(0)?.passed() && gradcheck::check_loss(0)?.passed())
}

pub fn run() -> Result<bool> {
    let checks: [(&str, fn() -> Result<bool>); 8] = [
        ("ggx constants", ggx_constants),
        ("encoding length", encoding_length),
        ("brdf reciprocity", reciprocity),
        ("log roundtrip", log_roundtrip),
        ("highlight identity", highlight_identity),
        ("pfm roundtrip", pfm_roundtrip),
        ("container roundtrip", container_roundtrip),
        ("encoder and loss gradients", small_gradchecks),
    ];
    let mut all = true;
    for (name, f) in checks {
        let ok = f()?;
        println!("{} {name}", if ok { "PASS" } else { "FAIL" });
        all &= ok;
    }
    Ok(all)
}
