//! Sinusoidal encoding of light, view and half directions, and the small
//! network that compresses it.
//!
//! Each direction `d` contributes the block
//! `(dx, dy, dz, γ₀(dx), γ₀(dy), γ₀(dz), …, γₙ₋₁(dz))` with
//! `γₖ(t) = (sin(2ᵏπt), cos(2ᵏπt))`; the three blocks are concatenated in the
//! order incident, outgoing, half. The output length is `9 + 18n`.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::Vec3;
use crate::nbrdf::mlp::{Activation, MlpNet};
use crate::sampler::RngStream;

/// Hidden width of the compression network.
pub const ENCODER_HIDDEN: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncodingConfig {
    /// Number of frequencies `n`; `k` runs over `0..n`.
    pub frequencies: usize,
    /// Output width of the compression network.
    pub compressed_dim: usize,
}

impl Default for EncodingConfig {
    fn default() -> Self {
        EncodingConfig {
            frequencies: 16,
            compressed_dim: 32,
        }
    }
}

impl EncodingConfig {
    pub fn validate(&self) -> Result<()> {
        if self.frequencies == 0 || self.compressed_dim == 0 {
            return Err(Error::Config(
                "encoding frequencies and compressed_dim must be at least 1".into(),
            ));
        }
        Ok(())
    }

    /// Length of one direction's block.
    pub fn block_len(&self) -> usize {
        3 + 6 * self.frequencies
    }

    /// Total encoding length, `9 + 18n`.
    pub fn encoded_len(&self) -> usize {
        3 * self.block_len()
    }

    /// Number of sinusoidal terms, `18n`.
    pub fn sinusoidal_len(&self) -> usize {
        18 * self.frequencies
    }

    /// Randomly initialized compression network
    /// (`encoded_len → 64 → compressed_dim`, leaky activations).
    pub fn encoder_net(&self, leaky_slope: f64, rng: &mut RngStream) -> Result<MlpNet> {
        self.validate()?;
        MlpNet::random(
            &[self.encoded_len(), ENCODER_HIDDEN, self.compressed_dim],
            &[Activation::Leaky, Activation::Leaky],
            leaky_slope,
            rng,
        )
    }
}

fn encode_block(d: Vec3, frequencies: usize, out: &mut [f64]) {
    out[0] = d.x;
    out[1] = d.y;
    out[2] = d.z;
    let mut i = 3;
    let mut freq = PI;
    for _ in 0..frequencies {
        for t in [d.x, d.y, d.z] {
            let (s, c) = (freq * t).sin_cos();
            out[i] = s;
            out[i + 1] = c;
            i += 2;
        }
        freq *= 2.0;
    }
}

/// Writes the encoding of `(ωi, ωo, ωh)` into `out`, which must hold
/// [`EncodingConfig::encoded_len`] values.
pub fn encode_directions_into(
    omega_i: Vec3,
    omega_o: Vec3,
    omega_h: Vec3,
    cfg: &EncodingConfig,
    out: &mut [f64],
) {
    let b = cfg.block_len();
    assert_eq!(out.len(), 3 * b, "encoding buffer has the wrong length");
    encode_block(omega_i, cfg.frequencies, &mut out[..b]);
    encode_block(omega_o, cfg.frequencies, &mut out[b..2 * b]);
    encode_block(omega_h, cfg.frequencies, &mut out[2 * b..]);
}

pub fn encode_directions(omega_i: Vec3, omega_o: Vec3, omega_h: Vec3, cfg: &EncodingConfig) -> Vec<f64> {
    let mut out = vec![0.0; cfg.encoded_len()];
    encode_directions_into(omega_i, omega_o, omega_h, cfg, &mut out);
    out
}

/// Indices of the raw (non-sinusoidal) components within an encoding.
pub fn raw_component_indices(cfg: &EncodingConfig) -> [usize; 9] {
    let b = cfg.block_len();
    [0, 1, 2, b, b + 1, b + 2, 2 * b, 2 * b + 1, 2 * b + 2]
}

/// Compresses an encoding with the network `net`.
pub fn nd_enc_forward(encoded: &[f64], net: &MlpNet) -> Result<Vec<f64>> {
    net.forward(encoded)
}
