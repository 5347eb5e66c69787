//! Surface pixel grids, perspective-rectified direction fields and the
//! frame rotations used when re-orienting a material's encoded normal.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::{Mat3, Rgb, Vec3};
use crate::raster::DirectionField;

/// Pixel grid over the surface square `[-1, 1]²` at `z = 0`.
///
/// Pixel `(x, y)` sits at its cell center `((2x+1)/W - 1, (2y+1)/H - 1, 0)`;
/// row 0 is the `y = -1` edge.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SurfaceGrid {
    pub width: usize,
    pub height: usize,
}

impl SurfaceGrid {
    pub fn new(width: usize, height: usize) -> Self {
        SurfaceGrid { width, height }
    }

    pub fn position(&self, x: usize, y: usize) -> Vec3 {
        Vec3::new(
            (2 * x + 1) as f64 / self.width as f64 - 1.0,
            (2 * y + 1) as f64 / self.height as f64 - 1.0,
            0.0,
        )
    }

    pub fn position_index(&self, index: usize) -> Vec3 {
        self.position(index % self.width, index / self.width)
    }

    pub fn positions(&self) -> impl Iterator<Item = Vec3> + '_ {
        (0..self.width * self.height).map(move |i| self.position_index(i))
    }
}

/// Point light: position in world units and linear-RGB intensity.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PointSource {
    pub position: Vec3,
    pub intensity: Rgb,
}

impl PointSource {
    pub fn white(position: Vec3) -> Self {
        PointSource {
            position,
            intensity: [1.0; 3],
        }
    }
}

/// Unit direction from `point` toward `source`.
pub fn direction_to(point: Vec3, source: Vec3) -> Result<Vec3> {
    (source - point).try_normalize().ok_or_else(|| {
        Error::domain(format!(
            "source {source:?} coincides with surface point {point:?}"
        ))
    })
}

/// Per-pixel unit directions from each grid point toward `source`.
pub fn direction_field(grid: &SurfaceGrid, source: Vec3) -> Result<DirectionField> {
    let dirs = grid
        .positions()
        .map(|p| direction_to(p, source))
        .collect::<Result<Vec<_>>>()?;
    DirectionField::from_vec(grid.width, grid.height, dirs)
}

/// Normalized sum of two unit directions.
pub fn half_vector(omega_i: Vec3, omega_o: Vec3) -> Result<Vec3> {
    let s = omega_i + omega_o;
    if s.length_squared() < 1e-24 {
        return Err(Error::domain("half vector of antiparallel directions"));
    }
    Ok(s.normalize())
}

/// Mirror reflection `2(n·d)n - d` of `direction` about `point_normal`.
pub fn reflect_about(point_normal: Vec3, direction: Vec3) -> Vec3 {
    2.0 * point_normal.dot(direction) * point_normal - direction
}

/// Orthonormal frame `R = [u | v | n]` with `u = n×r / |n×r|`, `v = n×u`.
///
/// `Rᵀ` maps `n` to `+z`, and `R` maps `+z` to `n`. The reference axis `r`
/// is `+x` unless `|n·x| > 0.999`, in which case `+y` is used.
pub fn gram_schmidt_rotation(n: Vec3) -> Mat3 {
    let r = if n.dot(Vec3::X).abs() > 0.999 {
        Vec3::Y
    } else {
        Vec3::X
    };
    let u = n.cross(r).normalize();
    let v = n.cross(u);
    Mat3::from_cols(u, v, n)
}
