//! Voxel-grid geometry: dimensions, spacing, origin and direction cosines.
//!
//! World coordinates are millimetres. A voxel index `(i, j, k)` maps to the
//! world point `origin + direction * diag(spacing) * (i, j, k)`. Data arrays
//! are stored x-fastest: linear index `i + nx * (j + ny * k)`.

use serde::{Deserialize, Serialize};

use crate::error::{AtlasError, Result};

pub const DIRECTION_TOL: f64 = 1e-6;

/// Grid geometry without payload. `direction[r][c]` is row `r` of the 3x3
/// direction matrix, so column `c` is the world direction of voxel axis `c`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Geometry {
    pub dims: [usize; 3],
    pub spacing: [f64; 3],
    pub origin: [f64; 3],
    pub direction: [[f64; 3]; 3],
}

pub const IDENTITY_DIRECTION: [[f64; 3]; 3] = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];

impl Geometry {
    pub fn new(dims: [usize; 3], spacing: [f64; 3], origin: [f64; 3]) -> Self {
        Geometry {
            dims,
            spacing,
            origin,
            direction: IDENTITY_DIRECTION,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.dims.iter().any(|&d| d == 0) {
            return Err(AtlasError::InvalidGeometry(format!(
                "zero dimension in {:?}",
                self.dims
            )));
        }
        if self.spacing.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
            return Err(AtlasError::InvalidGeometry(format!(
                "non-positive spacing in {:?}",
                self.spacing
            )));
        }
        if self.origin.iter().any(|o| !o.is_finite()) {
            return Err(AtlasError::InvalidGeometry("non-finite origin".into()));
        }
        // Columns must be unit length and mutually orthogonal.
        for c in 0..3 {
            let col = self.column(c);
            let norm = dot(col, col).sqrt();
            if (norm - 1.0).abs() > DIRECTION_TOL {
                return Err(AtlasError::InvalidGeometry(format!(
                    "direction column {c} has norm {norm}"
                )));
            }
        }
        for a in 0..3 {
            for b in (a + 1)..3 {
                let d = dot(self.column(a), self.column(b));
                if d.abs() > DIRECTION_TOL {
                    return Err(AtlasError::InvalidGeometry(format!(
                        "direction columns {a} and {b} not orthogonal (dot {d})"
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn num_voxels(&self) -> usize {
        self.dims[0] * self.dims[1] * self.dims[2]
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        x + self.dims[0] * (y + self.dims[1] * z)
    }

    pub fn column(&self, c: usize) -> [f64; 3] {
        [
            self.direction[0][c],
            self.direction[1][c],
            self.direction[2][c],
        ]
    }

    /// World position of a (possibly fractional) voxel index.
    pub fn voxel_to_world(&self, v: [f64; 3]) -> [f64; 3] {
        let mut w = self.origin;
        for r in 0..3 {
            for c in 0..3 {
                w[r] += self.direction[r][c] * self.spacing[c] * v[c];
            }
        }
        w
    }

    /// Continuous voxel index of a world point. Relies on the direction
    /// matrix being orthonormal (inverse = transpose).
    pub fn world_to_voxel(&self, w: [f64; 3]) -> [f64; 3] {
        let d = [
            w[0] - self.origin[0],
            w[1] - self.origin[1],
            w[2] - self.origin[2],
        ];
        let mut v = [0.0; 3];
        for c in 0..3 {
            let col = self.column(c);
            v[c] = dot(col, d) / self.spacing[c];
        }
        v
    }

    /// Same grid within `tol` (dims exactly, spacing/origin/direction numerically).
    pub fn approx_eq(&self, other: &Geometry, tol: f64) -> bool {
        if self.dims != other.dims {
            return false;
        }
        let near = |a: f64, b: f64| (a - b).abs() <= tol;
        for c in 0..3 {
            if !near(self.spacing[c], other.spacing[c]) || !near(self.origin[c], other.origin[c]) {
                return false;
            }
        }
        for r in 0..3 {
            for c in 0..3 {
                if !near(self.direction[r][c], other.direction[r][c]) {
                    return false;
                }
            }
        }
        true
    }

    /// The eight voxel-corner world positions of the grid extent.
    pub fn corner_world_points(&self) -> [[f64; 3]; 8] {
        let mut out = [[0.0; 3]; 8];
        for (i, corner) in out.iter_mut().enumerate() {
            let v = [
                if i & 1 == 0 { 0.0 } else { (self.dims[0] - 1) as f64 },
                if i & 2 == 0 { 0.0 } else { (self.dims[1] - 1) as f64 },
                if i & 4 == 0 { 0.0 } else { (self.dims[2] - 1) as f64 },
            ];
            *corner = self.voxel_to_world(v);
        }
        out
    }
}

#[inline]
pub(crate) fn dot(a: [f64; 3], b: [f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn world_voxel_roundtrip() {
        let mut g = Geometry::new([10, 12, 14], [0.7, 1.1, 2.3], [-4.0, 3.0, 9.5]);
        // x axis flipped: still orthonormal.
        g.direction = [[-1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
        g.validate().unwrap();
        let v = [3.25, 7.5, 0.125];
        let w = g.voxel_to_world(v);
        let back = g.world_to_voxel(w);
        for c in 0..3 {
            assert!((back[c] - v[c]).abs() < 1e-12);
        }
    }

    #[test]
    fn validate_rejects_bad_direction() {
        let mut g = Geometry::new([2, 2, 2], [1.0, 1.0, 1.0], [0.0; 3]);
        g.direction[0][0] = 0.5;
        assert!(g.validate().is_err());
    }

    #[test]
    fn validate_rejects_zero_spacing() {
        let g = Geometry::new([2, 2, 2], [1.0, 0.0, 1.0], [0.0; 3]);
        assert!(g.validate().is_err());
    }
}
