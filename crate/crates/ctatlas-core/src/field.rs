//! Dense displacement fields: warping, composition, fixed-point inversion
//! and inverse-transform label transfer.
//!
//! Fields follow the pull-back convention: the output voxel at `x` samples
//! the moving image at `x + u(x)` (and through the affine, at
//! `A(world(x + u(x)))`). Displacements are stored in voxel units of the
//! field's own grid.

use std::io::{Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use rayon::prelude::*;

use crate::affine::AffineTransform;
use crate::error::{AtlasError, Result};
use crate::geometry::Geometry;
use crate::volume::{sample_nearest, sample_trilinear, Interp, LabelMap, Volume, LABEL_FILL, VOLUME_FILL_HU};

/// Per-voxel displacement field on the fixed grid, voxel units, pull-back.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseField {
    pub geom: Geometry,
    /// One displacement triple per voxel, x-fastest.
    pub disp: Vec<[f32; 3]>,
}

impl DenseField {
    pub fn zero(geom: Geometry) -> Result<Self> {
        geom.validate()?;
        let n = geom.num_voxels();
        Ok(DenseField {
            geom,
            disp: vec![[0.0; 3]; n],
        })
    }

    pub fn new(geom: Geometry, disp: Vec<[f32; 3]>) -> Result<Self> {
        geom.validate()?;
        if disp.len() != geom.num_voxels() {
            return Err(AtlasError::InvalidData(format!(
                "field length {} != {} voxels",
                disp.len(),
                geom.num_voxels()
            )));
        }
        if disp.iter().flatten().any(|v| !v.is_finite()) {
            return Err(AtlasError::InvalidData("non-finite displacement".into()));
        }
        Ok(DenseField { geom, disp })
    }

    #[inline]
    pub fn at(&self, x: usize, y: usize, z: usize) -> [f32; 3] {
        self.disp[self.geom.index(x, y, z)]
    }

    /// Trilinear sample at continuous voxel coordinates; coordinates clamp
    /// to the grid border.
    pub fn sample(&self, p: [f64; 3]) -> [f64; 3] {
        let dims = &self.geom.dims;
        let q = [
            p[0].clamp(0.0, (dims[0] - 1) as f64),
            p[1].clamp(0.0, (dims[1] - 1) as f64),
            p[2].clamp(0.0, (dims[2] - 1) as f64),
        ];
        let mut i0 = [0usize; 3];
        let mut frac = [0.0f64; 3];
        for c in 0..3 {
            let n = dims[c];
            if n == 1 {
                i0[c] = 0;
                frac[c] = 0.0;
            } else {
                let f = q[c].floor().min((n - 2) as f64);
                i0[c] = f as usize;
                frac[c] = q[c] - f;
            }
        }
        let step = |c: usize| if dims[c] == 1 { 0 } else { 1 };
        let idx = |x: usize, y: usize, z: usize| x + dims[0] * (y + dims[1] * z);
        let (x0, y0, z0) = (i0[0], i0[1], i0[2]);
        let (x1, y1, z1) = (x0 + step(0), y0 + step(1), z0 + step(2));
        let (fx, fy, fz) = (frac[0], frac[1], frac[2]);
        let mut out = [0.0f64; 3];
        for (c, o) in out.iter_mut().enumerate() {
            let g = |i: usize| f64::from(self.disp[i][c]);
            let c00 = g(idx(x0, y0, z0)) + (g(idx(x1, y0, z0)) - g(idx(x0, y0, z0))) * fx;
            let c10 = g(idx(x0, y1, z0)) + (g(idx(x1, y1, z0)) - g(idx(x0, y1, z0))) * fx;
            let c01 = g(idx(x0, y0, z1)) + (g(idx(x1, y0, z1)) - g(idx(x0, y0, z1))) * fx;
            let c11 = g(idx(x0, y1, z1)) + (g(idx(x1, y1, z1)) - g(idx(x0, y1, z1))) * fx;
            let a = c00 + (c10 - c00) * fy;
            let b = c01 + (c11 - c01) * fy;
            *o = a + (b - a) * fz;
        }
        out
    }

    pub fn mean_magnitude(&self) -> f64 {
        let sum: f64 = self
            .disp
            .iter()
            .map(|d| {
                (f64::from(d[0]).powi(2) + f64::from(d[1]).powi(2) + f64::from(d[2]).powi(2)).sqrt()
            })
            .sum();
        sum / self.disp.len() as f64
    }

    pub fn max_magnitude(&self) -> f64 {
        self.disp
            .iter()
            .map(|d| {
                (f64::from(d[0]).powi(2) + f64::from(d[1]).powi(2) + f64::from(d[2]).powi(2)).sqrt()
            })
            .fold(0.0, f64::max)
    }
}

/// `out(x) = moving(A(world(x + u(x))))`, trilinear, air fill.
pub fn warp_volume(
    moving: &Volume,
    field: &DenseField,
    affine: Option<&AffineTransform>,
    interp: Interp,
) -> Volume {
    let geom = field.geom.clone();
    let plane = geom.dims[0] * geom.dims[1];
    let mut data = vec![0.0f32; geom.num_voxels()];
    data.par_chunks_mut(plane).enumerate().for_each(|(z, out)| {
        let mut i = z * plane;
        let mut o = 0;
        for y in 0..geom.dims[1] {
            for x in 0..geom.dims[0] {
                let u = field.disp[i];
                let p = [
                    x as f64 + f64::from(u[0]),
                    y as f64 + f64::from(u[1]),
                    z as f64 + f64::from(u[2]),
                ];
                let mut w = geom.voxel_to_world(p);
                if let Some(a) = affine {
                    w = a.apply(w);
                }
                let q = moving.geom.world_to_voxel(w);
                let v = match interp {
                    Interp::Trilinear => sample_trilinear(&moving.data, &moving.geom.dims, q),
                    Interp::Nearest => sample_nearest(&moving.data, &moving.geom.dims, q),
                };
                out[o] = v.unwrap_or(f64::from(VOLUME_FILL_HU)) as f32;
                i += 1;
                o += 1;
            }
        }
    });
    Volume { geom, data }
}

/// Label variant of [`warp_volume`]: nearest-neighbour only, background fill.
pub fn warp_labels(
    moving: &LabelMap,
    field: &DenseField,
    affine: Option<&AffineTransform>,
) -> LabelMap {
    let geom = field.geom.clone();
    let plane = geom.dims[0] * geom.dims[1];
    let mut data = vec![LABEL_FILL; geom.num_voxels()];
    let float: Vec<f32> = moving.data.iter().map(|&v| f32::from(v)).collect();
    data.par_chunks_mut(plane).enumerate().for_each(|(z, out)| {
        let mut i = z * plane;
        let mut o = 0;
        for y in 0..geom.dims[1] {
            for x in 0..geom.dims[0] {
                let u = field.disp[i];
                let p = [
                    x as f64 + f64::from(u[0]),
                    y as f64 + f64::from(u[1]),
                    z as f64 + f64::from(u[2]),
                ];
                let mut w = geom.voxel_to_world(p);
                if let Some(a) = affine {
                    w = a.apply(w);
                }
                let q = moving.geom.world_to_voxel(w);
                out[o] = sample_nearest(&float, &moving.geom.dims, q)
                    .map(|v| v as u8)
                    .unwrap_or(LABEL_FILL);
                i += 1;
                o += 1;
            }
        }
    });
    LabelMap { geom, data }
}

/// `(u . v)(x) = v(x) + u(x + v(x))`: applying the composite equals warping
/// with `u` first and the result with `v` (coordinate maps compose as
/// `T_u . T_v`).
pub fn compose(u: &DenseField, v: &DenseField) -> Result<DenseField> {
    if !u.geom.approx_eq(&v.geom, 1e-9) {
        return Err(AtlasError::GeometryMismatch {
            context: "compose fields",
        });
    }
    let geom = u.geom.clone();
    let plane = geom.dims[0] * geom.dims[1];
    let mut disp = vec![[0.0f32; 3]; geom.num_voxels()];
    disp.par_chunks_mut(plane).enumerate().for_each(|(z, out)| {
        let mut i = z * plane;
        let mut o = 0;
        for y in 0..geom.dims[1] {
            for x in 0..geom.dims[0] {
                let vv = v.disp[i];
                let p = [
                    x as f64 + f64::from(vv[0]),
                    y as f64 + f64::from(vv[1]),
                    z as f64 + f64::from(vv[2]),
                ];
                let uu = u.sample(p);
                out[o] = [
                    (f64::from(vv[0]) + uu[0]) as f32,
                    (f64::from(vv[1]) + uu[1]) as f32,
                    (f64::from(vv[2]) + uu[2]) as f32,
                ];
                i += 1;
                o += 1;
            }
        }
    });
    Ok(DenseField { geom, disp })
}

#[derive(Debug, Clone)]
pub struct InversionReport {
    pub converged: bool,
    pub iterations: usize,
    /// Largest per-voxel update of the final iteration, voxels.
    pub final_update: f64,
    pub residual_mean: f64,
    pub residual_max: f64,
}

/// Fixed-point inversion `v_{k+1}(x) = -u(x + v_k(x))`.
///
/// Stops when the largest per-voxel update drops below `tol` voxels. A
/// non-convergent inversion is flagged in the report, not fatal: the field
/// is still returned for inspection.
pub fn invert_field(u: &DenseField, max_iter: usize, tol: f64) -> (DenseField, InversionReport) {
    let geom = u.geom.clone();
    let n = geom.num_voxels();
    let mut v = vec![[0.0f32; 3]; n];
    let mut iterations = 0;
    let mut final_update = f64::INFINITY;
    let plane = geom.dims[0] * geom.dims[1];
    for _ in 0..max_iter {
        iterations += 1;
        let mut next = vec![[0.0f32; 3]; n];
        let updates: Vec<f64> = next
            .par_chunks_mut(plane)
            .enumerate()
            .map(|(z, out)| {
                let mut worst = 0.0f64;
                let mut i = z * plane;
                let mut o = 0;
                for y in 0..geom.dims[1] {
                    for x in 0..geom.dims[0] {
                        let cur = v[i];
                        let p = [
                            x as f64 + f64::from(cur[0]),
                            y as f64 + f64::from(cur[1]),
                            z as f64 + f64::from(cur[2]),
                        ];
                        let s = u.sample(p);
                        let nv = [(-s[0]) as f32, (-s[1]) as f32, (-s[2]) as f32];
                        let d = (f64::from(nv[0] - cur[0]).powi(2)
                            + f64::from(nv[1] - cur[1]).powi(2)
                            + f64::from(nv[2] - cur[2]).powi(2))
                        .sqrt();
                        worst = worst.max(d);
                        out[o] = nv;
                        i += 1;
                        o += 1;
                    }
                }
                worst
            })
            .collect();
        final_update = updates.into_iter().fold(0.0, f64::max);
        v = next;
        if final_update < tol {
            break;
        }
    }
    let inverse = DenseField {
        geom,
        disp: v,
    };
    let residual = compose(u, &inverse).expect("same geometry by construction");
    let report = InversionReport {
        converged: final_update < tol,
        iterations,
        final_update,
        residual_mean: residual.mean_magnitude(),
        residual_max: residual.max_magnitude(),
    };
    (inverse, report)
}

/// Transfer atlas labels into subject space by inverting the forward
/// (subject-to-atlas pull-back) transforms.
///
/// The forward pipeline samples the subject at `A(world_atlas(x + u(x)))`,
/// i.e. `T = A . T_u`. Each subject voxel therefore looks up the atlas label
/// at `T^{ -1 } = T_u^{ -1 } . A^{ -1 }` of its world position.
pub fn transfer_labels(
    atlas_labels: &LabelMap,
    affine: &AffineTransform,
    field: &DenseField,
    subject_geometry: &Geometry,
) -> Result<(LabelMap, InversionReport)> {
    if !atlas_labels.geom.approx_eq(&field.geom, 1e-6) {
        return Err(AtlasError::GeometryMismatch {
            context: "atlas labels vs dense field",
        });
    }
    subject_geometry.validate()?;
    let affine_inv = affine.inverse()?;
    let (field_inv, report) = invert_field(field, 30, 0.01);
    let geom = subject_geometry.clone();
    let plane = geom.dims[0] * geom.dims[1];
    let mut data = vec![LABEL_FILL; geom.num_voxels()];
    let float: Vec<f32> = atlas_labels.data.iter().map(|&v| f32::from(v)).collect();
    data.par_chunks_mut(plane).enumerate().for_each(|(z, out)| {
        let mut o = 0;
        for y in 0..geom.dims[1] {
            for x in 0..geom.dims[0] {
                let w = geom.voxel_to_world([x as f64, y as f64, z as f64]);
                let wa = affine_inv.apply(w);
                let p = atlas_labels.geom.world_to_voxel(wa);
                // Outside the atlas grid entirely: background.
                let inside = (0..3).all(|c| {
                    p[c] >= -0.5 && p[c] <= (atlas_labels.geom.dims[c] as f64) - 0.5
                });
                if !inside {
                    out[o] = LABEL_FILL;
                    o += 1;
                    continue;
                }
                let v = field_inv.sample(p);
                let q = [p[0] + v[0], p[1] + v[1], p[2] + v[2]];
                out[o] = sample_nearest(&float, &atlas_labels.geom.dims, q)
                    .map(|l| l as u8)
                    .unwrap_or(LABEL_FILL);
                o += 1;
            }
        }
    });
    Ok((LabelMap { geom, data }, report))
}

// ---------------------------------------------------------------------------
// DFLD file format
// ---------------------------------------------------------------------------

const FIELD_MAGIC: &[u8; 4] = b"DFLD";
const FIELD_VERSION: u32 = 1;

/// Write `magic, version, dims, spacing, then f32 triples x-fastest`.
pub fn write_field(field: &DenseField, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = std::fs::File::create(path).map_err(|e| AtlasError::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    let err = |e: std::io::Error| AtlasError::io(path, e);
    w.write_all(FIELD_MAGIC).map_err(err)?;
    w.write_u32::<LittleEndian>(FIELD_VERSION).map_err(err)?;
    for &d in &field.geom.dims {
        w.write_u32::<LittleEndian>(d as u32).map_err(err)?;
    }
    for &s in &field.geom.spacing {
        w.write_f32::<LittleEndian>(s as f32).map_err(err)?;
    }
    for d in &field.disp {
        for &c in d {
            w.write_f32::<LittleEndian>(c).map_err(err)?;
        }
    }
    w.flush().map_err(err)
}

/// Read a DFLD file. Origin and direction are not part of the format and
/// come back as zero / identity.
pub fn read_field(path: impl AsRef<Path>) -> Result<DenseField> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| AtlasError::io(path, e))?;
    let mut r = std::io::BufReader::new(file);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)
        .map_err(|e| AtlasError::io(path, e))?;
    if &magic != FIELD_MAGIC {
        return Err(AtlasError::BadFieldFile(format!(
            "bad magic {magic:?} in {}",
            path.display()
        )));
    }
    let err = |e: std::io::Error| AtlasError::io(path, e);
    let version = r.read_u32::<LittleEndian>().map_err(err)?;
    if version != FIELD_VERSION {
        return Err(AtlasError::BadFieldFile(format!(
            "unsupported field version {version}"
        )));
    }
    let mut dims = [0usize; 3];
    for d in dims.iter_mut() {
        *d = r.read_u32::<LittleEndian>().map_err(err)? as usize;
    }
    let mut spacing = [0.0f64; 3];
    for s in spacing.iter_mut() {
        *s = f64::from(r.read_f32::<LittleEndian>().map_err(err)?);
    }
    let geom = Geometry::new(dims, spacing, [0.0; 3]);
    geom.validate()?;
    let n = geom.num_voxels();
    let mut disp = Vec::with_capacity(n);
    for _ in 0..n {
        let mut t = [0.0f32; 3];
        for c in t.iter_mut() {
            *c = r.read_f32::<LittleEndian>().map_err(|e| {
                if e.kind() == std::io::ErrorKind::UnexpectedEof {
                    AtlasError::BadFieldFile("truncated field payload".into())
                } else {
                    AtlasError::io(path, e)
                }
            })?;
        }
        disp.push(t);
    }
    DenseField::new(geom, disp)
}
