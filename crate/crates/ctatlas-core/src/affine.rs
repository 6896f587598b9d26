//! Stage-1 affine registration: multi-resolution block matching on
//! descriptor costs followed by trimmed least squares.
//!
//! The recovered transform maps fixed-space world points into moving space
//! (pull-back): warping samples the moving image at `T(x)`.

use std::path::Path;

use nalgebra::{Matrix4, Vector4};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{AtlasError, Result};
use crate::geometry::Geometry;
use crate::ssc::{patch_descriptor_cost, ssc_descriptor, DescriptorVolume, SscParams};
use crate::volume::{sample_trilinear, Interp, Volume, VOLUME_FILL_HU};

/// 12-DOF affine transform as a 4x4 homogeneous matrix in world millimetres.
#[derive(Debug, Clone, PartialEq)]
pub struct AffineTransform {
    matrix: Matrix4<f64>,
}

/// Convention tag stored in affine JSON files.
pub const AFFINE_MAPS_TAG: &str = "fixed_to_moving_world_mm";

#[derive(Serialize, Deserialize)]
struct AffineFile {
    matrix: Vec<f64>,
    maps: String,
}

impl AffineTransform {
    pub fn identity() -> Self {
        AffineTransform {
            matrix: Matrix4::identity(),
        }
    }

    pub fn from_matrix(matrix: Matrix4<f64>) -> Result<Self> {
        let t = AffineTransform { matrix };
        t.validate()?;
        Ok(t)
    }

    fn validate(&self) -> Result<()> {
        let last = self.matrix.row(3);
        if last[0] != 0.0 || last[1] != 0.0 || last[2] != 0.0 || last[3] != 1.0 {
            return Err(AtlasError::Degenerate(
                "affine last row must be (0, 0, 0, 1)".into(),
            ));
        }
        let det = self.matrix.fixed_view::<3, 3>(0, 0).determinant();
        if !det.is_finite() || det.abs() < 1e-12 {
            return Err(AtlasError::Degenerate(format!(
                "affine upper 3x3 is singular (det {det})"
            )));
        }
        Ok(())
    }

    pub fn matrix(&self) -> &Matrix4<f64> {
        &self.matrix
    }

    #[inline]
    pub fn apply(&self, p: [f64; 3]) -> [f64; 3] {
        let v = self.matrix * Vector4::new(p[0], p[1], p[2], 1.0);
        [v[0], v[1], v[2]]
    }

    /// `self.compose(inner)` maps `x` to `self(inner(x))`.
    pub fn compose(&self, inner: &AffineTransform) -> AffineTransform {
        AffineTransform {
            matrix: self.matrix * inner.matrix,
        }
    }

    pub fn inverse(&self) -> Result<AffineTransform> {
        let inv = self
            .matrix
            .try_inverse()
            .ok_or_else(|| AtlasError::Degenerate("affine is not invertible".into()))?;
        Ok(AffineTransform { matrix: inv })
    }

    pub fn row_major(&self) -> [f64; 16] {
        let mut out = [0.0; 16];
        for r in 0..4 {
            for c in 0..4 {
                out[r * 4 + c] = self.matrix[(r, c)];
            }
        }
        out
    }

    pub fn from_row_major(values: &[f64]) -> Result<Self> {
        if values.len() != 16 {
            return Err(AtlasError::Degenerate(format!(
                "affine needs 16 values, got {}",
                values.len()
            )));
        }
        let mut m = Matrix4::zeros();
        for r in 0..4 {
            for c in 0..4 {
                m[(r, c)] = values[r * 4 + c];
            }
        }
        AffineTransform::from_matrix(m)
    }

    pub fn write_json(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = AffineFile {
            matrix: self.row_major().to_vec(),
            maps: AFFINE_MAPS_TAG.to_string(),
        };
        let text = serde_json::to_string_pretty(&file).map_err(|e| AtlasError::json(path, e))?;
        std::fs::write(path, text).map_err(|e| AtlasError::io(path, e))
    }

    pub fn read_json(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| AtlasError::io(path, e))?;
        let file: AffineFile = serde_json::from_str(&text).map_err(|e| AtlasError::json(path, e))?;
        if file.maps != AFFINE_MAPS_TAG {
            return Err(AtlasError::Degenerate(format!(
                "unexpected affine convention tag {:?}",
                file.maps
            )));
        }
        AffineTransform::from_row_major(&file.matrix)
    }
}

/// A block-match result: a fixed-space point, its matched moving-space
/// point, and the match cost in 0..=12.
#[derive(Debug, Clone)]
pub struct Correspondence {
    pub fixed_mm: [f64; 3],
    pub moving_mm: [f64; 3],
    pub cost: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BlockMatchParams {
    /// Control-grid spacing in voxels.
    pub grid_spacing: usize,
    /// Search radius in steps per axis.
    pub search_radius: usize,
    /// Voxels per search step.
    pub step_voxels: usize,
    /// Cubic patch radius for the match cost.
    pub cost_patch_radius: usize,
}

impl Default for BlockMatchParams {
    fn default() -> Self {
        BlockMatchParams {
            grid_spacing: 8,
            search_radius: 4,
            step_voxels: 2,
            cost_patch_radius: 1,
        }
    }
}

/// Regular control grid: per axis, points at `spacing/2 + i * spacing`.
pub(crate) fn grid_points(dims: &[usize; 3], spacing: usize) -> Vec<[usize; 3]> {
    let axis = |n: usize| -> Vec<usize> { (spacing / 2..n).step_by(spacing).collect() };
    let (xs, ys, zs) = (axis(dims[0]), axis(dims[1]), axis(dims[2]));
    let mut pts = Vec::with_capacity(xs.len() * ys.len() * zs.len());
    for &z in &zs {
        for &y in &ys {
            for &x in &xs {
                pts.push([x, y, z]);
            }
        }
    }
    pts
}

/// Exhaustive displacement search at every control point. The winning label
/// minimizes the patch descriptor cost; ties break toward smaller
/// displacement norm, then lexicographically on the label coordinates.
pub fn block_match(
    fixed: &DescriptorVolume,
    moving: &DescriptorVolume,
    geom: &Geometry,
    params: &BlockMatchParams,
) -> Result<Vec<Correspondence>> {
    if fixed.dims != moving.dims || fixed.dims != geom.dims {
        return Err(AtlasError::GeometryMismatch {
            context: "block_match descriptors and geometry",
        });
    }
    let pts = grid_points(&fixed.dims, params.grid_spacing);
    if pts.is_empty() {
        return Err(AtlasError::EmptyInput("empty block-match grid"));
    }
    let r = params.search_radius as i64;
    let step = params.step_voxels as i64;
    let out: Vec<Correspondence> = pts
        .par_iter()
        .map(|&[x, y, z]| {
            let center = [x as i64, y as i64, z as i64];
            let mut best_cost = f64::INFINITY;
            let mut best_label = [i64::MAX; 3];
            for li in -r..=r {
                for lj in -r..=r {
                    for lk in -r..=r {
                        let disp = [li * step, lj * step, lk * step];
                        let cost = patch_descriptor_cost(
                            fixed,
                            moving,
                            center,
                            disp,
                            params.cost_patch_radius,
                        );
                        if better_label(cost, [li, lj, lk], best_cost, best_label) {
                            best_cost = cost;
                            best_label = [li, lj, lk];
                        }
                    }
                }
            }
            let mut disp = [
                (best_label[0] * step) as f64,
                (best_label[1] * step) as f64,
                (best_label[2] * step) as f64,
            ];
            // Parabolic sub-step refinement around the winning label; a
            // perfect match (cost 0) is left untouched so the identity case
            // stays exactly zero.
            if best_cost > 0.0 {
                for axis in 0..3 {
                    if best_label[axis] <= -r || best_label[axis] >= r {
                        continue;
                    }
                    let probe = |delta: i64| {
                        let mut l = best_label;
                        l[axis] += delta;
                        patch_descriptor_cost(
                            fixed,
                            moving,
                            center,
                            [l[0] * step, l[1] * step, l[2] * step],
                            params.cost_patch_radius,
                        )
                    };
                    let (cm, cp) = (probe(-1), probe(1));
                    let denom = cm - 2.0 * best_cost + cp;
                    if denom > 1e-12 {
                        let offset = (0.5 * (cm - cp) / denom).clamp(-0.5, 0.5);
                        disp[axis] += offset * step as f64;
                    }
                }
            }
            let fixed_mm = geom.voxel_to_world([x as f64, y as f64, z as f64]);
            let moving_mm = geom.voxel_to_world([
                x as f64 + disp[0],
                y as f64 + disp[1],
                z as f64 + disp[2],
            ]);
            Correspondence {
                fixed_mm,
                moving_mm,
                cost: best_cost,
            }
        })
        .collect();
    Ok(out)
}

/// Label comparison shared by the discrete searches: lower cost wins, then
/// smaller squared norm, then lexicographic label order.
#[inline]
pub(crate) fn better_label(cost: f64, label: [i64; 3], best_cost: f64, best: [i64; 3]) -> bool {
    if cost < best_cost {
        return true;
    }
    if cost > best_cost {
        return false;
    }
    let n = label[0] * label[0] + label[1] * label[1] + label[2] * label[2];
    let bn = best[0] * best[0] + best[1] * best[1] + best[2] * best[2];
    if n != bn {
        return n < bn;
    }
    label < best
}

/// Least-squares 12-parameter fit of fixed points onto moving points with
/// `rounds` passes of residual trimming.
pub fn fit_affine(
    correspondences: &[Correspondence],
    trim_fraction: f64,
    rounds: usize,
) -> Result<AffineTransform> {
    if !(0.0..1.0).contains(&trim_fraction) {
        return Err(AtlasError::InvalidConfig(format!(
            "trim fraction {trim_fraction} outside [0, 1)"
        )));
    }
    let mut active: Vec<usize> = (0..correspondences.len()).collect();
    let mut transform = solve_affine(correspondences, &active)?;
    for _ in 0..rounds {
        let drop = ((active.len() as f64) * trim_fraction).floor() as usize;
        if drop == 0 || active.len() - drop < 4 {
            break;
        }
        // Keep the lowest residuals; ties keep the lower index.
        let mut scored: Vec<(f64, usize)> = active
            .iter()
            .map(|&i| {
                let c = &correspondences[i];
                let p = transform.apply(c.fixed_mm);
                let r2 = (0..3).map(|k| (p[k] - c.moving_mm[k]).powi(2)).sum::<f64>();
                (r2, i)
            })
            .collect();
        scored.sort_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
        scored.truncate(active.len() - drop);
        active = scored.into_iter().map(|(_, i)| i).collect();
        active.sort_unstable();
        transform = solve_affine(correspondences, &active)?;
    }
    Ok(transform)
}

fn solve_affine(correspondences: &[Correspondence], active: &[usize]) -> Result<AffineTransform> {
    if active.len() < 4 {
        return Err(AtlasError::Degenerate(format!(
            "need at least 4 correspondences, have {}",
            active.len()
        )));
    }
    let mut xtx = Matrix4::<f64>::zeros();
    let mut xty = [Vector4::<f64>::zeros(); 3];
    for &i in active {
        let c = &correspondences[i];
        let x = Vector4::new(c.fixed_mm[0], c.fixed_mm[1], c.fixed_mm[2], 1.0);
        xtx += x * x.transpose();
        for axis in 0..3 {
            xty[axis] += x * c.moving_mm[axis];
        }
    }
    let lu = xtx.lu();
    let det = lu.determinant();
    if !det.is_finite() || det.abs() < 1e-9 {
        return Err(AtlasError::Degenerate(
            "coplanar correspondences: affine system is singular".into(),
        ));
    }
    let mut m = Matrix4::identity();
    for axis in 0..3 {
        let row = lu
            .solve(&xty[axis])
            .ok_or_else(|| AtlasError::Degenerate("affine solve failed".into()))?;
        for c in 0..4 {
            m[(axis, c)] = row[c];
        }
    }
    AffineTransform::from_matrix(m)
}

/// Sample `moving` at `affine(world(x))` over `out_geom`.
pub fn resample_affine(
    moving: &Volume,
    affine: &AffineTransform,
    out_geom: &Geometry,
    interp: Interp,
) -> Volume {
    let mut data = vec![0.0f32; out_geom.num_voxels()];
    let plane = out_geom.dims[0] * out_geom.dims[1];
    data.par_chunks_mut(plane).enumerate().for_each(|(z, out)| {
        let mut i = 0;
        for y in 0..out_geom.dims[1] {
            for x in 0..out_geom.dims[0] {
                let w = out_geom.voxel_to_world([x as f64, y as f64, z as f64]);
                let m = affine.apply(w);
                let p = moving.geom.world_to_voxel(m);
                let v = match interp {
                    Interp::Trilinear => sample_trilinear(&moving.data, &moving.geom.dims, p),
                    Interp::Nearest => crate::volume::sample_nearest(&moving.data, &moving.geom.dims, p),
                };
                out[i] = v.unwrap_or(f64::from(VOLUME_FILL_HU)) as f32;
                i += 1;
            }
        }
    });
    Volume {
        geom: out_geom.clone(),
        data,
    }
}

/// One multi-resolution pass: downsampling factor plus the discrete search
/// extent at that level (radius in steps, voxels per step).
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct AffineLevel {
    pub factor: usize,
    pub search_radius: usize,
    pub step_voxels: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AffineConfig {
    /// Coarse-to-fine passes; repeated factor-1 passes refine the estimate
    /// after the discrete matches re-center.
    pub levels: Vec<AffineLevel>,
    /// Control-grid spacing in full-resolution voxels.
    pub grid_spacing: usize,
    pub cost_patch_radius: usize,
    pub trim_fraction: f64,
    pub trim_rounds: usize,
    /// Control points whose surrounding HU standard deviation falls below
    /// this are too flat to match reliably and are excluded from the fit.
    pub min_saliency_hu: f64,
    pub ssc_offset: usize,
    pub ssc_patch_radius: usize,
}

impl Default for AffineConfig {
    fn default() -> Self {
        AffineConfig {
            levels: vec![
                AffineLevel { factor: 4, search_radius: 4, step_voxels: 2 },
                AffineLevel { factor: 2, search_radius: 4, step_voxels: 2 },
                AffineLevel { factor: 1, search_radius: 4, step_voxels: 2 },
                AffineLevel { factor: 1, search_radius: 2, step_voxels: 1 },
                AffineLevel { factor: 1, search_radius: 2, step_voxels: 1 },
            ],
            grid_spacing: 8,
            cost_patch_radius: 1,
            trim_fraction: 0.2,
            trim_rounds: 3,
            min_saliency_hu: 12.0,
            ssc_offset: 1,
            ssc_patch_radius: 1,
        }
    }
}

/// Coarse-to-fine affine registration. Both inputs must share the fixed
/// image's geometry (canonical orientation, resampled to the atlas grid).
pub fn register_affine(fixed: &Volume, moving: &Volume, cfg: &AffineConfig) -> Result<AffineTransform> {
    if !fixed.geom.approx_eq(&moving.geom, 1e-6) {
        return Err(AtlasError::GeometryMismatch {
            context: "register_affine inputs",
        });
    }
    let ssc = SscParams {
        offset: cfg.ssc_offset,
        patch_radius: cfg.ssc_patch_radius,
    };
    let mut transform = AffineTransform::identity();
    for level_cfg in &cfg.levels {
        let level = level_geometry(&fixed.geom, level_cfg.factor);
        let fixed_l = fixed.resample(&level, Interp::Trilinear)?;
        let moving_l = resample_affine(moving, &transform, &level, Interp::Trilinear);
        let fixed_desc = ssc_descriptor(&fixed_l, &ssc)?;
        let moving_desc = ssc_descriptor(&moving_l, &ssc)?;
        // The grid spacing is stated in full-resolution voxels so coarse
        // levels keep enough match points to constrain 12 parameters.
        let block = BlockMatchParams {
            grid_spacing: (cfg.grid_spacing / level_cfg.factor).max(2),
            search_radius: level_cfg.search_radius,
            step_voxels: level_cfg.step_voxels,
            cost_patch_radius: cfg.cost_patch_radius,
        };
        let corr = block_match(&fixed_desc, &moving_desc, &level, &block)?;
        let selected = select_salient(&fixed_l, &corr, &block, cfg.min_saliency_hu);
        let delta = fit_affine(&selected, cfg.trim_fraction, cfg.trim_rounds)?;
        transform = transform.compose(&delta);
    }
    Ok(transform)
}

fn level_geometry(geom: &Geometry, factor: usize) -> Geometry {
    let mut g = geom.clone();
    for c in 0..3 {
        g.dims[c] = (geom.dims[c] + factor - 1) / factor;
        g.spacing[c] = geom.spacing[c] * factor as f64;
    }
    g
}

/// Keep correspondences anchored inside the body with enough local
/// intensity variation to match on; air points carry no displacement
/// evidence and their tie-to-zero matches drag the fit. Falls back to the
/// full set when too few survive to constrain 12 parameters robustly.
fn select_salient(
    fixed: &Volume,
    correspondences: &[Correspondence],
    block: &BlockMatchParams,
    min_std_hu: f64,
) -> Vec<Correspondence> {
    let r = block.cost_patch_radius as i64 + 1;
    let dims = fixed.geom.dims;
    let salient: Vec<Correspondence> = correspondences
        .iter()
        .filter(|c| {
            let v = fixed.geom.world_to_voxel(c.fixed_mm);
            let center = [
                v[0].round() as i64,
                v[1].round() as i64,
                v[2].round() as i64,
            ];
            let center_hu = fixed.data
                [center[0] as usize + dims[0] * (center[1] as usize + dims[1] * center[2] as usize)];
            if center_hu <= -500.0 {
                return false;
            }
            let mut n = 0.0f64;
            let mut mean = 0.0f64;
            let mut m2 = 0.0f64;
            for oz in -r..=r {
                for oy in -r..=r {
                    for ox in -r..=r {
                        let x = center[0] + ox;
                        let y = center[1] + oy;
                        let z = center[2] + oz;
                        if x < 0
                            || y < 0
                            || z < 0
                            || x >= dims[0] as i64
                            || y >= dims[1] as i64
                            || z >= dims[2] as i64
                        {
                            continue;
                        }
                        let val = f64::from(
                            fixed.data[x as usize + dims[0] * (y as usize + dims[1] * z as usize)],
                        );
                        n += 1.0;
                        let d = val - mean;
                        mean += d / n;
                        m2 += d * (val - mean);
                    }
                }
            }
            n > 1.0 && (m2 / n).sqrt() >= min_std_hu
        })
        .cloned()
        .collect();
    if salient.len() >= 16 {
        salient
    } else {
        correspondences.to_vec()
    }
}
