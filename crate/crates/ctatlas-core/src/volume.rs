//! Volume and label-map data model plus the geometric primitives every
//! stage consumes: canonical reorientation, resampling and z crop/pad.

use crate::error::{AtlasError, Result};
use crate::geometry::Geometry;

/// Fill value for out-of-bounds / padded scalar voxels (air in HU).
pub const VOLUME_FILL_HU: f32 = -1024.0;
/// Fill value for out-of-bounds / padded label voxels (background).
pub const LABEL_FILL: u8 = 0;
/// Highest organ label id in the atlas label set.
pub const MAX_LABEL: u8 = 13;

/// Scalar CT grid in Hounsfield units. Data is stored x-fastest.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    pub geom: Geometry,
    pub data: Vec<f32>,
}

/// Integer organ-label grid sharing the Volume geometry; ids 0..=13.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelMap {
    pub geom: Geometry,
    pub data: Vec<u8>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Interp {
    Trilinear,
    Nearest,
}

impl Volume {
    pub fn new(geom: Geometry, data: Vec<f32>) -> Result<Self> {
        geom.validate()?;
        if data.len() != geom.num_voxels() {
            return Err(AtlasError::InvalidData(format!(
                "data length {} != {} voxels",
                data.len(),
                geom.num_voxels()
            )));
        }
        if let Some(bad) = data.iter().find(|v| !v.is_finite()) {
            return Err(AtlasError::InvalidData(format!("non-finite value {bad}")));
        }
        Ok(Volume { geom, data })
    }

    /// Uniform volume, mostly for tests and padding scaffolds.
    pub fn filled(geom: Geometry, value: f32) -> Result<Self> {
        let n = geom.num_voxels();
        Volume::new(geom, vec![value; n])
    }

    #[inline]
    pub fn at(&self, x: usize, y: usize, z: usize) -> f32 {
        self.data[self.geom.index(x, y, z)]
    }

    pub fn reorient_canonical(&self) -> Volume {
        let (geom, plan) = reorient_plan(&self.geom);
        let data = apply_axis_plan(&self.data, &self.geom.dims, &plan);
        Volume { geom, data }
    }

    pub fn resample(&self, target: &Geometry, interp: Interp) -> Result<Volume> {
        target.validate()?;
        // Resampling onto the identical grid is the identity map; skipping
        // the interpolation also avoids world/voxel roundtrip noise.
        if *target == self.geom {
            return Ok(self.clone());
        }
        let data = resample_data(
            &self.data,
            &self.geom,
            target,
            interp,
            f64::from(VOLUME_FILL_HU),
        );
        Ok(Volume {
            geom: target.clone(),
            data: data.into_iter().map(|v| v as f32).collect(),
        })
    }

    pub fn crop_pad_z(&self, z_keep: std::ops::Range<usize>, target_nz: usize) -> Result<Volume> {
        let (geom, map) = crop_pad_plan(&self.geom, z_keep, target_nz)?;
        let data = apply_slice_map(&self.data, &self.geom.dims, &map, VOLUME_FILL_HU);
        Ok(Volume { geom, data })
    }
}

impl LabelMap {
    pub fn new(geom: Geometry, data: Vec<u8>) -> Result<Self> {
        geom.validate()?;
        if data.len() != geom.num_voxels() {
            return Err(AtlasError::InvalidData(format!(
                "label data length {} != {} voxels",
                data.len(),
                geom.num_voxels()
            )));
        }
        if let Some(&bad) = data.iter().find(|&&v| v > MAX_LABEL) {
            return Err(AtlasError::LabelOutOfRange(f64::from(bad)));
        }
        Ok(LabelMap { geom, data })
    }

    #[inline]
    pub fn at(&self, x: usize, y: usize, z: usize) -> u8 {
        self.data[self.geom.index(x, y, z)]
    }

    pub fn reorient_canonical(&self) -> LabelMap {
        let (geom, plan) = reorient_plan(&self.geom);
        let data = apply_axis_plan(&self.data, &self.geom.dims, &plan);
        LabelMap { geom, data }
    }

    pub fn resample(&self, target: &Geometry, interp: Interp) -> Result<LabelMap> {
        if interp == Interp::Trilinear {
            return Err(AtlasError::LabelInterpolation);
        }
        target.validate()?;
        if *target == self.geom {
            return Ok(self.clone());
        }
        let float: Vec<f32> = self.data.iter().map(|&v| f32::from(v)).collect();
        let data = resample_data(&float, &self.geom, target, interp, f64::from(LABEL_FILL));
        Ok(LabelMap {
            geom: target.clone(),
            data: data.into_iter().map(|v| v as u8).collect(),
        })
    }

    pub fn crop_pad_z(&self, z_keep: std::ops::Range<usize>, target_nz: usize) -> Result<LabelMap> {
        let (geom, map) = crop_pad_plan(&self.geom, z_keep, target_nz)?;
        let data = apply_slice_map(&self.data, &self.geom.dims, &map, LABEL_FILL);
        Ok(LabelMap { geom, data })
    }
}

// ---------------------------------------------------------------------------
// Canonical reorientation
// ---------------------------------------------------------------------------

/// Per output axis: which input axis feeds it and whether it is reversed.
#[derive(Debug, Clone, Copy)]
pub(crate) struct AxisPlan {
    pub source: [usize; 3],
    pub flip: [bool; 3],
}

/// Choose the axis permutation/flip that brings the direction matrix closest
/// to identity: output axis `r` takes the input axis whose direction column
/// has its dominant component on world axis `r`.
pub(crate) fn reorient_plan(geom: &Geometry) -> (Geometry, AxisPlan) {
    let mut source = [usize::MAX; 3];
    let mut flip = [false; 3];
    let mut taken = [false; 3];
    for c in 0..3 {
        let col = geom.column(c);
        let mut best_axis = 0;
        let mut best = -1.0;
        for (r, v) in col.iter().enumerate() {
            if v.abs() > best && !taken[r] {
                best = v.abs();
                best_axis = r;
            }
        }
        taken[best_axis] = true;
        source[best_axis] = c;
        flip[best_axis] = col[best_axis] < 0.0;
    }
    let plan = AxisPlan { source, flip };

    let mut dims = [0; 3];
    let mut spacing = [0.0; 3];
    let mut direction = [[0.0; 3]; 3];
    for r in 0..3 {
        let c = plan.source[r];
        dims[r] = geom.dims[c];
        spacing[r] = geom.spacing[c];
        let sign = if plan.flip[r] { -1.0 } else { 1.0 };
        for row in 0..3 {
            direction[row][r] = sign * geom.direction[row][c];
        }
    }
    // World position of the voxel that becomes output index (0,0,0).
    let mut first = [0.0; 3];
    for r in 0..3 {
        let c = plan.source[r];
        if plan.flip[r] {
            first[c] = (geom.dims[c] - 1) as f64;
        }
    }
    let origin = geom.voxel_to_world(first);
    (
        Geometry {
            dims,
            spacing,
            origin,
            direction,
        },
        plan,
    )
}

fn apply_axis_plan<T: Copy>(data: &[T], in_dims: &[usize; 3], plan: &AxisPlan) -> Vec<T> {
    let out_dims = [
        in_dims[plan.source[0]],
        in_dims[plan.source[1]],
        in_dims[plan.source[2]],
    ];
    let mut out = Vec::with_capacity(data.len());
    for k in 0..out_dims[2] {
        for j in 0..out_dims[1] {
            for i in 0..out_dims[0] {
                let oidx = [i, j, k];
                let mut input = [0usize; 3];
                for r in 0..3 {
                    let c = plan.source[r];
                    input[c] = if plan.flip[r] {
                        in_dims[c] - 1 - oidx[r]
                    } else {
                        oidx[r]
                    };
                }
                out.push(data[input[0] + in_dims[0] * (input[1] + in_dims[1] * input[2])]);
            }
        }
    }
    out
}

// ---------------------------------------------------------------------------
// Sampling and resampling
// ---------------------------------------------------------------------------

/// Trilinear sample at continuous voxel coordinates; `None` outside the
/// interpolation domain [0, n-1] on any axis. Size-1 axes act as constant.
pub(crate) fn sample_trilinear(data: &[f32], dims: &[usize; 3], p: [f64; 3]) -> Option<f64> {
    let mut i0 = [0usize; 3];
    let mut frac = [0.0f64; 3];
    for c in 0..3 {
        let n = dims[c];
        let hi = (n - 1) as f64;
        if p[c] < 0.0 || p[c] > hi {
            return None;
        }
        if n == 1 {
            i0[c] = 0;
            frac[c] = 0.0;
        } else {
            let f = p[c].floor().min(hi - 1.0);
            i0[c] = f as usize;
            frac[c] = p[c] - f;
        }
    }
    let step = |c: usize| if dims[c] == 1 { 0 } else { 1 };
    let idx = |x: usize, y: usize, z: usize| x + dims[0] * (y + dims[1] * z);
    let (x0, y0, z0) = (i0[0], i0[1], i0[2]);
    let (x1, y1, z1) = (x0 + step(0), y0 + step(1), z0 + step(2));
    let (fx, fy, fz) = (frac[0], frac[1], frac[2]);
    let c000 = f64::from(data[idx(x0, y0, z0)]);
    let c100 = f64::from(data[idx(x1, y0, z0)]);
    let c010 = f64::from(data[idx(x0, y1, z0)]);
    let c110 = f64::from(data[idx(x1, y1, z0)]);
    let c001 = f64::from(data[idx(x0, y0, z1)]);
    let c101 = f64::from(data[idx(x1, y0, z1)]);
    let c011 = f64::from(data[idx(x0, y1, z1)]);
    let c111 = f64::from(data[idx(x1, y1, z1)]);
    let c00 = c000 + (c100 - c000) * fx;
    let c10 = c010 + (c110 - c010) * fx;
    let c01 = c001 + (c101 - c001) * fx;
    let c11 = c011 + (c111 - c011) * fx;
    let c0 = c00 + (c10 - c00) * fy;
    let c1 = c01 + (c11 - c01) * fy;
    Some(c0 + (c1 - c0) * fz)
}

/// Nearest-neighbour sample; rounding is `floor(p + 0.5)` so halves go up.
pub(crate) fn sample_nearest(data: &[f32], dims: &[usize; 3], p: [f64; 3]) -> Option<f64> {
    let mut idx = [0usize; 3];
    for c in 0..3 {
        let r = (p[c] + 0.5).floor();
        if r < 0.0 || r > (dims[c] - 1) as f64 {
            return None;
        }
        idx[c] = r as usize;
    }
    Some(f64::from(
        data[idx[0] + dims[0] * (idx[1] + dims[1] * idx[2])],
    ))
}

fn resample_data(
    data: &[f32],
    src: &Geometry,
    target: &Geometry,
    interp: Interp,
    fill: f64,
) -> Vec<f64> {
    let mut out = Vec::with_capacity(target.num_voxels());
    for k in 0..target.dims[2] {
        for j in 0..target.dims[1] {
            for i in 0..target.dims[0] {
                let w = target.voxel_to_world([i as f64, j as f64, k as f64]);
                let p = src.world_to_voxel(w);
                let v = match interp {
                    Interp::Trilinear => sample_trilinear(data, &src.dims, p),
                    Interp::Nearest => sample_nearest(data, &src.dims, p),
                };
                out.push(v.unwrap_or(fill));
            }
        }
    }
    out
}

// ---------------------------------------------------------------------------
// Crop / pad along z
// ---------------------------------------------------------------------------

/// For each output slice: the source slice index, or None for fill.
fn crop_pad_plan(
    geom: &Geometry,
    z_keep: std::ops::Range<usize>,
    target_nz: usize,
) -> Result<(Geometry, Vec<Option<usize>>)> {
    if z_keep.is_empty() {
        return Err(AtlasError::EmptyInput("empty z keep range"));
    }
    if z_keep.end > geom.dims[2] {
        return Err(AtlasError::InvalidGeometry(format!(
            "keep range {z_keep:?} exceeds nz {}",
            geom.dims[2]
        )));
    }
    if target_nz == 0 {
        return Err(AtlasError::EmptyInput("target_nz must be positive"));
    }
    let kept = z_keep.len();
    if kept >= target_nz {
        // More kept slices than requested: keep the central target_nz,
        // dropping evenly (extra drop from the top).
        let drop = kept - target_nz;
        let start = z_keep.start + drop / 2;
        let map: Vec<Option<usize>> = (0..target_nz).map(|k| Some(start + k)).collect();
        let origin = geom.voxel_to_world([0.0, 0.0, start as f64]);
        let mut g = geom.clone();
        g.dims[2] = target_nz;
        g.origin = origin;
        return Ok((g, map));
    }
    let pad = target_nz - kept;
    let pad_below = pad / 2; // ties: extra slice goes above
    let first_kept_out = pad_below;
    let map: Vec<Option<usize>> = (0..target_nz)
        .map(|k| {
            if k >= first_kept_out && k < first_kept_out + kept {
                Some(z_keep.start + (k - first_kept_out))
            } else {
                None
            }
        })
        .collect();
    // Output slice 0 sits pad_below slices before the first kept slice.
    let z0 = z_keep.start as f64 - pad_below as f64;
    let origin = geom.voxel_to_world([0.0, 0.0, z0]);
    let mut g = geom.clone();
    g.dims[2] = target_nz;
    g.origin = origin;
    Ok((g, map))
}

fn apply_slice_map<T: Copy>(
    data: &[T],
    dims: &[usize; 3],
    map: &[Option<usize>],
    fill: T,
) -> Vec<T> {
    let plane = dims[0] * dims[1];
    let mut out = Vec::with_capacity(plane * map.len());
    for m in map {
        match m {
            Some(z) => out.extend_from_slice(&data[z * plane..(z + 1) * plane]),
            None => out.extend(std::iter::repeat(fill).take(plane)),
        }
    }
    out
}
