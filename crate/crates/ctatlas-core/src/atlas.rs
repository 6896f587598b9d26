//! Per-phase atlas statistics: registration success filtering and streaming
//! mean / population-variance template accumulation.

use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{AtlasError, Result};
use crate::geometry::Geometry;
use crate::metrics::mask_dice;
use crate::volume::{LabelMap, Volume};

/// Contrast-phase bucket of a CT acquisition.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PhaseTag {
    NonContrast,
    EarlyArterial,
    LateArterial,
    PortalVenous,
    Delayed,
}

impl PhaseTag {
    pub const ALL: [PhaseTag; 5] = [
        PhaseTag::NonContrast,
        PhaseTag::EarlyArterial,
        PhaseTag::LateArterial,
        PhaseTag::PortalVenous,
        PhaseTag::Delayed,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            PhaseTag::NonContrast => "non_contrast",
            PhaseTag::EarlyArterial => "early_arterial",
            PhaseTag::LateArterial => "late_arterial",
            PhaseTag::PortalVenous => "portal_venous",
            PhaseTag::Delayed => "delayed",
        }
    }
}

impl fmt::Display for PhaseTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Threshold separating body from air when judging registration success.
pub const SUCCESS_BODY_HU: f32 = -500.0;
/// Minimum body-mask Dice for a registration to count as successful.
pub const SUCCESS_DICE: f64 = 0.90;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SuccessReport {
    pub body_dice: f64,
    pub ncc_before: f64,
    pub ncc_after: f64,
    pub success: bool,
}

fn body_mask(v: &Volume) -> Vec<bool> {
    v.data.iter().map(|&h| h > SUCCESS_BODY_HU).collect()
}

/// Normalized cross-correlation of two volumes over a voxel mask.
fn masked_ncc(a: &Volume, b: &Volume, mask: &[bool]) -> f64 {
    let mut n = 0.0f64;
    let mut ma = 0.0f64;
    let mut mb = 0.0f64;
    for ((&x, &y), &m) in a.data.iter().zip(&b.data).zip(mask) {
        if m {
            n += 1.0;
            ma += f64::from(x);
            mb += f64::from(y);
        }
    }
    if n < 2.0 {
        return 0.0;
    }
    ma /= n;
    mb /= n;
    let mut cov = 0.0f64;
    let mut va = 0.0f64;
    let mut vb = 0.0f64;
    for ((&x, &y), &m) in a.data.iter().zip(&b.data).zip(mask) {
        if m {
            let dx = f64::from(x) - ma;
            let dy = f64::from(y) - mb;
            cov += dx * dy;
            va += dx * dx;
            vb += dy * dy;
        }
    }
    if va <= 0.0 || vb <= 0.0 {
        return 0.0;
    }
    cov / (va.sqrt() * vb.sqrt())
}

/// A registration is accepted when the body-mask Dice against the fixed
/// image reaches `min_dice` and the masked NCC did not degrade relative to
/// the unregistered volume.
pub fn success_filter(
    registered: &Volume,
    unregistered: &Volume,
    fixed: &Volume,
    min_dice: f64,
) -> Result<SuccessReport> {
    if !registered.geom.approx_eq(&fixed.geom, 1e-6)
        || !unregistered.geom.approx_eq(&fixed.geom, 1e-6)
    {
        return Err(AtlasError::GeometryMismatch {
            context: "success_filter volumes",
        });
    }
    let fixed_mask = body_mask(fixed);
    let dice = mask_dice(&body_mask(registered), &fixed_mask);
    let ncc_before = masked_ncc(unregistered, fixed, &fixed_mask);
    let ncc_after = masked_ncc(registered, fixed, &fixed_mask);
    Ok(SuccessReport {
        body_dice: dice,
        ncc_before,
        ncc_after,
        success: dice >= min_dice && ncc_after >= ncc_before,
    })
}

/// Streaming per-voxel mean and population variance of the accepted
/// registrations of one contrast phase.
#[derive(Debug, Clone)]
pub struct AtlasBundle {
    pub phase: PhaseTag,
    pub geom: Geometry,
    pub count: usize,
    mean: Vec<f64>,
    m2: Vec<f64>,
    /// Per-subject acceptance flags in accumulation order.
    pub flags: Vec<bool>,
}

impl AtlasBundle {
    pub fn new(phase: PhaseTag, geom: Geometry) -> Result<Self> {
        geom.validate()?;
        let n = geom.num_voxels();
        Ok(AtlasBundle {
            phase,
            geom,
            count: 0,
            mean: vec![0.0; n],
            m2: vec![0.0; n],
            flags: Vec::new(),
        })
    }

    /// Welford update with one accepted volume.
    pub fn accumulate(&mut self, registered: &Volume) -> Result<()> {
        if !registered.geom.approx_eq(&self.geom, 1e-6) {
            return Err(AtlasError::GeometryMismatch {
                context: "atlas accumulate",
            });
        }
        self.count += 1;
        let n = self.count as f64;
        for (i, &v) in registered.data.iter().enumerate() {
            let x = f64::from(v);
            let delta = x - self.mean[i];
            self.mean[i] += delta / n;
            self.m2[i] += delta * (x - self.mean[i]);
        }
        Ok(())
    }

    pub fn record_flag(&mut self, accepted: bool) {
        self.flags.push(accepted);
    }

    pub fn mean_volume(&self) -> Result<Volume> {
        if self.count == 0 {
            return Err(AtlasError::EmptyInput("no volumes accumulated"));
        }
        Volume::new(
            self.geom.clone(),
            self.mean.iter().map(|&v| v as f32).collect(),
        )
    }

    /// Population (divide-by-N) variance in HU^2.
    pub fn variance_volume(&self) -> Result<Volume> {
        if self.count == 0 {
            return Err(AtlasError::EmptyInput("no volumes accumulated"));
        }
        let n = self.count as f64;
        Volume::new(
            self.geom.clone(),
            self.m2.iter().map(|&v| (v / n).max(0.0) as f32).collect(),
        )
    }

    /// Write `<phase>_mean.nii` and `<phase>_variance.nii` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<(std::path::PathBuf, std::path::PathBuf)> {
        let mean_path = dir.join(format!("{}_mean.nii", self.phase));
        let var_path = dir.join(format!("{}_variance.nii", self.phase));
        crate::nifti::write_volume(&self.mean_volume()?, &mean_path)?;
        crate::nifti::write_volume(&self.variance_volume()?, &var_path)?;
        Ok((mean_path, var_path))
    }
}

/// Mean of a volume over the voxels selected by `labels` matching any of
/// the given ids; used to compare variance inside organs vs elsewhere.
pub fn mean_where_label(v: &Volume, labels: &LabelMap, ids: &[u8]) -> Result<f64> {
    if !v.geom.approx_eq(&labels.geom, 1e-6) {
        return Err(AtlasError::GeometryMismatch {
            context: "mean_where_label",
        });
    }
    let mut sum = 0.0f64;
    let mut n = 0.0f64;
    for (&x, &l) in v.data.iter().zip(&labels.data) {
        if ids.contains(&l) {
            sum += f64::from(x);
            n += 1.0;
        }
    }
    if n == 0.0 {
        return Err(AtlasError::EmptyInput("no voxels carry the labels"));
    }
    Ok(sum / n)
}

/// Mean of a volume over the top `slabs` axial slices, restricted to the
/// body mask of `body_of` (HU above [`SUCCESS_BODY_HU`]).
pub fn mean_top_band(v: &Volume, body_of: &Volume, slabs: usize) -> Result<f64> {
    if !v.geom.approx_eq(&body_of.geom, 1e-6) {
        return Err(AtlasError::GeometryMismatch {
            context: "mean_top_band volumes",
        });
    }
    let [nx, ny, nz] = v.geom.dims;
    if slabs == 0 || slabs > nz {
        return Err(AtlasError::InvalidConfig(format!(
            "band of {slabs} slices on a {nz}-slice volume"
        )));
    }
    let mut sum = 0.0f64;
    let mut n = 0.0f64;
    for z in nz - slabs..nz {
        for y in 0..ny {
            for x in 0..nx {
                if body_of.at(x, y, z) > SUCCESS_BODY_HU {
                    sum += f64::from(v.at(x, y, z));
                    n += 1.0;
                }
            }
        }
    }
    if n == 0.0 {
        return Err(AtlasError::EmptyInput("no body voxels in the band"));
    }
    Ok(sum / n)
}
