//! Volume-of-interest extraction via per-slice body-coordinate scores.
//!
//! Every axial slice gets a continuous score in [-12, +12] (anchor semantics:
//! -12 upper chest, -5 diaphragm / upper liver, +4 lower retroperitoneum,
//! +6 pelvis). Scores come either from a JSON sidecar or from a linear model
//! over hand-crafted slice features. A linear fit over slice index corrects
//! discontinuities, and the volume is cropped to the slices whose fitted
//! score falls inside the abdominal-to-retroperitoneal window.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{AtlasError, Result};
use crate::volume::Volume;

/// CT threshold separating body tissue from air for the 2-D body mask.
pub const BODY_MASK_HU: f32 = -500.0;
/// Threshold below which in-body voxels count as air (bowel gas, lung base).
pub const AIR_HU: f32 = -300.0;
/// Threshold above which in-body voxels count as bone.
pub const BONE_HU: f32 = 200.0;
/// Score range produced by any scorer.
pub const SCORE_RANGE: (f64, f64) = (-12.0, 12.0);
/// Default crop window in fitted-score units.
pub const DEFAULT_WINDOW: (f64, f64) = (-5.0, 5.0);
/// Registration is meaningless below this many surviving slices.
pub const MIN_SLICES: usize = 16;

pub const FEATURE_COUNT: usize = 5;

/// One feature row per axial slice:
/// `[body area mm^2, mean HU, air fraction, bone fraction, centroid offset mm]`.
#[derive(Debug, Clone, PartialEq)]
pub struct SliceFeatures {
    pub rows: Vec<[f64; FEATURE_COUNT]>,
}

/// Raw scores plus the linear correction `fitted = a * z + b`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SliceScoreSeries {
    pub raw: Vec<f64>,
    pub slope: f64,
    pub intercept: f64,
}

impl SliceScoreSeries {
    pub fn fitted(&self, z: usize) -> f64 {
        self.slope * z as f64 + self.intercept
    }

    pub fn fitted_scores(&self) -> Vec<f64> {
        (0..self.raw.len()).map(|z| self.fitted(z)).collect()
    }
}

/// Pluggable stand-in for the slice scoring model.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub enum SliceScorer {
    /// Per-slice scores read from a JSON sidecar.
    File(Vec<f64>),
    /// Dot product of standardized features with stored weights plus a bias.
    Linear(LinearScorer),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LinearScorer {
    pub weights: [f64; FEATURE_COUNT],
    pub bias: f64,
    pub feature_mean: [f64; FEATURE_COUNT],
    pub feature_std: [f64; FEATURE_COUNT],
}

/// Load a `<stem>.scores.json` sidecar: a JSON array of numbers.
pub fn read_score_sidecar(path: impl AsRef<Path>) -> Result<Vec<f64>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| AtlasError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| AtlasError::json(path, e))
}

pub fn write_score_sidecar(scores: &[f64], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let text = serde_json::to_string(scores).map_err(|e| AtlasError::json(path, e))?;
    std::fs::write(path, text).map_err(|e| AtlasError::io(path, e))
}

/// Sidecar path convention for a volume file: `<stem>.scores.json` where the
/// stem strips `.nii` / `.nii.gz`.
pub fn sidecar_path(volume_path: &Path) -> std::path::PathBuf {
    let name = volume_path
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default();
    let stem = name
        .strip_suffix(".nii.gz")
        .or_else(|| name.strip_suffix(".nii"))
        .unwrap_or(&name);
    volume_path.with_file_name(format!("{stem}.scores.json"))
}

// ---------------------------------------------------------------------------
// Slice features
// ---------------------------------------------------------------------------

/// Per-slice features over the body mask. The body mask of a slice is the
/// largest 4-connected component of voxels above `BODY_MASK_HU`; an empty
/// mask yields an all-zero row.
pub fn compute_slice_features(v: &Volume) -> SliceFeatures {
    let [nx, ny, nz] = v.geom.dims;
    let pixel_area = v.geom.spacing[0] * v.geom.spacing[1];
    let mut rows = Vec::with_capacity(nz);
    let mut mask = vec![0u32; nx * ny];
    for z in 0..nz {
        let slice = &v.data[z * nx * ny..(z + 1) * nx * ny];
        let comp = largest_component(slice, nx, ny, &mut mask);
        let Some(component_id) = comp else {
            rows.push([0.0; FEATURE_COUNT]);
            continue;
        };
        let mut count = 0usize;
        let mut sum_hu = 0.0f64;
        let mut air = 0usize;
        let mut bone = 0usize;
        let (mut cx, mut cy) = (0.0f64, 0.0f64);
        for y in 0..ny {
            for x in 0..nx {
                let i = x + nx * y;
                if mask[i] == component_id {
                    let hu = slice[i];
                    count += 1;
                    sum_hu += f64::from(hu);
                    if hu < AIR_HU {
                        air += 1;
                    }
                    if hu > BONE_HU {
                        bone += 1;
                    }
                    cx += x as f64;
                    cy += y as f64;
                }
            }
        }
        let n = count as f64;
        let center_x = (nx as f64 - 1.0) / 2.0;
        let center_y = (ny as f64 - 1.0) / 2.0;
        let dx = (cx / n - center_x) * v.geom.spacing[0];
        let dy = (cy / n - center_y) * v.geom.spacing[1];
        rows.push([
            n * pixel_area,
            sum_hu / n,
            air as f64 / n,
            bone as f64 / n,
            (dx * dx + dy * dy).sqrt(),
        ]);
    }
    SliceFeatures { rows }
}

/// Label 4-connected components of `slice > BODY_MASK_HU`; returns the id of
/// the largest component (ties to the lower id), or None if the mask is empty.
fn largest_component(slice: &[f32], nx: usize, ny: usize, mask: &mut [u32]) -> Option<u32> {
    mask.fill(0);
    let mut next_id = 0u32;
    let mut sizes: Vec<usize> = Vec::new();
    let mut stack: Vec<usize> = Vec::new();
    for start in 0..nx * ny {
        if mask[start] != 0 || slice[start] <= BODY_MASK_HU {
            continue;
        }
        next_id += 1;
        let id = next_id;
        let mut size = 0usize;
        stack.push(start);
        mask[start] = id;
        while let Some(i) = stack.pop() {
            size += 1;
            let (x, y) = (i % nx, i / nx);
            let mut push = |j: usize| {
                if mask[j] == 0 && slice[j] > BODY_MASK_HU {
                    mask[j] = id;
                    stack.push(j);
                }
            };
            if x > 0 {
                push(i - 1);
            }
            if x + 1 < nx {
                push(i + 1);
            }
            if y > 0 {
                push(i - nx);
            }
            if y + 1 < ny {
                push(i + nx);
            }
        }
        sizes.push(size);
    }
    if sizes.is_empty() {
        return None;
    }
    let best = sizes
        .iter()
        .enumerate()
        .max_by_key(|&(i, &s)| (s, std::cmp::Reverse(i)))
        .map(|(i, _)| i as u32 + 1);
    best
}

// ---------------------------------------------------------------------------
// Scoring
// ---------------------------------------------------------------------------

/// One raw score per slice, clamped to [-12, +12].
pub fn score_slices(features: &SliceFeatures, scorer: &SliceScorer) -> Result<Vec<f64>> {
    let n = features.rows.len();
    let raw: Vec<f64> = match scorer {
        SliceScorer::File(scores) => {
            if scores.len() != n {
                return Err(AtlasError::SidecarLengthMismatch {
                    expected: n,
                    got: scores.len(),
                });
            }
            scores.clone()
        }
        SliceScorer::Linear(m) => features
            .rows
            .iter()
            .map(|row| {
                let mut s = m.bias;
                for f in 0..FEATURE_COUNT {
                    let std = if m.feature_std[f] > 0.0 {
                        m.feature_std[f]
                    } else {
                        1.0
                    };
                    s += m.weights[f] * (row[f] - m.feature_mean[f]) / std;
                }
                s
            })
            .collect(),
    };
    Ok(raw
        .into_iter()
        .map(|s| s.clamp(SCORE_RANGE.0, SCORE_RANGE.1))
        .collect())
}

/// Ordinary least squares of `true_scores` against standardized features,
/// with a small ridge term for conditioning. Returns a ready-to-use scorer.
pub fn fit_scorer(features: &[[f64; FEATURE_COUNT]], true_scores: &[f64]) -> Result<LinearScorer> {
    if features.len() != true_scores.len() || features.len() < 2 {
        return Err(AtlasError::Degenerate(
            "need at least 2 (features, score) samples".into(),
        ));
    }
    let n = features.len() as f64;
    let mut mean = [0.0; FEATURE_COUNT];
    let mut std = [0.0; FEATURE_COUNT];
    for row in features {
        for f in 0..FEATURE_COUNT {
            mean[f] += row[f];
        }
    }
    for m in mean.iter_mut() {
        *m /= n;
    }
    for row in features {
        for f in 0..FEATURE_COUNT {
            std[f] += (row[f] - mean[f]).powi(2);
        }
    }
    for s in std.iter_mut() {
        *s = (*s / n).sqrt();
    }
    if std.iter().all(|&s| s == 0.0) {
        return Err(AtlasError::Degenerate(
            "all feature rows identical".into(),
        ));
    }
    // Design matrix: standardized features plus intercept column.
    let d = FEATURE_COUNT + 1;
    let mut xtx = vec![vec![0.0f64; d]; d];
    let mut xty = vec![0.0f64; d];
    for (row, &y) in features.iter().zip(true_scores) {
        let mut x = [0.0f64; FEATURE_COUNT + 1];
        for f in 0..FEATURE_COUNT {
            x[f] = if std[f] > 0.0 {
                (row[f] - mean[f]) / std[f]
            } else {
                0.0
            };
        }
        x[FEATURE_COUNT] = 1.0;
        for a in 0..d {
            for b in 0..d {
                xtx[a][b] += x[a] * x[b];
            }
            xty[a] += x[a] * y;
        }
    }
    for (a, row) in xtx.iter_mut().enumerate() {
        row[a] += 1e-6; // ridge
    }
    let theta = solve_dense(&mut xtx, &mut xty)
        .ok_or_else(|| AtlasError::Degenerate("singular normal equations".into()))?;
    let mut weights = [0.0; FEATURE_COUNT];
    weights.copy_from_slice(&theta[..FEATURE_COUNT]);
    Ok(LinearScorer {
        weights,
        bias: theta[FEATURE_COUNT],
        feature_mean: mean,
        feature_std: std,
    })
}

/// Gaussian elimination with partial pivoting; None if singular.
pub(crate) fn solve_dense(a: &mut [Vec<f64>], b: &mut [f64]) -> Option<Vec<f64>> {
    let n = b.len();
    for col in 0..n {
        let pivot = (col..n).max_by(|&i, &j| {
            a[i][col]
                .abs()
                .partial_cmp(&a[j][col].abs())
                .unwrap_or(std::cmp::Ordering::Equal)
        })?;
        if a[pivot][col].abs() < 1e-12 {
            return None;
        }
        a.swap(col, pivot);
        b.swap(col, pivot);
        for row in (col + 1)..n {
            let factor = a[row][col] / a[col][col];
            for k in col..n {
                a[row][k] -= factor * a[col][k];
            }
            b[row] -= factor * b[col];
        }
    }
    let mut x = vec![0.0; n];
    for row in (0..n).rev() {
        let mut s = b[row];
        for k in (row + 1)..n {
            s -= a[row][k] * x[k];
        }
        x[row] = s / a[row][row];
    }
    Some(x)
}

/// Least-squares line `score = a * z + b` over slice index.
pub fn fit_linear_correction(raw: &[f64]) -> Result<(f64, f64)> {
    if raw.len() < 2 {
        return Err(AtlasError::Degenerate(
            "need at least 2 slices for the linear correction".into(),
        ));
    }
    let n = raw.len() as f64;
    let mean_z = (raw.len() - 1) as f64 / 2.0;
    let mean_s = raw.iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let mut var = 0.0;
    for (z, &s) in raw.iter().enumerate() {
        let dz = z as f64 - mean_z;
        cov += dz * (s - mean_s);
        var += dz * dz;
    }
    let a = cov / var;
    let b = mean_s - a * mean_z;
    Ok((a, b))
}

/// Build the corrected score series for a volume.
pub fn build_score_series(features: &SliceFeatures, scorer: &SliceScorer) -> Result<SliceScoreSeries> {
    let raw = score_slices(features, scorer)?;
    let (slope, intercept) = fit_linear_correction(&raw)?;
    if slope.abs() < 1e-9 {
        return Err(AtlasError::Degenerate(
            "fitted score slope is zero; slices carry no body-coordinate gradient".into(),
        ));
    }
    Ok(SliceScoreSeries {
        raw,
        slope,
        intercept,
    })
}

/// Contiguous slice range whose fitted scores lie inside the closed window.
pub fn window_slice_range(
    series: &SliceScoreSeries,
    window: (f64, f64),
) -> Result<std::ops::Range<usize>> {
    let nz = series.raw.len();
    let inside: Vec<usize> = (0..nz)
        .filter(|&z| {
            let s = series.fitted(z);
            s >= window.0 && s <= window.1
        })
        .collect();
    let (Some(&first), Some(&last)) = (inside.first(), inside.last()) else {
        return Err(AtlasError::EmptyWindow {
            lo: window.0,
            hi: window.1,
        });
    };
    // Fitted scores are affine in z, so the in-window set is contiguous.
    let range = first..last + 1;
    if range.len() < MIN_SLICES {
        return Err(AtlasError::TooFewSlices {
            survived: range.len(),
            minimum: MIN_SLICES,
        });
    }
    Ok(range)
}

/// Retain exactly the slices whose fitted score lies in the closed window.
pub fn crop_to_window(v: &Volume, series: &SliceScoreSeries, window: (f64, f64)) -> Result<Volume> {
    let range = window_slice_range(series, window)?;
    let nz = range.len();
    v.crop_pad_z(range, nz)
}
