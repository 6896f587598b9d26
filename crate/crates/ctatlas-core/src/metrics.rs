//! Overlap and surface-distance metrics plus the Wilcoxon signed-rank test.
//!
//! Surfaces are the exposed voxel faces of a label region, represented by
//! their face-center points in world millimetres. MSD and HD are directed
//! by default (from prediction vertices to ground-truth vertices); symmetric
//! variants are exposed separately.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{AtlasError, Result};
use crate::volume::LabelMap;

/// Face-center vertices of a label surface, world millimetres.
#[derive(Debug, Clone, PartialEq)]
pub struct SurfaceVertexSet {
    pub points: Vec<[f64; 3]>,
}

/// `2|P n G| / (|P| + |G|)`; defined as 1.0 when both selections are empty.
pub fn dice(p: &LabelMap, g: &LabelMap, label: u8) -> Result<f64> {
    if !p.geom.approx_eq(&g.geom, 1e-6) {
        return Err(AtlasError::GeometryMismatch {
            context: "dice label maps",
        });
    }
    let mut np = 0usize;
    let mut ng = 0usize;
    let mut inter = 0usize;
    for (&a, &b) in p.data.iter().zip(&g.data) {
        let ia = a == label;
        let ib = b == label;
        np += usize::from(ia);
        ng += usize::from(ib);
        inter += usize::from(ia && ib);
    }
    if np + ng == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / (np + ng) as f64)
}

/// Dice of a boolean predicate over two scalar volumes sharing a geometry,
/// used for body-mask agreement.
pub fn mask_dice(a: &[bool], b: &[bool]) -> f64 {
    let na = a.iter().filter(|&&v| v).count();
    let nb = b.iter().filter(|&&v| v).count();
    let inter = a.iter().zip(b).filter(|&(&x, &y)| x && y).count();
    if na + nb == 0 {
        return 1.0;
    }
    2.0 * inter as f64 / (na + nb) as f64
}

/// Every labeled voxel contributes one vertex per face not shared with a
/// same-label voxel, at the face center in world millimetres.
pub fn extract_surface(map: &LabelMap, label: u8) -> Result<SurfaceVertexSet> {
    let dims = map.geom.dims;
    let mut points = Vec::new();
    let same = |x: i64, y: i64, z: i64| -> bool {
        if x < 0 || y < 0 || z < 0 || x >= dims[0] as i64 || y >= dims[1] as i64 || z >= dims[2] as i64
        {
            return false;
        }
        map.data[x as usize + dims[0] * (y as usize + dims[1] * z as usize)] == label
    };
    const FACES: [[i64; 3]; 6] = [
        [1, 0, 0],
        [-1, 0, 0],
        [0, 1, 0],
        [0, -1, 0],
        [0, 0, 1],
        [0, 0, -1],
    ];
    for z in 0..dims[2] {
        for y in 0..dims[1] {
            for x in 0..dims[0] {
                if map.data[map.geom.index(x, y, z)] != label {
                    continue;
                }
                for f in FACES {
                    if !same(x as i64 + f[0], y as i64 + f[1], z as i64 + f[2]) {
                        points.push(map.geom.voxel_to_world([
                            x as f64 + 0.5 * f[0] as f64,
                            y as f64 + 0.5 * f[1] as f64,
                            z as f64 + 0.5 * f[2] as f64,
                        ]));
                    }
                }
            }
        }
    }
    if points.is_empty() {
        return Err(AtlasError::EmptyInput("label absent from map"));
    }
    Ok(SurfaceVertexSet { points })
}

fn min_distance_to(set: &[[f64; 3]], p: [f64; 3]) -> f64 {
    set.iter()
        .map(|q| {
            ((p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2) + (p[2] - q[2]).powi(2)).sqrt()
        })
        .fold(f64::INFINITY, f64::min)
}

/// Directed mean surface distance from `vp` to `vg`. The per-vertex minima
/// are gathered first and summed sequentially so the result does not depend
/// on the worker-pool split.
pub fn msd(vp: &SurfaceVertexSet, vg: &SurfaceVertexSet) -> Result<f64> {
    if vp.points.is_empty() || vg.points.is_empty() {
        return Err(AtlasError::EmptyInput("empty vertex set"));
    }
    let minima: Vec<f64> = vp
        .points
        .par_iter()
        .map(|&p| min_distance_to(&vg.points, p))
        .collect();
    Ok(minima.iter().sum::<f64>() / vp.points.len() as f64)
}

/// Directed Hausdorff distance from `vp` to `vg`.
pub fn hd(vp: &SurfaceVertexSet, vg: &SurfaceVertexSet) -> Result<f64> {
    if vp.points.is_empty() || vg.points.is_empty() {
        return Err(AtlasError::EmptyInput("empty vertex set"));
    }
    Ok(vp
        .points
        .par_iter()
        .map(|&p| min_distance_to(&vg.points, p))
        .reduce(|| 0.0, f64::max))
}

/// Mean of the two directed mean surface distances.
pub fn msd_symmetric(vp: &SurfaceVertexSet, vg: &SurfaceVertexSet) -> Result<f64> {
    Ok(0.5 * (msd(vp, vg)? + msd(vg, vp)?))
}

/// Max of the two directed Hausdorff distances.
pub fn hd_symmetric(vp: &SurfaceVertexSet, vg: &SurfaceVertexSet) -> Result<f64> {
    Ok(hd(vp, vg)?.max(hd(vg, vp)?))
}

// ---------------------------------------------------------------------------
// Wilcoxon signed-rank test
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct WilcoxonResult {
    /// Smaller of the positive / negative signed-rank sums.
    pub w: f64,
    /// Normal approximation with tie correction and continuity correction.
    pub z: f64,
    pub p_two_sided: f64,
    pub n_nonzero: usize,
}

/// Ranks of absolute values with average ranks on ties. Returns
/// `(ranks aligned to input order, tie group sizes)`.
fn rank_abs(values: &[f64]) -> (Vec<f64>, Vec<usize>) {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| {
        values[a]
            .abs()
            .partial_cmp(&values[b].abs())
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    let mut ranks = vec![0.0f64; values.len()];
    let mut ties = Vec::new();
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]].abs() == values[order[i]].abs() {
            j += 1;
        }
        let avg = (i + j + 2) as f64 / 2.0; // ranks are 1-based
        for &k in &order[i..=j] {
            ranks[k] = avg;
        }
        ties.push(j - i + 1);
        i = j + 1;
    }
    (ranks, ties)
}

/// Wilcoxon signed-rank test on paired differences using the normal
/// approximation with tie correction. Zero differences are dropped; at
/// least 6 nonzero differences are required for the approximation to hold.
pub fn wilcoxon_signed_rank(diffs: &[f64]) -> Result<WilcoxonResult> {
    let nz: Vec<f64> = diffs.iter().copied().filter(|&d| d != 0.0).collect();
    if nz.is_empty() {
        return Err(AtlasError::Degenerate("all differences are zero".into()));
    }
    if nz.len() < 6 {
        return Err(AtlasError::Degenerate(format!(
            "{} nonzero differences; need at least 6 for the normal approximation",
            nz.len()
        )));
    }
    let n = nz.len();
    let (ranks, ties) = rank_abs(&nz);
    let mut w_plus = 0.0f64;
    let mut w_minus = 0.0f64;
    for (d, r) in nz.iter().zip(&ranks) {
        if *d > 0.0 {
            w_plus += r;
        } else {
            w_minus += r;
        }
    }
    let w = w_plus.min(w_minus);
    let nf = n as f64;
    let mean = nf * (nf + 1.0) / 4.0;
    let tie_term: f64 = ties
        .iter()
        .map(|&t| {
            let t = t as f64;
            (t * t * t - t) / 48.0
        })
        .sum();
    let var = nf * (nf + 1.0) * (2.0 * nf + 1.0) / 24.0 - tie_term;
    if var <= 0.0 {
        return Err(AtlasError::Degenerate("zero variance after ties".into()));
    }
    let sd = var.sqrt();
    // Continuity correction toward the mean.
    let z = if w < mean {
        (w - mean + 0.5) / sd
    } else if w > mean {
        (w - mean - 0.5) / sd
    } else {
        0.0
    };
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let p = 2.0 * normal.cdf(-z.abs());
    Ok(WilcoxonResult {
        w,
        z,
        p_two_sided: p.min(1.0),
        n_nonzero: n,
    })
}

/// Exact two-sided p by full sign enumeration, usable up to n = 12 nonzero
/// differences: `P(|W+ - mean| >= |observed W+ - mean|)` under random signs.
pub fn wilcoxon_exact_p(diffs: &[f64]) -> Result<f64> {
    let nz: Vec<f64> = diffs.iter().copied().filter(|&d| d != 0.0).collect();
    if nz.is_empty() {
        return Err(AtlasError::Degenerate("all differences are zero".into()));
    }
    let n = nz.len();
    if n > 12 {
        return Err(AtlasError::Degenerate(format!(
            "exact enumeration limited to 12 nonzero differences, got {n}"
        )));
    }
    let (ranks, _) = rank_abs(&nz);
    let mut w_plus = 0.0f64;
    for (d, r) in nz.iter().zip(&ranks) {
        if *d > 0.0 {
            w_plus += r;
        }
    }
    let mean: f64 = ranks.iter().sum::<f64>() / 2.0;
    let observed = (w_plus - mean).abs();
    let total = 1usize << n;
    let mut hits = 0usize;
    for mask in 0..total {
        let mut s = 0.0f64;
        for (bit, r) in ranks.iter().enumerate() {
            if mask & (1 << bit) != 0 {
                s += r;
            }
        }
        if (s - mean).abs() >= observed - 1e-12 {
            hits += 1;
        }
    }
    Ok(hits as f64 / total as f64)
}
