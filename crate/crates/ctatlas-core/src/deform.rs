//! Stage-2 deformable registration: multi-level dense displacement sampling
//! on a control grid with tree-structured MRF regularization.
//!
//! Each level evaluates every quantized displacement label at every control
//! node (descriptor patch costs), then selects the labeling that exactly
//! minimizes `sum_n cost[n][l_n] + alpha * sum_(i,j) in tree ||d_i - d_j||^2`
//! over a minimum spanning tree of the control grid, by min-sum dynamic
//! programming. Because the pairwise term is a separable squared distance,
//! each message is three 1-D min-convolutions instead of a full L^2 scan.
//! The selected node displacements upsample trilinearly to a dense field,
//! which composes onto the running total before the next level.

use std::collections::BinaryHeap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::affine::better_label;
use crate::error::{AtlasError, Result};
use crate::field::{compose, warp_volume, DenseField};
use crate::geometry::Geometry;
use crate::ssc::{patch_descriptor_cost, ssc_descriptor, DescriptorVolume, SscParams};
use crate::volume::{Interp, Volume};

/// One resolution level: control-grid spacing, search radius in steps, and
/// voxels per step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LevelParams {
    pub grid_spacing: usize,
    pub search_radius: usize,
    pub quantization: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LevelSchedule {
    pub levels: Vec<LevelParams>,
}

impl Default for LevelSchedule {
    /// Five levels; spacing 8 down to 4, radius six steps down to two,
    /// quantization 5 voxels down to 1.
    fn default() -> Self {
        let spacing = [8, 7, 6, 5, 4];
        let radius = [6, 5, 4, 3, 2];
        let quant = [5, 4, 3, 2, 1];
        LevelSchedule {
            levels: (0..5)
                .map(|i| LevelParams {
                    grid_spacing: spacing[i],
                    search_radius: radius[i],
                    quantization: quant[i],
                })
                .collect(),
        }
    }
}

impl LevelSchedule {
    pub fn validate(&self) -> Result<()> {
        if self.levels.is_empty() {
            return Err(AtlasError::InvalidConfig("empty level schedule".into()));
        }
        for l in &self.levels {
            if l.grid_spacing == 0 || l.search_radius == 0 || l.quantization == 0 {
                return Err(AtlasError::InvalidConfig(format!(
                    "level parameters must be positive: {l:?}"
                )));
            }
        }
        for w in self.levels.windows(2) {
            if w[1].grid_spacing > w[0].grid_spacing
                || w[1].search_radius > w[0].search_radius
                || w[1].quantization > w[0].quantization
            {
                return Err(AtlasError::InvalidConfig(
                    "level schedule must be coarse-to-fine (non-increasing)".into(),
                ));
            }
        }
        Ok(())
    }

    /// Upper bound on the accumulated displacement magnitude, voxels.
    pub fn magnitude_bound(&self) -> f64 {
        self.levels
            .iter()
            .map(|l| (l.search_radius * l.quantization) as f64)
            .sum::<f64>()
            * 3f64.sqrt()
    }
}

/// Regular control grid over a voxel extent: nodes at `i * spacing`, the
/// last node not past the extent, so trilinear upsampling covers everything
/// with at most clamp extrapolation at the far borders.
#[derive(Debug, Clone)]
pub struct ControlGrid {
    pub node_dims: [usize; 3],
    pub spacing: usize,
    pub vol_dims: [usize; 3],
}

impl ControlGrid {
    pub fn new(vol_dims: [usize; 3], spacing: usize) -> Result<Self> {
        if spacing == 0 {
            return Err(AtlasError::InvalidConfig("grid spacing 0".into()));
        }
        let node_dims = [
            (vol_dims[0] - 1) / spacing + 1,
            (vol_dims[1] - 1) / spacing + 1,
            (vol_dims[2] - 1) / spacing + 1,
        ];
        Ok(ControlGrid {
            node_dims,
            spacing,
            vol_dims,
        })
    }

    pub fn node_count(&self) -> usize {
        self.node_dims[0] * self.node_dims[1] * self.node_dims[2]
    }

    #[inline]
    pub fn node_coords(&self, flat: usize) -> [usize; 3] {
        let x = flat % self.node_dims[0];
        let y = (flat / self.node_dims[0]) % self.node_dims[1];
        let z = flat / (self.node_dims[0] * self.node_dims[1]);
        [x, y, z]
    }

    #[inline]
    pub fn node_position(&self, coords: [usize; 3]) -> [usize; 3] {
        [
            coords[0] * self.spacing,
            coords[1] * self.spacing,
            coords[2] * self.spacing,
        ]
    }
}

/// Displacement labels form the cube `{-radius..radius}^3` in steps; a label
/// converts to voxels by multiplying with the level quantization.
pub fn label_count(radius: usize) -> usize {
    let n = 2 * radius + 1;
    n * n * n
}

#[inline]
pub fn label_coords(index: usize, radius: usize) -> [i64; 3] {
    let n = 2 * radius + 1;
    let r = radius as i64;
    let i = (index % n) as i64 - r;
    let j = ((index / n) % n) as i64 - r;
    let k = (index / (n * n)) as i64 - r;
    [i, j, k]
}

#[inline]
pub fn label_index(coords: [i64; 3], radius: usize) -> usize {
    let n = (2 * radius + 1) as i64;
    let r = radius as i64;
    ((coords[0] + r) + n * ((coords[1] + r) + n * (coords[2] + r))) as usize
}

/// Unary cost tensor: `costs[node * L + label]` is the patch descriptor cost
/// of moving the node by that label's displacement.
pub fn node_costs(
    fixed: &DescriptorVolume,
    moving: &DescriptorVolume,
    grid: &ControlGrid,
    radius: usize,
    quant: usize,
    cost_patch_radius: usize,
) -> Vec<f64> {
    let labels = label_count(radius);
    let mut costs = vec![0.0f64; grid.node_count() * labels];
    costs
        .par_chunks_mut(labels)
        .enumerate()
        .for_each(|(node, out)| {
            let pos = grid.node_position(grid.node_coords(node));
            let center = [pos[0] as i64, pos[1] as i64, pos[2] as i64];
            for (li, slot) in out.iter_mut().enumerate() {
                let l = label_coords(li, radius);
                let disp = [
                    l[0] * quant as i64,
                    l[1] * quant as i64,
                    l[2] * quant as i64,
                ];
                *slot = patch_descriptor_cost(fixed, moving, center, disp, cost_patch_radius);
            }
        });
    costs
}

/// Tree over control nodes: parent array plus a BFS order from the root.
#[derive(Debug, Clone)]
pub struct MstTree {
    pub parent: Vec<usize>,
    pub bfs: Vec<usize>,
    pub root: usize,
}

/// Minimum spanning tree of the 6-connected control grid. Edge weight is the
/// absolute difference of mean HU over the node patches (cubic radius
/// `max(1, spacing / 2)`). Prim's algorithm from node 0; equal-weight
/// frontier candidates resolve to the lexicographically smaller node index.
pub fn build_mst(fixed: &Volume, grid: &ControlGrid) -> Result<MstTree> {
    let n = grid.node_count();
    if n < 2 {
        return Err(AtlasError::EmptyInput("control grid needs at least 2 nodes"));
    }
    let means: Vec<f64> = (0..n)
        .into_par_iter()
        .map(|i| node_patch_mean(fixed, grid, i))
        .collect();

    let neighbors = |i: usize| -> Vec<usize> {
        let c = grid.node_coords(i);
        let nd = grid.node_dims;
        let mut out = Vec::with_capacity(6);
        if c[0] > 0 {
            out.push(i - 1);
        }
        if c[0] + 1 < nd[0] {
            out.push(i + 1);
        }
        if c[1] > 0 {
            out.push(i - nd[0]);
        }
        if c[1] + 1 < nd[1] {
            out.push(i + nd[0]);
        }
        if c[2] > 0 {
            out.push(i - nd[0] * nd[1]);
        }
        if c[2] + 1 < nd[2] {
            out.push(i + nd[0] * nd[1]);
        }
        out
    };

    // Prim with a binary heap keyed by (weight bits, node). Weights are
    // non-negative so the IEEE bit pattern preserves ordering.
    let mut parent = vec![usize::MAX; n];
    let mut best = vec![f64::INFINITY; n];
    let mut visited = vec![false; n];
    let mut heap: BinaryHeap<std::cmp::Reverse<(u64, usize)>> = BinaryHeap::new();
    best[0] = 0.0;
    heap.push(std::cmp::Reverse((0, 0)));
    while let Some(std::cmp::Reverse((_, node))) = heap.pop() {
        if visited[node] {
            continue;
        }
        visited[node] = true;
        for nb in neighbors(node) {
            if visited[nb] {
                continue;
            }
            let w = (means[node] - means[nb]).abs();
            if w < best[nb] {
                best[nb] = w;
                parent[nb] = node;
                heap.push(std::cmp::Reverse((w.to_bits(), nb)));
            }
        }
    }
    // Connected grid graph: everything must be reached.
    debug_assert!(visited.iter().all(|&v| v));

    let mut children: Vec<Vec<usize>> = vec![Vec::new(); n];
    for (c, &p) in parent.iter().enumerate() {
        if p != usize::MAX {
            children[p].push(c);
        }
    }
    let mut bfs = Vec::with_capacity(n);
    let mut queue = std::collections::VecDeque::new();
    queue.push_back(0);
    while let Some(i) = queue.pop_front() {
        bfs.push(i);
        for &c in &children[i] {
            queue.push_back(c);
        }
    }
    Ok(MstTree {
        parent,
        bfs,
        root: 0,
    })
}

fn node_patch_mean(fixed: &Volume, grid: &ControlGrid, node: usize) -> f64 {
    let r = (grid.spacing / 2).max(1) as i64;
    let pos = grid.node_position(grid.node_coords(node));
    let dims = fixed.geom.dims;
    let mut sum = 0.0f64;
    let mut count = 0u32;
    for oz in -r..=r {
        for oy in -r..=r {
            for ox in -r..=r {
                let x = pos[0] as i64 + ox;
                let y = pos[1] as i64 + oy;
                let z = pos[2] as i64 + oz;
                if x < 0
                    || y < 0
                    || z < 0
                    || x >= dims[0] as i64
                    || y >= dims[1] as i64
                    || z >= dims[2] as i64
                {
                    continue;
                }
                sum += f64::from(fixed.data[x as usize + dims[0] * (y as usize + dims[1] * z as usize)]);
                count += 1;
            }
        }
    }
    sum / f64::from(count.max(1))
}

/// Exact min-sum labeling on the tree.
///
/// Minimizes `sum_n cost[n][l_n] + alpha * sum_edges ||d_i - d_j||^2` with
/// displacements in voxels (`d = label * quant`). Upward messages are
/// separable squared-distance min-convolutions; the root argmin and the
/// downward backtracking use the shared tie-break (smaller displacement
/// norm, then lexicographic label coordinates). Returns per-node label
/// coordinates in steps.
pub fn regularize_mst(
    costs: &[f64],
    radius: usize,
    quant: usize,
    tree: &MstTree,
    alpha: f64,
) -> Result<Vec<[i64; 3]>> {
    if alpha < 0.0 {
        return Err(AtlasError::InvalidConfig("alpha must be >= 0".into()));
    }
    let labels = label_count(radius);
    let n_nodes = tree.parent.len();
    if costs.len() != labels * n_nodes {
        return Err(AtlasError::InvalidData(format!(
            "cost tensor {} != {n_nodes} nodes x {labels} labels",
            costs.len()
        )));
    }
    // Pairwise weight per squared step difference.
    let w = alpha * (quant * quant) as f64;
    let n = 2 * radius + 1;

    // Subtree totals: unary cost plus messages from children.
    let mut totals: Vec<f64> = costs.to_vec();
    // Leaves-to-root message pass.
    for &node in tree.bfs.iter().rev() {
        if node == tree.root {
            continue;
        }
        let msg = min_convolution_3d(&totals[node * labels..(node + 1) * labels], n, w);
        let parent = tree.parent[node];
        let slice = &mut totals[parent * labels..(parent + 1) * labels];
        for (t, m) in slice.iter_mut().zip(&msg) {
            *t += m;
        }
    }

    // Root argmin, then greedy per-child argmin down the tree.
    let mut selected = vec![[0i64; 3]; n_nodes];
    let root_slice = &totals[tree.root * labels..(tree.root + 1) * labels];
    selected[tree.root] = argmin_label(root_slice, radius, None, w);
    for &node in &tree.bfs {
        if node == tree.root {
            continue;
        }
        let parent_label = selected[tree.parent[node]];
        let slice = &totals[node * labels..(node + 1) * labels];
        selected[node] = argmin_label(slice, radius, Some(parent_label), w);
    }
    Ok(selected)
}

/// Argmin over the label cube of `slice[l] (+ w * ||l - parent||^2)` with the
/// shared tie-break.
fn argmin_label(slice: &[f64], radius: usize, parent: Option<[i64; 3]>, w: f64) -> [i64; 3] {
    let mut best_cost = f64::INFINITY;
    let mut best = [i64::MAX; 3];
    for (li, &c) in slice.iter().enumerate() {
        let l = label_coords(li, radius);
        let cost = match parent {
            Some(p) => {
                let d2 = ((l[0] - p[0]).pow(2) + (l[1] - p[1]).pow(2) + (l[2] - p[2]).pow(2)) as f64;
                c + w * d2
            }
            None => c,
        };
        if better_label(cost, l, best_cost, best) {
            best_cost = cost;
            best = l;
        }
    }
    best
}

/// `out[l'] = min_l f[l] + w * ||l - l'||^2` over the n^3 label cube via
/// three 1-D passes.
fn min_convolution_3d(f: &[f64], n: usize, w: f64) -> Vec<f64> {
    let mut buf = f.to_vec();
    if w == 0.0 {
        // Degenerate smoothness: the message is the global min everywhere.
        let m = buf.iter().cloned().fold(f64::INFINITY, f64::min);
        return vec![m; buf.len()];
    }
    let mut tmp = vec![0.0f64; n];
    // Axis x: rows are contiguous.
    for row in buf.chunks_mut(n) {
        min_conv_1d(row, &mut tmp, w);
    }
    // Axis y: stride n within each z-plane.
    let plane = n * n;
    let mut col = vec![0.0f64; n];
    for z in 0..n {
        for x in 0..n {
            for y in 0..n {
                col[y] = buf[z * plane + y * n + x];
            }
            min_conv_1d(&mut col, &mut tmp, w);
            for y in 0..n {
                buf[z * plane + y * n + x] = col[y];
            }
        }
    }
    // Axis z: stride n^2.
    for y in 0..n {
        for x in 0..n {
            for z in 0..n {
                col[z] = buf[z * plane + y * n + x];
            }
            min_conv_1d(&mut col, &mut tmp, w);
            for z in 0..n {
                buf[z * plane + y * n + x] = col[z];
            }
        }
    }
    buf
}

/// In-place 1-D squared-distance min-convolution by direct scan. Label
/// counts are tiny (n <= 13), so O(n^2) beats envelope bookkeeping and has
/// no tie-sensitive geometry.
fn min_conv_1d(row: &mut [f64], tmp: &mut [f64], w: f64) {
    let n = row.len();
    for (ip, t) in tmp.iter_mut().enumerate().take(n) {
        let mut m = f64::INFINITY;
        for (i, &v) in row.iter().enumerate() {
            let d = i as f64 - ip as f64;
            let c = v + w * d * d;
            if c < m {
                m = c;
            }
        }
        *t = m;
    }
    row.copy_from_slice(&tmp[..n]);
}

/// Trilinear upsampling of control-node displacements to a dense field;
/// positions past the last node clamp to it.
pub fn upsample_field(
    grid: &ControlGrid,
    node_disp: &[[f32; 3]],
    target: &Geometry,
) -> Result<DenseField> {
    if node_disp.len() != grid.node_count() {
        return Err(AtlasError::InvalidData(format!(
            "{} node displacements for {} nodes",
            node_disp.len(),
            grid.node_count()
        )));
    }
    let nd = grid.node_dims;
    let s = grid.spacing as f64;
    let plane = target.dims[0] * target.dims[1];
    let mut disp = vec![[0.0f32; 3]; target.num_voxels()];
    disp.par_chunks_mut(plane).enumerate().for_each(|(z, out)| {
        let mut o = 0;
        for y in 0..target.dims[1] {
            for x in 0..target.dims[0] {
                let p = [x as f64 / s, y as f64 / s, z as f64 / s];
                let mut i0 = [0usize; 3];
                let mut frac = [0.0f64; 3];
                for c in 0..3 {
                    if nd[c] == 1 {
                        i0[c] = 0;
                        frac[c] = 0.0;
                    } else {
                        let clamped = p[c].min((nd[c] - 1) as f64);
                        let f = clamped.floor().min((nd[c] - 2) as f64);
                        i0[c] = f as usize;
                        frac[c] = clamped - f;
                    }
                }
                let step = |c: usize| if nd[c] == 1 { 0 } else { 1 };
                let idx = |a: usize, b: usize, c: usize| a + nd[0] * (b + nd[1] * c);
                let (x0, y0, z0) = (i0[0], i0[1], i0[2]);
                let (x1, y1, z1) = (x0 + step(0), y0 + step(1), z0 + step(2));
                let (fx, fy, fz) = (frac[0], frac[1], frac[2]);
                let mut val = [0.0f32; 3];
                for (c, v) in val.iter_mut().enumerate() {
                    let g = |i: usize| f64::from(node_disp[i][c]);
                    let c00 = g(idx(x0, y0, z0)) * (1.0 - fx) + g(idx(x1, y0, z0)) * fx;
                    let c10 = g(idx(x0, y1, z0)) * (1.0 - fx) + g(idx(x1, y1, z0)) * fx;
                    let c01 = g(idx(x0, y0, z1)) * (1.0 - fx) + g(idx(x1, y0, z1)) * fx;
                    let c11 = g(idx(x0, y1, z1)) * (1.0 - fx) + g(idx(x1, y1, z1)) * fx;
                    let a = c00 * (1.0 - fy) + c10 * fy;
                    let b = c01 * (1.0 - fy) + c11 * fy;
                    *v = (a * (1.0 - fz) + b * fz) as f32;
                }
                out[o] = val;
                o += 1;
            }
        }
    });
    DenseField::new(target.clone(), disp)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DeformConfig {
    pub schedule: LevelSchedule,
    /// Weight of the squared-difference smoothness term; unary costs live
    /// in 0..=12.
    pub alpha: f64,
    pub cost_patch_radius: usize,
    pub ssc_offset: usize,
    pub ssc_patch_radius: usize,
}

impl Default for DeformConfig {
    fn default() -> Self {
        DeformConfig {
            schedule: LevelSchedule::default(),
            alpha: 0.5,
            cost_patch_radius: 2,
            ssc_offset: 1,
            ssc_patch_radius: 1,
        }
    }
}

/// Multi-level deformable registration of an affine-aligned moving image
/// onto the fixed image. Returns the dense pull-back field on the fixed
/// grid: `warp_volume(moving, field)` approximates the fixed image.
pub fn register_deform(fixed: &Volume, moving: &Volume, cfg: &DeformConfig) -> Result<DenseField> {
    if !fixed.geom.approx_eq(&moving.geom, 1e-6) {
        return Err(AtlasError::GeometryMismatch {
            context: "register_deform inputs",
        });
    }
    cfg.schedule.validate()?;
    let ssc = SscParams {
        offset: cfg.ssc_offset,
        patch_radius: cfg.ssc_patch_radius,
    };
    let fixed_desc = ssc_descriptor(fixed, &ssc)?;
    let mut accum = DenseField::zero(fixed.geom.clone())?;
    for level in &cfg.schedule.levels {
        let warped = warp_volume(moving, &accum, None, Interp::Trilinear);
        let moving_desc = ssc_descriptor(&warped, &ssc)?;
        let grid = ControlGrid::new(fixed.geom.dims, level.grid_spacing)?;
        let costs = node_costs(
            &fixed_desc,
            &moving_desc,
            &grid,
            level.search_radius,
            level.quantization,
            cfg.cost_patch_radius,
        );
        let tree = build_mst(fixed, &grid)?;
        let labels = regularize_mst(&costs, level.search_radius, level.quantization, &tree, cfg.alpha)?;
        let node_disp: Vec<[f32; 3]> = labels
            .iter()
            .map(|l| {
                [
                    (l[0] * level.quantization as i64) as f32,
                    (l[1] * level.quantization as i64) as f32,
                    (l[2] * level.quantization as i64) as f32,
                ]
            })
            .collect();
        let increment = upsample_field(&grid, &node_disp, &fixed.geom)?;
        accum = compose(&accum, &increment)?;
    }
    Ok(accum)
}
