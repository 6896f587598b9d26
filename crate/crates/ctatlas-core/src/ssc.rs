//! Self-similarity context descriptors.
//!
//! For every voxel, twelve patch distances are computed between the
//! edge-adjacent pairs of the six axis neighbours at offset `r`. Each
//! distance is turned into a channel `exp(-dist / q^2)` where `q^2` blends
//! the local noise level (mean of the voxel's twelve distances) with a
//! global one (clamped to a band around the image-wide mean distance).
//! Channels quantize to a 12-bit code, one bit per channel, set when the
//! channel exceeds the voxel's mean channel; codes compare by Hamming
//! distance. Because the channels depend only on intensity *differences*
//! normalized by their own scale, the codes are invariant to additive and
//! positive multiplicative intensity changes, which is what makes the
//! metric usable across contrast phases.

use rayon::prelude::*;

use crate::error::{AtlasError, Result};
use crate::volume::Volume;

/// Channel count: edge-adjacent pairs of the six axis neighbours.
pub const CHANNELS: usize = 12;
/// Maximum Hamming cost between two codes, also the out-of-bounds penalty.
pub const MAX_COST: f64 = 12.0;

/// Neighbourhood centers in fixed order: +x, -x, +y, -y, +z, -z.
const NEIGHBORS: [[i64; 3]; 6] = [
    [1, 0, 0],
    [-1, 0, 0],
    [0, 1, 0],
    [0, -1, 0],
    [0, 0, 1],
    [0, 0, -1],
];

/// The twelve edge-adjacent neighbour pairs (opposite pairs excluded),
/// ordered lexicographically by neighbour index.
pub const PAIRS: [(usize, usize); CHANNELS] = [
    (0, 2),
    (0, 3),
    (0, 4),
    (0, 5),
    (1, 2),
    (1, 3),
    (1, 4),
    (1, 5),
    (2, 4),
    (2, 5),
    (3, 4),
    (3, 5),
];

#[derive(Debug, Clone, Copy)]
pub struct SscParams {
    /// Distance from the voxel to each neighbourhood center, in voxels.
    pub offset: usize,
    /// Cubic patch radius for the patch SSD.
    pub patch_radius: usize,
}

impl Default for SscParams {
    fn default() -> Self {
        SscParams {
            offset: 1,
            patch_radius: 1,
        }
    }
}

/// Per-voxel 12-bit codes plus the continuous channels they quantize.
#[derive(Debug, Clone)]
pub struct DescriptorVolume {
    pub dims: [usize; 3],
    pub codes: Vec<u16>,
    /// 12 channels per voxel, same voxel order as `codes`.
    pub channels: Vec<f32>,
}

impl DescriptorVolume {
    #[inline]
    pub fn code_at(&self, x: usize, y: usize, z: usize) -> u16 {
        self.codes[x + self.dims[0] * (y + self.dims[1] * z)]
    }
}

#[inline]
fn clamp_idx(v: i64, n: usize) -> usize {
    v.clamp(0, n as i64 - 1) as usize
}

/// Mean squared difference between the patches centred at `x + na` and
/// `x + nb`; reads clamp to the volume boundary.
fn pair_distance(
    data: &[f32],
    dims: &[usize; 3],
    x: [i64; 3],
    na: [i64; 3],
    nb: [i64; 3],
    p: i64,
) -> f64 {
    let mut sum = 0.0f64;
    let mut count = 0u32;
    for oz in -p..=p {
        for oy in -p..=p {
            for ox in -p..=p {
                let ax = clamp_idx(x[0] + na[0] + ox, dims[0]);
                let ay = clamp_idx(x[1] + na[1] + oy, dims[1]);
                let az = clamp_idx(x[2] + na[2] + oz, dims[2]);
                let bx = clamp_idx(x[0] + nb[0] + ox, dims[0]);
                let by = clamp_idx(x[1] + nb[1] + oy, dims[1]);
                let bz = clamp_idx(x[2] + nb[2] + oz, dims[2]);
                let a = f64::from(data[ax + dims[0] * (ay + dims[1] * az)]);
                let b = f64::from(data[bx + dims[0] * (by + dims[1] * bz)]);
                let d = a - b;
                sum += d * d;
                count += 1;
            }
        }
    }
    sum / f64::from(count)
}

/// Compute the descriptor volume.
///
/// Requires `dims >= 2 * (offset + patch_radius) + 1` on every axis.
pub fn ssc_descriptor(v: &Volume, params: &SscParams) -> Result<DescriptorVolume> {
    let r = params.offset as i64;
    let p = params.patch_radius as i64;
    let need = 2 * (params.offset + params.patch_radius) + 1;
    if v.geom.dims.iter().any(|&d| d < need) {
        return Err(AtlasError::VolumeTooSmall(format!(
            "dims {:?} below the {need} needed for offset {} and patch radius {}",
            v.geom.dims, params.offset, params.patch_radius
        )));
    }
    let dims = v.geom.dims;
    let n = v.geom.num_voxels();
    let data = &v.data;

    // Pass 1: raw pair distances per voxel.
    let mut dists = vec![0.0f32; n * CHANNELS];
    let plane = dims[0] * dims[1];
    dists
        .par_chunks_mut(plane * CHANNELS)
        .enumerate()
        .for_each(|(z, out)| {
            let mut i = 0;
            for y in 0..dims[1] {
                for x in 0..dims[0] {
                    let pos = [x as i64, y as i64, z as i64];
                    for &(a, b) in PAIRS.iter() {
                        let na = [
                            NEIGHBORS[a][0] * r,
                            NEIGHBORS[a][1] * r,
                            NEIGHBORS[a][2] * r,
                        ];
                        let nb = [
                            NEIGHBORS[b][0] * r,
                            NEIGHBORS[b][1] * r,
                            NEIGHBORS[b][2] * r,
                        ];
                        out[i] = pair_distance(data, &dims, pos, na, nb, p) as f32;
                        i += 1;
                    }
                }
            }
        });

    // Image-wide mean distance; summed sequentially so the result does not
    // depend on the thread count.
    let global_mean = dists.iter().map(|&d| f64::from(d)).sum::<f64>() / (n * CHANNELS) as f64;
    let lo = 1e-6 * global_mean;
    let hi = 1e6 * global_mean;

    // Pass 2: channels and codes.
    let mut channels = vec![0.0f32; n * CHANNELS];
    let mut codes = vec![0u16; n];
    channels
        .par_chunks_mut(CHANNELS)
        .zip(codes.par_iter_mut())
        .enumerate()
        .for_each(|(vi, (ch, code))| {
            let d = &dists[vi * CHANNELS..(vi + 1) * CHANNELS];
            let local = d.iter().map(|&x| f64::from(x)).sum::<f64>() / CHANNELS as f64;
            let q2 = local.clamp(lo, hi).max(1e-300);
            let mut mean = 0.0f64;
            let mut vals = [0.0f64; CHANNELS];
            for (c, &dist) in d.iter().enumerate() {
                let val = (-f64::from(dist) / q2).exp();
                vals[c] = val;
                mean += val;
            }
            mean /= CHANNELS as f64;
            let mut bits = 0u16;
            for (c, &val) in vals.iter().enumerate() {
                ch[c] = val as f32;
                if val > mean {
                    bits |= 1 << c;
                }
            }
            *code = bits;
        });

    Ok(DescriptorVolume {
        dims,
        codes,
        channels,
    })
}

/// Hamming distance between two 12-bit codes; always in 0..=12.
#[inline]
pub fn hamming_cost(a: u16, b: u16) -> u32 {
    (a ^ b).count_ones()
}

/// Mean Hamming cost over the cubic patch around `center`, comparing the
/// fixed descriptor at each patch voxel against the moving descriptor at
/// the displaced position. Patch voxels falling outside the moving grid
/// contribute the maximum cost.
pub fn patch_descriptor_cost(
    fixed: &DescriptorVolume,
    moving: &DescriptorVolume,
    center: [i64; 3],
    disp: [i64; 3],
    cost_patch_radius: usize,
) -> f64 {
    let r = cost_patch_radius as i64;
    let fd = &fixed.dims;
    let md = &moving.dims;
    let mut sum = 0.0f64;
    let mut count = 0u32;
    for oz in -r..=r {
        for oy in -r..=r {
            for ox in -r..=r {
                let fx = center[0] + ox;
                let fy = center[1] + oy;
                let fz = center[2] + oz;
                if fx < 0
                    || fy < 0
                    || fz < 0
                    || fx >= fd[0] as i64
                    || fy >= fd[1] as i64
                    || fz >= fd[2] as i64
                {
                    continue;
                }
                count += 1;
                let mx = fx + disp[0];
                let my = fy + disp[1];
                let mz = fz + disp[2];
                if mx < 0
                    || my < 0
                    || mz < 0
                    || mx >= md[0] as i64
                    || my >= md[1] as i64
                    || mz >= md[2] as i64
                {
                    sum += MAX_COST;
                } else {
                    let fc = fixed.codes[fx as usize + fd[0] * (fy as usize + fd[1] * fz as usize)];
                    let mc =
                        moving.codes[mx as usize + md[0] * (my as usize + md[1] * mz as usize)];
                    sum += f64::from(hamming_cost(fc, mc));
                }
            }
        }
    }
    if count == 0 {
        return MAX_COST;
    }
    sum / f64::from(count)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Geometry;

    fn volume_from_fn(dims: [usize; 3], f: impl Fn(usize, usize, usize) -> f32) -> Volume {
        let g = Geometry::new(dims, [1.0, 1.0, 1.0], [0.0; 3]);
        let mut data = Vec::with_capacity(g.num_voxels());
        for z in 0..dims[2] {
            for y in 0..dims[1] {
                for x in 0..dims[0] {
                    data.push(f(x, y, z));
                }
            }
        }
        Volume::new(g, data).unwrap()
    }

    #[test]
    fn uniform_volume_all_codes_zero() {
        let v = volume_from_fn([5, 5, 5], |_, _, _| 40.0);
        let d = ssc_descriptor(&v, &SscParams::default()).unwrap();
        assert!(d.codes.iter().all(|&c| c == 0));
        // All channels equal (exp(0) = 1 under the degenerate clamp).
        assert!(d.channels.iter().all(|&c| c == 1.0));
    }

    #[test]
    fn too_small_volume_rejected() {
        let v = volume_from_fn([4, 5, 5], |_, _, _| 0.0);
        assert!(matches!(
            ssc_descriptor(&v, &SscParams::default()),
            Err(AtlasError::VolumeTooSmall(_))
        ));
    }

    #[test]
    fn additive_shift_leaves_codes_and_channels_identical() {
        // Integer-valued data keeps the shift exact in f32, so the SSD of
        // patch differences is bit-identical.
        let v = volume_from_fn([7, 7, 7], |x, y, z| ((x * 31 + y * 17 + z * 7) % 97) as f32);
        let shifted = volume_from_fn([7, 7, 7], |x, y, z| {
            ((x * 31 + y * 17 + z * 7) % 97) as f32 + 100.0
        });
        let a = ssc_descriptor(&v, &SscParams::default()).unwrap();
        let b = ssc_descriptor(&shifted, &SscParams::default()).unwrap();
        assert_eq!(a.codes, b.codes);
        assert_eq!(a.channels, b.channels);
    }

    #[test]
    fn doubling_intensity_leaves_codes_identical() {
        // Multiplication by 2 is exact in f32: distances scale by 4 and the
        // q^2 normalization cancels the factor.
        let v = volume_from_fn([7, 7, 7], |x, y, z| ((x * 13 + y * 5 + z * 29) % 83) as f32);
        let doubled = Volume::new(
            v.geom.clone(),
            v.data.iter().map(|&h| h * 2.0).collect(),
        )
        .unwrap();
        let a = ssc_descriptor(&v, &SscParams::default()).unwrap();
        let b = ssc_descriptor(&doubled, &SscParams::default()).unwrap();
        assert_eq!(a.codes, b.codes);
    }

    #[test]
    fn channels_stay_in_unit_interval() {
        let v = volume_from_fn([7, 7, 7], |x, y, z| {
            if x == 3 && y == 3 && z == 3 {
                1000.0
            } else {
                -200.0
            }
        });
        let d = ssc_descriptor(&v, &SscParams::default()).unwrap();
        assert!(d.channels.iter().all(|&c| c > 0.0 && c <= 1.0));
        assert!(d.codes.iter().all(|&c| c < 1 << CHANNELS));
    }

    #[test]
    fn hamming_basics() {
        assert_eq!(hamming_cost(0b1010_1010_1010, 0b1010_1010_1010), 0);
        assert_eq!(hamming_cost(0b1010_1010_1010, 0b0101_0101_0101), 12);
        assert_eq!(hamming_cost(0b1010_1010_1010, 0b1000_1010_1010), 1);
    }

    #[test]
    fn hamming_is_a_metric() {
        // Symmetry, identity and triangle inequality over a code sample.
        let sample: Vec<u16> = (0..64).map(|i| (i * 73 % 4096) as u16).collect();
        for &a in &sample {
            assert_eq!(hamming_cost(a, a), 0);
            for &b in &sample {
                assert_eq!(hamming_cost(a, b), hamming_cost(b, a));
                for &c in &sample {
                    assert!(hamming_cost(a, c) <= hamming_cost(a, b) + hamming_cost(b, c));
                }
            }
        }
    }

    #[test]
    fn patch_cost_zero_for_identical_descriptors() {
        let v = volume_from_fn([7, 7, 7], |x, y, z| (x + 2 * y + 3 * z) as f32);
        let d = ssc_descriptor(&v, &SscParams::default()).unwrap();
        let c = patch_descriptor_cost(&d, &d, [3, 3, 3], [0, 0, 0], 1);
        assert_eq!(c, 0.0);
    }

    #[test]
    fn patch_cost_fully_out_of_bounds_is_max() {
        let v = volume_from_fn([7, 7, 7], |x, y, z| (x * y + z) as f32);
        let d = ssc_descriptor(&v, &SscParams::default()).unwrap();
        let c = patch_descriptor_cost(&d, &d, [3, 3, 3], [100, 0, 0], 1);
        assert_eq!(c, MAX_COST);
    }

    #[test]
    fn parallel_matches_sequential() {
        let v = volume_from_fn([9, 8, 7], |x, y, z| ((x * 7 + y * 3 + z * 11) % 31) as f32);
        let par = ssc_descriptor(&v, &SscParams::default()).unwrap();
        let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
        let seq = pool.install(|| ssc_descriptor(&v, &SscParams::default()).unwrap());
        assert_eq!(par.codes, seq.codes);
        assert_eq!(par.channels, seq.channels);
    }
}
