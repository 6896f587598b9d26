//! Brute-force oracles for the self-similarity descriptor pipeline. The
//! oracle reimplements the contract with plain nested loops in f64 and no
//! shared code with the descriptor kernels.

use ctatlas_core::geometry::Geometry;
use ctatlas_core::ssc::{
    hamming_cost, patch_descriptor_cost, ssc_descriptor, DescriptorVolume, SscParams, CHANNELS,
    PAIRS,
};
use ctatlas_core::volume::Volume;

const NEIGHBORS: [[i64; 3]; 6] = [
    [1, 0, 0],
    [-1, 0, 0],
    [0, 1, 0],
    [0, -1, 0],
    [0, 0, 1],
    [0, 0, -1],
];

fn clamp(v: i64, n: usize) -> usize {
    v.clamp(0, n as i64 - 1) as usize
}

fn read(data: &[f32], dims: &[usize; 3], x: i64, y: i64, z: i64) -> f64 {
    f64::from(data[clamp(x, dims[0]) + dims[0] * (clamp(y, dims[1]) + dims[1] * clamp(z, dims[2]))])
}

/// Independent recomputation of all channels and codes.
fn oracle_descriptor(v: &Volume, r: i64, p: i64) -> (Vec<f64>, Vec<u16>) {
    let dims = v.geom.dims;
    let n = v.geom.num_voxels();
    let mut dists = vec![0.0f64; n * CHANNELS];
    let mut vi = 0;
    for z in 0..dims[2] as i64 {
        for y in 0..dims[1] as i64 {
            for x in 0..dims[0] as i64 {
                for (c, &(a, b)) in PAIRS.iter().enumerate() {
                    let mut sum = 0.0;
                    let mut count = 0.0;
                    for oz in -p..=p {
                        for oy in -p..=p {
                            for ox in -p..=p {
                                let av = read(
                                    &v.data,
                                    &dims,
                                    x + NEIGHBORS[a][0] * r + ox,
                                    y + NEIGHBORS[a][1] * r + oy,
                                    z + NEIGHBORS[a][2] * r + oz,
                                );
                                let bv = read(
                                    &v.data,
                                    &dims,
                                    x + NEIGHBORS[b][0] * r + ox,
                                    y + NEIGHBORS[b][1] * r + oy,
                                    z + NEIGHBORS[b][2] * r + oz,
                                );
                                sum += (av - bv) * (av - bv);
                                count += 1.0;
                            }
                        }
                    }
                    dists[vi * CHANNELS + c] = sum / count;
                }
                vi += 1;
            }
        }
    }
    let global: f64 = dists.iter().sum::<f64>() / dists.len() as f64;
    let mut channels = vec![0.0f64; n * CHANNELS];
    let mut codes = vec![0u16; n];
    for vi in 0..n {
        let d = &dists[vi * CHANNELS..(vi + 1) * CHANNELS];
        let local = d.iter().sum::<f64>() / CHANNELS as f64;
        let q2 = local.clamp(1e-6 * global, 1e6 * global).max(1e-300);
        let vals: Vec<f64> = d.iter().map(|&x| (-x / q2).exp()).collect();
        let mean = vals.iter().sum::<f64>() / CHANNELS as f64;
        let mut bits = 0u16;
        for (c, &val) in vals.iter().enumerate() {
            channels[vi * CHANNELS + c] = val;
            if val > mean {
                bits |= 1 << c;
            }
        }
        codes[vi] = bits;
    }
    (channels, codes)
}

fn random_volume(dims: [usize; 3], seed: u64) -> Volume {
    // Small xorshift over integer HU values; integer data keeps patch sums
    // exact in any summation order.
    let g = Geometry::new(dims, [1.0; 3], [0.0; 3]);
    let mut state = seed.wrapping_mul(0x9E3779B97F4A7C15).wrapping_add(1);
    let mut next = || {
        state ^= state << 13;
        state ^= state >> 7;
        state ^= state << 17;
        ((state >> 16) % 2048) as f32 - 1024.0
    };
    let data = (0..g.num_voxels()).map(|_| next()).collect();
    Volume::new(g, data).unwrap()
}

fn check_against_oracle(v: &Volume, params: &SscParams) {
    let d = ssc_descriptor(v, params).unwrap();
    let (oracle_channels, oracle_codes) =
        oracle_descriptor(v, params.offset as i64, params.patch_radius as i64);
    for (i, (&got, &want)) in d.channels.iter().zip(&oracle_channels).enumerate() {
        assert!(
            (f64::from(got) - want).abs() <= 1e-6,
            "channel {i}: {got} vs oracle {want}"
        );
    }
    // Codes agree except where a channel sits within float noise of the
    // voxel's channel mean; allow those near-ties explicitly.
    for (vi, (&got, &want)) in d.codes.iter().zip(&oracle_codes).enumerate() {
        if got == want {
            continue;
        }
        let vals = &oracle_channels[vi * CHANNELS..(vi + 1) * CHANNELS];
        let mean = vals.iter().sum::<f64>() / CHANNELS as f64;
        let differing = got ^ want;
        for c in 0..CHANNELS {
            if differing & (1 << c) != 0 {
                assert!(
                    (vals[c] - mean).abs() < 1e-5,
                    "voxel {vi} bit {c} differs away from a tie: {} vs mean {mean}",
                    vals[c]
                );
            }
        }
    }
}

#[test]
fn descriptor_matches_brute_force_on_random_volumes() {
    for seed in 0..24u64 {
        let v = random_volume([7, 7, 7], seed);
        check_against_oracle(&v, &SscParams::default());
    }
}

#[test]
fn descriptor_matches_brute_force_on_anisotropic_dims() {
    for seed in 0..4u64 {
        let v = random_volume([9, 7, 8], seed + 100);
        check_against_oracle(&v, &SscParams::default());
    }
}

#[test]
fn descriptor_matches_brute_force_with_larger_offsets() {
    let v = random_volume([11, 11, 11], 42);
    check_against_oracle(
        &v,
        &SscParams {
            offset: 2,
            patch_radius: 1,
        },
    );
    check_against_oracle(
        &v,
        &SscParams {
            offset: 1,
            patch_radius: 2,
        },
    );
}

#[test]
fn single_bright_voxel_case() {
    let g = Geometry::new([7, 7, 7], [1.0; 3], [0.0; 3]);
    let mut data = vec![-200.0f32; g.num_voxels()];
    data[g.index(3, 3, 3)] = 1000.0;
    let v = Volume::new(g, data).unwrap();
    check_against_oracle(&v, &SscParams::default());
}

#[test]
fn hamming_matches_bit_enumeration() {
    let popcount = |mut x: u16| {
        let mut n = 0;
        while x != 0 {
            n += (x & 1) as u32;
            x >>= 1;
        }
        n
    };
    for a in (0..4096u16).step_by(7) {
        for b in (0..4096u16).step_by(13) {
            assert_eq!(hamming_cost(a, b), popcount(a ^ b));
        }
    }
}

/// Independent mean-Hamming patch cost.
fn oracle_patch_cost(
    fixed: &DescriptorVolume,
    moving: &DescriptorVolume,
    center: [i64; 3],
    disp: [i64; 3],
    radius: i64,
) -> f64 {
    let mut sum = 0.0;
    let mut count = 0.0;
    for oz in -radius..=radius {
        for oy in -radius..=radius {
            for ox in -radius..=radius {
                let f = [center[0] + ox, center[1] + oy, center[2] + oz];
                if f.iter()
                    .zip(&fixed.dims)
                    .any(|(&c, &n)| c < 0 || c >= n as i64)
                {
                    continue;
                }
                count += 1.0;
                let m = [f[0] + disp[0], f[1] + disp[1], f[2] + disp[2]];
                if m.iter()
                    .zip(&moving.dims)
                    .any(|(&c, &n)| c < 0 || c >= n as i64)
                {
                    sum += 12.0;
                } else {
                    let fc = fixed.code_at(f[0] as usize, f[1] as usize, f[2] as usize);
                    let mc = moving.code_at(m[0] as usize, m[1] as usize, m[2] as usize);
                    sum += f64::from((fc ^ mc).count_ones());
                }
            }
        }
    }
    if count == 0.0 {
        12.0
    } else {
        sum / count
    }
}

#[test]
fn patch_cost_matches_brute_force() {
    let a = random_volume([5, 5, 5], 3);
    let b = random_volume([5, 5, 5], 4);
    let da = ssc_descriptor(&a, &SscParams::default()).unwrap();
    let db = ssc_descriptor(&b, &SscParams::default()).unwrap();
    for center in [[2i64, 2, 2], [0, 0, 0], [4, 4, 4], [1, 3, 2]] {
        for disp in [[0i64, 0, 0], [1, 0, 0], [-1, 2, 0], [3, 3, 3], [9, 0, 0]] {
            for radius in [1i64, 2] {
                let got = patch_descriptor_cost(&da, &db, center, disp, radius as usize);
                let want = oracle_patch_cost(&da, &db, center, disp, radius);
                assert_eq!(got, want, "center {center:?} disp {disp:?} radius {radius}");
            }
        }
    }
}

/// Flipping the volume along an axis permutes the neighbour pairs; the
/// descriptor of the flipped volume, read at flipped positions, must be the
/// channel permutation of the original. Integer data keeps the arithmetic
/// exact under the reordered summation.
#[test]
fn axis_flip_permutes_channels() {
    // Pair permutations per flipped axis (indices into PAIRS).
    let perm_x = [4usize, 5, 6, 7, 0, 1, 2, 3, 8, 9, 10, 11];
    let perm_y = [1usize, 0, 2, 3, 5, 4, 6, 7, 10, 11, 8, 9];
    let perm_z = [0usize, 1, 3, 2, 4, 5, 7, 6, 9, 8, 11, 10];
    for (axis, perm) in [(0usize, perm_x), (1, perm_y), (2, perm_z)] {
        for seed in 0..5u64 {
            let v = random_volume([5, 5, 5], seed * 31 + axis as u64);
            let dims = v.geom.dims;
            let mut flipped_data = v.data.clone();
            for z in 0..dims[2] {
                for y in 0..dims[1] {
                    for x in 0..dims[0] {
                        let mut src = [x, y, z];
                        src[axis] = dims[axis] - 1 - src[axis];
                        flipped_data[x + dims[0] * (y + dims[1] * z)] =
                            v.data[src[0] + dims[0] * (src[1] + dims[1] * src[2])];
                    }
                }
            }
            let flipped = Volume::new(v.geom.clone(), flipped_data).unwrap();
            let d = ssc_descriptor(&v, &SscParams::default()).unwrap();
            let df = ssc_descriptor(&flipped, &SscParams::default()).unwrap();
            for z in 0..dims[2] {
                for y in 0..dims[1] {
                    for x in 0..dims[0] {
                        let mut fp = [x, y, z];
                        fp[axis] = dims[axis] - 1 - fp[axis];
                        let orig = d.code_at(x, y, z);
                        let flip_code = df.code_at(fp[0], fp[1], fp[2]);
                        let mut expected = 0u16;
                        for (c, &pc) in perm.iter().enumerate() {
                            if orig & (1 << c) != 0 {
                                expected |= 1 << pc;
                            }
                        }
                        assert_eq!(
                            flip_code, expected,
                            "axis {axis} voxel ({x},{y},{z})"
                        );
                    }
                }
            }
        }
    }
}
