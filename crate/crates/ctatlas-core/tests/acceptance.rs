//! Acceptance suite: every release criterion, run in order, one line per
//! criterion. Run with `cargo test -p ctatlas-core --test acceptance --
//! --nocapture` to see the lines on success; on failure the captured
//! output is printed by the harness.

use std::time::Instant;

use ctatlas_core::affine::{register_affine, resample_affine, AffineConfig, AffineTransform};
use ctatlas_core::atlas::{mean_top_band, mean_where_label, AtlasBundle, PhaseTag};
use ctatlas_core::deform::{
    label_coords, label_count, label_index, register_deform, regularize_mst, DeformConfig, MstTree,
};
use ctatlas_core::field::{compose, invert_field, DenseField};
use ctatlas_core::geometry::Geometry;
use ctatlas_core::metrics::{hd, mask_dice, msd, wilcoxon_exact_p, SurfaceVertexSet};
use ctatlas_core::phantom::{
    apply_synthetic_warp, generate_phantom, synthetic_warp_field, PhantomParams, WarpParams,
    LABEL_LEFT_KIDNEY, LABEL_RIGHT_KIDNEY,
};
use ctatlas_core::pipeline::{
    build_phase_atlases, generate_phantom_cohort, AtlasTarget, CohortManifest, PhantomCohortSpec,
    PipelineConfig,
};
use ctatlas_core::ssc::{hamming_cost, patch_descriptor_cost, ssc_descriptor, SscParams, CHANNELS, PAIRS};
use ctatlas_core::volume::{Interp, Volume};

struct Outcome {
    name: &'static str,
    pass: bool,
    detail: String,
}

struct Rng(u64);
impl Rng {
    fn f64(&mut self) -> f64 {
        self.0 = self.0.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        ((self.0 >> 11) as f64) / ((1u64 << 53) as f64)
    }
    fn usize(&mut self, n: usize) -> usize {
        (self.f64() * n as f64) as usize % n
    }
}

fn body_mask(v: &Volume) -> Vec<bool> {
    v.data.iter().map(|&h| h > -500.0).collect()
}

#[test]
fn acceptance_criteria() {
    let mut outcomes: Vec<Outcome> = Vec::new();

    run_criterion_1(&mut outcomes);
    run_criterion_2(&mut outcomes);
    run_criterion_3(&mut outcomes);
    run_criterion_4(&mut outcomes);
    let cohort = run_criterion_5(&mut outcomes);
    run_criterion_6(&mut outcomes);
    run_criterion_7(&mut outcomes);
    run_criterion_8(&mut outcomes);
    run_criterion_9(&mut outcomes, cohort);
    run_criterion_10(&mut outcomes);

    let mut failed = 0;
    for o in &outcomes {
        println!(
            "criterion {:<28} {} — {}",
            o.name,
            if o.pass { "PASS" } else { "FAIL" },
            o.detail
        );
        if !o.pass {
            failed += 1;
        }
    }
    assert_eq!(failed, 0, "{failed} acceptance criteria failed");
}

// --- 1. Descriptor oracle equivalence --------------------------------------

const NEIGHBORS: [[i64; 3]; 6] = [
    [1, 0, 0],
    [-1, 0, 0],
    [0, 1, 0],
    [0, -1, 0],
    [0, 0, 1],
    [0, 0, -1],
];

fn oracle_channels(v: &Volume, r: i64, p: i64) -> Vec<f64> {
    let dims = v.geom.dims;
    let clamp = |t: i64, n: usize| t.clamp(0, n as i64 - 1) as usize;
    let read = |x: i64, y: i64, z: i64| {
        f64::from(v.data[clamp(x, dims[0]) + dims[0] * (clamp(y, dims[1]) + dims[1] * clamp(z, dims[2]))])
    };
    let n = v.geom.num_voxels();
    let mut dists = vec![0.0f64; n * CHANNELS];
    let mut vi = 0;
    for z in 0..dims[2] as i64 {
        for y in 0..dims[1] as i64 {
            for x in 0..dims[0] as i64 {
                for (c, &(a, b)) in PAIRS.iter().enumerate() {
                    let mut sum = 0.0;
                    let mut cnt = 0.0;
                    for oz in -p..=p {
                        for oy in -p..=p {
                            for ox in -p..=p {
                                let av = read(
                                    x + NEIGHBORS[a][0] * r + ox,
                                    y + NEIGHBORS[a][1] * r + oy,
                                    z + NEIGHBORS[a][2] * r + oz,
                                );
                                let bv = read(
                                    x + NEIGHBORS[b][0] * r + ox,
                                    y + NEIGHBORS[b][1] * r + oy,
                                    z + NEIGHBORS[b][2] * r + oz,
                                );
                                sum += (av - bv) * (av - bv);
                                cnt += 1.0;
                            }
                        }
                    }
                    dists[vi * CHANNELS + c] = sum / cnt;
                }
                vi += 1;
            }
        }
    }
    let global = dists.iter().sum::<f64>() / dists.len() as f64;
    let mut channels = vec![0.0f64; n * CHANNELS];
    for vi in 0..n {
        let d = &dists[vi * CHANNELS..(vi + 1) * CHANNELS];
        let local = d.iter().sum::<f64>() / CHANNELS as f64;
        let q2 = local.clamp(1e-6 * global, 1e6 * global).max(1e-300);
        for (c, &x) in d.iter().enumerate() {
            channels[vi * CHANNELS + c] = (-x / q2).exp();
        }
    }
    channels
}

fn run_criterion_1(outcomes: &mut Vec<Outcome>) {
    let t0 = Instant::now();
    let mut rng = Rng(0x0123456789ABCDEF);
    let mut max_dev = 0.0f64;
    for _ in 0..20 {
        let g = Geometry::new([7, 7, 7], [1.0; 3], [0.0; 3]);
        let data: Vec<f32> = (0..g.num_voxels())
            .map(|_| (rng.usize(2048) as f32) - 1024.0)
            .collect();
        let v = Volume::new(g, data).unwrap();
        let d = ssc_descriptor(&v, &SscParams::default()).unwrap();
        let want = oracle_channels(&v, 1, 1);
        for (&got, &w) in d.channels.iter().zip(&want) {
            max_dev = max_dev.max((f64::from(got) - w).abs());
        }
    }
    // Hamming against bit enumeration, exact.
    let mut hamming_exact = true;
    for a in (0..4096u16).step_by(5) {
        for b in (0..4096u16).step_by(11) {
            let mut n = 0;
            for bit in 0..12 {
                if (a ^ b) & (1 << bit) != 0 {
                    n += 1;
                }
            }
            hamming_exact &= hamming_cost(a, b) == n;
        }
    }
    // Patch cost against a direct recomputation, exact.
    let g = Geometry::new([5, 5, 5], [1.0; 3], [0.0; 3]);
    let mk = |seed: u64| {
        let mut r = Rng(seed);
        let data = (0..125).map(|_| (r.usize(1000) as f32) - 500.0).collect();
        ssc_descriptor(&Volume::new(g.clone(), data).unwrap(), &SscParams::default()).unwrap()
    };
    let (da, db) = (mk(1), mk(2));
    let mut patch_exact = true;
    for center in [[2i64, 2, 2], [0, 0, 0], [4, 1, 3]] {
        for disp in [[0i64, 0, 0], [1, 0, 0], [-2, 1, 0], [8, 0, 0]] {
            let got = patch_descriptor_cost(&da, &db, center, disp, 1);
            let mut sum = 0.0;
            let mut cnt = 0.0;
            for oz in -1i64..=1 {
                for oy in -1i64..=1 {
                    for ox in -1i64..=1 {
                        let f = [center[0] + ox, center[1] + oy, center[2] + oz];
                        if f.iter().any(|&c| c < 0 || c >= 5) {
                            continue;
                        }
                        cnt += 1.0;
                        let m = [f[0] + disp[0], f[1] + disp[1], f[2] + disp[2]];
                        if m.iter().any(|&c| c < 0 || c >= 5) {
                            sum += 12.0;
                        } else {
                            let fc = da.code_at(f[0] as usize, f[1] as usize, f[2] as usize);
                            let mc = db.code_at(m[0] as usize, m[1] as usize, m[2] as usize);
                            sum += f64::from((fc ^ mc).count_ones());
                        }
                    }
                }
            }
            patch_exact &= got == sum / cnt;
        }
    }
    let elapsed = t0.elapsed();
    let pass = max_dev <= 1e-6 && hamming_exact && patch_exact && elapsed.as_secs_f64() < 5.0;
    outcomes.push(Outcome {
        name: "01-descriptor-oracle",
        pass,
        detail: format!(
            "20 volumes, channel dev {max_dev:.2e} (<=1e-6), hamming exact {hamming_exact}, patch exact {patch_exact}, {:.2}s (<5s)",
            elapsed.as_secs_f64()
        ),
    });
}

// --- 2. MRF oracle equivalence ----------------------------------------------

fn run_criterion_2(outcomes: &mut Vec<Outcome>) {
    let t0 = Instant::now();
    let mut rng = Rng(0xFEDCBA9876543210);
    let mut all_match = true;
    let mut detail_fail = String::new();
    for case in 0..60 {
        let n_nodes = 2 + rng.usize(2);
        let star = n_nodes == 3 && rng.f64() < 0.5;
        let parent: Vec<usize> = (0..n_nodes)
            .map(|i| {
                if i == 0 {
                    usize::MAX
                } else if star {
                    0
                } else {
                    i - 1
                }
            })
            .collect();
        let tree = MstTree {
            parent: parent.clone(),
            bfs: (0..n_nodes).collect(),
            root: 0,
        };
        let radius = 1;
        let labels = label_count(radius);
        let quant = 1 + rng.usize(3);
        let alpha = rng.f64() * 1.5;
        // Mix continuous and integer-valued instances; integer ones exercise
        // exact ties under the documented tie-break.
        let integral = case % 4 == 3;
        let costs: Vec<f64> = (0..n_nodes * labels)
            .map(|_| {
                if integral {
                    rng.usize(4) as f64
                } else {
                    rng.f64() * 12.0
                }
            })
            .collect();
        let (quant, alpha) = if integral { (1, 1.0) } else { (quant, alpha) };
        let got = regularize_mst(&costs, radius, quant, &tree, alpha).unwrap();

        // Exhaustive enumeration with the same tie-break hierarchy.
        let w = alpha * (quant * quant) as f64;
        let objective = |sel: &[[i64; 3]]| -> f64 {
            let mut o = 0.0;
            for (node, l) in sel.iter().enumerate() {
                o += costs[node * labels + label_index(*l, radius)];
            }
            for (c, &p) in parent.iter().enumerate() {
                if p != usize::MAX {
                    let d = [sel[c][0] - sel[p][0], sel[c][1] - sel[p][1], sel[c][2] - sel[p][2]];
                    o += w * ((d[0] * d[0] + d[1] * d[1] + d[2] * d[2]) as f64);
                }
            }
            o
        };
        let mut best = f64::INFINITY;
        let mut pool: Vec<Vec<[i64; 3]>> = Vec::new();
        let mut tuple = vec![0usize; n_nodes];
        'outer: loop {
            let sel: Vec<[i64; 3]> = tuple.iter().map(|&i| label_coords(i, radius)).collect();
            let cost = objective(&sel);
            if cost < best {
                best = cost;
                pool.clear();
                pool.push(sel);
            } else if cost == best {
                pool.push(sel);
            }
            let mut k = 0;
            loop {
                if k == n_nodes {
                    break 'outer;
                }
                tuple[k] += 1;
                if tuple[k] < labels {
                    break;
                }
                tuple[k] = 0;
                k += 1;
            }
        }
        let key = |l: [i64; 3]| (l[0] * l[0] + l[1] * l[1] + l[2] * l[2], l);
        for node in 0..n_nodes {
            let pick = pool.iter().map(|t| key(t[node])).min().unwrap();
            pool.retain(|t| key(t[node]) == pick);
        }
        let want = pool.into_iter().next().unwrap();
        if got != want || objective(&got) != best {
            all_match = false;
            detail_fail = format!("case {case}: {got:?} vs {want:?}");
            break;
        }
    }
    let elapsed = t0.elapsed();
    let pass = all_match && elapsed.as_secs_f64() < 10.0;
    outcomes.push(Outcome {
        name: "02-mrf-oracle",
        pass,
        detail: format!(
            "60 instances exact {all_match}{}, {:.2}s (<10s)",
            if detail_fail.is_empty() { String::new() } else { format!(" [{detail_fail}]") },
            elapsed.as_secs_f64()
        ),
    });
}

// --- 3. Identity registration ------------------------------------------------

fn run_criterion_3(outcomes: &mut Vec<Outcome>) {
    let t0 = Instant::now();
    let (fixed, _, _) = generate_phantom(&PhantomParams {
        seed: 21,
        ..Default::default()
    })
    .unwrap();
    let affine = register_affine(&fixed, &fixed, &AffineConfig::default()).unwrap();
    let mut corner_vox = 0.0f64;
    for corner in fixed.geom.corner_world_points() {
        let p = affine.apply(corner);
        let d = (0..3)
            .map(|c| ((p[c] - corner[c]) / fixed.geom.spacing[c]).powi(2))
            .sum::<f64>()
            .sqrt();
        corner_vox = corner_vox.max(d);
    }
    let field = register_deform(&fixed, &fixed, &DeformConfig::default()).unwrap();
    let mean_mag = field.mean_magnitude();
    let warped = ctatlas_core::field::warp_volume(&fixed, &field, Some(&affine), Interp::Trilinear);
    let dice = mask_dice(&body_mask(&warped), &body_mask(&fixed));
    let elapsed = t0.elapsed();
    let pass = corner_vox < 0.5 && mean_mag < 0.5 && dice >= 0.99 && elapsed.as_secs_f64() < 60.0;
    outcomes.push(Outcome {
        name: "03-identity-registration",
        pass,
        detail: format!(
            "affine corner {corner_vox:.4} vox (<0.5), field mean {mean_mag:.4} vox (<0.5), body dice {dice:.4} (>=0.99), {:.1}s (<60s)",
            elapsed.as_secs_f64()
        ),
    });
}

// --- 4. Known-transform recovery ----------------------------------------------

fn rotation_translation(angle: f64, center: [f64; 3], shift_mm: [f64; 3]) -> AffineTransform {
    let (s, c) = angle.sin_cos();
    let r = [[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]];
    let mut values = [0.0f64; 16];
    for i in 0..3 {
        for j in 0..3 {
            values[i * 4 + j] = r[i][j];
        }
        values[i * 4 + 3] = center[i] + shift_mm[i]
            - (r[i][0] * center[0] + r[i][1] * center[1] + r[i][2] * center[2]);
    }
    values[15] = 1.0;
    AffineTransform::from_row_major(&values).unwrap()
}

fn run_criterion_4(outcomes: &mut Vec<Outcome>) {
    let t0 = Instant::now();
    let mut worst_affine = 0.0f64;
    let mut worst_epe = 0.0f64;
    for seed in 0..10u64 {
        let (fixed, labels, _) = generate_phantom(&PhantomParams {
            seed,
            ..Default::default()
        })
        .unwrap();
        // 5 degree rotation + 10 voxel translation.
        let center = fixed.geom.voxel_to_world([47.5, 47.5, 47.5]);
        let gt = rotation_translation(
            5.0f64.to_radians(),
            center,
            [10.0 * fixed.geom.spacing[0], 0.0, 0.0],
        );
        let moving = resample_affine(&fixed, &gt, &fixed.geom, Interp::Trilinear);
        let recovered = register_affine(&fixed, &moving, &AffineConfig::default()).unwrap();
        let gt_inv = gt.inverse().unwrap();
        for corner in fixed.geom.corner_world_points() {
            let a = recovered.apply(corner);
            let b = gt_inv.apply(corner);
            let d = (0..3)
                .map(|k| ((a[k] - b[k]) / fixed.geom.spacing[k]).powi(2))
                .sum::<f64>()
                .sqrt();
            worst_affine = worst_affine.max(d);
        }
        // Sinusoidal warp, amplitude 4 voxels.
        let (warped, _, gt_field) = apply_synthetic_warp(
            &fixed,
            &labels,
            &WarpParams {
                amplitude_voxels: 4.0,
                wavelength_voxels: 32.0,
            },
        )
        .unwrap();
        let rec = register_deform(&warped, &fixed, &DeformConfig::default()).unwrap();
        let mut sum = 0.0f64;
        for (a, b) in rec.disp.iter().zip(&gt_field.disp) {
            sum += (0..3).map(|c| f64::from(a[c] - b[c]).powi(2)).sum::<f64>().sqrt();
        }
        worst_epe = worst_epe.max(sum / rec.disp.len() as f64);
    }
    let elapsed = t0.elapsed();
    let pass = worst_affine < 2.0 && worst_epe < 1.5;
    outcomes.push(Outcome {
        name: "04-known-transform",
        pass,
        detail: format!(
            "10 seeds: worst affine corner {worst_affine:.3} vox (<2), worst deform EPE {worst_epe:.3} vox (<1.5), {:.0}s",
            elapsed.as_secs_f64()
        ),
    });
}

// --- 5. Label-transfer cohort analogue ----------------------------------------

struct CohortState {
    variance: Volume,
    atlas: AtlasTarget,
}

fn run_criterion_5(outcomes: &mut Vec<Outcome>) -> Option<CohortState> {
    let t0 = Instant::now();
    let dir = tempfile::tempdir().expect("tempdir");
    let spec = PhantomCohortSpec {
        count: 20,
        seed: 7,
        kidney_cc_range: (100.0, 308.0),
        ..Default::default()
    };
    let manifest_path = generate_phantom_cohort(&spec, dir.path()).expect("cohort generation");
    let manifest = CohortManifest::read_json(&manifest_path).expect("manifest");
    let config = PipelineConfig::default();
    let out = dir.path().join("out");
    let outcome = match build_phase_atlases(&manifest, &config, &out) {
        Ok(o) => o,
        Err(e) => {
            outcomes.push(Outcome {
                name: "05-cohort-median-dice",
                pass: false,
                detail: format!("pipeline failed: {e}"),
            });
            return None;
        }
    };
    let mut kidney_dice: Vec<f64> = Vec::new();
    for rec in &outcome.report.subjects {
        for row in &rec.metrics {
            if row.organ_id == LABEL_RIGHT_KIDNEY || row.organ_id == LABEL_LEFT_KIDNEY {
                kidney_dice.push(row.dice);
            }
        }
    }
    kidney_dice.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let median = if kidney_dice.is_empty() {
        0.0
    } else {
        let n = kidney_dice.len();
        if n % 2 == 1 {
            kidney_dice[n / 2]
        } else {
            0.5 * (kidney_dice[n / 2 - 1] + kidney_dice[n / 2])
        }
    };
    let elapsed = t0.elapsed();
    let errors = outcome.report.subjects.iter().filter(|s| s.error.is_some()).count();
    let pass = median >= 0.8
        && kidney_dice.len() == 40
        && errors == 0
        && elapsed.as_secs_f64() < 1800.0;
    outcomes.push(Outcome {
        name: "05-cohort-median-dice",
        pass,
        detail: format!(
            "20 subjects, {} kidney rows, median dice {median:.4} (>=0.8), min {:.4}, {} errors, {:.0}s (<1800s)",
            kidney_dice.len(),
            kidney_dice.first().copied().unwrap_or(0.0),
            errors,
            elapsed.as_secs_f64()
        ),
    });
    let bundle: &AtlasBundle = outcome.bundles.iter().find(|b| b.phase == PhaseTag::PortalVenous)?;
    let variance = bundle.variance_volume().ok()?;
    let atlas = AtlasTarget::prepare(&manifest, &config).ok()?;
    Some(CohortState { variance, atlas })
}

// --- 6. Field inversion --------------------------------------------------------

fn run_criterion_6(outcomes: &mut Vec<Outcome>) {
    let t0 = Instant::now();
    let geom = Geometry::new([64, 64, 64], [1.0; 3], [0.0; 3]);
    let mut worst_mean = 0.0f64;
    let mut worst_max = 0.0f64;
    for (amp, wavelength) in [
        (1.0, 32.0),
        (2.0, 32.0),
        (4.0, 32.0),
        (4.0, 48.0),
        (3.0, 24.0),
        (6.0, 48.0),
    ] {
        let u = synthetic_warp_field(
            &geom,
            &WarpParams {
                amplitude_voxels: amp,
                wavelength_voxels: wavelength,
            },
        )
        .unwrap();
        let (inv, report) = invert_field(&u, 30, 0.01);
        assert!(report.converged, "inversion must converge for compliant warps");
        let residual = compose(&u, &inv).unwrap();
        worst_mean = worst_mean.max(residual.mean_magnitude());
        worst_max = worst_max.max(residual.max_magnitude());
    }
    let pass = worst_mean < 0.1 && worst_max < 0.5;
    outcomes.push(Outcome {
        name: "06-field-inversion",
        pass,
        detail: format!(
            "6 compliant warps: worst residual mean {worst_mean:.4} (<0.1), max {worst_max:.4} (<0.5), {:.1}s",
            t0.elapsed().as_secs_f64()
        ),
    });
}

// --- 7. Metrics oracles ---------------------------------------------------------

fn run_criterion_7(outcomes: &mut Vec<Outcome>) {
    let t0 = Instant::now();
    let mut rng = Rng(0x1BADB002DEADBEEF);
    let mut surface_exact = true;
    for _ in 0..100 {
        let mk = |rng: &mut Rng| SurfaceVertexSet {
            points: (0..1 + rng.usize(30))
                .map(|_| [rng.f64() * 50.0, rng.f64() * 50.0, rng.f64() * 50.0])
                .collect(),
        };
        let a = mk(&mut rng);
        let b = mk(&mut rng);
        let minima: Vec<f64> = a
            .points
            .iter()
            .map(|p| {
                b.points
                    .iter()
                    .map(|q| {
                        ((p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2) + (p[2] - q[2]).powi(2))
                            .sqrt()
                    })
                    .fold(f64::INFINITY, f64::min)
            })
            .collect();
        let want_msd = minima.iter().sum::<f64>() / minima.len() as f64;
        let want_hd = minima.iter().cloned().fold(0.0, f64::max);
        surface_exact &= msd(&a, &b).unwrap() == want_msd && hd(&a, &b).unwrap() == want_hd;
    }
    // Wilcoxon: exact enumeration vs an independent subset scan.
    let mut wilcoxon_ok = true;
    let mut worst_p_dev = 0.0f64;
    for n in 6..=12usize {
        for _ in 0..6 {
            let diffs: Vec<f64> = (0..n)
                .map(|_| {
                    let mag = (1 + rng.usize(5)) as f64;
                    if rng.f64() < 0.5 {
                        mag
                    } else {
                        -mag
                    }
                })
                .collect();
            let got = match wilcoxon_exact_p(&diffs) {
                Ok(p) => p,
                Err(_) => continue, // all-zero draw cannot happen with mag >= 1
            };
            // Independent enumeration with freshly computed average ranks.
            let mut idx: Vec<usize> = (0..n).collect();
            idx.sort_by(|&a, &b| diffs[a].abs().partial_cmp(&diffs[b].abs()).unwrap());
            let mut ranks = vec![0.0f64; n];
            let mut i = 0;
            while i < n {
                let mut j = i;
                while j + 1 < n && diffs[idx[j + 1]].abs() == diffs[idx[i]].abs() {
                    j += 1;
                }
                for &k in &idx[i..=j] {
                    ranks[k] = (i + j) as f64 / 2.0 + 1.0;
                }
                i = j + 1;
            }
            let mean: f64 = ranks.iter().sum::<f64>() / 2.0;
            let w_plus: f64 = diffs
                .iter()
                .zip(&ranks)
                .filter(|(d, _)| **d > 0.0)
                .map(|(_, r)| r)
                .sum();
            let observed = (w_plus - mean).abs();
            let mut hits = 0usize;
            for mask in 0..(1usize << n) {
                let s: f64 = ranks
                    .iter()
                    .enumerate()
                    .filter(|(k, _)| mask & (1 << k) != 0)
                    .map(|(_, r)| r)
                    .sum();
                if (s - mean).abs() >= observed - 1e-12 {
                    hits += 1;
                }
            }
            let want = hits as f64 / (1usize << n) as f64;
            worst_p_dev = worst_p_dev.max((got - want).abs());
            wilcoxon_ok &= (got - want).abs() < 1e-3;
        }
    }
    let pass = surface_exact && wilcoxon_ok;
    outcomes.push(Outcome {
        name: "07-metrics-oracles",
        pass,
        detail: format!(
            "100 surface cases exact {surface_exact}, wilcoxon p dev {worst_p_dev:.2e} (<1e-3), {:.1}s",
            t0.elapsed().as_secs_f64()
        ),
    });
}

// --- 8. Atlas statistics ---------------------------------------------------------

fn run_criterion_8(outcomes: &mut Vec<Outcome>) {
    let t0 = Instant::now();
    let geom = Geometry::new([8, 8, 8], [1.0; 3], [0.0; 3]);
    let mut rng = Rng(0xCAFEF00DD15EA5E5);

    // N identical volumes: zero variance.
    let v = Volume::new(
        geom.clone(),
        (0..512).map(|_| rng.f64() as f32 * 100.0).collect(),
    )
    .unwrap();
    let mut b = AtlasBundle::new(PhaseTag::Delayed, geom.clone()).unwrap();
    for _ in 0..9 {
        b.accumulate(&v).unwrap();
    }
    let ident_ok = b
        .variance_volume()
        .unwrap()
        .data
        .iter()
        .all(|&x| x.abs() <= 1e-6);

    // Two-volume closed form.
    let a = Volume::filled(geom.clone(), 10.0).unwrap();
    let c = Volume::filled(geom.clone(), 20.0).unwrap();
    let mut b2 = AtlasBundle::new(PhaseTag::Delayed, geom.clone()).unwrap();
    b2.accumulate(&a).unwrap();
    b2.accumulate(&c).unwrap();
    let mean_ok = b2.mean_volume().unwrap().data.iter().all(|&m| (m - 15.0).abs() < 1e-6);
    let var_ok = b2
        .variance_volume()
        .unwrap()
        .data
        .iter()
        .all(|&x| (x - 25.0).abs() < 1e-6);

    // Order permutation within 1e-6.
    let vols: Vec<Volume> = (0..8)
        .map(|_| {
            Volume::new(
                geom.clone(),
                (0..512).map(|_| (rng.f64() * 400.0 - 200.0) as f32).collect(),
            )
            .unwrap()
        })
        .collect();
    let mut fwd = AtlasBundle::new(PhaseTag::Delayed, geom.clone()).unwrap();
    let mut rev = AtlasBundle::new(PhaseTag::Delayed, geom).unwrap();
    for v in &vols {
        fwd.accumulate(v).unwrap();
    }
    for v in vols.iter().rev() {
        rev.accumulate(v).unwrap();
    }
    let mut order_dev = 0.0f64;
    let (vf, vr) = (fwd.variance_volume().unwrap(), rev.variance_volume().unwrap());
    let (mf, mr) = (fwd.mean_volume().unwrap(), rev.mean_volume().unwrap());
    for i in 0..vf.data.len() {
        order_dev = order_dev.max(f64::from((vf.data[i] - vr.data[i]).abs()));
        order_dev = order_dev.max(f64::from((mf.data[i] - mr.data[i]).abs()));
    }
    let pass = ident_ok && mean_ok && var_ok && order_dev < 1e-6;
    outcomes.push(Outcome {
        name: "08-atlas-statistics",
        pass,
        detail: format!(
            "identical-input variance zero {ident_ok}, closed form mean/var {mean_ok}/{var_ok}, order dev {order_dev:.2e} (<1e-6), {:.2}s",
            t0.elapsed().as_secs_f64()
        ),
    });
}

// --- 9. Variance-map structure -----------------------------------------------------

fn run_criterion_9(outcomes: &mut Vec<Outcome>, state: Option<CohortState>) {
    let Some(state) = state else {
        outcomes.push(Outcome {
            name: "09-variance-structure",
            pass: false,
            detail: "cohort state unavailable (criterion 5 failed)".into(),
        });
        return;
    };
    let kidney = mean_where_label(
        &state.variance,
        &state.atlas.labels,
        &[LABEL_RIGHT_KIDNEY, LABEL_LEFT_KIDNEY],
    );
    let band = mean_top_band(&state.variance, &state.atlas.volume, 2);
    match (kidney, band) {
        (Ok(k), Ok(b)) => {
            outcomes.push(Outcome {
                name: "09-variance-structure",
                pass: k < b,
                detail: format!("kidney variance {k:.1} HU^2 < top-band variance {b:.1} HU^2: {}", k < b),
            });
        }
        (k, b) => {
            outcomes.push(Outcome {
                name: "09-variance-structure",
                pass: false,
                detail: format!("region means unavailable: {k:?} {b:?}"),
            });
        }
    }
}

// --- 10. Determinism -----------------------------------------------------------------

fn run_criterion_10(outcomes: &mut Vec<Outcome>) {
    let t0 = Instant::now();
    let dir = tempfile::tempdir().expect("tempdir");
    let spec = PhantomCohortSpec {
        count: 3,
        seed: 13,
        dims: [64, 64, 64],
        spacing: [3.4, 3.4, 3.4],
        ..Default::default()
    };
    let manifest_path = generate_phantom_cohort(&spec, dir.path()).expect("cohort");
    let manifest = CohortManifest::read_json(&manifest_path).expect("manifest");
    let config = PipelineConfig::default();

    let run_in_pool = |threads: usize, out: &std::path::Path| {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .expect("pool");
        pool.install(|| build_phase_atlases(&manifest, &config, out).expect("pipeline"));
    };
    let out1 = dir.path().join("t1");
    let out_n = dir.path().join("tn");
    let out1b = dir.path().join("t1b");
    run_in_pool(1, &out1);
    run_in_pool(0, &out_n); // 0 -> rayon default (all cores)
    run_in_pool(1, &out1b);

    // Byte-compare every produced file.
    fn collect(dir: &std::path::Path, base: &std::path::Path, out: &mut Vec<std::path::PathBuf>) {
        for entry in std::fs::read_dir(dir).expect("read_dir") {
            let p = entry.expect("entry").path();
            if p.is_dir() {
                collect(&p, base, out);
            } else {
                out.push(p.strip_prefix(base).expect("prefix").to_path_buf());
            }
        }
    }
    let mut names = Vec::new();
    collect(&out1, &out1, &mut names);
    names.sort();
    let mut identical_threads = !names.is_empty();
    let mut identical_rerun = true;
    let mut first_diff = String::new();
    for name in &names {
        let a = std::fs::read(out1.join(name)).expect("read a");
        match std::fs::read(out_n.join(name)) {
            Ok(b) if a == b => {}
            _ => {
                identical_threads = false;
                if first_diff.is_empty() {
                    first_diff = format!("threads differ on {}", name.display());
                }
            }
        }
        match std::fs::read(out1b.join(name)) {
            Ok(b) if a == b => {}
            _ => {
                identical_rerun = false;
                if first_diff.is_empty() {
                    first_diff = format!("rerun differs on {}", name.display());
                }
            }
        }
    }
    let pass = identical_threads && identical_rerun;
    outcomes.push(Outcome {
        name: "10-determinism",
        pass,
        detail: format!(
            "{} files: threads-1 vs threads-N identical {identical_threads}, rerun identical {identical_rerun}{}, {:.0}s",
            names.len(),
            if first_diff.is_empty() { String::new() } else { format!(" [{first_diff}]") },
            t0.elapsed().as_secs_f64()
        ),
    });
}
