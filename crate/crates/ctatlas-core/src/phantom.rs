//! Deterministic synthetic abdominal phantoms with ground-truth labels,
//! slice scores and optional analytic warps.
//!
//! A phantom is an elliptical body cylinder (fat band around soft tissue)
//! with a spine cylinder, liver and spleen ellipsoids, and two kidney
//! ellipsoids sized to a requested volume in cc. Organ HU offsets follow a
//! per-phase preset table; the presets are illustrative configuration
//! values that exercise contrast variation, not clinical claims. Everything
//! is reproducible from `(seed, params)`.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::atlas::PhaseTag;
use crate::error::{AtlasError, Result};
use crate::field::{warp_labels, warp_volume, DenseField};
use crate::geometry::Geometry;
use crate::volume::{Interp, LabelMap, Volume};

pub const LABEL_SPLEEN: u8 = 1;
pub const LABEL_RIGHT_KIDNEY: u8 = 2;
pub const LABEL_LEFT_KIDNEY: u8 = 3;
pub const LABEL_LIVER: u8 = 6;

/// Slice score at the inferior end of the phantom (toward the pelvis).
pub const SCORE_BOTTOM: f64 = 7.0;
/// Slice score at the superior end (past the diaphragm).
pub const SCORE_TOP: f64 = -7.0;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PhantomParams {
    pub seed: u64,
    pub dims: [usize; 3],
    pub spacing: [f64; 3],
    /// Body ellipse semi-axes in mm (x, y).
    pub body_radii_mm: [f64; 2],
    /// Target volume of each kidney in cc; must lie in [80, 400].
    pub kidney_volume_cc: f64,
    /// Uniform jitter applied to organ centers, mm.
    pub center_jitter_mm: f64,
    /// Relative jitter of organ semi-axes (volume target is preserved).
    pub shape_jitter: f64,
    /// Kidney orientation jitter around the z axis, radians.
    pub orientation_jitter_rad: f64,
    pub phase: PhaseTag,
    pub noise_sigma_hu: f64,
    /// Amplitude of the smooth in-body intensity texture, HU. Tissue is
    /// never perfectly uniform; without this the interior of large organs
    /// carries no registration signal at all.
    pub texture_amp_hu: f64,
    /// Characteristic wavelength of the texture, mm.
    pub texture_scale_mm: f64,
}

impl Default for PhantomParams {
    fn default() -> Self {
        PhantomParams {
            seed: 0,
            dims: [96, 96, 96],
            spacing: [2.5, 2.5, 2.5],
            body_radii_mm: [92.0, 68.0],
            kidney_volume_cc: 180.0,
            center_jitter_mm: 5.0,
            shape_jitter: 0.08,
            orientation_jitter_rad: 0.15,
            phase: PhaseTag::PortalVenous,
            noise_sigma_hu: 10.0,
            texture_amp_hu: 25.0,
            texture_scale_mm: 28.0,
        }
    }
}

impl PhantomParams {
    pub fn validate(&self) -> Result<()> {
        if self.dims.iter().any(|&d| d < 16) {
            return Err(AtlasError::InvalidConfig("phantom dims below 16".into()));
        }
        if self.body_radii_mm.iter().any(|&r| r <= 0.0) {
            return Err(AtlasError::InvalidConfig("non-positive body radii".into()));
        }
        if !(80.0..=400.0).contains(&self.kidney_volume_cc) {
            return Err(AtlasError::InvalidConfig(format!(
                "kidney volume {} cc outside [80, 400]",
                self.kidney_volume_cc
            )));
        }
        if self.noise_sigma_hu < 0.0 {
            return Err(AtlasError::InvalidConfig("negative noise sigma".into()));
        }
        Ok(())
    }
}

struct OrganHu {
    fat: f32,
    muscle: f32,
    bone: f32,
    liver: f32,
    spleen: f32,
    kidney: f32,
}

/// Illustrative per-phase organ intensities; kidney parenchyma brightens
/// through the arterial phases and washes out in the delayed phase.
fn phase_hu(phase: PhaseTag) -> OrganHu {
    let (liver, spleen, kidney) = match phase {
        PhaseTag::NonContrast => (55.0, 50.0, 35.0),
        PhaseTag::EarlyArterial => (70.0, 95.0, 130.0),
        PhaseTag::LateArterial => (90.0, 110.0, 165.0),
        PhaseTag::PortalVenous => (105.0, 100.0, 120.0),
        PhaseTag::Delayed => (80.0, 75.0, 85.0),
    };
    OrganHu {
        fat: -80.0,
        muscle: 40.0,
        bone: 500.0,
        liver,
        spleen,
        kidney,
    }
}

struct Ellipsoid {
    center_mm: [f64; 3],
    semi_mm: [f64; 3],
    /// Rotation around z applied to the local x/y coordinates.
    angle_z: f64,
}

impl Ellipsoid {
    fn contains(&self, p_mm: [f64; 3]) -> bool {
        let dx = p_mm[0] - self.center_mm[0];
        let dy = p_mm[1] - self.center_mm[1];
        let dz = p_mm[2] - self.center_mm[2];
        let (s, c) = self.angle_z.sin_cos();
        let rx = c * dx + s * dy;
        let ry = -s * dx + c * dy;
        (rx / self.semi_mm[0]).powi(2) + (ry / self.semi_mm[1]).powi(2)
            + (dz / self.semi_mm[2]).powi(2)
            <= 1.0
    }
}

/// Kidney semi-axes for a target volume: base aspect (0.72, 0.72, 1.55)
/// jittered per axis, then rescaled so the analytic ellipsoid volume hits
/// the target exactly.
fn kidney_semi_axes(volume_cc: f64, jitter: f64, rng: &mut ChaCha8Rng) -> [f64; 3] {
    let base = [0.72f64, 0.72, 1.55];
    let mut ratios = [0.0f64; 3];
    for (r, b) in ratios.iter_mut().zip(base) {
        *r = b * (1.0 + jitter * rng.gen_range(-1.0..1.0));
    }
    let product: f64 = ratios.iter().product();
    let target_mm3 = volume_cc * 1000.0;
    let s = (target_mm3 * 3.0 / (4.0 * std::f64::consts::PI * product)).cbrt();
    [ratios[0] * s, ratios[1] * s, ratios[2] * s]
}

/// Build one phantom. Returns the HU volume, the organ labels and the true
/// per-slice scores (an affine map of the anatomical z coordinate).
pub fn generate_phantom(params: &PhantomParams) -> Result<(Volume, LabelMap, Vec<f64>)> {
    params.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let [nx, ny, nz] = params.dims;
    let sp = params.spacing;
    let geom = Geometry::new(params.dims, sp, [0.0; 3]);
    let hu = phase_hu(params.phase);

    // Per-subject anatomy jitter, drawn in a fixed order.
    let body_rx = params.body_radii_mm[0] * (1.0 + 0.05 * rng.gen_range(-1.0..1.0));
    let body_ry = params.body_radii_mm[1] * (1.0 + 0.05 * rng.gen_range(-1.0..1.0));
    let score_slope_jit = 1.0 + 0.03 * rng.gen_range(-1.0..1.0);
    let score_off_jit = 0.3 * rng.gen_range(-1.0..1.0);

    let center = [
        (nx as f64 - 1.0) / 2.0 * sp[0],
        (ny as f64 - 1.0) / 2.0 * sp[1],
    ];
    let height = (nz as f64 - 1.0) * sp[2];
    fn jitter3(rng: &mut ChaCha8Rng, scale: f64) -> [f64; 3] {
        [
            scale * rng.gen_range(-1.0..1.0),
            scale * rng.gen_range(-1.0..1.0),
            scale * rng.gen_range(-1.0..1.0),
        ]
    }

    let lj = jitter3(&mut rng, params.center_jitter_mm);
    let liver = Ellipsoid {
        center_mm: [
            center[0] - 0.38 * body_rx + lj[0],
            center[1] - 0.10 * body_ry + lj[1],
            0.66 * height + lj[2],
        ],
        semi_mm: [0.50 * body_rx, 0.52 * body_ry, 0.18 * height],
        angle_z: 0.0,
    };
    let sj = jitter3(&mut rng, params.center_jitter_mm);
    let spleen = Ellipsoid {
        center_mm: [
            center[0] + 0.55 * body_rx + sj[0],
            center[1] + 0.10 * body_ry + sj[1],
            0.66 * height + sj[2],
        ],
        semi_mm: [0.22 * body_rx, 0.26 * body_ry, 0.12 * height],
        angle_z: 0.0,
    };
    let rkj = jitter3(&mut rng, params.center_jitter_mm);
    let rk_semi = kidney_semi_axes(params.kidney_volume_cc, params.shape_jitter, &mut rng);
    let rk_angle = params.orientation_jitter_rad * rng.gen_range(-1.0..1.0);
    let right_kidney = Ellipsoid {
        center_mm: [
            center[0] - 0.50 * body_rx + rkj[0],
            center[1] + 0.26 * body_ry + rkj[1],
            0.48 * height + rkj[2],
        ],
        semi_mm: rk_semi,
        angle_z: rk_angle,
    };
    let lkj = jitter3(&mut rng, params.center_jitter_mm);
    let lk_semi = kidney_semi_axes(params.kidney_volume_cc, params.shape_jitter, &mut rng);
    let lk_angle = params.orientation_jitter_rad * rng.gen_range(-1.0..1.0);
    let left_kidney = Ellipsoid {
        center_mm: [
            center[0] + 0.50 * body_rx + lkj[0],
            center[1] + 0.26 * body_ry + lkj[1],
            0.48 * height + lkj[2],
        ],
        semi_mm: lk_semi,
        angle_z: lk_angle,
    };

    let spine_y = center[1] + 0.55 * body_ry;
    let spine_r = 13.0f64;

    // Smooth multi-octave cosine texture inside the body: seeded phases and
    // per-axis wavelengths around the characteristic scale.
    let mut octaves = Vec::new();
    for (k, rel_amp) in [(1.0f64, 1.0f64), (1.7, 0.6), (2.9, 0.4)] {
        let mut wl = [0.0f64; 3];
        let mut ph = [0.0f64; 3];
        for c in 0..3 {
            wl[c] = params.texture_scale_mm / k * (1.0 + 0.2 * rng.gen_range(-1.0..1.0));
            ph[c] = rng.gen_range(0.0..std::f64::consts::TAU);
        }
        octaves.push((params.texture_amp_hu * rel_amp, wl, ph));
    }
    let texture = |p: [f64; 3]| -> f64 {
        octaves
            .iter()
            .map(|(amp, wl, ph)| {
                amp * (std::f64::consts::TAU * p[0] / wl[0] + ph[0]).cos()
                    * (std::f64::consts::TAU * p[1] / wl[1] + ph[1]).cos()
                    * (std::f64::consts::TAU * p[2] / wl[2] + ph[2]).cos()
            })
            .sum()
    };

    let n = geom.num_voxels();
    let mut data = vec![-1024.0f32; n];
    let mut labels = vec![0u8; n];
    let body = |px: f64, py: f64| -> f64 {
        ((px - center[0]) / body_rx).powi(2) + ((py - center[1]) / body_ry).powi(2)
    };
    for z in 0..nz {
        let pz = z as f64 * sp[2];
        for y in 0..ny {
            let py = y as f64 * sp[1];
            for x in 0..nx {
                let px = x as f64 * sp[0];
                let i = geom.index(x, y, z);
                let b = body(px, py);
                if b > 1.0 {
                    continue;
                }
                let mut value = if b > 0.78 { hu.fat } else { hu.muscle };
                let mut label = 0u8;
                let p = [px, py, pz];
                if (px - center[0]).powi(2) + (py - spine_y).powi(2) <= spine_r * spine_r {
                    value = hu.bone;
                }
                if liver.contains(p) {
                    value = hu.liver;
                    label = LABEL_LIVER;
                }
                if spleen.contains(p) {
                    value = hu.spleen;
                    label = LABEL_SPLEEN;
                }
                if right_kidney.contains(p) {
                    value = hu.kidney;
                    label = LABEL_RIGHT_KIDNEY;
                }
                if left_kidney.contains(p) {
                    value = hu.kidney;
                    label = LABEL_LEFT_KIDNEY;
                }
                value += texture(p) as f32;
                data[i] = value;
                labels[i] = label;
            }
        }
    }
    // Organs are only painted on in-body voxels; reject configurations
    // whose analytic extent would poke outside the body ellipse.
    for organ in [&liver, &spleen, &right_kidney, &left_kidney] {
        for (axis, radius) in [(0usize, body_rx), (1usize, body_ry)] {
            let reach = (organ.center_mm[axis] - center[axis]).abs()
                + organ.semi_mm[0].max(organ.semi_mm[1]);
            if reach > radius * 1.02 {
                return Err(AtlasError::InvalidConfig(format!(
                    "organ reach {reach:.1} mm exceeds body semi-axis {radius:.1} mm"
                )));
            }
        }
    }

    if params.noise_sigma_hu > 0.0 {
        let normal = Normal::new(0.0, params.noise_sigma_hu).expect("sigma validated");
        for v in data.iter_mut() {
            *v += normal.sample(&mut rng) as f32;
        }
    }

    let slope = (SCORE_TOP - SCORE_BOTTOM) / (nz as f64 - 1.0) * score_slope_jit;
    let scores: Vec<f64> = (0..nz)
        .map(|z| SCORE_BOTTOM * score_slope_jit + score_off_jit + slope * z as f64)
        .collect();

    let volume = Volume::new(geom.clone(), data)?;
    let label_map = LabelMap::new(geom, labels)?;
    Ok((volume, label_map, scores))
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct WarpParams {
    /// Peak displacement magnitude, voxels; at most 6.
    pub amplitude_voxels: f64,
    /// Sinusoid wavelength, voxels; at least 8x the amplitude.
    pub wavelength_voxels: f64,
}

/// Cosine smoothstep: 0 below `a`, 1 above `b`.
fn ramp(t: f64, a: f64, b: f64) -> f64 {
    if t <= a {
        0.0
    } else if t >= b {
        1.0
    } else {
        0.5 * (1.0 - (std::f64::consts::PI * (t - a) / (b - a)).cos())
    }
}

/// Separable boundary window: 0 at the volume border, plateau 1 over the
/// central `[0.3, 0.7]` band of each axis.
fn boundary_window(t: f64, n: f64) -> f64 {
    let e = n - 1.0;
    ramp(t, 0.05 * e, 0.30 * e) * (1.0 - ramp(t, 0.70 * e, 0.95 * e))
}

/// Analytic smooth warp: each displacement component is a sinusoid of one
/// *other* axis, attenuated by a separable boundary window so the field
/// vanishes toward the volume border (outer air carries no image evidence
/// of any displacement, so ground truth is zero there too). Off the
/// window ramps the Jacobian of `x + u(x)` is `1 + product of three small
/// cyclic slopes > 0`; the gentle ramps keep it positive everywhere, which
/// the generator's tests verify by finite differences.
///
/// The peak displacement norm equals the requested amplitude exactly when
/// some quarter-wavelength grid point `(q, q, q)` lands on the window
/// plateau, as it does for the default 96-voxel grids with wavelengths 32
/// and 48.
pub fn synthetic_warp_field(geom: &Geometry, params: &WarpParams) -> Result<DenseField> {
    if params.amplitude_voxels < 0.0 || params.amplitude_voxels > 6.0 {
        return Err(AtlasError::InvalidConfig(format!(
            "warp amplitude {} outside [0, 6]",
            params.amplitude_voxels
        )));
    }
    if params.amplitude_voxels > 0.0
        && params.wavelength_voxels < 8.0 * params.amplitude_voxels
    {
        return Err(AtlasError::InvalidConfig(format!(
            "wavelength {} below 8x amplitude {}",
            params.wavelength_voxels, params.amplitude_voxels
        )));
    }
    let a = params.amplitude_voxels / 3f64.sqrt();
    let k = 2.0 * std::f64::consts::PI / params.wavelength_voxels;
    let mut field = DenseField::zero(geom.clone())?;
    let dims = geom.dims;
    let (nx, ny, nz) = (dims[0] as f64, dims[1] as f64, dims[2] as f64);
    for z in 0..dims[2] {
        let wz = boundary_window(z as f64, nz);
        for y in 0..dims[1] {
            let wy = boundary_window(y as f64, ny);
            for x in 0..dims[0] {
                let w = boundary_window(x as f64, nx) * wy * wz;
                let i = geom.index(x, y, z);
                field.disp[i] = [
                    (w * a * (k * y as f64).sin()) as f32,
                    (w * a * (k * z as f64).sin()) as f32,
                    (w * a * (k * x as f64).sin()) as f32,
                ];
            }
        }
    }
    Ok(field)
}

/// Warp a phantom with a compliant sinusoidal field; returns the warped
/// volume and labels plus the exact pull-back field used, i.e.
/// `register_deform(fixed = warped, moving = original)` should recover it.
pub fn apply_synthetic_warp(
    v: &Volume,
    labels: &LabelMap,
    params: &WarpParams,
) -> Result<(Volume, LabelMap, DenseField)> {
    if !v.geom.approx_eq(&labels.geom, 1e-6) {
        return Err(AtlasError::GeometryMismatch {
            context: "phantom volume vs labels",
        });
    }
    let field = synthetic_warp_field(&v.geom, params)?;
    let warped = warp_volume(v, &field, None, Interp::Trilinear);
    let warped_labels = warp_labels(labels, &field, None);
    Ok((warped, warped_labels, field))
}
