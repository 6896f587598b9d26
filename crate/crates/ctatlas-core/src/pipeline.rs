//! End-to-end orchestration: cohort manifests, pipeline configuration, the
//! per-subject processing chain (VOI crop, resample, affine, deformable,
//! warp, label transfer) and per-phase atlas construction with reports.
//!
//! Everything here is a pure function of `(inputs, config)`: reports carry
//! no timestamps and subjects accumulate in manifest order regardless of
//! the worker-pool width, so re-runs are byte-identical.

use std::path::{Path, PathBuf};

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::affine::{register_affine, AffineConfig, AffineTransform};
use crate::atlas::{success_filter, AtlasBundle, PhaseTag, SuccessReport, SUCCESS_DICE};
use crate::deform::{register_deform, DeformConfig};
use crate::error::{AtlasError, Result};
use crate::field::{transfer_labels, warp_volume, write_field, DenseField};
use crate::metrics::{dice, extract_surface, hd, msd};
use crate::nifti;
use crate::phantom::{generate_phantom, PhantomParams};
use crate::voi::{
    build_score_series, compute_slice_features, read_score_sidecar, sidecar_path, crop_to_window,
    window_slice_range, LinearScorer, SliceScorer,
};
use crate::volume::{Interp, LabelMap, Volume};

// ---------------------------------------------------------------------------
// Manifest and configuration
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SubjectEntry {
    pub id: String,
    pub volume: PathBuf,
    pub phase: PhaseTag,
    /// Slice-score sidecar; defaults to `<volume stem>.scores.json`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scores: Option<PathBuf>,
    /// Optional ground-truth labels for evaluation after label transfer.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub labels: Option<PathBuf>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CohortManifest {
    pub atlas_volume: PathBuf,
    pub atlas_labels: PathBuf,
    /// Slice-score sidecar of the atlas target; same default convention.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub atlas_scores: Option<PathBuf>,
    pub subjects: Vec<SubjectEntry>,
}

impl CohortManifest {
    /// Load a manifest, resolving relative paths against its directory and
    /// checking that every referenced file exists.
    pub fn read_json(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| AtlasError::io(path, e))?;
        let mut m: CohortManifest =
            serde_json::from_str(&text).map_err(|e| AtlasError::json(path, e))?;
        let base = path.parent().unwrap_or(Path::new("."));
        let resolve = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&p);
            }
        };
        resolve(&mut m.atlas_volume);
        resolve(&mut m.atlas_labels);
        if let Some(s) = m.atlas_scores.as_mut() {
            resolve(s);
        }
        for s in m.subjects.iter_mut() {
            resolve(&mut s.volume);
            if let Some(p) = s.scores.as_mut() {
                resolve(p);
            }
            if let Some(p) = s.labels.as_mut() {
                resolve(p);
            }
        }
        m.validate()?;
        Ok(m)
    }

    pub fn write_json(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(self).map_err(|e| AtlasError::json(path, e))?;
        std::fs::write(path, text).map_err(|e| AtlasError::io(path, e))
    }

    pub fn validate(&self) -> Result<()> {
        let check = |p: &Path| -> Result<()> {
            if !p.exists() {
                return Err(AtlasError::Pipeline(format!(
                    "manifest references missing file {}",
                    p.display()
                )));
            }
            Ok(())
        };
        check(&self.atlas_volume)?;
        check(&self.atlas_labels)?;
        if let Some(s) = &self.atlas_scores {
            check(s)?;
        }
        for s in &self.subjects {
            check(&s.volume)?;
            if let Some(p) = &s.scores {
                check(p)?;
            }
            if let Some(p) = &s.labels {
                check(p)?;
            }
        }
        Ok(())
    }
}

/// How per-slice scores are produced.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum ScorerConfig {
    /// Read the JSON sidecar next to each volume.
    File,
    /// Linear model over slice features with embedded weights.
    Linear { model: LinearScorer },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub crop_window: (f64, f64),
    pub scorer: ScorerConfig,
    pub affine: AffineConfig,
    pub deform: DeformConfig,
    /// Minimum body-mask Dice for atlas accumulation.
    pub success_dice: f64,
    /// Worker threads; 0 uses all available cores.
    pub threads: usize,
    /// Transfer atlas labels back into each subject's native space.
    pub transfer_labels: bool,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            crop_window: crate::voi::DEFAULT_WINDOW,
            scorer: ScorerConfig::File,
            affine: AffineConfig::default(),
            deform: DeformConfig::default(),
            success_dice: SUCCESS_DICE,
            threads: 0,
            transfer_labels: true,
        }
    }
}

impl PipelineConfig {
    pub fn read_json(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| AtlasError::io(path, e))?;
        let cfg: PipelineConfig =
            serde_json::from_str(&text).map_err(|e| AtlasError::json(path, e))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn write_json(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(self).map_err(|e| AtlasError::json(path, e))?;
        std::fs::write(path, text).map_err(|e| AtlasError::io(path, e))
    }

    pub fn validate(&self) -> Result<()> {
        if self.crop_window.0 >= self.crop_window.1 {
            return Err(AtlasError::InvalidConfig("empty crop window".into()));
        }
        if !(0.0..=1.0).contains(&self.success_dice) {
            return Err(AtlasError::InvalidConfig(format!(
                "success dice {} outside [0, 1]",
                self.success_dice
            )));
        }
        self.deform.schedule.validate()
    }
}

// ---------------------------------------------------------------------------
// Atlas target preparation and the per-subject chain
// ---------------------------------------------------------------------------

/// Atlas target after canonical reorientation and VOI cropping; its geometry
/// is the registration space every subject resamples into.
pub struct AtlasTarget {
    pub volume: Volume,
    pub labels: LabelMap,
}

impl AtlasTarget {
    pub fn prepare(manifest: &CohortManifest, config: &PipelineConfig) -> Result<AtlasTarget> {
        let volume = nifti::read_volume(&manifest.atlas_volume)?.reorient_canonical();
        let labels = nifti::read_labels(&manifest.atlas_labels)?.reorient_canonical();
        if !volume.geom.approx_eq(&labels.geom, 1e-4) {
            return Err(AtlasError::GeometryMismatch {
                context: "atlas volume vs atlas labels",
            });
        }
        let scores_path = manifest
            .atlas_scores
            .clone()
            .unwrap_or_else(|| sidecar_path(&manifest.atlas_volume));
        let series = score_series_for(&volume, Some(&scores_path), config)?;
        let range = window_slice_range(&series, config.crop_window)?;
        let nz = range.len();
        let volume = volume.crop_pad_z(range.clone(), nz)?;
        let labels = labels.crop_pad_z(range, nz)?;
        Ok(AtlasTarget { volume, labels })
    }
}

fn score_series_for(
    volume: &Volume,
    sidecar: Option<&Path>,
    config: &PipelineConfig,
) -> Result<crate::voi::SliceScoreSeries> {
    let features = compute_slice_features(volume);
    let scorer = match &config.scorer {
        ScorerConfig::File => {
            let path = sidecar.ok_or_else(|| {
                AtlasError::Pipeline("file scorer configured but no sidecar path".into())
            })?;
            SliceScorer::File(read_score_sidecar(path)?)
        }
        ScorerConfig::Linear { model } => SliceScorer::Linear(model.clone()),
    };
    build_score_series(&features, &scorer)
}

/// Everything the pipeline produces for one subject.
pub struct SubjectArtifacts {
    pub id: String,
    pub phase: PhaseTag,
    /// Subject volume resampled into atlas space before registration.
    pub unregistered: Volume,
    /// Fully registered subject in atlas space.
    pub registered: Volume,
    pub affine: AffineTransform,
    pub field: DenseField,
    pub success: SuccessReport,
    /// Atlas labels carried back into the subject's canonical native space.
    pub transferred: Option<LabelMap>,
    pub inversion: Option<crate::field::InversionReport>,
    /// Per-organ metric rows against the subject's ground-truth labels.
    pub metrics: Vec<MetricsRow>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsRow {
    pub subject: String,
    pub organ_id: u8,
    pub dice: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub msd_mm: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub hd_mm: Option<f64>,
}

/// Run the full chain for one subject against a prepared atlas target.
pub fn run_subject(
    entry: &SubjectEntry,
    atlas: &AtlasTarget,
    config: &PipelineConfig,
) -> Result<SubjectArtifacts> {
    let native = nifti::read_volume(&entry.volume)?.reorient_canonical();
    let sidecar = entry
        .scores
        .clone()
        .unwrap_or_else(|| sidecar_path(&entry.volume));
    let series = score_series_for(&native, Some(&sidecar), config)?;
    let voi = crop_to_window(&native, &series, config.crop_window)?;
    let moving = voi.resample(&atlas.volume.geom, Interp::Trilinear)?;

    let affine = register_affine(&atlas.volume, &moving, &config.affine)?;
    let affined = crate::affine::resample_affine(&moving, &affine, &atlas.volume.geom, Interp::Trilinear);
    let field = register_deform(&atlas.volume, &affined, &config.deform)?;
    let registered = warp_volume(&moving, &field, Some(&affine), Interp::Trilinear);
    let success = success_filter(&registered, &moving, &atlas.volume, config.success_dice)?;

    let (transferred, inversion) = if config.transfer_labels {
        let (labels, report) = transfer_labels(&atlas.labels, &affine, &field, &native.geom)?;
        (Some(labels), Some(report))
    } else {
        (None, None)
    };

    let mut metrics = Vec::new();
    if let (Some(transferred), Some(gt_path)) = (&transferred, &entry.labels) {
        let gt = nifti::read_labels(gt_path)?.reorient_canonical();
        metrics = evaluate_labels(&entry.id, transferred, &gt)?;
    }

    Ok(SubjectArtifacts {
        id: entry.id.clone(),
        phase: entry.phase,
        unregistered: moving,
        registered,
        affine,
        field,
        success,
        transferred,
        inversion,
        metrics,
    })
}

/// Per-organ Dice plus directed surface distances (prediction to truth),
/// one row per organ id present in either map.
pub fn evaluate_labels(subject: &str, prediction: &LabelMap, truth: &LabelMap) -> Result<Vec<MetricsRow>> {
    if !prediction.geom.approx_eq(&truth.geom, 1e-4) {
        return Err(AtlasError::GeometryMismatch {
            context: "evaluate prediction vs truth",
        });
    }
    let mut present = [false; 14];
    for &l in prediction.data.iter().chain(&truth.data) {
        present[l as usize] = true;
    }
    let mut rows = Vec::new();
    for organ in 1..=13u8 {
        if !present[organ as usize] {
            continue;
        }
        let d = dice(prediction, truth, organ)?;
        let (msd_mm, hd_mm) = match (
            extract_surface(prediction, organ),
            extract_surface(truth, organ),
        ) {
            (Ok(sp), Ok(sg)) => (Some(msd(&sp, &sg)?), Some(hd(&sp, &sg)?)),
            _ => (None, None),
        };
        rows.push(MetricsRow {
            subject: subject.to_string(),
            organ_id: organ,
            dice: d,
            msd_mm,
            hd_mm,
        });
    }
    Ok(rows)
}

// ---------------------------------------------------------------------------
// Cohort driver
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SubjectRecord {
    pub id: String,
    pub phase: PhaseTag,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub success: Option<SuccessReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub inversion_residual_mean: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub inversion_converged: Option<bool>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub metrics: Vec<MetricsRow>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CohortReport {
    pub subjects: Vec<SubjectRecord>,
    /// Accepted / total per phase, in phase declaration order.
    pub phase_counts: Vec<(PhaseTag, usize, usize)>,
}

pub struct CohortOutcome {
    pub report: CohortReport,
    pub bundles: Vec<AtlasBundle>,
}

/// Run every subject (parallel across the worker pool), then accumulate the
/// accepted registrations per phase in manifest order and write bundles,
/// per-subject artifacts and the run report under `out_dir`.
pub fn build_phase_atlases(
    manifest: &CohortManifest,
    config: &PipelineConfig,
    out_dir: &Path,
) -> Result<CohortOutcome> {
    let atlas = AtlasTarget::prepare(manifest, config)?;
    std::fs::create_dir_all(out_dir).map_err(|e| AtlasError::io(out_dir, e))?;

    let results: Vec<Result<SubjectArtifacts>> = manifest
        .subjects
        .par_iter()
        .map(|entry| run_subject(entry, &atlas, config))
        .collect();

    let mut records = Vec::with_capacity(results.len());
    let mut bundles: Vec<AtlasBundle> = Vec::new();
    let mut phase_totals: Vec<(PhaseTag, usize, usize)> = Vec::new();

    for (entry, result) in manifest.subjects.iter().zip(results) {
        let slot = phase_totals.iter_mut().find(|(p, _, _)| *p == entry.phase);
        let totals = match slot {
            Some(t) => t,
            None => {
                phase_totals.push((entry.phase, 0, 0));
                phase_totals.last_mut().expect("just pushed")
            }
        };
        totals.2 += 1;
        match result {
            Err(err) => {
                records.push(SubjectRecord {
                    id: entry.id.clone(),
                    phase: entry.phase,
                    error: Some(err.to_string()),
                    success: None,
                    inversion_residual_mean: None,
                    inversion_converged: None,
                    metrics: Vec::new(),
                });
            }
            Ok(art) => {
                let accepted = art.success.success;
                let bundle = match bundles.iter_mut().position(|b| b.phase == art.phase) {
                    Some(i) => &mut bundles[i],
                    None => {
                        bundles.push(AtlasBundle::new(art.phase, atlas.volume.geom.clone())?);
                        bundles.last_mut().expect("just pushed")
                    }
                };
                bundle.record_flag(accepted);
                if accepted {
                    totals.1 += 1;
                    bundle.accumulate(&art.registered)?;
                }
                write_subject_artifacts(out_dir, &art)?;
                records.push(SubjectRecord {
                    id: art.id.clone(),
                    phase: art.phase,
                    error: None,
                    success: Some(art.success.clone()),
                    inversion_residual_mean: art.inversion.as_ref().map(|r| r.residual_mean),
                    inversion_converged: art.inversion.as_ref().map(|r| r.converged),
                    metrics: art.metrics.clone(),
                });
            }
        }
    }

    for bundle in &bundles {
        bundle.write(out_dir)?;
        let report_path = out_dir.join(format!("{}_report.json", bundle.phase));
        let phase_records: Vec<&SubjectRecord> = records
            .iter()
            .filter(|r| r.phase == bundle.phase)
            .collect();
        let text = serde_json::to_string_pretty(&phase_records)
            .map_err(|e| AtlasError::json(&report_path, e))?;
        std::fs::write(&report_path, text).map_err(|e| AtlasError::io(&report_path, e))?;
    }

    let report = CohortReport {
        subjects: records,
        phase_counts: phase_totals,
    };
    let report_path = out_dir.join("cohort_report.json");
    let text =
        serde_json::to_string_pretty(&report).map_err(|e| AtlasError::json(&report_path, e))?;
    std::fs::write(&report_path, text).map_err(|e| AtlasError::io(&report_path, e))?;

    Ok(CohortOutcome { report, bundles })
}

fn write_subject_artifacts(out_dir: &Path, art: &SubjectArtifacts) -> Result<()> {
    let dir = out_dir.join("subjects").join(&art.id);
    std::fs::create_dir_all(&dir).map_err(|e| AtlasError::io(&dir, e))?;
    art.affine.write_json(dir.join("affine.json"))?;
    write_field(&art.field, dir.join("field.dfld"))?;
    nifti::write_volume(&art.registered, dir.join("registered.nii"))?;
    if let Some(labels) = &art.transferred {
        nifti::write_labels(labels, dir.join("transferred_labels.nii"))?;
    }
    if !art.metrics.is_empty() {
        let path = dir.join("metrics.json");
        let text =
            serde_json::to_string_pretty(&art.metrics).map_err(|e| AtlasError::json(&path, e))?;
        std::fs::write(&path, text).map_err(|e| AtlasError::io(&path, e))?;
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Phantom cohort emission
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PhantomCohortSpec {
    pub count: usize,
    pub seed: u64,
    /// Phases assigned round-robin across subjects.
    pub phases: Vec<PhaseTag>,
    /// Kidney volume targets drawn uniformly from this range, cc.
    pub kidney_cc_range: (f64, f64),
    pub dims: [usize; 3],
    pub spacing: [f64; 3],
    pub noise_sigma_hu: f64,
}

impl Default for PhantomCohortSpec {
    fn default() -> Self {
        PhantomCohortSpec {
            count: 20,
            seed: 7,
            phases: vec![PhaseTag::PortalVenous],
            kidney_cc_range: (100.0, 308.0),
            dims: [96, 96, 96],
            spacing: [2.5, 2.5, 2.5],
            noise_sigma_hu: 10.0,
        }
    }
}

/// Write an atlas target plus `count` randomized subjects (volume, labels,
/// score sidecar each) and the manifest tying them together. Returns the
/// manifest path.
pub fn generate_phantom_cohort(spec: &PhantomCohortSpec, out_dir: &Path) -> Result<PathBuf> {
    if spec.count == 0 || spec.phases.is_empty() {
        return Err(AtlasError::InvalidConfig(
            "cohort needs at least one subject and one phase".into(),
        ));
    }
    std::fs::create_dir_all(out_dir).map_err(|e| AtlasError::io(out_dir, e))?;

    // Atlas target: a jitter-free phantom with mid-range kidneys.
    let atlas_params = PhantomParams {
        seed: spec.seed,
        dims: spec.dims,
        spacing: spec.spacing,
        kidney_volume_cc: 180.0,
        center_jitter_mm: 0.0,
        shape_jitter: 0.0,
        orientation_jitter_rad: 0.0,
        phase: spec.phases[0],
        noise_sigma_hu: spec.noise_sigma_hu.min(5.0),
        ..Default::default()
    };
    let (atlas_vol, atlas_labels, atlas_scores) = generate_phantom(&atlas_params)?;
    let atlas_vol_path = out_dir.join("atlas.nii");
    let atlas_lab_path = out_dir.join("atlas_labels.nii");
    nifti::write_volume(&atlas_vol, &atlas_vol_path)?;
    nifti::write_labels(&atlas_labels, &atlas_lab_path)?;
    crate::voi::write_score_sidecar(&atlas_scores, sidecar_path(&atlas_vol_path))?;

    let mut subjects = Vec::with_capacity(spec.count);
    for i in 0..spec.count {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ (0x9E3779B97F4A7C15u64.wrapping_mul(i as u64 + 1)));
        let cc = rng.gen_range(spec.kidney_cc_range.0..=spec.kidney_cc_range.1);
        let params = PhantomParams {
            seed: spec.seed.wrapping_add(1000 + i as u64),
            dims: spec.dims,
            spacing: spec.spacing,
            kidney_volume_cc: cc,
            phase: spec.phases[i % spec.phases.len()],
            noise_sigma_hu: spec.noise_sigma_hu,
            ..Default::default()
        };
        let (vol, labels, scores) = generate_phantom(&params)?;
        let id = format!("subj{i:03}");
        let vol_path = out_dir.join(format!("{id}.nii"));
        let lab_path = out_dir.join(format!("{id}_labels.nii"));
        nifti::write_volume(&vol, &vol_path)?;
        nifti::write_labels(&labels, &lab_path)?;
        crate::voi::write_score_sidecar(&scores, sidecar_path(&vol_path))?;
        subjects.push(SubjectEntry {
            id,
            volume: vol_path,
            phase: params.phase,
            scores: None,
            labels: Some(lab_path),
        });
    }

    let manifest = CohortManifest {
        atlas_volume: atlas_vol_path,
        atlas_labels: atlas_lab_path,
        atlas_scores: None,
        subjects,
    };
    let manifest_path = out_dir.join("manifest.json");
    manifest.write_json(&manifest_path)?;
    Ok(manifest_path)
}
