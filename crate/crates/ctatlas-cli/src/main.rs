//! `ctatlas`: command-line front end for the atlas construction toolkit.
//!
//! Every subcommand reads its declared inputs and writes its declared
//! outputs, exiting 0 on success. Failures print one machine-readable JSON
//! object on stderr and exit 1. Set `ATLAS_LOG=info` (or `debug`) for
//! progress logging; `--threads 1` forces the reference sequential path.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use ctatlas_core::affine::{register_affine, resample_affine, AffineTransform};
use ctatlas_core::atlas::PhaseTag;
use ctatlas_core::deform::register_deform;
use ctatlas_core::error::AtlasError;
use ctatlas_core::field::{invert_field, read_field, transfer_labels, warp_labels, warp_volume, write_field};
use ctatlas_core::metrics::{wilcoxon_signed_rank, WilcoxonResult};
use ctatlas_core::nifti;
use ctatlas_core::pipeline::{
    build_phase_atlases, evaluate_labels, generate_phantom_cohort, CohortManifest,
    PhantomCohortSpec, PipelineConfig,
};
use ctatlas_core::render::{
    render_checkerboard_deformation, render_montage, render_variance_heatmap, Plane,
    DEFAULT_HU_WINDOW,
};
use ctatlas_core::voi::{
    build_score_series, compute_slice_features, read_score_sidecar, sidecar_path, SliceScorer,
};
use ctatlas_core::volume::Interp;

#[derive(Parser)]
#[command(name = "ctatlas", version, about = "Multi-contrast CT abdominal atlas toolkit")]
struct Cli {
    /// Worker threads (0 or omitted: all cores; 1: sequential reference path).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Seed for generators that draw randomness.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Pipeline configuration JSON; defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Score the axial slices of a volume and fit the linear correction.
    Score(ScoreArgs),
    /// Crop a volume (and optional labels) to the fitted-score window.
    Crop(CropArgs),
    /// Stage-1 affine registration of a moving volume onto a fixed one.
    RegAffine(RegAffineArgs),
    /// Stage-2 deformable registration (inputs must share the fixed grid).
    RegDeform(RegDeformArgs),
    /// Apply a displacement field (and optional affine) to a volume or labels.
    Warp(WarpArgs),
    /// Invert a displacement field by fixed-point iteration.
    Invert(InvertArgs),
    /// Carry atlas labels back into a subject's native space.
    TransferLabels(TransferArgs),
    /// Run the cohort pipeline for template statistics only (no label transfer).
    AtlasBuild(CohortArgs),
    /// Per-organ Dice / MSD / HD of a predicted label map against truth,
    /// or a Wilcoxon signed-rank test of paired per-subject differences.
    Evaluate(EvaluateArgs),
    /// Figure-style PNG outputs: montage, variance heatmap, checkerboard.
    Render(RenderArgs),
    /// Generate a synthetic phantom cohort plus manifest.
    PhantomCohort(PhantomArgs),
    /// Full pipeline: VOI crop, two-stage registration, label transfer,
    /// per-phase atlas statistics and reports.
    Pipeline(CohortArgs),
}

#[derive(Args)]
struct ScoreArgs {
    #[arg(long)]
    volume: PathBuf,
    /// Score sidecar; defaults to `<volume stem>.scores.json`.
    #[arg(long)]
    scores: Option<PathBuf>,
    /// Output JSON with raw and fitted scores.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct CropArgs {
    #[arg(long)]
    volume: PathBuf,
    #[arg(long)]
    scores: Option<PathBuf>,
    #[arg(long)]
    labels: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    out_labels: Option<PathBuf>,
}

#[derive(Args)]
struct RegAffineArgs {
    #[arg(long)]
    fixed: PathBuf,
    #[arg(long)]
    moving: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct RegDeformArgs {
    #[arg(long)]
    fixed: PathBuf,
    #[arg(long)]
    moving: PathBuf,
    /// Stage-1 result to apply to the moving volume first.
    #[arg(long)]
    affine: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct WarpArgs {
    #[arg(long)]
    moving: PathBuf,
    #[arg(long)]
    field: PathBuf,
    #[arg(long)]
    affine: Option<PathBuf>,
    /// Volume whose grid supplies the field's origin and direction
    /// (the DFLD format stores dims and spacing only).
    #[arg(long)]
    like: Option<PathBuf>,
    /// Treat the moving image as a label map (nearest-neighbour sampling).
    #[arg(long, default_value_t = false)]
    labels: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct InvertArgs {
    #[arg(long)]
    field: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TransferArgs {
    #[arg(long)]
    atlas_labels: PathBuf,
    #[arg(long)]
    affine: PathBuf,
    #[arg(long)]
    field: PathBuf,
    /// Subject volume providing the output grid.
    #[arg(long)]
    like: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct CohortArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvaluateArgs {
    /// Predicted (transferred) label map.
    #[arg(long)]
    prediction: Option<PathBuf>,
    /// Ground-truth label map.
    #[arg(long)]
    truth: Option<PathBuf>,
    #[arg(long, default_value = "subject")]
    subject: String,
    /// Paired differences (JSON array) for a Wilcoxon signed-rank test.
    #[arg(long)]
    diffs: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct RenderArgs {
    #[command(subcommand)]
    kind: RenderKind,
}

#[derive(Subcommand)]
enum RenderKind {
    /// Grayscale slice montage, one tile per volume.
    Montage {
        #[arg(long, required = true, num_args = 1..)]
        volumes: Vec<PathBuf>,
        #[arg(long, default_value = "axial", value_parser = parse_plane)]
        plane: Plane,
        #[arg(long, default_value_t = 0.5)]
        frac: f64,
        #[arg(long, num_args = 2, default_values_t = [DEFAULT_HU_WINDOW.0, DEFAULT_HU_WINDOW.1])]
        window: Vec<f64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Yellow-to-red variance heatmap.
    Variance {
        #[arg(long)]
        volume: PathBuf,
        #[arg(long, default_value = "axial", value_parser = parse_plane)]
        plane: Plane,
        #[arg(long, default_value_t = 0.5)]
        frac: f64,
        #[arg(long)]
        vmax: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Checkerboard deformation visualization of a field slice.
    Checkerboard {
        #[arg(long)]
        field: PathBuf,
        #[arg(long, default_value = "axial", value_parser = parse_plane)]
        plane: Plane,
        #[arg(long)]
        slice: usize,
        #[arg(long, default_value_t = 8)]
        cell_px: usize,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct PhantomArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 20)]
    count: usize,
    /// Comma-separated phase tags assigned round-robin.
    #[arg(long, default_value = "portal_venous", value_delimiter = ',')]
    phases: Vec<String>,
    #[arg(long, num_args = 3, default_values_t = [96usize, 96, 96])]
    dims: Vec<usize>,
    #[arg(long, num_args = 3, default_values_t = [2.5f64, 2.5, 2.5])]
    spacing: Vec<f64>,
    #[arg(long, default_value_t = 10.0)]
    noise: f64,
    #[arg(long, num_args = 2, default_values_t = [100.0, 308.0])]
    kidney_cc: Vec<f64>,
}

fn parse_plane(s: &str) -> Result<Plane, String> {
    s.parse().map_err(|e: AtlasError| e.to_string())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter("ATLAS_LOG")).init();
    let cli = Cli::parse();
    if let Some(threads) = cli.threads {
        if threads > 0 {
            if let Err(e) = rayon::ThreadPoolBuilder::new()
                .num_threads(threads)
                .build_global()
            {
                return fail(&format!("failed to size the thread pool: {e}"));
            }
        }
    }
    let config = match load_config(&cli) {
        Ok(c) => c,
        Err(e) => return fail(&e.to_string()),
    };
    match run(cli, config) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => fail(&e.to_string()),
    }
}

#[derive(Serialize)]
struct CliError<'a> {
    error: &'a str,
}

fn fail(message: &str) -> ExitCode {
    let json = serde_json::to_string(&CliError { error: message })
        .unwrap_or_else(|_| format!("{{\"error\":{message:?}}}"));
    eprintln!("{json}");
    ExitCode::FAILURE
}

fn load_config(cli: &Cli) -> Result<PipelineConfig, AtlasError> {
    match &cli.config {
        Some(path) => PipelineConfig::read_json(path),
        None => Ok(PipelineConfig::default()),
    }
}

fn write_json<T: Serialize>(value: &T, path: &PathBuf) -> Result<(), AtlasError> {
    let text = serde_json::to_string_pretty(value).map_err(|e| AtlasError::json(path, e))?;
    std::fs::write(path, text).map_err(|e| AtlasError::io(path, e))
}

fn run(cli: Cli, config: PipelineConfig) -> Result<(), AtlasError> {
    match cli.cmd {
        Cmd::Score(args) => {
            let volume = nifti::read_volume(&args.volume)?.reorient_canonical();
            let sidecar = args.scores.unwrap_or_else(|| sidecar_path(&args.volume));
            let features = compute_slice_features(&volume);
            let scorer = SliceScorer::File(read_score_sidecar(&sidecar)?);
            let series = build_score_series(&features, &scorer)?;
            #[derive(Serialize)]
            struct ScoreOut {
                raw: Vec<f64>,
                slope: f64,
                intercept: f64,
                fitted: Vec<f64>,
            }
            write_json(
                &ScoreOut {
                    raw: series.raw.clone(),
                    slope: series.slope,
                    intercept: series.intercept,
                    fitted: series.fitted_scores(),
                },
                &args.out,
            )
        }
        Cmd::Crop(args) => {
            let volume = nifti::read_volume(&args.volume)?.reorient_canonical();
            let sidecar = args.scores.unwrap_or_else(|| sidecar_path(&args.volume));
            let features = compute_slice_features(&volume);
            let scorer = SliceScorer::File(read_score_sidecar(&sidecar)?);
            let series = build_score_series(&features, &scorer)?;
            let range = ctatlas_core::voi::window_slice_range(&series, config.crop_window)?;
            let nz = range.len();
            let cropped = volume.crop_pad_z(range.clone(), nz)?;
            nifti::write_volume(&cropped, &args.out)?;
            if let (Some(labels_path), Some(out_labels)) = (&args.labels, &args.out_labels) {
                let labels = nifti::read_labels(labels_path)?.reorient_canonical();
                let cropped_labels = labels.crop_pad_z(range, nz)?;
                nifti::write_labels(&cropped_labels, out_labels)?;
            }
            Ok(())
        }
        Cmd::RegAffine(args) => {
            let fixed = nifti::read_volume(&args.fixed)?;
            let moving = nifti::read_volume(&args.moving)?;
            let affine = register_affine(&fixed, &moving, &config.affine)?;
            affine.write_json(&args.out)
        }
        Cmd::RegDeform(args) => {
            let fixed = nifti::read_volume(&args.fixed)?;
            let mut moving = nifti::read_volume(&args.moving)?;
            if let Some(path) = &args.affine {
                let affine = AffineTransform::read_json(path)?;
                moving = resample_affine(&moving, &affine, &fixed.geom, Interp::Trilinear);
            }
            let field = register_deform(&fixed, &moving, &config.deform)?;
            write_field(&field, &args.out)
        }
        Cmd::Warp(args) => {
            let mut field = read_field(&args.field)?;
            if let Some(like) = &args.like {
                let reference = nifti::read_volume(like)?;
                if reference.geom.dims != field.geom.dims {
                    return Err(AtlasError::GeometryMismatch {
                        context: "warp --like grid vs field dims",
                    });
                }
                field.geom = reference.geom;
            }
            let affine = match &args.affine {
                Some(p) => Some(AffineTransform::read_json(p)?),
                None => None,
            };
            if args.labels {
                let moving = nifti::read_labels(&args.moving)?;
                let warped = warp_labels(&moving, &field, affine.as_ref());
                nifti::write_labels(&warped, &args.out)
            } else {
                let moving = nifti::read_volume(&args.moving)?;
                let warped = warp_volume(&moving, &field, affine.as_ref(), Interp::Trilinear);
                nifti::write_volume(&warped, &args.out)
            }
        }
        Cmd::Invert(args) => {
            let field = read_field(&args.field)?;
            let (inverse, report) = invert_field(&field, 30, 0.01);
            write_field(&inverse, &args.out)?;
            #[derive(Serialize)]
            struct InvOut {
                converged: bool,
                iterations: usize,
                residual_mean: f64,
                residual_max: f64,
            }
            let summary = InvOut {
                converged: report.converged,
                iterations: report.iterations,
                residual_mean: report.residual_mean,
                residual_max: report.residual_max,
            };
            println!(
                "{}",
                serde_json::to_string(&summary).map_err(|e| AtlasError::json(&args.out, e))?
            );
            Ok(())
        }
        Cmd::TransferLabels(args) => {
            let atlas_labels = nifti::read_labels(&args.atlas_labels)?;
            let affine = AffineTransform::read_json(&args.affine)?;
            let mut field = read_field(&args.field)?;
            if field.geom.dims != atlas_labels.geom.dims {
                return Err(AtlasError::GeometryMismatch {
                    context: "transfer-labels field vs atlas labels",
                });
            }
            field.geom = atlas_labels.geom.clone();
            let subject = nifti::read_volume(&args.like)?.reorient_canonical();
            let (labels, report) = transfer_labels(&atlas_labels, &affine, &field, &subject.geom)?;
            if !report.converged {
                log::warn!(
                    "field inversion did not converge (residual mean {:.4})",
                    report.residual_mean
                );
            }
            nifti::write_labels(&labels, &args.out)
        }
        Cmd::AtlasBuild(args) => {
            let manifest = CohortManifest::read_json(&args.manifest)?;
            let mut cfg = config;
            cfg.transfer_labels = false;
            run_cohort(&manifest, &cfg, &args.out)
        }
        Cmd::Pipeline(args) => {
            let manifest = CohortManifest::read_json(&args.manifest)?;
            run_cohort(&manifest, &config, &args.out)
        }
        Cmd::Evaluate(args) => match (&args.prediction, &args.truth, &args.diffs) {
            (Some(pred), Some(truth), None) => {
                let prediction = nifti::read_labels(pred)?.reorient_canonical();
                let gt = nifti::read_labels(truth)?.reorient_canonical();
                let rows = evaluate_labels(&args.subject, &prediction, &gt)?;
                write_json(&rows, &args.out)
            }
            (None, None, Some(diffs_path)) => {
                let text = std::fs::read_to_string(diffs_path)
                    .map_err(|e| AtlasError::io(diffs_path, e))?;
                let diffs: Vec<f64> =
                    serde_json::from_str(&text).map_err(|e| AtlasError::json(diffs_path, e))?;
                let result: WilcoxonResult = wilcoxon_signed_rank(&diffs)?;
                write_json(&result, &args.out)
            }
            _ => Err(AtlasError::InvalidConfig(
                "evaluate needs either --prediction and --truth, or --diffs".into(),
            )),
        },
        Cmd::Render(args) => match args.kind {
            RenderKind::Montage {
                volumes,
                plane,
                frac,
                window,
                out,
            } => {
                let vols: Vec<_> = volumes
                    .iter()
                    .map(nifti::read_volume)
                    .collect::<Result<Vec<_>, _>>()?;
                let refs: Vec<&_> = vols.iter().collect();
                let png = render_montage(&refs, plane, frac, (window[0], window[1]))?;
                std::fs::write(&out, png).map_err(|e| AtlasError::io(&out, e))
            }
            RenderKind::Variance {
                volume,
                plane,
                frac,
                vmax,
                out,
            } => {
                let v = nifti::read_volume(&volume)?;
                let png = render_variance_heatmap(&v, plane, frac, vmax)?;
                std::fs::write(&out, png).map_err(|e| AtlasError::io(&out, e))
            }
            RenderKind::Checkerboard {
                field,
                plane,
                slice,
                cell_px,
                out,
            } => {
                let f = read_field(&field)?;
                let png = render_checkerboard_deformation(&f, plane, slice, cell_px)?;
                std::fs::write(&out, png).map_err(|e| AtlasError::io(&out, e))
            }
        },
        Cmd::PhantomCohort(args) => {
            let phases: Result<Vec<PhaseTag>, AtlasError> = args
                .phases
                .iter()
                .map(|p| {
                    serde_json::from_value(serde_json::Value::String(p.clone())).map_err(|_| {
                        AtlasError::InvalidConfig(format!("unknown phase tag {p:?}"))
                    })
                })
                .collect();
            let spec = PhantomCohortSpec {
                count: args.count,
                seed: cli.seed.unwrap_or(7),
                phases: phases?,
                kidney_cc_range: (args.kidney_cc[0], args.kidney_cc[1]),
                dims: [args.dims[0], args.dims[1], args.dims[2]],
                spacing: [args.spacing[0], args.spacing[1], args.spacing[2]],
                noise_sigma_hu: args.noise,
            };
            let manifest = generate_phantom_cohort(&spec, &args.out)?;
            log::info!("wrote cohort manifest {}", manifest.display());
            Ok(())
        }
    }
}

fn run_cohort(
    manifest: &CohortManifest,
    config: &PipelineConfig,
    out: &PathBuf,
) -> Result<(), AtlasError> {
    // Fail only when no subject succeeded; per-subject failures are recorded.
    let outcome = build_phase_atlases(manifest, config, out)?;
    let ok = outcome.report.subjects.iter().filter(|s| s.error.is_none()).count();
    let failed = outcome.report.subjects.len() - ok;
    if failed > 0 {
        log::warn!("{failed} of {} subjects failed", outcome.report.subjects.len());
    }
    if ok == 0 {
        return Err(AtlasError::Pipeline(
            "every subject in the cohort failed".into(),
        ));
    }
    log::info!(
        "cohort complete: {ok} subjects processed, {} phase bundles",
        outcome.bundles.len()
    );
    Ok(())
}
