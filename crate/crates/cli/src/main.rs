//! `carshape`: synthetic data, shape-space building, pose fitting,
//! evaluation, mask rendering and gradient checks from the command line.
//!
//! Every command writes its outputs plus a `manifest.json` into `--out`.

mod output;

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use carshape::cars::{synthetic_car_database, DEFAULT_FAMILY_COUNTS};
use carshape::eval::{evaluate, instances_from_annotation, A3DPCriteria, EvalScene, TranslationMode};
use carshape::fitter::{fit_scene, FitConfig, SceneFitSummary};
use carshape::geometry::CameraIntrinsics;
use carshape::gradsuite::{run_gradient_suite, SuiteConfig};
use carshape::losses::LossWeights;
use carshape::mesh::{load_mesh_database, write_mesh_database, CanonicalMesh};
use carshape::raster::{mask_iou, overlay_ppm, render_mask, MaskImage, RenderConfig, DEFAULT_VIEWS};
use carshape::scenegen::{generate_scene, SceneAnnotation, SceneConfig};
use carshape::shape_space::{build_shape_space, default_landmarks, ShapeSpace, ShapeSpaceConfig};

use output::{hash_inputs, InputRecord, OutputDir, MANIFEST_FILE};

const SHAPESPACE_FILE: &str = "shapespace.json";
const FIT_SUMMARY_FILE: &str = "fit_summary.json";

#[derive(Parser, Debug)]
#[command(name = "carshape", version, about = "Vehicle pose and shape reconstruction experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a synthetic mesh database (OBJ files plus index.json).
    SynthMeshes(SynthMeshesArgs),
    /// Cluster a mesh database and fit per-cluster PCA models.
    BuildShapespace(BuildArgs),
    /// Generate synthetic annotated scenes.
    Synth(SynthArgs),
    /// Fit pose and shape to every instance of annotated scenes.
    Fit(FitArgs),
    /// Score predictions against ground truth.
    Eval(EvalArgs),
    /// Render prediction (and ground-truth) masks.
    Render(RenderArgs),
    /// Check every analytic gradient against finite differences.
    Gradcheck(GradcheckArgs),
}

#[derive(Args, Debug, Serialize)]
struct SynthMeshesArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Relative jitter of the per-car dimensions.
    #[arg(long, default_value_t = 0.05)]
    jitter: f64,
    /// Cars per body family (sedan, hatchback, SUV, minivan order).
    #[arg(long, value_delimiter = ',', default_values_t = DEFAULT_FAMILY_COUNTS)]
    counts: Vec<usize>,
}

#[derive(Args, Debug, Serialize)]
struct BuildArgs {
    #[arg(long)]
    mesh_dir: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 4)]
    clusters: usize,
    /// Maximum PCA components per cluster.
    #[arg(long, default_value_t = 10)]
    components: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args, Debug, Serialize)]
struct SynthArgs {
    #[arg(long)]
    shapespace: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Scene `i` uses seed `seed + i`.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1)]
    scenes: usize,
    #[arg(long, default_value_t = 8)]
    cars: usize,
    /// Scene configuration JSON; the flags below override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Keypoint noise standard deviation, pixels.
    #[arg(long)]
    noise: Option<f64>,
    /// Probability of hiding each keypoint.
    #[arg(long)]
    occlusion: Option<f64>,
    /// Standard deviation of car center heights, meters.
    #[arg(long)]
    height_jitter: Option<f64>,
    /// Divide the image resolution (and intrinsics) by this factor.
    #[arg(long)]
    downscale: Option<f64>,
}

#[derive(Args, Debug, Serialize)]
struct FitArgs {
    /// Annotation JSON file, or a directory of them.
    #[arg(long)]
    annotations: PathBuf,
    /// Shape space JSON, or a directory containing shapespace.json.
    #[arg(long)]
    shapespace: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Fitter configuration JSON.
    #[arg(long)]
    fit_config: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, ValueEnum, Serialize)]
enum Mode {
    Abs,
    Rel,
}

#[derive(Args, Debug, Serialize)]
struct MeshSourceArgs {
    /// Shape space used to decode predicted shape codes.
    #[arg(long)]
    shapespace: Option<PathBuf>,
    /// Mesh database for instances without a shape code, matched by car_id.
    #[arg(long)]
    mesh_dir: Option<PathBuf>,
}

#[derive(Args, Debug, Serialize)]
struct EvalArgs {
    /// Prediction JSON file, or a directory of them.
    #[arg(long)]
    preds: PathBuf,
    /// Ground-truth JSON file, or a directory of them; files pair by name.
    #[arg(long)]
    gts: PathBuf,
    #[command(flatten)]
    meshes: MeshSourceArgs,
    /// Threshold schedule JSON; replaces the default for `--mode`.
    #[arg(long, conflicts_with = "mode")]
    criteria: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Mode::Abs)]
    mode: Mode,
    #[arg(long, default_value_t = DEFAULT_VIEWS)]
    views: usize,
    /// Render size as WIDTHxHEIGHT.
    #[arg(long, default_value = "480x360", value_parser = parse_size)]
    render_size: (u32, u32),
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug, Serialize)]
struct RenderArgs {
    /// Annotation whose instances are drawn.
    #[arg(long)]
    pred: PathBuf,
    /// Optional ground truth for IoU and an overlay image.
    #[arg(long)]
    gt: Option<PathBuf>,
    #[command(flatten)]
    meshes: MeshSourceArgs,
    /// Largest output size as WIDTHxHEIGHT; the image aspect ratio is kept.
    #[arg(long, default_value = "480x360", value_parser = parse_size)]
    render_size: (u32, u32),
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug, Serialize)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Random configurations per checked function.
    #[arg(long, default_value_t = 100)]
    configs: usize,
    /// Loss weights JSON for the total-loss check.
    #[arg(long)]
    weights: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

fn parse_size(s: &str) -> std::result::Result<(u32, u32), String> {
    let (w, h) = s
        .split_once(['x', 'X'])
        .ok_or_else(|| format!("expected WIDTHxHEIGHT, got {s:?}"))?;
    let w: u32 = w.trim().parse().map_err(|e| format!("bad width: {e}"))?;
    let h: u32 = h.trim().parse().map_err(|e| format!("bad height: {e}"))?;
    if w == 0 || h == 0 {
        return Err("render size must be non-zero".into());
    }
    Ok((w, h))
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::SynthMeshes(a) => cmd_synth_meshes(&a),
        Command::BuildShapespace(a) => cmd_build_shapespace(&a),
        Command::Synth(a) => cmd_synth(&a),
        Command::Fit(a) => cmd_fit(&a),
        Command::Eval(a) => cmd_eval(&a),
        Command::Render(a) => cmd_render(&a),
        Command::Gradcheck(a) => cmd_gradcheck(&a),
    }
}

fn require_exists(path: &Path, what: &str) -> Result<()> {
    ensure!(path.exists(), "{what} {} does not exist", path.display());
    Ok(())
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn shapespace_path(path: &Path) -> PathBuf {
    if path.is_dir() {
        path.join(SHAPESPACE_FILE)
    } else {
        path.to_path_buf()
    }
}

fn load_space(path: &Path) -> Result<ShapeSpace> {
    let file = shapespace_path(path);
    ShapeSpace::load_json(&file).with_context(|| format!("loading shape space {}", file.display()))
}

/// Annotation files of a path: the file itself, or every `*.json` in a
/// directory except the manifest, sorted by name.
fn annotation_files(path: &Path) -> Result<Vec<PathBuf>> {
    if path.is_file() {
        return Ok(vec![path.to_path_buf()]);
    }
    let mut files: Vec<PathBuf> = fs::read_dir(path)
        .with_context(|| format!("reading {}", path.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension().is_some_and(|e| e == "json")
                && p.file_name().is_some_and(|n| n != MANIFEST_FILE && n != FIT_SUMMARY_FILE)
        })
        .collect();
    files.sort();
    Ok(files)
}

fn load_annotation(path: &Path) -> Result<SceneAnnotation> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    SceneAnnotation::from_json(&text).with_context(|| format!("parsing {}", path.display()))
}

fn file_name(path: &Path) -> String {
    path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default()
}

fn cmd_synth_meshes(a: &SynthMeshesArgs) -> Result<()> {
    let counts: [usize; 4] = a.counts.as_slice().try_into().context("--counts takes four values")?;
    let meshes = synthetic_car_database(counts, a.jitter, a.seed);
    let out = OutputDir::create(&a.out)?;
    write_mesh_database(out.path(), &meshes)?;
    let mut out = out;
    for m in &meshes {
        out.record(format!("{}.obj", m.car_id));
    }
    out.record(carshape::mesh::MESH_INDEX_FILE);
    println!("wrote {} meshes to {}", meshes.len(), a.out.display());
    out.finish("synth-meshes", Some(a.seed), a, vec![])
}

fn cmd_build_shapespace(a: &BuildArgs) -> Result<()> {
    ensure!(a.mesh_dir.is_dir(), "mesh directory {} does not exist", a.mesh_dir.display());
    let inputs = hash_inputs(&a.mesh_dir)?;
    let db: Vec<CanonicalMesh> = load_mesh_database(&a.mesh_dir, false)?.into_iter().map(|(m, _)| m).collect();
    let cfg = ShapeSpaceConfig {
        clusters: a.clusters,
        max_components: a.components,
        seed: a.seed,
    };
    let (space, report) = build_shape_space(&db, &cfg)?;
    let mut out = OutputDir::create(&a.out)?;
    out.write(SHAPESPACE_FILE, space.to_json()?.as_bytes())?;
    out.write_json("build_report.json", &report)?;
    println!("{} meshes, {} clusters", db.len(), space.cluster_count());
    for (i, ((size, n), ev)) in report
        .cluster_sizes
        .iter()
        .zip(&report.components)
        .zip(&report.explained_variance)
        .enumerate()
    {
        println!("cluster {i}: {size} meshes, {n} components, explained variance {:.4}", ev);
    }
    out.finish("build-shapespace", Some(a.seed), a, inputs)
}

fn cmd_synth(a: &SynthArgs) -> Result<()> {
    require_exists(&shapespace_path(&a.shapespace), "shape space")?;
    ensure!(a.scenes > 0 && a.cars > 0, "--scenes and --cars must be positive");
    let mut cfg: SceneConfig = match &a.config {
        Some(p) => read_json(p)?,
        None => SceneConfig::default(),
    };
    if let Some(f) = a.downscale {
        ensure!(f > 0.0, "--downscale must be positive");
        cfg = cfg.downscaled(f);
    }
    if let Some(v) = a.noise {
        cfg.pixel_noise = v;
    }
    if let Some(v) = a.occlusion {
        cfg.occlusion_rate = v;
    }
    if let Some(v) = a.height_jitter {
        cfg.height_jitter = v;
    }
    cfg.validate()?;
    let mut inputs = hash_inputs(&shapespace_path(&a.shapespace))?;
    if let Some(p) = &a.config {
        inputs.extend(hash_inputs(p)?);
    }
    let space = load_space(&a.shapespace)?;
    let landmarks = default_landmarks(space.vertex_count);
    let mut out = OutputDir::create(&a.out)?;
    for i in 0..a.scenes {
        let scene = generate_scene(&space, &landmarks, a.cars, &cfg, a.seed.wrapping_add(i as u64))?;
        out.write(&format!("scene_{i:04}.json"), scene.annotation.to_json()?.as_bytes())?;
    }
    println!("wrote {} scenes of {} cars to {}", a.scenes, a.cars, a.out.display());
    out.finish("synth", Some(a.seed), &(a, &cfg), inputs)
}

fn cmd_fit(a: &FitArgs) -> Result<()> {
    require_exists(&a.annotations, "annotations")?;
    require_exists(&shapespace_path(&a.shapespace), "shape space")?;
    let cfg: FitConfig = match &a.fit_config {
        Some(p) => read_json(p)?,
        None => FitConfig::default(),
    };
    cfg.validate()?;
    let files = annotation_files(&a.annotations)?;
    ensure!(!files.is_empty(), "no annotation files in {}", a.annotations.display());
    let mut inputs: Vec<InputRecord> = Vec::new();
    for f in &files {
        inputs.extend(hash_inputs(f)?);
    }
    inputs.extend(hash_inputs(&shapespace_path(&a.shapespace))?);
    let space = load_space(&a.shapespace)?;
    let landmarks = default_landmarks(space.vertex_count);
    let mut out = OutputDir::create(&a.out)?;
    let mut total = SceneFitSummary::default();
    for f in &files {
        let scene = load_annotation(f)?;
        let (pred, summary) = fit_scene(&scene, &space, &landmarks, &cfg)?;
        out.write(&file_name(f), pred.to_json()?.as_bytes())?;
        total.fitted += summary.fitted;
        total.not_converged += summary.not_converged;
        total.skipped.extend(summary.skipped);
        total.fits.extend(summary.fits);
    }
    out.write_json(FIT_SUMMARY_FILE, &total)?;
    println!(
        "fitted {} instances in {} files ({} not converged, {} skipped)",
        total.fitted,
        files.len(),
        total.not_converged,
        total.skipped.len()
    );
    out.finish("fit", None, &(a, &cfg), inputs)
}

/// Shape space and mesh database named by the mesh-source flags.
fn load_mesh_sources(m: &MeshSourceArgs, inputs: &mut Vec<InputRecord>) -> Result<(Option<ShapeSpace>, Vec<CanonicalMesh>)> {
    let space = match &m.shapespace {
        Some(p) => {
            require_exists(&shapespace_path(p), "shape space")?;
            inputs.extend(hash_inputs(&shapespace_path(p))?);
            Some(load_space(p)?)
        }
        None => None,
    };
    let db = match &m.mesh_dir {
        Some(d) => {
            ensure!(d.is_dir(), "mesh directory {} does not exist", d.display());
            inputs.extend(hash_inputs(d)?);
            load_mesh_database(d, false)?.into_iter().map(|(m, _)| m).collect()
        }
        None => Vec::new(),
    };
    Ok((space, db))
}

fn cmd_eval(a: &EvalArgs) -> Result<()> {
    require_exists(&a.preds, "predictions")?;
    require_exists(&a.gts, "ground truth")?;
    let criteria = match &a.criteria {
        Some(p) => read_json::<A3DPCriteria>(p)?,
        None => A3DPCriteria::for_mode(match a.mode {
            Mode::Abs => TranslationMode::Absolute,
            Mode::Rel => TranslationMode::Relative,
        }),
    };
    criteria.validate()?;
    let render = RenderConfig {
        views: a.views,
        size: a.render_size,
    };
    render.validate()?;

    let gt_files = annotation_files(&a.gts)?;
    ensure!(!gt_files.is_empty(), "no ground-truth files in {}", a.gts.display());
    let mut inputs = Vec::new();
    let (space, db) = load_mesh_sources(&a.meshes, &mut inputs)?;
    let mut scenes = Vec::with_capacity(gt_files.len());
    for gt_file in &gt_files {
        let pred_file = if a.preds.is_dir() {
            a.preds.join(file_name(gt_file))
        } else {
            a.preds.clone()
        };
        inputs.extend(hash_inputs(gt_file)?);
        let gt = load_annotation(gt_file)?;
        // A missing prediction file counts as an image with no detections.
        let preds = if pred_file.is_file() {
            inputs.extend(hash_inputs(&pred_file)?);
            instances_from_annotation(&load_annotation(&pred_file)?, space.as_ref(), &db, true)?
        } else {
            Vec::new()
        };
        scenes.push(EvalScene {
            preds,
            gts: instances_from_annotation(&gt, space.as_ref(), &db, false)?,
        });
    }
    let report = evaluate(&scenes, &criteria, &render)?;
    let mut out = OutputDir::create(&a.out)?;
    out.write_json("eval_report.json", &report)?;
    out.write("eval_report.csv", report.to_csv().as_bytes())?;
    println!(
        "mean_ap {:.4}  c-l {:.4}  c-s {:.4}  ({} predictions, {} ground truth)",
        report.mean_ap, report.c_l, report.c_s, report.num_predictions, report.num_ground_truth
    );
    out.finish("eval", None, &(a, &criteria), inputs)
}

fn scaled_camera(cam: &CameraIntrinsics, image: (u32, u32), limit: (u32, u32)) -> (CameraIntrinsics, (u32, u32)) {
    let s = (limit.0 as f64 / image.0 as f64).min(limit.1 as f64 / image.1 as f64);
    let size = (
        ((image.0 as f64 * s).round() as u32).max(1),
        ((image.1 as f64 * s).round() as u32).max(1),
    );
    let cam = CameraIntrinsics {
        fx: cam.fx * s,
        fy: cam.fy * s,
        px: cam.px * s,
        py: cam.py * s,
    };
    (cam, size)
}

fn render_scene(
    ann: &SceneAnnotation,
    space: Option<&ShapeSpace>,
    db: &[CanonicalMesh],
    cam: &CameraIntrinsics,
    size: (u32, u32),
) -> Result<MaskImage> {
    let mut mask = MaskImage::new(size.0, size.1)?;
    for inst in instances_from_annotation(ann, space, db, false)? {
        let m = render_mask(&inst.mesh, &inst.pose, cam, size)?;
        for (a, b) in mask.bits.iter_mut().zip(&m.bits) {
            *a |= *b;
        }
    }
    Ok(mask)
}

fn cmd_render(a: &RenderArgs) -> Result<()> {
    require_exists(&a.pred, "prediction")?;
    if let Some(gt) = &a.gt {
        require_exists(gt, "ground truth")?;
    }
    let mut inputs = hash_inputs(&a.pred)?;
    let (space, db) = load_mesh_sources(&a.meshes, &mut inputs)?;
    let pred = load_annotation(&a.pred)?;
    let (cam, size) = scaled_camera(&pred.camera, pred.image_size, a.render_size);
    let stem = a.pred.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "scene".into());
    let mut out = OutputDir::create(&a.out)?;
    let pred_mask = render_scene(&pred, space.as_ref(), &db, &cam, size)?;
    out.write(&format!("{stem}_pred.pgm"), &pred_mask.to_pgm())?;
    if let Some(gt_path) = &a.gt {
        inputs.extend(hash_inputs(gt_path)?);
        let gt = load_annotation(gt_path)?;
        if gt.camera != pred.camera || gt.image_size != pred.image_size {
            bail!("prediction and ground truth use different cameras");
        }
        let gt_mask = render_scene(&gt, space.as_ref(), &db, &cam, size)?;
        out.write(&format!("{stem}_gt.pgm"), &gt_mask.to_pgm())?;
        out.write(&format!("{stem}_overlay.ppm"), &overlay_ppm(&pred_mask, &gt_mask)?)?;
        println!("mask IoU {:.4}", mask_iou(&pred_mask, &gt_mask)?);
    }
    println!("rendered {}x{} masks to {}", size.0, size.1, a.out.display());
    out.finish("render", None, a, inputs)
}

fn cmd_gradcheck(a: &GradcheckArgs) -> Result<()> {
    ensure!(a.configs > 0, "--configs must be positive");
    let mut inputs = Vec::new();
    let weights: LossWeights = match &a.weights {
        Some(p) => {
            inputs.extend(hash_inputs(p)?);
            read_json(p)?
        }
        None => LossWeights::default(),
    };
    let cfg = SuiteConfig {
        seed: a.seed,
        configs: a.configs,
        weights,
        ..Default::default()
    };
    let report = run_gradient_suite(&cfg)?;
    let mut out = OutputDir::create(&a.out)?;
    out.write_json("gradcheck.json", &report)?;
    for e in &report.entries {
        println!(
            "{:<22} {:>4} checks  {:>3} failures  worst relative error {:.2e}",
            e.name, e.checks, e.failures, e.worst_rel_error
        );
    }
    out.finish("gradcheck", Some(a.seed), &cfg, inputs)?;
    ensure!(report.passed, "gradient check failed (tolerance {:.0e})", report.tolerance);
    println!("all gradients within {:.0e}", report.tolerance);
    Ok(())
}
