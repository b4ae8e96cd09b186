//! Subcommand implementations.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::Args;
use log::info;
use serde::de::DeserializeOwned;
use serde::Serialize;

use catoptric::calibration::{calibrate as estimate_pose, CameraCalibration, CorrespondenceFile};
use catoptric::evalkit::{
    config_digest, format_table, reference_views, score_field, score_pair, write_reports_csv, ExperimentConfig,
    MetricsReport, RunMetadata,
};
use catoptric::geometry::{CameraIntrinsics, PinholeCamera};
use catoptric::imageio::{write_pfm, RgbImage};
use catoptric::neuralfield::{load_checkpoint, save_checkpoint, Checkpoint, Field, FieldConfig};
use catoptric::raybank::{restore_rays, RayBank};
use catoptric::renderer::render_view;
use catoptric::simulator::{
    correspondence_file, perturb_template, render_capture_misaligned, CaptureBundle, Layout, MirrorArrayTemplate,
    ViewPose,
};
use catoptric::trainer::{write_loss_csv, Trainer};

use crate::config::ProjectConfig;
use crate::{Common, Failure};

fn read_json<T: DeserializeOwned>(path: &Path, what: &str) -> Result<T, Failure> {
    let text =
        fs::read_to_string(path).map_err(|e| Failure::data(format!("cannot read {what} {}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| Failure::data(format!("invalid {what} {}: {e}", path.display())))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), Failure> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Failure::data(e.to_string()))?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Failure::data(format!("cannot write {}: {e}", path.display())))
}

fn create_dir(dir: &Path) -> Result<(), Failure> {
    fs::create_dir_all(dir).map_err(|e| Failure::data(format!("cannot create {}: {e}", dir.display())))
}

fn load_config(common: &Common) -> Result<ProjectConfig, Failure> {
    let mut config = ProjectConfig::load(common.config.as_deref())?;
    if let Some(s) = common.seed {
        config.seed = s;
    }
    Ok(config)
}

#[derive(Args, Debug)]
pub struct SimulateArgs {
    #[command(flatten)]
    common: Common,
    /// Preset mirror count: 1, 5, 7, 13, 19 or 25.
    #[arg(long)]
    mirrors: Option<usize>,
    /// Standard deviation of the in-plane mirror placement error, in mm.
    #[arg(long)]
    sigma: Option<f64>,
    /// Pixels spanned by one mirror diameter.
    #[arg(long)]
    pixels_per_mirror: Option<f64>,
    /// Scene description (JSON); the built-in desk scene by default.
    #[arg(long)]
    scene: Option<PathBuf>,
}

/// Writes the capture bundle plus `correspondences.json`, `template.json`
/// (ideal mirror positions), `template_truth.json` and `views.json`.
pub fn simulate(a: SimulateArgs) -> Result<(), Failure> {
    let mut config = load_config(&a.common)?;
    if let Some(n) = a.mirrors {
        config.layout = Layout::Count(n);
    }
    if let Some(s) = a.sigma {
        config.perturbation_sigma_mm = s;
    }
    if let Some(p) = a.pixels_per_mirror {
        config.camera.pixels_per_mirror = p;
    }
    if a.scene.is_some() {
        config.scene = a.scene;
    }
    config.validate()?;
    let scene = config.scene()?;
    let ideal = config.template()?;
    let truth = perturb_template(&ideal, config.perturbation_sigma_mm, config.seed, false)
        .map_err(|e| Failure::usage(e.to_string()))?;
    let calib = config
        .camera
        .calibration(&ideal)
        .map_err(|e| Failure::usage(e.to_string()))?;
    let bundle = render_capture_misaligned(&scene, &calib, &truth, &ideal).map_err(|e| Failure::data(e.to_string()))?;
    let dir = config.output_dir(a.common.out.as_deref(), "capture");
    bundle.save(&dir).map_err(|e| Failure::data(e.to_string()))?;
    write_json(
        &dir.join("correspondences.json"),
        &correspondence_file(&ideal, &calib.camera),
    )?;
    write_json(&dir.join("template.json"), &ideal)?;
    write_json(&dir.join("template_truth.json"), &truth)?;
    write_json(&dir.join("views.json"), &config.views.poses())?;
    println!(
        "wrote {}x{} capture of {} mirrors ({} mirror pixels) to {}",
        bundle.width(),
        bundle.height(),
        ideal.len(),
        bundle.mirror_pixel_count(),
        dir.display()
    );
    Ok(())
}

#[derive(Args, Debug)]
pub struct CalibrateArgs {
    /// Correspondence file: intrinsics plus marker world/image pairs.
    #[arg(long)]
    correspondences: PathBuf,
    /// Calibration JSON to write (default: standard output).
    #[arg(long)]
    out: Option<PathBuf>,
}

pub fn calibrate(a: CalibrateArgs) -> Result<(), Failure> {
    let file: CorrespondenceFile = read_json(&a.correspondences, "correspondence file")?;
    let calib = estimate_pose(&file.points, &file.intrinsics)?;
    let rmse = calib.rmse_px.unwrap_or(f64::NAN);
    match &a.out {
        Some(path) => {
            fs::write(path, calib.to_json() + "\n")?;
            println!(
                "calibrated from {} points, reprojection RMSE {rmse:.3e} px",
                file.points.len()
            );
        }
        None => {
            println!("{}", calib.to_json());
            eprintln!("reprojection RMSE {rmse:.3e} px");
        }
    }
    Ok(())
}

#[derive(Args, Debug)]
pub struct RestoreArgs {
    /// Project configuration (JSON); supplies the bounding box.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Capture directory written by `simulate`.
    #[arg(long)]
    capture: PathBuf,
    /// Calibration JSON (default: <capture>/calibration.json).
    #[arg(long)]
    calibration: Option<PathBuf>,
    /// Mirror template JSON (default: <capture>/template.json).
    #[arg(long)]
    template: Option<PathBuf>,
    /// Ray bank to write (default: <capture>/rays.bin).
    #[arg(long)]
    out: Option<PathBuf>,
}

pub fn restore(a: RestoreArgs) -> Result<(), Failure> {
    let config = ProjectConfig::load(a.config.as_deref())?;
    config.bbox.validate().map_err(|e| Failure::usage(e.to_string()))?;
    let bundle =
        CaptureBundle::load(&a.capture).map_err(|e| Failure::data(format!("capture {}: {e}", a.capture.display())))?;
    let calib_path = a.calibration.unwrap_or_else(|| a.capture.join("calibration.json"));
    let text = fs::read_to_string(&calib_path)
        .map_err(|e| Failure::data(format!("cannot read {}: {e}", calib_path.display())))?;
    let calib = CameraCalibration::from_json(&text).map_err(|e| Failure::data(format!("invalid calibration: {e}")))?;
    let template: MirrorArrayTemplate = read_json(
        &a.template.unwrap_or_else(|| a.capture.join("template.json")),
        "template",
    )?;
    let bank = restore_rays(&bundle, &calib, &template, &config.bbox).map_err(|e| Failure::data(e.to_string()))?;
    let out = a.out.unwrap_or_else(|| a.capture.join("rays.bin"));
    bank.write(BufWriter::new(File::create(&out)?))
        .map_err(|e| Failure::data(e.to_string()))?;
    println!(
        "restored {} rays ({} foreground, {} pixels skipped, {} outside the box) to {}",
        bank.len(),
        bank.foreground_count(),
        bank.skipped,
        bank.outside_bbox,
        out.display()
    );
    Ok(())
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[command(flatten)]
    common: Common,
    /// Ray bank written by `restore`.
    #[arg(long)]
    rays: PathBuf,
    /// Mirror template the bank was restored with.
    #[arg(long)]
    template: PathBuf,
    /// Network size: tiny, desk or full.
    #[arg(long)]
    preset: Option<String>,
    /// Total epochs (full passes over the rays).
    #[arg(long)]
    epochs: Option<usize>,
    /// Weight of the visual-hull and geometry losses.
    #[arg(long)]
    lambda: Option<f64>,
    /// Adam learning rate.
    #[arg(long)]
    learning_rate: Option<f64>,
    /// Rays per optimisation step.
    #[arg(long)]
    batch_rays: Option<usize>,
    /// Stratified samples per ray.
    #[arg(long)]
    n_coarse: Option<usize>,
    /// Importance samples per ray.
    #[arg(long)]
    n_fine: Option<usize>,
    /// Keep the warp bypassed for the whole run.
    #[arg(long)]
    no_warp: bool,
    /// Continue from a checkpoint of an earlier run.
    #[arg(long)]
    resume: Option<PathBuf>,
}

fn open_checkpoint(path: &Path) -> Result<Checkpoint, Failure> {
    let f = File::open(path).map_err(|e| Failure::data(format!("cannot open checkpoint {}: {e}", path.display())))?;
    load_checkpoint(BufReader::new(f)).map_err(|e| Failure::data(format!("checkpoint {}: {e}", path.display())))
}

fn save_to(path: &Path, ckpt: &Checkpoint) -> Result<(), Failure> {
    let mut w = BufWriter::new(File::create(path)?);
    save_checkpoint(&mut w, ckpt)?;
    w.flush()?;
    Ok(())
}

/// Writes `epoch-NNN.ckpt` and `loss.csv` after each epoch and
/// `field.ckpt` at the end.
pub fn train(a: TrainArgs) -> Result<(), Failure> {
    let mut config = load_config(&a.common)?;
    if let Some(p) = &a.preset {
        config.field = FieldConfig::preset(p)
            .ok_or_else(|| Failure::usage(format!("unknown preset {p:?} (tiny, desk, full)")))?;
    }
    let t = &mut config.train;
    t.epochs = a.epochs.unwrap_or(t.epochs);
    t.lambda = a.lambda.unwrap_or(t.lambda);
    t.learning_rate = a.learning_rate.unwrap_or(t.learning_rate);
    t.batch_rays = a.batch_rays.unwrap_or(t.batch_rays);
    t.n_coarse = a.n_coarse.unwrap_or(t.n_coarse);
    t.n_fine = a.n_fine.unwrap_or(t.n_fine);
    t.warp &= !a.no_warp;
    t.seed = config.seed;
    config.validate()?;
    let template: MirrorArrayTemplate = read_json(&a.template, "template")?;
    let f =
        File::open(&a.rays).map_err(|e| Failure::data(format!("cannot open ray bank {}: {e}", a.rays.display())))?;
    let bank = RayBank::read(BufReader::new(f), config.bbox, template.len())
        .map_err(|e| Failure::data(format!("ray bank {}: {e}", a.rays.display())))?;
    let mut trainer = match &a.resume {
        Some(path) => {
            let ckpt = open_checkpoint(path)?;
            let t = Trainer::new(ckpt.field, &bank, config.train.clone())?;
            match ckpt.optimizer {
                Some(o) => t.resume(o, ckpt.epoch),
                None => t,
            }
        }
        None => {
            let field = Field::<f32>::new(
                config.field.clone(),
                config.bbox,
                template.len(),
                template.anchor,
                config.seed,
            )?;
            Trainer::new(field, &bank, config.train.clone())?
        }
    };
    let dir = config.output_dir(a.common.out.as_deref(), "train");
    create_dir(&dir)?;
    trainer.train(|t, s| {
        save_checkpoint(
            BufWriter::new(File::create(dir.join(format!("epoch-{:03}.ckpt", s.epoch)))?),
            &t.checkpoint(),
        )?;
        write_loss_csv(BufWriter::new(File::create(dir.join("loss.csv"))?), &t.log)?;
        println!(
            "epoch {:>3}  L_c {:.6}  L_v {:.6}  L_g {:.6}  total {:.6}  tau {}",
            s.epoch, s.mean.l_c, s.mean.l_v, s.mean.l_g, s.mean.l_total, s.tau
        );
        Ok(())
    })?;
    save_to(&dir.join("field.ckpt"), &trainer.checkpoint())?;
    println!("wrote {}", dir.join("field.ckpt").display());
    Ok(())
}

#[derive(Args, Debug)]
pub struct RenderArgs {
    #[command(flatten)]
    common: Common,
    /// Checkpoint to render.
    #[arg(long)]
    checkpoint: PathBuf,
    /// JSON list of poses ({"eye", "target", "up"}); default: the config's view arc.
    #[arg(long)]
    view_path: Option<PathBuf>,
    /// Image width in pixels.
    #[arg(long)]
    width: Option<u32>,
    /// Image height in pixels.
    #[arg(long)]
    height: Option<u32>,
    /// Focal length in pixels (default: keeps the view arc's field of view).
    #[arg(long)]
    focal: Option<f64>,
    /// Stratified samples per ray.
    #[arg(long)]
    n_coarse: Option<usize>,
    /// Importance samples per ray.
    #[arg(long)]
    n_fine: Option<usize>,
    /// Also write depth maps as PFM.
    #[arg(long)]
    depth: bool,
}

/// Writes `view-NNN.png` (and `depth-NNN.pfm`) per pose.
pub fn render(a: RenderArgs) -> Result<(), Failure> {
    let mut config = load_config(&a.common)?;
    let r = &mut config.render;
    r.width = a.width.unwrap_or(r.width);
    r.height = a.height.unwrap_or(r.height);
    r.n_coarse = a.n_coarse.unwrap_or(r.n_coarse);
    r.n_fine = a.n_fine.unwrap_or(r.n_fine);
    config.validate()?;
    let poses: Vec<ViewPose> = match &a.view_path {
        Some(p) => read_json(p, "view path")?,
        None => config.views.poses(),
    };
    let r = &config.render;
    let focal = a
        .focal
        .unwrap_or(config.views.focal_px * r.width as f64 / config.views.width as f64);
    let k = CameraIntrinsics::new(
        focal,
        focal,
        (r.width as f64 - 1.0) / 2.0,
        (r.height as f64 - 1.0) / 2.0,
        r.width,
        r.height,
    )
    .map_err(|e| Failure::usage(e.to_string()))?;
    let field = open_checkpoint(&a.checkpoint)?.field;
    let dir = config.output_dir(a.common.out.as_deref(), "render");
    create_dir(&dir)?;
    for (i, pose) in poses.iter().enumerate() {
        let view = render_view(&field, &PinholeCamera::new(k, pose.pose()), r)?;
        view.image
            .save_png(dir.join(format!("view-{i:03}.png")))
            .map_err(|e| Failure::data(e.to_string()))?;
        if a.depth {
            let d: Vec<f32> = view.depth.iter().map(|&x| x as f32).collect();
            write_pfm(
                BufWriter::new(File::create(dir.join(format!("depth-{i:03}.pfm")))?),
                r.width,
                r.height,
                1,
                &d,
            )
            .map_err(|e| Failure::data(e.to_string()))?;
        }
        info!("rendered view {i}");
    }
    println!("rendered {} views to {}", poses.len(), dir.display());
    Ok(())
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[command(flatten)]
    common: Common,
    /// Score this checkpoint against ground-truth renders of the config's view arc.
    #[arg(long, conflicts_with_all = ["rendered", "reference"], required_unless_present = "rendered")]
    checkpoint: Option<PathBuf>,
    /// Directory of rendered PNGs, each scored against the same-named file in --reference.
    #[arg(long, requires = "reference")]
    rendered: Option<PathBuf>,
    /// Directory of reference PNGs.
    #[arg(long, requires = "rendered")]
    reference: Option<PathBuf>,
}

fn png_names(dir: &Path) -> Result<Vec<String>, Failure> {
    let mut names: Vec<String> = fs::read_dir(dir)
        .map_err(|e| Failure::data(format!("cannot list {}: {e}", dir.display())))?
        .filter_map(|e| e.ok())
        .map(|e| e.file_name().to_string_lossy().into_owned())
        .filter(|n| n.ends_with(".png"))
        .collect();
    names.sort();
    Ok(names)
}

fn load_png(path: &Path) -> Result<RgbImage, Failure> {
    RgbImage::load_png(path).map_err(|e| Failure::data(format!("{}: {e}", path.display())))
}

/// Prints a table and writes `metrics.csv` to the output directory.
pub fn eval(a: EvalArgs) -> Result<(), Failure> {
    let config = load_config(&a.common)?;
    config.validate()?;
    let digest = config_digest(&serde_json::to_vec(&config).map_err(|e| Failure::data(e.to_string()))?);
    let report = if let Some(ckpt) = &a.checkpoint {
        let field = open_checkpoint(ckpt)?.field;
        let experiment = ExperimentConfig {
            scene: config.scene()?,
            views: config.views.clone(),
            render: config.render.clone(),
            seed: config.seed,
            ..Default::default()
        };
        let views = reference_views(&experiment)?;
        MetricsReport {
            meta: RunMetadata {
                label: "checkpoint".into(),
                variant: "-".into(),
                config_hash: digest,
                seed: config.seed,
                mirrors: field.mirrors,
                perturbation_sigma_mm: config.perturbation_sigma_mm,
            },
            views: score_field(&field, &views, &config.render)?,
            failure: None,
            train_seconds: 0.0,
        }
    } else {
        let (rendered, reference) = (a.rendered.as_ref().unwrap(), a.reference.as_ref().unwrap());
        let names = png_names(rendered)?;
        if names.is_empty() {
            return Err(Failure::data(format!("no PNG files in {}", rendered.display())));
        }
        let mut views = Vec::new();
        for (i, n) in names.iter().enumerate() {
            let b = reference.join(n);
            if !b.exists() {
                return Err(Failure::data(format!("{} has no counterpart {}", n, b.display())));
            }
            views.push(score_pair(i, &load_png(&rendered.join(n))?, &load_png(&b)?)?);
        }
        MetricsReport {
            meta: RunMetadata {
                label: "pairs".into(),
                variant: "-".into(),
                config_hash: digest,
                seed: config.seed,
                mirrors: 0,
                perturbation_sigma_mm: config.perturbation_sigma_mm,
            },
            views,
            failure: None,
            train_seconds: 0.0,
        }
    };
    let reports = [report];
    let dir = config.output_dir(a.common.out.as_deref(), "eval");
    create_dir(&dir)?;
    write_reports_csv(BufWriter::new(File::create(dir.join("metrics.csv"))?), &reports)?;
    print!("{}", format_table(&reports));
    Ok(())
}
