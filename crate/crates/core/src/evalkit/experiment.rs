//! Simulated capture, training and novel-view scoring under one
//! configuration, shared by the ablation and the mirror-count sweep.

use std::time::Instant;

use log::{info, warn};
use serde::{Deserialize, Serialize};

use super::{config_digest, score_pair, EvalError, MetricsReport, RunMetadata, ViewScore};
use crate::calibration::{calibrate, CameraCalibration};
use crate::geometry::PinholeCamera;
use crate::imageio::RgbImage;
use crate::neuralfield::{Field, FieldConfig, Real};
use crate::raybank::{restore_rays, BBox, RayBank};
use crate::renderer::{render_view, RenderConfig};
use crate::simulator::{
    build_array_template, marker_correspondences, perturb_template, render_capture_misaligned,
    render_ground_truth_view, AnalyticScene, CaptureBundle, CaptureCamera, Layout, MirrorArrayTemplate, ViewArc,
    DEFAULT_MIRROR_DIAMETER_MM, DEFAULT_PITCH_MM,
};
use crate::trainer::{train, TrainConfig};

/// Everything needed to reproduce one simulated experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub scene: AnalyticScene,
    pub layout: Layout,
    pub mirror_diameter_mm: f64,
    pub pitch_mm: f64,
    pub capture: CaptureCamera,
    /// Standard deviation of the in-plane mirror placement error.
    pub perturbation_sigma_mm: f64,
    pub bbox: BBox,
    pub field: FieldConfig,
    pub train: TrainConfig,
    pub render: RenderConfig,
    pub views: ViewArc,
    pub seed: u64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            scene: AnalyticScene::desk(),
            layout: Layout::Count(7),
            mirror_diameter_mm: DEFAULT_MIRROR_DIAMETER_MM,
            pitch_mm: DEFAULT_PITCH_MM,
            capture: CaptureCamera::default(),
            perturbation_sigma_mm: 0.02 * DEFAULT_MIRROR_DIAMETER_MM,
            bbox: BBox::desk(),
            field: FieldConfig::tiny(),
            train: TrainConfig::desk(),
            render: RenderConfig {
                n_coarse: 32,
                n_fine: 16,
                ..RenderConfig::default()
            },
            views: ViewArc::default(),
            seed: 0,
        }
    }
}

/// Model variants compared in the ablation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    Full,
    /// Warp kept bypassed for the whole run.
    NoWarp,
    /// Both regularisers switched off.
    NoReg,
}

impl Variant {
    pub const ALL: [Variant; 3] = [Variant::Full, Variant::NoWarp, Variant::NoReg];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoWarp => "no-warp",
            Variant::NoReg => "no-reg",
        }
    }

    pub fn apply(self, config: &TrainConfig) -> TrainConfig {
        let mut c = config.clone();
        match self {
            Variant::Full => {}
            Variant::NoWarp => c.warp = false,
            Variant::NoReg => c.lambda = 0.0,
        }
        c
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|v| v.name() == s)
    }
}

/// A simulated capture and the rays restored from it.
#[derive(Debug, Clone)]
pub struct PreparedCapture {
    /// Mirror positions assumed during restoration.
    pub ideal: MirrorArrayTemplate,
    /// Mirror positions used to form the image.
    pub truth: MirrorArrayTemplate,
    /// Calibration estimated from the marker correspondences.
    pub calibration: CameraCalibration,
    pub bundle: CaptureBundle,
    pub bank: RayBank,
    pub perturbation_sigma_mm: f64,
}

/// Renders the capture through the perturbed mirrors, calibrates the camera
/// from the paper markers and restores rays against the ideal template.
pub fn prepare_capture(
    config: &ExperimentConfig,
    layout: &Layout,
    sigma_mm: f64,
) -> Result<PreparedCapture, EvalError> {
    let ideal = build_array_template(layout, config.mirror_diameter_mm, config.pitch_mm)?;
    let truth = perturb_template(&ideal, sigma_mm, config.seed, false)?;
    let true_calib = config.capture.calibration(&ideal)?;
    let bundle = render_capture_misaligned(&config.scene, &true_calib, &truth, &ideal)?;
    let markers = marker_correspondences(&ideal, &true_calib.camera);
    let calibration = calibrate(&markers, &true_calib.camera.intrinsics)?;
    let bank = restore_rays(&bundle, &calibration, &ideal, &config.bbox)?;
    info!(
        "capture {}x{}: {} rays ({} foreground) from {} mirrors, sigma {sigma_mm} mm",
        bundle.width(),
        bundle.height(),
        bank.len(),
        bank.foreground_count(),
        ideal.len()
    );
    Ok(PreparedCapture {
        ideal,
        truth,
        calibration,
        bundle,
        bank,
        perturbation_sigma_mm: sigma_mm,
    })
}

/// Keeps only rays reflected by the listed mirrors. Indices are unchanged.
pub fn restrict_to_mirrors(bank: &RayBank, keep: &[usize]) -> RayBank {
    let rays = bank
        .rays
        .iter()
        .filter(|r| keep.contains(&(r.mirror as usize)))
        .cloned()
        .collect();
    RayBank::from_rays(rays, bank.bbox, bank.per_mirror.len())
}

/// A novel view and its directly rendered ground truth.
#[derive(Debug, Clone)]
pub struct ReferenceView {
    pub camera: PinholeCamera,
    pub image: RgbImage,
}

pub fn reference_views(config: &ExperimentConfig) -> Result<Vec<ReferenceView>, EvalError> {
    Ok(config
        .views
        .cameras()?
        .into_iter()
        .map(|camera| ReferenceView {
            image: render_ground_truth_view(&config.scene, &camera),
            camera,
        })
        .collect())
}

/// Renders every reference view with the warp bypassed and scores it.
pub fn score_field<T: Real>(
    field: &Field<T>,
    views: &[ReferenceView],
    render: &RenderConfig,
) -> Result<Vec<ViewScore>, EvalError> {
    views
        .iter()
        .enumerate()
        .map(|(i, v)| {
            let out = render_view(field, &v.camera, render)?;
            score_pair(i, &out.image, &v.image)
        })
        .collect()
}

fn metadata(
    config: &ExperimentConfig,
    label: &str,
    variant: Variant,
    mirrors: usize,
    sigma: f64,
    train: &TrainConfig,
) -> RunMetadata {
    #[derive(Serialize)]
    struct Effective<'a> {
        config: &'a ExperimentConfig,
        train: &'a TrainConfig,
        mirrors: usize,
        sigma: f64,
    }
    let json = serde_json::to_vec(&Effective {
        config,
        train,
        mirrors,
        sigma,
    })
    .expect("plain data");
    RunMetadata {
        label: label.into(),
        variant: variant.name().into(),
        config_hash: config_digest(&json),
        seed: config.seed,
        mirrors,
        perturbation_sigma_mm: sigma,
    }
}

/// Trains one variant on `bank` and scores it on `views`. Training failures
/// are recorded in the report.
pub fn run_variant(
    config: &ExperimentConfig,
    capture: &PreparedCapture,
    bank: &RayBank,
    variant: Variant,
    views: &[ReferenceView],
    label: &str,
) -> Result<MetricsReport, EvalError> {
    let train_config = TrainConfig {
        seed: config.seed,
        ..variant.apply(&config.train)
    };
    let mirrors = bank.per_mirror.iter().filter(|&&n| n > 0).count();
    let meta = metadata(
        config,
        label,
        variant,
        mirrors,
        capture.perturbation_sigma_mm,
        &train_config,
    );
    let start = Instant::now();
    let outcome = train(bank, &capture.ideal, config.field.clone(), &train_config, None);
    let train_seconds = start.elapsed().as_secs_f64();
    match outcome {
        Ok(out) => {
            let views = score_field(&out.field, views, &config.render)?;
            let report = MetricsReport {
                meta,
                views,
                failure: None,
                train_seconds,
            };
            info!(
                "{label}/{}: PSNR {:.3} dB, SSIM {:.4} ({train_seconds:.0} s)",
                variant.name(),
                report.mean_psnr(),
                report.mean_ssim()
            );
            Ok(report)
        }
        Err(e) => {
            warn!("{label}/{} failed: {e}", variant.name());
            Ok(MetricsReport {
                meta,
                views: Vec::new(),
                failure: Some(e.to_string()),
                train_seconds,
            })
        }
    }
}

/// Every variant for every layout and perturbation level. Variants of one
/// (layout, sigma) pair share the capture, the seed and the reference views.
pub fn run_ablation(
    config: &ExperimentConfig,
    layouts: &[Layout],
    sigmas_mm: &[f64],
    variants: &[Variant],
) -> Result<Vec<MetricsReport>, EvalError> {
    let views = reference_views(config)?;
    let mut out = Vec::new();
    for layout in layouts {
        for &sigma in sigmas_mm {
            let capture = prepare_capture(config, layout, sigma)?;
            let label = format!("ablation-{}m", capture.ideal.len());
            for &v in variants {
                out.push(run_variant(config, &capture, &capture.bank, v, &views, &label)?);
            }
        }
    }
    Ok(out)
}

/// One capture with the configured layout; each run trains on the rays of
/// the `n` mirrors nearest the anchor.
pub fn run_mirror_sweep(
    config: &ExperimentConfig,
    counts: &[usize],
    variant: Variant,
) -> Result<Vec<MetricsReport>, EvalError> {
    let capture = prepare_capture(config, &config.layout, config.perturbation_sigma_mm)?;
    if let Some(&n) = counts.iter().find(|&&n| n == 0 || n > capture.ideal.len()) {
        return Err(EvalError::Config(format!(
            "cannot select {n} mirrors from a {}-mirror capture",
            capture.ideal.len()
        )));
    }
    let views = reference_views(config)?;
    counts
        .iter()
        .map(|&n| {
            let keep = capture.ideal.nearest_to_anchor(n);
            let bank = restrict_to_mirrors(&capture.bank, &keep);
            run_variant(config, &capture, &bank, variant, &views, &format!("sweep-{n}m"))
        })
        .collect()
}
