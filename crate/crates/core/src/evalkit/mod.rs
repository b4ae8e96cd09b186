//! Quantitative evaluation: image metrics, score reports and the
//! simulate-train-render harness used for ablations and mirror-count sweeps.

mod experiment;
mod metrics;

pub use experiment::{
    prepare_capture, reference_views, restrict_to_mirrors, run_ablation, run_mirror_sweep, run_variant, score_field,
    ExperimentConfig, PreparedCapture, ReferenceView, Variant,
};
pub use metrics::{mse, psnr, psnr_with_peak, ssim, ssim_with, SsimParams, PSNR_CAP_DB};

use std::io::Write;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::calibration::CalibrationError;
use crate::geometry::GeometryError;
use crate::imageio::{ImageError, RgbImage};
use crate::neuralfield::FieldError;
use crate::raybank::RayBankError;
use crate::simulator::{LayoutError, SimulatorError};
use crate::trainer::TrainError;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error(transparent)]
    Image(#[from] ImageError),
    #[error("image {width}x{height} is smaller than the {window}-pixel SSIM window")]
    TooSmall { width: u32, height: u32, window: usize },
    #[error(transparent)]
    Layout(#[from] LayoutError),
    #[error(transparent)]
    Simulator(#[from] SimulatorError),
    #[error(transparent)]
    Calibration(#[from] CalibrationError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    RayBank(#[from] RayBankError),
    #[error(transparent)]
    Field(#[from] FieldError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error("{0}")]
    Config(String),
}

/// Scores of one rendered view against its reference.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ViewScore {
    pub view: usize,
    pub psnr: f64,
    pub ssim: f64,
}

pub fn score_pair(view: usize, rendered: &RgbImage, reference: &RgbImage) -> Result<ViewScore, EvalError> {
    Ok(ViewScore {
        view,
        psnr: psnr(rendered, reference)?,
        ssim: ssim(rendered, reference)?,
    })
}

/// What produced a report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMetadata {
    pub label: String,
    pub variant: String,
    /// Hex digest of the effective configuration.
    pub config_hash: String,
    pub seed: u64,
    pub mirrors: usize,
    pub perturbation_sigma_mm: f64,
}

/// Per-view scores of one run, or the reason it produced none.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub meta: RunMetadata,
    pub views: Vec<ViewScore>,
    pub failure: Option<String>,
    /// Wall-clock training time; informational only.
    pub train_seconds: f64,
}

impl MetricsReport {
    pub fn mean_psnr(&self) -> f64 {
        mean(self.views.iter().map(|v| v.psnr))
    }

    pub fn mean_ssim(&self) -> f64 {
        mean(self.views.iter().map(|v| v.ssim))
    }
}

fn mean(it: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = it.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        f64::NAN
    } else {
        s / n as f64
    }
}

/// 64-bit FNV-1a digest, printed as hex.
pub fn config_digest(bytes: &[u8]) -> String {
    let mut h = 0xcbf2_9ce4_8422_2325u64;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    format!("{h:016x}")
}

/// One row per view plus a `mean` row per report; failed runs get a single
/// `failed` row carrying the message.
pub fn write_reports_csv<W: Write>(mut w: W, reports: &[MetricsReport]) -> std::io::Result<()> {
    writeln!(
        w,
        "label,variant,mirrors,sigma_mm,seed,config_hash,view,psnr,ssim,status"
    )?;
    for r in reports {
        let m = &r.meta;
        let prefix = format!(
            "{},{},{},{},{},{}",
            m.label, m.variant, m.mirrors, m.perturbation_sigma_mm, m.seed, m.config_hash
        );
        if let Some(f) = &r.failure {
            writeln!(w, "{prefix},failed,,,\"{}\"", f.replace('"', "'"))?;
            continue;
        }
        for v in &r.views {
            writeln!(w, "{prefix},{},{},{},ok", v.view, v.psnr, v.ssim)?;
        }
        writeln!(w, "{prefix},mean,{},{},ok", r.mean_psnr(), r.mean_ssim())?;
    }
    Ok(())
}

/// Fixed-width summary with one line per report.
pub fn format_table(reports: &[MetricsReport]) -> String {
    let mut out = format!(
        "{:<14} {:<8} {:>7} {:>8} {:>6} {:>9} {:>7}  {}\n",
        "label", "variant", "mirrors", "sigma_mm", "views", "psnr_db", "ssim", "status"
    );
    for r in reports {
        let m = &r.meta;
        let status = r.failure.as_deref().unwrap_or("ok");
        out.push_str(&format!(
            "{:<14} {:<8} {:>7} {:>8.3} {:>6} {:>9.3} {:>7.4}  {}\n",
            m.label,
            m.variant,
            m.mirrors,
            m.perturbation_sigma_mm,
            r.views.len(),
            r.mean_psnr(),
            r.mean_ssim(),
            status
        ));
    }
    out
}
