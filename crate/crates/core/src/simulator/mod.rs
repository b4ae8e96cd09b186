//! Ray-traced ground truth: the one-shot catadioptric capture of an analytic
//! scene, its auxiliary maps, direct novel views and marker correspondences.

mod scene;
mod template;

pub use scene::{AnalyticScene, Primitive, Shade, Texture};
pub use template::{
    build_array_template, perturb_template, Layout, LayoutError, MirrorArrayTemplate, DEFAULT_MIRROR_COUNT,
    DEFAULT_MIRROR_DIAMETER_MM, DEFAULT_PITCH_MM,
};

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::calibration::{CameraCalibration, Correspondence, CorrespondenceFile};
use crate::geometry::{
    intersect_ray_sphere, reflect_unchecked, CameraIntrinsics, GeometryError, Hit, PinholeCamera, Pose, Ray, Vec3,
};
use crate::imageio::{self, ImageError, RgbImage};
use crate::parallel;
use crate::raybank::restore_pixel_ray;

const PAPER_COLOR: [f64; 3] = [0.92, 0.92, 0.9];
const MARKER_COLOR: [f64; 3] = [0.85, 0.1, 0.1];
const MARKER_RADIUS_MM: f64 = 2.0;
const OCCLUDED_COLOR: [f64; 3] = [0.5, 0.5, 0.5];

#[derive(Debug, Error)]
pub enum SimulatorError {
    #[error("camera centre lies inside mirror {0}")]
    CameraInsideMirror(usize),
    #[error("camera must be on the reflective side of the array plane (z = {0})")]
    CameraBehindArray(f64),
    #[error("templates differ in mirror count ({0} vs {1})")]
    TemplateMismatch(usize, usize),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Image(#[from] ImageError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("bundle file {file}: {reason}")]
    Bundle { file: String, reason: String },
}

/// What the true light path of a pixel saw.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PixelLabel {
    /// Paper, mirror inter-reflection, or disagreement with the ideal maps.
    Outside,
    Background,
    Foreground,
}

/// One-shot capture with the maps rendered from the ideal template.
#[derive(Debug, Clone, PartialEq)]
pub struct CaptureBundle {
    pub image: RgbImage,
    /// Distance along the unit camera ray to the ideal mirror surface;
    /// infinite off-mirror.
    pub depth: Vec<f64>,
    /// Camera-frame surface normal; zero off-mirror.
    pub normal: Vec<[f64; 3]>,
    /// Ideal mirror index plus one; zero off-mirror.
    pub index: Vec<u16>,
    pub label: Vec<PixelLabel>,
    pub calibration: CameraCalibration,
}

impl CaptureBundle {
    pub fn width(&self) -> u32 {
        self.image.width
    }

    pub fn height(&self) -> u32 {
        self.image.height
    }

    pub fn mirror_pixel_count(&self) -> usize {
        self.index.iter().filter(|&&i| i != 0).count()
    }

    /// Pixels usable for ray restoration.
    pub fn is_valid(&self, i: usize) -> bool {
        self.index[i] != 0 && self.label[i] != PixelLabel::Outside
    }

    /// Writes `image.png`, `depth.pfm`, `normal.pfm`, `index.png` (16-bit),
    /// `mask.png` (1-bit foreground), `valid.png` (1-bit) and
    /// `calibration.json` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<(), SimulatorError> {
        fs::create_dir_all(dir)?;
        let (w, h) = (self.width(), self.height());
        self.image.save_png(dir.join("image.png"))?;
        let depth: Vec<f32> = self.depth.iter().map(|&d| d as f32).collect();
        imageio::write_pfm(BufWriter::new(File::create(dir.join("depth.pfm"))?), w, h, 1, &depth)?;
        let normal: Vec<f32> = self.normal.iter().flat_map(|n| n.map(|c| c as f32)).collect();
        imageio::write_pfm(BufWriter::new(File::create(dir.join("normal.pfm"))?), w, h, 3, &normal)?;
        imageio::write_gray16_png(BufWriter::new(File::create(dir.join("index.png"))?), w, h, &self.index)?;
        let fg: Vec<bool> = self.label.iter().map(|&l| l == PixelLabel::Foreground).collect();
        imageio::write_mask_png(BufWriter::new(File::create(dir.join("mask.png"))?), w, h, &fg)?;
        let valid: Vec<bool> = self.label.iter().map(|&l| l != PixelLabel::Outside).collect();
        imageio::write_mask_png(BufWriter::new(File::create(dir.join("valid.png"))?), w, h, &valid)?;
        let mut f = File::create(dir.join("calibration.json"))?;
        f.write_all(self.calibration.to_json().as_bytes())?;
        Ok(())
    }

    /// Reads a bundle written by [`CaptureBundle::save`]. Maps come back at
    /// the single precision of the PFM files and the image at 8 bits.
    pub fn load(dir: &Path) -> Result<Self, SimulatorError> {
        let bad = |file: &str, reason: &str| SimulatorError::Bundle {
            file: file.to_string(),
            reason: reason.to_string(),
        };
        let image = RgbImage::load_png(dir.join("image.png"))?;
        let (w, h) = (image.width, image.height);
        let (dw, dh, dc, depth) = imageio::read_pfm(File::open(dir.join("depth.pfm"))?)?;
        if (dw, dh, dc) != (w, h, 1) {
            return Err(bad("depth.pfm", "dimension mismatch"));
        }
        let (nw, nh, nc, normal) = imageio::read_pfm(File::open(dir.join("normal.pfm"))?)?;
        if (nw, nh, nc) != (w, h, 3) {
            return Err(bad("normal.pfm", "dimension mismatch"));
        }
        let (iw, ih, index) = imageio::read_gray16_png(BufReader::new(File::open(dir.join("index.png"))?))?;
        let (mw, mh, fg) = imageio::read_mask_png(BufReader::new(File::open(dir.join("mask.png"))?))?;
        let (vw, vh, valid) = imageio::read_mask_png(BufReader::new(File::open(dir.join("valid.png"))?))?;
        if (iw, ih) != (w, h) || (mw, mh) != (w, h) || (vw, vh) != (w, h) {
            return Err(bad("index/mask/valid.png", "dimension mismatch"));
        }
        let calibration = CameraCalibration::from_json(&fs::read_to_string(dir.join("calibration.json"))?)
            .map_err(|e| bad("calibration.json", &e.to_string()))?;
        let label = fg
            .iter()
            .zip(&valid)
            .map(|(&f, &v)| match (v, f) {
                (false, _) => PixelLabel::Outside,
                (true, true) => PixelLabel::Foreground,
                (true, false) => PixelLabel::Background,
            })
            .collect();
        Ok(Self {
            image,
            depth: depth.iter().map(|&d| d as f64).collect(),
            normal: normal
                .chunks_exact(3)
                .map(|c| [c[0] as f64, c[1] as f64, c[2] as f64])
                .collect(),
            index,
            label,
            calibration,
        })
    }
}

/// Nearest hit on the reflective (`z ≥ centre`) hemisphere of any mirror.
pub fn hit_array(ray: &Ray, template: &MirrorArrayTemplate) -> Option<(usize, Hit)> {
    template
        .mirrors
        .iter()
        .enumerate()
        .filter_map(|(i, m)| {
            intersect_ray_sphere(ray, m)
                .filter(|h| h.point.z >= m.center[2])
                .map(|h| (i, h))
        })
        .min_by(|a, b| a.1.t.total_cmp(&b.1.t))
}

fn paper_color(ray: &Ray, template: &MirrorArrayTemplate) -> [f64; 3] {
    if ray.direction.z.abs() < 1e-12 {
        return PAPER_COLOR;
    }
    let t = -ray.origin.z / ray.direction.z;
    let p = ray.at(t);
    let on_marker = template
        .corners
        .iter()
        .any(|c| (p.x - c[0]).powi(2) + (p.y - c[1]).powi(2) <= MARKER_RADIUS_MM * MARKER_RADIUS_MM);
    if on_marker {
        MARKER_COLOR
    } else {
        PAPER_COLOR
    }
}

struct PixelSample {
    color: [f64; 3],
    depth: f64,
    normal: [f64; 3],
    index: u16,
    label: PixelLabel,
}

fn trace_capture_pixel(
    scene: &AnalyticScene,
    calib: &CameraCalibration,
    truth: &MirrorArrayTemplate,
    ideal: &MirrorArrayTemplate,
    aligned: bool,
    u: f64,
    v: f64,
) -> PixelSample {
    let camera = &calib.camera;
    let cam_ray = camera.ray(u, v);
    let mut sample = PixelSample {
        color: paper_color(&cam_ray, truth),
        depth: f64::INFINITY,
        normal: [0.0; 3],
        index: 0,
        label: PixelLabel::Outside,
    };
    let Some((mirror, hit)) = hit_array(&cam_ray, ideal) else {
        // the true mirror may still cover this pixel; it is shown but unusable
        if let Some((_, true_hit)) = hit_array(&cam_ray, truth) {
            sample.color = trace_reflection(scene, truth, &cam_ray, &true_hit).0;
        }
        return sample;
    };
    sample.depth = hit.t;
    sample.normal = (camera.pose.rotation * hit.normal).into();
    sample.index = mirror as u16 + 1;

    let (color, label) = if aligned {
        let reflected = restore_pixel_ray(camera, u, v, sample.depth, &Vec3::from(sample.normal));
        shade_reflected(scene, truth, mirror, &reflected)
    } else {
        match hit_array(&cam_ray, truth) {
            Some((true_mirror, true_hit)) => {
                let (color, label) = trace_reflection(scene, truth, &cam_ray, &true_hit);
                if true_mirror == mirror {
                    (color, label)
                } else {
                    (color, PixelLabel::Outside)
                }
            }
            None => (paper_color(&cam_ray, truth), PixelLabel::Outside),
        }
    };
    sample.color = color;
    sample.label = label;
    sample
}

fn trace_reflection(
    scene: &AnalyticScene,
    truth: &MirrorArrayTemplate,
    cam_ray: &Ray,
    hit: &Hit,
) -> ([f64; 3], PixelLabel) {
    let d = reflect_unchecked(&cam_ray.direction, &hit.normal);
    let reflected = Ray {
        origin: hit.point,
        direction: d,
    };
    let own = truth
        .mirrors
        .iter()
        .position(|m| ((hit.point - m.center()).norm() - m.radius).abs() < 1e-6)
        .unwrap_or(usize::MAX);
    shade_reflected(scene, truth, own, &reflected)
}

fn shade_reflected(
    scene: &AnalyticScene,
    truth: &MirrorArrayTemplate,
    own: usize,
    ray: &Ray,
) -> ([f64; 3], PixelLabel) {
    if ray.direction.z <= 0.0 {
        return (PAPER_COLOR, PixelLabel::Outside);
    }
    let blocked = truth
        .mirrors
        .iter()
        .enumerate()
        .any(|(i, m)| i != own && intersect_ray_sphere(ray, m).is_some_and(|h| h.point.z >= m.center[2]));
    if blocked {
        return (OCCLUDED_COLOR, PixelLabel::Outside);
    }
    let shade = scene.shade(ray);
    let label = if shade.t.is_some() {
        PixelLabel::Foreground
    } else {
        PixelLabel::Background
    };
    (shade.color, label)
}

fn check_camera(calib: &CameraCalibration, template: &MirrorArrayTemplate) -> Result<(), SimulatorError> {
    let c = calib.camera.center();
    if !(c.z > 0.0) {
        return Err(SimulatorError::CameraBehindArray(c.z));
    }
    for m in &template.mirrors {
        if (c - m.center()).norm() <= m.radius {
            return Err(SimulatorError::CameraInsideMirror(m.index));
        }
    }
    Ok(())
}

/// Renders the capture with perfectly placed mirrors.
pub fn render_capture(
    scene: &AnalyticScene,
    calib: &CameraCalibration,
    template: &MirrorArrayTemplate,
) -> Result<CaptureBundle, SimulatorError> {
    render_capture_impl(scene, calib, template, template, true)
}

/// Renders the image through the `truth` mirrors while the depth, normal and
/// index maps come from the `ideal` template, reproducing a capture whose
/// mirrors were placed inaccurately.
pub fn render_capture_misaligned(
    scene: &AnalyticScene,
    calib: &CameraCalibration,
    truth: &MirrorArrayTemplate,
    ideal: &MirrorArrayTemplate,
) -> Result<CaptureBundle, SimulatorError> {
    if truth.len() != ideal.len() {
        return Err(SimulatorError::TemplateMismatch(truth.len(), ideal.len()));
    }
    let aligned = truth == ideal;
    render_capture_impl(scene, calib, truth, ideal, aligned)
}

fn render_capture_impl(
    scene: &AnalyticScene,
    calib: &CameraCalibration,
    truth: &MirrorArrayTemplate,
    ideal: &MirrorArrayTemplate,
    aligned: bool,
) -> Result<CaptureBundle, SimulatorError> {
    check_camera(calib, truth)?;
    check_camera(calib, ideal)?;
    let k = calib.camera.intrinsics;
    let (w, h) = (k.width as usize, k.height as usize);
    let rows = parallel::map_indexed(h, |y| {
        (0..w)
            .map(|x| trace_capture_pixel(scene, calib, truth, ideal, aligned, x as f64, y as f64))
            .collect::<Vec<_>>()
    });
    let n = w * h;
    let mut image = RgbImage::new(k.width, k.height);
    let mut depth = Vec::with_capacity(n);
    let mut normal = Vec::with_capacity(n);
    let mut index = Vec::with_capacity(n);
    let mut label = Vec::with_capacity(n);
    for (i, s) in rows.into_iter().flatten().enumerate() {
        image.pixels[i] = s.color.map(|c| c as f32);
        depth.push(s.depth);
        normal.push(s.normal);
        index.push(s.index);
        label.push(s.label);
    }
    Ok(CaptureBundle {
        image,
        depth,
        normal,
        index,
        label,
        calibration: *calib,
    })
}

/// Direct pinhole rendering of the scene, one ray per pixel.
pub fn render_ground_truth_view(scene: &AnalyticScene, camera: &PinholeCamera) -> RgbImage {
    let k = camera.intrinsics;
    let rows = parallel::map_indexed(k.height as usize, |y| {
        (0..k.width)
            .map(|x| scene.shade(&camera.ray(x as f64, y as f64)).color.map(|c| c as f32))
            .collect::<Vec<_>>()
    });
    RgbImage::from_pixels(k.width, k.height, rows.into_iter().flatten().collect())
}

/// Exact projections of the hexagon corner markers that fall inside the image.
pub fn marker_correspondences(template: &MirrorArrayTemplate, camera: &PinholeCamera) -> Vec<Correspondence> {
    template
        .corners
        .iter()
        .filter_map(|c| {
            let (u, v) = camera.project(&Vec3::from(*c)).ok()?;
            camera
                .intrinsics
                .contains(u, v)
                .then_some(Correspondence::new(*c, [u, v]))
        })
        .collect()
}

pub fn correspondence_file(template: &MirrorArrayTemplate, camera: &PinholeCamera) -> CorrespondenceFile {
    CorrespondenceFile {
        intrinsics: camera.intrinsics,
        points: marker_correspondences(template, camera),
    }
}

/// Capture camera placement: eye position, aim point and image size, with
/// the focal length chosen so that one mirror diameter spans
/// `pixels_per_mirror` pixels at the aim point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CaptureCamera {
    pub eye: [f64; 3],
    pub target: [f64; 3],
    pub up: [f64; 3],
    pub pixels_per_mirror: f64,
    /// Extra border around the array, in mirror diameters.
    pub margin: f64,
}

impl Default for CaptureCamera {
    fn default() -> Self {
        Self {
            eye: [0.0, -60.0, 650.0],
            target: [0.0, 0.0, 0.0],
            up: [0.0, 1.0, 0.0],
            pixels_per_mirror: 96.0,
            margin: 0.25,
        }
    }
}

impl CaptureCamera {
    /// Ground-truth calibration framing the whole template.
    pub fn calibration(&self, template: &MirrorArrayTemplate) -> Result<CameraCalibration, SimulatorError> {
        let eye = Vec3::from(self.eye);
        let target = Vec3::from(self.target);
        let pose = Pose::look_at(eye, target, Vec3::from(self.up));
        let diameter = 2.0 * template.radius;
        let focal = self.pixels_per_mirror * (eye - target).norm() / diameter;
        // bound the array footprint in the camera frame
        let reach = template
            .mirrors
            .iter()
            .map(|m| {
                let c = pose.transform(&m.center());
                let r = template.radius * (1.0 + 2.0 * self.margin);
                ((c.x.abs() + r) / c.z).max((c.y.abs() + r) / c.z)
            })
            .fold(0.0f64, f64::max);
        let half = (focal * reach).ceil() as u32;
        let size = 2 * half + 1;
        let k = CameraIntrinsics::new(focal, focal, half as f64, half as f64, size, size)?;
        Ok(CameraCalibration::new(k, pose))
    }
}

/// Frontal grid of novel viewpoints around a target point, all on the
/// mirror side (`-z`) of the target.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ViewArc {
    pub target: [f64; 3],
    pub radius: f64,
    pub azimuth_deg: f64,
    pub elevation_deg: f64,
    pub azimuth_steps: usize,
    pub elevation_steps: usize,
    pub focal_px: f64,
    pub width: u32,
    pub height: u32,
}

impl Default for ViewArc {
    fn default() -> Self {
        Self {
            target: [0.0, 0.0, 170.0],
            radius: 190.0,
            azimuth_deg: 30.0,
            elevation_deg: 15.0,
            azimuth_steps: 5,
            elevation_steps: 4,
            focal_px: 80.0,
            width: 80,
            height: 60,
        }
    }
}

/// A camera placement in a view path file.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ViewPose {
    pub eye: [f64; 3],
    pub target: [f64; 3],
    pub up: [f64; 3],
}

impl ViewPose {
    pub fn pose(&self) -> Pose {
        Pose::look_at(Vec3::from(self.eye), Vec3::from(self.target), Vec3::from(self.up))
    }
}

impl ViewArc {
    pub fn intrinsics(&self) -> Result<CameraIntrinsics, GeometryError> {
        CameraIntrinsics::new(
            self.focal_px,
            self.focal_px,
            (self.width as f64 - 1.0) / 2.0,
            (self.height as f64 - 1.0) / 2.0,
            self.width,
            self.height,
        )
    }

    pub fn poses(&self) -> Vec<ViewPose> {
        let steps = |n: usize, range: f64| -> Vec<f64> {
            if n <= 1 {
                vec![0.0]
            } else {
                (0..n)
                    .map(|i| -range + 2.0 * range * i as f64 / (n - 1) as f64)
                    .collect()
            }
        };
        let mut out = Vec::new();
        for el in steps(self.elevation_steps, self.elevation_deg) {
            for az in steps(self.azimuth_steps, self.azimuth_deg) {
                let (az, el) = (az.to_radians(), el.to_radians());
                let dir = Vec3::new(az.sin() * el.cos(), el.sin(), -az.cos() * el.cos());
                let eye = Vec3::from(self.target) + dir * self.radius;
                out.push(ViewPose {
                    eye: eye.into(),
                    target: self.target,
                    up: [0.0, 1.0, 0.0],
                });
            }
        }
        out
    }

    pub fn cameras(&self) -> Result<Vec<PinholeCamera>, GeometryError> {
        let k = self.intrinsics()?;
        Ok(self.poses().iter().map(|p| PinholeCamera::new(k, p.pose())).collect())
    }
}
