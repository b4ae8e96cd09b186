//! Training-ray dataset: reflected rays recovered from capture pixels.
//!
//! # File format
//!
//! All fields little-endian.
//!
//! | offset | size | content                                  |
//! |--------|------|------------------------------------------|
//! | 0      | 8    | magic `CATRAYS\0`                        |
//! | 8      | 4    | `u32` format version (1)                 |
//! | 12     | 4    | `u32` record size in bytes (48)          |
//! | 16     | 8    | `u64` record count                       |
//! | 24     | 48·n | records                                  |
//!
//! Record layout:
//!
//! | offset | size | content                                  |
//! |--------|------|------------------------------------------|
//! | 0      | 12   | origin, 3 × `f32` (mm)                   |
//! | 12     | 12   | direction, 3 × `f32`                     |
//! | 24     | 12   | color, 3 × `f32` in `[0, 1]`             |
//! | 36     | 2    | `u16` mirror index                       |
//! | 38     | 1    | `u8` flags, bit 0 = foreground           |
//! | 39     | 1    | zero padding                             |
//! | 40     | 4    | `u32` source pixel column                |
//! | 44     | 4    | `u32` source pixel row                   |

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::calibration::CameraCalibration;
use crate::geometry::{reflect_unchecked, PinholeCamera, Ray, Vec3};
use crate::parallel;
use crate::simulator::{CaptureBundle, MirrorArrayTemplate, PixelLabel};

pub const MAGIC: &[u8; 8] = b"CATRAYS\0";
pub const FORMAT_VERSION: u32 = 1;
pub const RECORD_SIZE: usize = 48;

#[derive(Debug, Error)]
pub enum RayBankError {
    #[error("bounding box min {min:?} must be below max {max:?} on every axis")]
    InvalidBBox { min: [f64; 3], max: [f64; 3] },
    #[error("capture is {got:?} pixels but calibration expects {expected:?}")]
    Resolution { got: (u32, u32), expected: (u32, u32) },
    #[error("mirror index {index} at pixel ({u}, {v}) exceeds template size {len}")]
    UnknownMirror { index: usize, u: u32, v: u32, len: usize },
    #[error("ray bank file: {0}")]
    Format(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RestoredRay {
    /// Reflection point on the mirror surface.
    pub origin: Vec3,
    pub direction: Vec3,
    pub color: [f32; 3],
    pub mirror: u16,
    pub foreground: bool,
    pub pixel: [u32; 2],
}

impl RestoredRay {
    pub fn ray(&self) -> Ray {
        Ray {
            origin: self.origin,
            direction: self.direction,
        }
    }
}

/// Axis-aligned box in millimetres.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BBox {
    pub min: [f64; 3],
    pub max: [f64; 3],
}

impl BBox {
    pub fn new(min: [f64; 3], max: [f64; 3]) -> Result<Self, RayBankError> {
        let b = Self { min, max };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<(), RayBankError> {
        if (0..3).all(|i| self.min[i] < self.max[i]) {
            Ok(())
        } else {
            Err(RayBankError::InvalidBBox {
                min: self.min,
                max: self.max,
            })
        }
    }

    /// Box around the desk scene's sphere and floor.
    pub fn desk() -> Self {
        Self {
            min: [-115.0, -50.0, 85.0],
            max: [115.0, 60.0, 255.0],
        }
    }

    pub fn center(&self) -> Vec3 {
        Vec3::from([0, 1, 2].map(|i| 0.5 * (self.min[i] + self.max[i])))
    }

    pub fn half_extent(&self) -> Vec3 {
        Vec3::from([0, 1, 2].map(|i| 0.5 * (self.max[i] - self.min[i])))
    }

    pub fn contains(&self, p: &Vec3) -> bool {
        (0..3).all(|i| p[i] >= self.min[i] && p[i] <= self.max[i])
    }

    /// Maps the box onto `[-1, 1]³`.
    pub fn normalize(&self, p: &Vec3) -> Vec3 {
        (p - self.center()).component_div(&self.half_extent())
    }

    pub fn clip(&self, ray: &Ray) -> Option<(f64, f64)> {
        clip_to_bbox(ray, self)
    }
}

/// Slab-method parameter interval of `ray` inside `bbox`, restricted to
/// `t ≥ 0`. Returns `None` when the interval is empty or degenerate.
pub fn clip_to_bbox(ray: &Ray, bbox: &BBox) -> Option<(f64, f64)> {
    let mut t0 = 0.0f64;
    let mut t1 = f64::INFINITY;
    for a in 0..3 {
        let o = ray.origin[a];
        let d = ray.direction[a];
        if d == 0.0 {
            if o < bbox.min[a] || o > bbox.max[a] {
                return None;
            }
            continue;
        }
        let inv = 1.0 / d;
        let (mut ta, mut tb) = ((bbox.min[a] - o) * inv, (bbox.max[a] - o) * inv);
        if ta > tb {
            std::mem::swap(&mut ta, &mut tb);
        }
        t0 = t0.max(ta);
        t1 = t1.min(tb);
    }
    (t0 < t1).then_some((t0, t1))
}

/// World-frame unit direction of the camera ray through pixel `(u, v)`.
pub fn camera_ray_direction(calib: &CameraCalibration, u: f64, v: f64) -> Vec3 {
    calib.camera.ray_direction(u, v)
}

/// Reflected ray for one mirror pixel, given the distance along the camera
/// ray to the mirror surface and the camera-frame surface normal.
pub fn restore_pixel_ray(camera: &PinholeCamera, u: f64, v: f64, depth: f64, normal_cam: &Vec3) -> Ray {
    let d_c = camera.ray_direction(u, v);
    let origin = camera.center() + d_c * depth;
    let n = (camera.pose.rotation.transpose() * normal_cam).normalize();
    Ray {
        origin,
        direction: reflect_unchecked(&d_c, &n).normalize(),
    }
}

/// Restored rays plus the volume they are sampled in.
#[derive(Debug, Clone, PartialEq)]
pub struct RayBank {
    pub rays: Vec<RestoredRay>,
    pub bbox: BBox,
    /// Ray count per mirror index.
    pub per_mirror: Vec<usize>,
    /// Mirror pixels skipped for invalid depth or an unusable light path.
    pub skipped: usize,
    /// Foreground rays dropped because they miss the box.
    pub outside_bbox: usize,
}

impl RayBank {
    pub fn from_rays(rays: Vec<RestoredRay>, bbox: BBox, mirrors: usize) -> Self {
        let mut per_mirror = vec![0; mirrors];
        for r in &rays {
            let m = r.mirror as usize;
            if m >= per_mirror.len() {
                per_mirror.resize(m + 1, 0);
            }
            per_mirror[m] += 1;
        }
        Self {
            rays,
            bbox,
            per_mirror,
            skipped: 0,
            outside_bbox: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.rays.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rays.is_empty()
    }

    pub fn foreground_count(&self) -> usize {
        self.rays.iter().filter(|r| r.foreground).count()
    }

    pub fn write<W: Write>(&self, mut w: W) -> Result<(), RayBankError> {
        w.write_all(MAGIC)?;
        w.write_all(&FORMAT_VERSION.to_le_bytes())?;
        w.write_all(&(RECORD_SIZE as u32).to_le_bytes())?;
        w.write_all(&(self.rays.len() as u64).to_le_bytes())?;
        let mut rec = [0u8; RECORD_SIZE];
        for r in &self.rays {
            let floats = [
                r.origin.x as f32,
                r.origin.y as f32,
                r.origin.z as f32,
                r.direction.x as f32,
                r.direction.y as f32,
                r.direction.z as f32,
                r.color[0],
                r.color[1],
                r.color[2],
            ];
            for (k, f) in floats.iter().enumerate() {
                rec[4 * k..4 * k + 4].copy_from_slice(&f.to_le_bytes());
            }
            rec[36..38].copy_from_slice(&r.mirror.to_le_bytes());
            rec[38] = r.foreground as u8;
            rec[39] = 0;
            rec[40..44].copy_from_slice(&r.pixel[0].to_le_bytes());
            rec[44..48].copy_from_slice(&r.pixel[1].to_le_bytes());
            w.write_all(&rec)?;
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(24 + RECORD_SIZE * self.rays.len());
        self.write(&mut out).expect("writing to memory");
        out
    }

    /// Reads a bank file. The box is not stored in the file and must be
    /// supplied; directions are renormalised after widening to `f64`.
    pub fn read<R: Read>(mut r: R, bbox: BBox, mirrors: usize) -> Result<Self, RayBankError> {
        bbox.validate()?;
        let mut header = [0u8; 24];
        r.read_exact(&mut header)?;
        if &header[0..8] != MAGIC {
            return Err(RayBankError::Format("bad magic".into()));
        }
        let version = u32::from_le_bytes(header[8..12].try_into().unwrap());
        if version != FORMAT_VERSION {
            return Err(RayBankError::Format(format!("unsupported version {version}")));
        }
        let size = u32::from_le_bytes(header[12..16].try_into().unwrap()) as usize;
        if size != RECORD_SIZE {
            return Err(RayBankError::Format(format!(
                "record size {size}, expected {RECORD_SIZE}"
            )));
        }
        let count = u64::from_le_bytes(header[16..24].try_into().unwrap()) as usize;
        let mut rays = Vec::with_capacity(count.min(1 << 24));
        let mut rec = [0u8; RECORD_SIZE];
        for _ in 0..count {
            r.read_exact(&mut rec)?;
            let f = |k: usize| f32::from_le_bytes(rec[4 * k..4 * k + 4].try_into().unwrap());
            let direction = Vec3::new(f(3) as f64, f(4) as f64, f(5) as f64);
            let norm = direction.norm();
            if !(norm > 0.5 && norm < 1.5) {
                return Err(RayBankError::Format(format!("direction norm {norm}")));
            }
            rays.push(RestoredRay {
                origin: Vec3::new(f(0) as f64, f(1) as f64, f(2) as f64),
                direction: direction / norm,
                color: [f(6), f(7), f(8)],
                mirror: u16::from_le_bytes([rec[36], rec[37]]),
                foreground: rec[38] & 1 == 1,
                pixel: [
                    u32::from_le_bytes(rec[40..44].try_into().unwrap()),
                    u32::from_le_bytes(rec[44..48].try_into().unwrap()),
                ],
            });
        }
        let mut extra = [0u8; 1];
        if r.read(&mut extra)? != 0 {
            return Err(RayBankError::Format("trailing bytes after records".into()));
        }
        Ok(Self::from_rays(rays, bbox, mirrors))
    }
}

/// Restores one ray per usable mirror pixel of `bundle`, using `calib` for
/// the camera and the bundle's depth and normal maps for the mirror surface.
pub fn restore_rays(
    bundle: &CaptureBundle,
    calib: &CameraCalibration,
    template: &MirrorArrayTemplate,
    bbox: &BBox,
) -> Result<RayBank, RayBankError> {
    bbox.validate()?;
    let k = calib.intrinsics();
    let (w, h) = (bundle.width(), bundle.height());
    if (w, h) != (k.width, k.height) {
        return Err(RayBankError::Resolution {
            got: (w, h),
            expected: (k.width, k.height),
        });
    }
    let camera = &calib.camera;
    enum Outcome {
        Ray(RestoredRay),
        Skipped,
        Outside,
    }
    let rows = parallel::map_indexed(h as usize, |y| {
        let mut out = Vec::new();
        for x in 0..w as usize {
            let i = y * w as usize + x;
            let index = bundle.index[i];
            if index == 0 {
                continue;
            }
            let mirror = index as usize - 1;
            if mirror >= template.len() {
                return Err(RayBankError::UnknownMirror {
                    index: mirror,
                    u: x as u32,
                    v: y as u32,
                    len: template.len(),
                });
            }
            let depth = bundle.depth[i];
            if !(depth.is_finite() && depth > 0.0) || bundle.label[i] == PixelLabel::Outside {
                out.push(Outcome::Skipped);
                continue;
            }
            let ray = restore_pixel_ray(camera, x as f64, y as f64, depth, &Vec3::from(bundle.normal[i]));
            let foreground = bundle.label[i] == PixelLabel::Foreground;
            if foreground && clip_to_bbox(&ray, bbox).is_none() {
                out.push(Outcome::Outside);
                continue;
            }
            out.push(Outcome::Ray(RestoredRay {
                origin: ray.origin,
                direction: ray.direction,
                color: bundle.image.pixels[i],
                mirror: mirror as u16,
                foreground,
                pixel: [x as u32, y as u32],
            }));
        }
        Ok(out)
    });
    let mut rays = Vec::new();
    let (mut skipped, mut outside) = (0, 0);
    for row in rows {
        for o in row? {
            match o {
                Outcome::Ray(r) => rays.push(r),
                Outcome::Skipped => skipped += 1,
                Outcome::Outside => outside += 1,
            }
        }
    }
    if skipped > 0 || outside > 0 {
        log::info!("ray restoration skipped {skipped} pixels, dropped {outside} foreground rays outside the box");
    }
    let mut bank = RayBank::from_rays(rays, *bbox, template.len());
    bank.skipped = skipped;
    bank.outside_bbox = outside;
    Ok(bank)
}
